use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dlmpc::bench::{fit_exponent, run_bench, TimingRecord};
use dlmpc::config::{ControllerKind, RunConfig, OUTPUT_DIR_ENV};
use dlmpc::data::{Dataset, Excitation};
use dlmpc::dpc::{train_policy, Policy, TrainReport};
use dlmpc::joint::{train_joint, AdaptConfig, JointController};
use dlmpc::models::{Model, ModelKind};
use dlmpc::plant::{plant_spectrum, PlantModel, UncertaintyMode};
use dlmpc::report::{bench_table, eigen_table, simulate_table, sysid_table, CsvTable, MetricsRecord, Table};
use dlmpc::sim::{run_mode, DlmpcController, LqiBaseline, LqrBaseline, MpcBaseline, Scenario, ZeroController};
use dlmpc::sysid::{train_sysid, Observation, SysIdReport};
use dlmpc::baselines::{LqiController, LqrController, ServoWeights};
use dlmpc::{Error, Result};

#[derive(Parser)]
#[command(name = "dlmpc", version, about = "Learned predictive control experiments on a building thermal plant")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for artifacts and reports.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    /// Root seed for every random substream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Surrogate plant design file.
    #[arg(long, global = true)]
    plant: Option<PathBuf>,
    /// Dataset CSV to use instead of generating one.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the identification dataset and write it as CSV.
    GenData(GenDataArgs),
    /// Fit dynamics models for every requested kind and horizon.
    TrainSysid(SysidArgs),
    /// Train an explicit policy through a frozen model.
    TrainPolicy(PolicyArgs),
    /// Learn a model and a policy together.
    TrainJoint(JointArgs),
    /// Closed-loop test-week simulation under uncertainty.
    Simulate(SimulateArgs),
    /// Per-step evaluation time of learned policies and online QP MPC.
    Bench(BenchArgs),
    /// Render tables from CSV artifacts.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    days: Option<usize>,
    /// clipped-sine, offset-sine or random-steps.
    #[arg(long)]
    excitation: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Lin,
    Rnn,
    Gru,
    Ssm,
    All,
}

#[derive(Args)]
struct SysidArgs {
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Prediction horizons, comma separated.
    #[arg(long, value_delimiter = ',')]
    horizon: Vec<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// observed or full.
    #[arg(long)]
    observation: Option<String>,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long)]
    epochs: Option<usize>,
    /// Imagination steps per sample.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Learned model to train through; the plant itself when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct JointArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct SimulateArgs {
    /// dlmpc, joint, lqr, lqi, mpc or zero.
    #[arg(long)]
    controller: Option<String>,
    /// Policy file (dlmpc) or bundle directory (joint).
    #[arg(long)]
    artifact: Option<PathBuf>,
    /// Learned model predicting alongside a dlmpc policy.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Uncertainty modes, comma separated: none, w, v, wv.
    #[arg(long, value_delimiter = ',')]
    uncertainty: Vec<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    adapt: Option<OnOff>,
    #[arg(long)]
    mpc_horizon: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    sysid: Option<PathBuf>,
    #[arg(long)]
    eigen: Option<PathBuf>,
    /// Horizon whose eigenvalues are tabulated.
    #[arg(long)]
    eigen_horizon: Option<usize>,
    #[arg(long)]
    simulate: Vec<PathBuf>,
    #[arg(long)]
    bench: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.plant.is_some() {
        cfg.plant = cli.plant;
    }
    if cli.dataset.is_some() {
        cfg.dataset = cli.dataset;
    }
    match cli.command {
        Command::GenData(a) => {
            if let Some(d) = a.days {
                cfg.data.days = d;
            }
            if let Some(e) = a.excitation {
                cfg.data.excitation = e.parse::<Excitation>()?;
            }
            let ctx = Ctx::new(cfg)?;
            let path = ctx.out("dataset.csv");
            ctx.ds.write_csv(&path)?;
            println!("wrote {} ({} samples)", path.display(), ctx.ds.len());
            Ok(())
        }
        Command::TrainSysid(a) => {
            if let Some(e) = a.epochs {
                cfg.sysid.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.sysid.optimizer.lr = lr;
            }
            if let Some(o) = a.observation {
                cfg.sysid.observation = o.parse::<Observation>()?;
            }
            let kinds = match a.model {
                None => vec![cfg.sysid.kind],
                Some(ModelArg::All) => ModelKind::ALL.to_vec(),
                Some(ModelArg::Lin) => vec![ModelKind::Lin],
                Some(ModelArg::Rnn) => vec![ModelKind::Rnn],
                Some(ModelArg::Gru) => vec![ModelKind::Gru],
                Some(ModelArg::Ssm) => vec![ModelKind::Ssm],
            };
            let horizons = if a.horizon.is_empty() { vec![cfg.sysid.horizon] } else { a.horizon };
            cmd_train_sysid(Ctx::new(cfg)?, &kinds, &horizons)
        }
        Command::TrainPolicy(a) => {
            if let Some(e) = a.epochs {
                cfg.policy.epochs = e;
            }
            if let Some(n) = a.horizon {
                cfg.policy.sampling.horizon = n;
            }
            if a.hidden.is_some() {
                cfg.policy.hidden = a.hidden;
            }
            if let Some(lr) = a.lr {
                cfg.policy.optimizer.lr = lr;
            }
            cmd_train_policy(Ctx::new(cfg)?, a.model.as_deref())
        }
        Command::TrainJoint(a) => {
            if let Some(e) = a.epochs {
                cfg.joint.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.joint.optimizer.lr = lr;
            }
            cmd_train_joint(Ctx::new(cfg)?)
        }
        Command::Simulate(a) => {
            let s = &mut cfg.simulate;
            if let Some(c) = a.controller {
                s.controller = c.parse()?;
            }
            if a.artifact.is_some() {
                s.artifact = a.artifact;
            }
            if a.model.is_some() {
                s.model = a.model;
            }
            if !a.uncertainty.is_empty() {
                s.modes = a.uncertainty.iter().map(|m| m.parse()).collect::<Result<_>>()?;
            }
            if let Some(r) = a.runs {
                s.runs = r;
            }
            if let Some(w) = a.workers {
                s.workers = w;
            }
            if let Some(on) = a.adapt {
                s.adapt = on == OnOff::On;
            }
            if let Some(n) = a.mpc_horizon {
                s.mpc_horizon = n;
            }
            cmd_simulate(Ctx::new(cfg)?)
        }
        Command::Bench(a) => {
            if !a.horizons.is_empty() {
                cfg.bench.horizons = a.horizons;
            }
            if let Some(e) = a.epochs {
                cfg.bench.epochs = e;
            }
            if let Some(s) = a.samples {
                cfg.bench.samples = s;
            }
            cmd_bench(Ctx::new(cfg)?)
        }
        Command::Report(a) => {
            cfg.validate()?;
            cmd_report(&cfg, a)
        }
    }
}

/// Resolved config plus the plant and dataset every command needs.
struct Ctx {
    cfg: RunConfig,
    plant: PlantModel,
    ds: Dataset,
}

impl Ctx {
    fn new(cfg: RunConfig) -> Result<Ctx> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
        let plant = cfg.plant_model()?;
        let ds = cfg.dataset(&plant)?;
        Ok(Ctx { cfg, plant, ds })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    /// Disturbances of the training week and their absolute offset.
    fn train_disturbances(&self) -> Result<(dlmpc::Matrix, usize)> {
        let split = self.ds.split()?;
        Ok((self.ds.d.slice_rows(split.train.start, split.train.len()), split.train.start))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn write_curve(path: &Path, rep: &TrainReport) -> Result<()> {
    write(path, &csv(TrainReport::CSV_HEADER, rep.csv_rows()))
}

fn cmd_train_sysid(ctx: Ctx, kinds: &[ModelKind], horizons: &[usize]) -> Result<()> {
    let mut reports: Vec<SysIdReport> = Vec::new();
    for &kind in kinds {
        for &n in horizons {
            let mut c = ctx.cfg.sysid.clone();
            c.kind = kind;
            c.horizon = n;
            let t = Instant::now();
            let (model, rep) = train_sysid(&c, &ctx.ds)?;
            model.save(&ctx.out(&format!("sysid_{kind}_n{n}.json")))?;
            let curve = rep.curve.iter().map(|p| format!("{},{},{}", p.epoch, p.train, p.val));
            write(&ctx.out(&format!("sysid_{kind}_n{n}_curve.csv")), &csv("epoch,train_loss,val_loss", curve))?;
            println!(
                "{kind} N={n}: nstep_mse {:.6} openloop_mse {:.6} ({} epochs, {:.1}s)",
                rep.nstep_test,
                rep.openloop_test,
                rep.epochs_run,
                t.elapsed().as_secs_f64()
            );
            reports.push(rep);
        }
    }
    let rows = reports.iter().flat_map(|r| r.csv_rows());
    write(&ctx.out("sysid.csv"), &csv(SysIdReport::CSV_HEADER, rows))?;
    let eig = reports.iter().flat_map(|r| r.eigen_csv_rows());
    write(&ctx.out("eigen.csv"), &csv(SysIdReport::EIGEN_CSV_HEADER, eig))?;
    Ok(())
}

fn cmd_train_policy(ctx: Ctx, model_path: Option<&Path>) -> Result<()> {
    let model = match model_path {
        Some(p) => Model::load(p)?,
        None => ctx.plant.to_model(),
    };
    let (d, offset) = ctx.train_disturbances()?;
    let t = Instant::now();
    let (policy, rep) = train_policy(&model, ctx.plant.observed, &d, offset, &ctx.cfg.policy)?;
    policy.save(&ctx.out("policy.json"))?;
    write_curve(&ctx.out("policy_curve.csv"), &rep)?;
    println!(
        "policy: hidden {} best epoch {} val loss {:.6} ({:.1}s)",
        policy.hidden(),
        rep.best_epoch,
        rep.best_val,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_train_joint(ctx: Ctx) -> Result<()> {
    let t = Instant::now();
    let (model, policy, rep) = train_joint(&ctx.ds, &ctx.cfg.joint)?;
    let dir = ctx.out("joint");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    model.save(&dir.join("model.json"))?;
    policy.save(&dir.join("policy.json"))?;
    ctx.cfg.adapt.save(&dir.join("adapt.json"), &vec![0.0; model.dims().nx])?;
    write_curve(&ctx.out("joint_curve.csv"), &rep)?;
    println!(
        "joint: best epoch {} val loss {:.6} ({:.1}s); bundle in {}",
        rep.best_epoch,
        rep.best_val,
        t.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

fn artifact(ctx: &Ctx, default: &str) -> PathBuf {
    ctx.cfg.simulate.artifact.clone().unwrap_or_else(|| ctx.out(default))
}

fn cmd_simulate(ctx: Ctx) -> Result<()> {
    let s = &ctx.cfg.simulate;
    let pad = s.mpc_horizon.max(1) + 1;
    let sc = Scenario::test_week(&ctx.ds, &ctx.plant, &ctx.cfg.data.bounds, pad)?;
    let plant = &ctx.plant;
    let base = &ctx.cfg.uncertainty;
    let mut records = Vec::new();
    let mut label = s.controller.name().to_string();
    for &mode in &s.modes {
        // The nominal loop is deterministic, so one run suffices.
        let runs = if mode == UncertaintyMode::None { 1 } else { s.runs };
        let m = match s.controller {
            ControllerKind::Dlmpc => {
                let policy = Policy::load(&artifact(&ctx, "policy.json"))?;
                let model = s.model.as_deref().map(Model::load).transpose()?;
                let make = || DlmpcController::new(policy.clone(), model.as_ref());
                run_mode(plant, make, &sc, base, mode, runs, ctx.cfg.seed, s.workers)?
            }
            ControllerKind::Joint => {
                let dir = artifact(&ctx, "joint");
                let model = Model::load(&dir.join("model.json"))?;
                let policy = Policy::load(&dir.join("policy.json"))?;
                let adapt = if s.adapt {
                    label = "joint+adapt".into();
                    let p = dir.join("adapt.json");
                    Some(if p.exists() { AdaptConfig::load(&p)?.0 } else { ctx.cfg.adapt })
                } else {
                    None
                };
                let make = || JointController::new(policy.clone(), &model, adapt);
                run_mode(plant, make, &sc, base, mode, runs, ctx.cfg.seed, s.workers)?
            }
            ControllerKind::Lqr => run_mode(
                plant,
                || Ok(LqrBaseline(LqrController::new(plant, &ServoWeights::default())?)),
                &sc,
                base,
                mode,
                runs,
                ctx.cfg.seed,
                s.workers,
            )?,
            ControllerKind::Lqi => run_mode(
                plant,
                || Ok(LqiBaseline(LqiController::new(plant, &ServoWeights::default())?)),
                &sc,
                base,
                mode,
                runs,
                ctx.cfg.seed,
                s.workers,
            )?,
            ControllerKind::Mpc => {
                let u_scale = ctx.cfg.data.bounds.u_hi;
                run_mode(
                    plant,
                    || MpcBaseline::new(plant, s.mpc_horizon, ctx.cfg.policy.weights, u_scale),
                    &sc,
                    base,
                    mode,
                    runs,
                    ctx.cfg.seed,
                    s.workers,
                )?
            }
            ControllerKind::Zero => run_mode(plant, || Ok(ZeroController), &sc, base, mode, runs, ctx.cfg.seed, s.workers)?,
        };
        records.push(MetricsRecord::new(label.clone(), mode, m)?);
    }
    let rows = records.iter().flat_map(|r| r.csv_rows());
    let text = csv(MetricsRecord::CSV_HEADER, rows);
    write(&ctx.out(&format!("simulate_{label}.csv")), &text)?;
    print!("{}", simulate_table(&CsvTable::parse(&text)?)?.to_text());
    Ok(())
}

fn cmd_bench(ctx: Ctx) -> Result<()> {
    let recs = run_bench(&ctx.plant, &ctx.ds, &ctx.cfg.bench)?;
    let text = csv(TimingRecord::CSV_HEADER, recs.iter().map(|r| r.csv_row()));
    write(&ctx.out("bench.csv"), &text)?;
    print!("{}", bench_table(&CsvTable::parse(&text)?)?.to_text());
    let series = |name: &str| -> (Vec<usize>, Vec<f64>) {
        recs.iter().filter(|r| r.controller == name).map(|r| (r.horizon, r.mean_s)).unzip()
    };
    for name in ["dlmpc", "impc"] {
        let (n, t) = series(name);
        if n.len() >= 2 {
            println!("{name} time growth exponent over N: {:.3}", fit_exponent(&n, &t)?);
        }
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig, a: ReportArgs) -> Result<()> {
    let dir = &cfg.output_dir;
    let pick = |given: Option<PathBuf>, name: &str| -> Option<PathBuf> {
        given.or_else(|| Some(dir.join(name)).filter(|p| p.exists()))
    };
    let mut simulate = a.simulate;
    if simulate.is_empty() && dir.is_dir() {
        let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("simulate_") && n.ends_with(".csv"))
            })
            .collect();
        found.sort();
        simulate = found;
    }
    let mut tables: Vec<(&str, Table)> = Vec::new();
    if let Some(p) = pick(a.sysid, "sysid.csv") {
        tables.push(("sysid", sysid_table(&CsvTable::parse(&read(&p)?)?)?));
    }
    if let Some(p) = pick(a.eigen, "eigen.csv") {
        let truth = plant_spectrum(&cfg.plant_model()?)?;
        tables.push(("eigen", eigen_table(&CsvTable::parse(&read(&p)?)?, &truth, a.eigen_horizon)?));
    }
    if !simulate.is_empty() {
        let mut merged = String::new();
        for (i, p) in simulate.iter().enumerate() {
            let text = read(p)?;
            let mut lines = text.lines();
            let head = lines.next().unwrap_or_default();
            if i == 0 {
                let _ = writeln!(merged, "{head}");
            }
            for l in lines {
                let _ = writeln!(merged, "{l}");
            }
        }
        tables.push(("simulate", simulate_table(&CsvTable::parse(&merged)?)?));
    }
    if let Some(p) = pick(a.bench, "bench.csv") {
        tables.push(("bench", bench_table(&CsvTable::parse(&read(&p)?)?)?));
    }
    if tables.is_empty() {
        return Err(Error::Config(format!("no CSV artifacts found in {}", dir.display())));
    }
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, t) in &tables {
        write(&dir.join(format!("report_{name}.csv")), &t.to_csv())?;
        write(&dir.join(format!("report_{name}.txt")), &t.to_text())?;
        println!("{}", t.to_text());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(dir: &Path, args: &[&str]) -> Cli {
        let mut full = vec!["dlmpc", "--output-dir", dir.to_str().unwrap()];
        full.extend_from_slice(args);
        Cli::try_parse_from(full).unwrap()
    }

    fn exit_code(dir: &Path, args: &[&str]) -> i32 {
        run(cli(dir, args)).map_or_else(|e| e.exit_code(), |_| 0)
    }

    #[test]
    fn gen_data_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [&a, &b] {
            run(cli(d.path(), &["--seed", "7", "gen-data", "--days", "28"])).unwrap();
        }
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("dataset.csv")).unwrap();
        assert_eq!(read(&a), read(&b));
        let ds = Dataset::load_csv(&a.path().join("dataset.csv"), &Default::default()).unwrap();
        assert_eq!(ds.len(), 28 * 288);
    }

    #[test]
    fn untrained_policy_artifact_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [&a, &b] {
            run(cli(d.path(), &["train-policy", "--epochs", "0"])).unwrap();
        }
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("policy.json")).unwrap();
        assert_eq!(read(&a), read(&b));
        Policy::load(&a.path().join("policy.json")).unwrap();
    }

    #[test]
    fn train_sysid_writes_prediction_errors() {
        let d = tempfile::tempdir().unwrap();
        run(cli(d.path(), &["train-sysid", "--model", "ssm", "--horizon", "256", "--epochs", "2"])).unwrap();
        let t = CsvTable::parse(&read(&d.path().join("sysid.csv")).unwrap()).unwrap();
        let col = t.header.iter().position(|h| h == "openloop_mse").unwrap();
        let split = t.header.iter().position(|h| h == "split").unwrap();
        let test: Vec<_> = t.rows.iter().filter(|r| r[split] == "test").collect();
        assert_eq!(test.len(), 1);
        assert!(test[0][col].parse::<f64>().unwrap().is_finite());
        assert!(d.path().join("sysid_ssm_n256.json").exists());
        assert!(d.path().join("eigen.csv").exists());
    }

    #[test]
    fn errors_map_to_exit_codes() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path();
        assert_eq!(exit_code(p, &["simulate", "--controller", "zero", "--runs", "0"]), 2);
        assert_eq!(exit_code(p, &["gen-data", "--days", "3"]), 2);
        assert_eq!(exit_code(p, &["simulate", "--controller", "nonsense"]), 2);
        // No trained policy in the output directory yet.
        assert_eq!(exit_code(p, &["simulate", "--controller", "dlmpc", "--uncertainty", "none"]), 4);
        assert_eq!(exit_code(p, &["report"]), 2);
        assert!(Cli::try_parse_from(["dlmpc", "train-sysid", "--model", "lstm"]).is_err());
    }

    #[test]
    fn zero_controller_simulation_and_report() {
        let d = tempfile::tempdir().unwrap();
        run(cli(d.path(), &["simulate", "--controller", "zero", "--uncertainty", "none,w", "--runs", "2"])).unwrap();
        let text = read(&d.path().join("simulate_zero.csv")).unwrap();
        let t = CsvTable::parse(&text).unwrap();
        let col = t.header.iter().position(|h| h == "ma_ene").unwrap();
        assert!(!t.rows.is_empty());
        for row in &t.rows {
            assert_eq!(row[col].parse::<f64>().unwrap(), 0.0);
        }
        run(cli(d.path(), &["report"])).unwrap();
        let report = read(&d.path().join("report_simulate.csv")).unwrap();
        // Header plus MSE ref., MA ene. and MA con.; no model, so no MSE mod. row.
        assert_eq!(report.lines().count(), 4);
    }
}
