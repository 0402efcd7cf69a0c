//! Multi-step system identification and open-loop evaluation.
//!
//! Training uses full-batch gradient descent on the N-step prediction error
//! over non-overlapping windows, each started from the measured state. Inputs
//! and disturbances are divided by per-column scales during training and the
//! scales are folded back into the returned model.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, SplitPart};
use crate::error::{Error, Result};
use crate::linalg::{eig_all, Complex, Matrix};
use crate::models::{Dims, Model, ModelKind, DEFAULT_SSM_EPS};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::substream;

/// Which state components enter the prediction error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    /// The dataset's observed state only.
    #[default]
    Observed,
    /// Every state; a diagnostic mode for noiseless simulated data.
    Full,
}

impl std::str::FromStr for Observation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(Observation::Observed),
            "full" => Ok(Observation::Full),
            other => Err(Error::Config(format!("unknown observation mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SysIdConfig {
    pub kind: ModelKind,
    pub horizon: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub observation: Observation,
    pub seed: u64,
    pub eps: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Validation is evaluated every this many epochs.
    pub eval_every: usize,
    /// When set, the learning rate decays geometrically to `lr * lr_final_fraction`.
    pub lr_final_fraction: Option<f64>,
}

impl Default for SysIdConfig {
    fn default() -> Self {
        SysIdConfig {
            kind: ModelKind::Ssm,
            horizon: 256,
            epochs: 5000,
            optimizer: OptimizerConfig::adamw(1e-2, 1e-4),
            observation: Observation::Observed,
            seed: 0,
            eps: DEFAULT_SSM_EPS,
            patience: 500,
            eval_every: 10,
            lr_final_fraction: None,
        }
    }
}

impl SysIdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Teacher-started windows of a split, stored step-major for batched rollout.
#[derive(Clone, Debug)]
pub struct Windows {
    pub x0: Matrix,
    pub u: Vec<Matrix>,
    pub d: Vec<Matrix>,
    pub target: Vec<Matrix>,
}

impl Windows {
    pub fn count(&self) -> usize {
        self.x0.rows()
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Consecutive windows of `n` transitions inside `range`; the remainder is dropped.
    pub fn from_split(ds: &Dataset, range: Range<usize>, n: usize) -> Result<Windows> {
        if n == 0 || range.end > ds.len() {
            return Err(Error::Contract(format!("cannot window {range:?} with horizon {n}")));
        }
        let count = range.len().saturating_sub(1) / n;
        if count == 0 {
            return Err(Error::Contract(format!(
                "split of length {} holds no window of horizon {n}",
                range.len()
            )));
        }
        let starts: Vec<usize> = (0..count).map(|j| range.start + j * n).collect();
        let rows = |m: &Matrix, offset: usize| {
            Matrix::from_fn(count, m.cols(), |w, c| m[(starts[w] + offset, c)])
        };
        Ok(Windows {
            x0: rows(&ds.x, 0),
            u: (0..n).map(|k| rows(&ds.u, k)).collect(),
            d: (0..n).map(|k| rows(&ds.d, k)).collect(),
            target: (0..n).map(|k| rows(&ds.x, k + 1)).collect(),
        })
    }

    fn scaled(&self, su: &[f64], sd: &[f64]) -> Windows {
        let div = |m: &Matrix, s: &[f64]| Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] / s[j]);
        Windows {
            x0: self.x0.clone(),
            u: self.u.iter().map(|m| div(m, su)).collect(),
            d: self.d.iter().map(|m| div(m, sd)).collect(),
            target: self.target.clone(),
        }
    }
}

fn observed_columns(obs: Observation, observed: usize, nx: usize) -> Vec<usize> {
    match obs {
        Observation::Observed => vec![observed],
        Observation::Full => (0..nx).collect(),
    }
}

/// Mean over windows, steps and selected components of the squared N-step error.
pub fn nstep_mse(model: &Model, w: &Windows, cols: &[usize]) -> Result<f64> {
    if w.count() == 0 || w.horizon() == 0 {
        return Err(Error::Contract("no windows to evaluate".into()));
    }
    let stepper = model.stepper()?;
    let mut x = w.x0.clone();
    let mut acc = 0.0;
    for k in 0..w.horizon() {
        x = stepper.step_batch(&x, &w.u[k], &w.d[k])?;
        for r in 0..x.rows() {
            for &c in cols {
                let e = x[(r, c)] - w.target[k][(r, c)];
                acc += e * e;
            }
        }
    }
    Ok(acc / (w.count() * w.horizon() * cols.len()) as f64)
}

/// Squared error of one open-loop rollout over `range`, started at its first
/// measured state and driven by the recorded inputs and disturbances.
pub fn open_loop_mse(model: &Model, ds: &Dataset, range: Range<usize>, cols: &[usize]) -> Result<f64> {
    if range.len() < 2 || range.end > ds.len() {
        return Err(Error::Contract(format!("open-loop range {range:?} too short or out of bounds")));
    }
    let steps = range.len() - 1;
    let u = ds.u.slice_rows(range.start, steps);
    let d = ds.d.slice_rows(range.start, steps);
    let pred = model.rollout(ds.x.row_slice(range.start), &u, &d)?;
    let mut acc = 0.0;
    for k in 0..steps {
        for &c in cols {
            let e = pred[(k, c)] - ds.x[(range.start + k + 1, c)];
            acc += e * e;
        }
    }
    Ok(acc / (steps * cols.len()) as f64)
}

/// Eigenvalues of the effective transition matrix, by descending modulus.
pub fn spectrum_report(model: &Model) -> Result<Vec<Complex>> {
    eig_all(&model.transition_matrix()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SysIdReport {
    pub kind: ModelKind,
    pub horizon: usize,
    pub nstep_train: f64,
    pub nstep_val: f64,
    pub nstep_test: f64,
    pub openloop_test: f64,
    pub eigenvalues: Option<Vec<Complex>>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub curve: Vec<CurvePoint>,
}

impl SysIdReport {
    pub const CSV_HEADER: &'static str = "model,N,split,nstep_mse,openloop_mse";

    /// One `model,N,split,nstep_mse,openloop_mse` row per split; open-loop
    /// error is only reported for the test split.
    pub fn csv_rows(&self) -> Vec<String> {
        let rows = [
            ("train", self.nstep_train, None),
            ("val", self.nstep_val, None),
            ("test", self.nstep_test, Some(self.openloop_test)),
        ];
        rows.iter()
            .map(|(split, n, ol)| {
                let ol = ol.map_or(String::new(), |v| v.to_string());
                format!("{},{},{},{},{}", self.kind, self.horizon, split, n, ol)
            })
            .collect()
    }

    pub const EIGEN_CSV_HEADER: &'static str = "model,N,re,im";

    pub fn eigen_csv_rows(&self) -> Vec<String> {
        self.eigenvalues
            .iter()
            .flatten()
            .map(|z| format!("{},{},{},{}", self.kind, self.horizon, z.re, z.im))
            .collect()
    }
}

/// Per-column max-abs scales of inputs and disturbances over `range`.
pub fn input_scales(ds: &Dataset, range: Range<usize>) -> (Vec<f64>, Vec<f64>) {
    let col_scale = |m: &Matrix| -> Vec<f64> {
        (0..m.cols())
            .map(|j| {
                let s = range.clone().map(|k| m[(k, j)].abs()).fold(0.0, f64::max);
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect()
    };
    (col_scale(&ds.u), col_scale(&ds.d))
}

/// The untrained model `train_sysid` starts from, in raw input units.
pub fn initial_model(cfg: &SysIdConfig, ds: &Dataset) -> Result<Model> {
    let (su, sd) = input_scales(ds, ds.split()?.train);
    let mut m = scaled_init(cfg, ds)?;
    m.rescale_inputs(&inv(&su), &inv(&sd))?;
    Ok(m)
}

fn scaled_init(cfg: &SysIdConfig, ds: &Dataset) -> Result<Model> {
    let dims = Dims {
        nx: ds.x.cols(),
        nu: ds.u.cols(),
        nd: ds.d.cols(),
    };
    let mut rng = substream(cfg.seed, "init");
    Model::init(cfg.kind, dims, cfg.eps, &mut rng)
}

fn inv(s: &[f64]) -> Vec<f64> {
    s.iter().map(|v| 1.0 / v).collect()
}

/// Trains one model and evaluates it on every split.
pub fn train_sysid(cfg: &SysIdConfig, ds: &Dataset) -> Result<(Model, SysIdReport)> {
    cfg.validate()?;
    let split = ds.split()?;
    let cols = observed_columns(cfg.observation, ds.observed, ds.nx());
    let (su, sd) = input_scales(ds, split.train.clone());
    let train_w = Windows::from_split(ds, split.train.clone(), cfg.horizon)?.scaled(&su, &sd);
    let val_w = Windows::from_split(ds, split.val.clone(), cfg.horizon)?.scaled(&su, &sd);

    let mut model = scaled_init(cfg, ds)?;
    let mut best = model.clone();
    let mut best_val = nstep_mse(&model, &val_w, &cols)?;
    let mut best_epoch = 0;
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let names = model.param_names();
    let mut curve = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        if let Some(f) = cfg.lr_final_fraction {
            opt.config.lr = cfg.optimizer.lr * f.powf((epoch - 1) as f64 / cfg.epochs.max(1) as f64);
        }
        let loss_value = {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape)?;
            let mut x = tape.constant(train_w.x0.clone());
            let mut terms = Vec::with_capacity(train_w.horizon());
            for k in 0..train_w.horizon() {
                let u = tape.constant(train_w.u[k].clone());
                let d = tape.constant(train_w.d[k].clone());
                x = vars.step(&mut tape, x, u, d)?;
                let pred = select_cols(&mut tape, x, &cols)?;
                let target = tape.constant(select_matrix_cols(&train_w.target[k], &cols));
                terms.push(tape.mse(pred, target)?);
            }
            let stacked = tape.concat_rows(&terms)?;
            let total = tape.sum(stacked);
            let loss = tape.scale(total, 1.0 / terms.len() as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("loss is {value}"),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Matrix> = vars.params.iter().map(|v| grads.get(*v)).collect();
            let g_refs: Vec<&Matrix> = g.iter().collect();
            let mut params: Vec<(&str, &mut Matrix)> =
                names.iter().copied().zip(model.params_mut()).collect();
            opt.step(&mut params, &g_refs)
                .map_err(|e| Error::Training { epoch, detail: e.to_string() })?;
            value
        };
        epochs_run = epoch;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let val = nstep_mse(&model, &val_w, &cols)?;
            curve.push(CurvePoint {
                epoch,
                train: loss_value,
                val,
            });
            if val < best_val {
                best_val = val;
                best = model.clone();
                best_epoch = epoch;
            } else if epoch - best_epoch >= cfg.patience {
                break;
            }
        }
    }

    best.rescale_inputs(&inv(&su), &inv(&sd))?;
    let report = evaluate(&best, ds, cfg.horizon, cfg.observation, best_epoch, epochs_run, curve)?;
    Ok((best, report))
}

/// Metrics of a fitted model on every split.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    horizon: usize,
    observation: Observation,
    best_epoch: usize,
    epochs_run: usize,
    curve: Vec<CurvePoint>,
) -> Result<SysIdReport> {
    let split = ds.split()?;
    let cols = observed_columns(observation, ds.observed, ds.nx());
    let nstep = |part: SplitPart| -> Result<f64> {
        nstep_mse(model, &Windows::from_split(ds, split.get(part), horizon)?, &cols)
    };
    let eigenvalues = match model.kind() {
        ModelKind::Gru => None,
        _ => Some(spectrum_report(model)?),
    };
    Ok(SysIdReport {
        kind: model.kind(),
        horizon,
        nstep_train: nstep(SplitPart::Train)?,
        nstep_val: nstep(SplitPart::Val)?,
        nstep_test: nstep(SplitPart::Test)?,
        openloop_test: open_loop_mse(model, ds, split.test.clone(), &[ds.observed])?,
        eigenvalues,
        best_epoch,
        epochs_run,
        curve,
    })
}

fn select_cols(tape: &mut Tape, x: crate::autodiff::Var, cols: &[usize]) -> Result<crate::autodiff::Var> {
    let n = tape.shape(x).1;
    if cols.len() == n {
        return Ok(x);
    }
    let parts: Vec<_> = cols
        .iter()
        .map(|&c| tape.slice_cols(x, c, 1))
        .collect::<Result<_>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_cols(&parts)
    }
}

fn select_matrix_cols(m: &Matrix, cols: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), cols.len(), |i, j| m[(i, cols[j])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sysid_dataset, DataConfig};
    use crate::plant::build_default_plant;

    fn dataset() -> Dataset {
        generate_sysid_dataset(&build_default_plant(), &DataConfig::default(), 5).unwrap()
    }

    #[test]
    fn exact_model_has_zero_error() {
        let ds = dataset();
        let exact = build_default_plant().to_model();
        let split = ds.split().unwrap();
        let w = Windows::from_split(&ds, split.test.clone(), 16).unwrap();
        assert!(nstep_mse(&exact, &w, &[3]).unwrap() < 1e-20);
        assert!(open_loop_mse(&exact, &ds, split.test, &[3]).unwrap() < 1e-18);
    }

    #[test]
    fn windows_cover_split_without_overlap() {
        let ds = dataset();
        let split = ds.split().unwrap();
        for n in [1, 8, 16, 32, 64, 128, 256] {
            let w = Windows::from_split(&ds, split.train.clone(), n).unwrap();
            assert!(w.count() * n < split.train.len());
            assert_eq!(w.count(), (split.train.len() - 1) / n);
            // consecutive windows chain: the last target of one is the next start
            if w.count() > 1 {
                assert_eq!(w.target[n - 1].row_slice(0), w.x0.row_slice(1));
            }
        }
    }

    #[test]
    fn single_window_hand_value() {
        let w = Windows {
            x0: Matrix::row(&[0.0, 0.0, 0.0, 0.0]),
            u: vec![Matrix::row(&[0.0])],
            d: vec![Matrix::row(&[0.0, 0.0, 0.0])],
            target: vec![Matrix::row(&[0.0, 0.0, 0.0, 20.0])],
        };
        let mut e = Matrix::zeros(4, 3);
        e[(3, 0)] = 21.0;
        let m = Model::linear(Matrix::zeros(4, 4), Matrix::zeros(4, 1), e).unwrap();
        let w = Windows {
            d: vec![Matrix::row(&[1.0, 0.0, 0.0])],
            ..w
        };
        assert_eq!(nstep_mse(&m, &w, &[3]).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = dataset();
        let cfg = SysIdConfig {
            kind: ModelKind::Lin,
            horizon: 32,
            epochs: 0,
            ..Default::default()
        };
        let (m, rep) = train_sysid(&cfg, &ds).unwrap();
        assert_eq!(m, initial_model(&cfg, &ds).unwrap());
        assert_eq!(rep.epochs_run, 0);
    }

    #[test]
    fn gru_spectrum_is_unsupported() {
        let ds = dataset();
        let cfg = SysIdConfig {
            kind: ModelKind::Gru,
            ..Default::default()
        };
        let m = initial_model(&cfg, &ds).unwrap();
        assert!(matches!(spectrum_report(&m), Err(Error::Unsupported(_))));
    }

    #[test]
    fn uniform_ssm_spectrum() {
        let p = crate::models::SsmParams {
            a_raw: Matrix::zeros(4, 4),
            m_raw: Matrix::zeros(4, 4),
            eps: 0.0,
            b: Matrix::zeros(4, 1),
            e: Matrix::zeros(4, 3),
            allow_negative_eps: false,
        };
        let eig = spectrum_report(&Model::Ssm(p)).unwrap();
        assert!((eig[0].re - 1.0).abs() < 1e-12);
        for z in &eig[1..] {
            assert!(z.norm() < 1e-8);
        }
    }
}
