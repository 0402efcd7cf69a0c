//! Per-step evaluation timing of learned policies against online QP solves.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{BoundsConfig, Dataset};
use crate::dpc::{train_policy, PolicyTrainConfig, SamplingConfig};
use crate::error::{Error, Result};
use crate::plant::{PlantModel, UncertaintySpec};
use crate::rng::substream;
use crate::sim::{simulate, Controller, DlmpcController, MpcBaseline, Scenario, SolveTelemetry};

pub const DEFAULT_HORIZONS: [usize; 5] = [1, 2, 4, 6, 8];
/// Per-step times shorter than this cannot be resolved by single readings.
pub const MIN_CLOCK_RESOLUTION: Duration = Duration::from_nanos(100);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub horizons: Vec<usize>,
    /// Training epochs for each policy; timings do not depend on weights.
    pub epochs: usize,
    /// Closed-loop steps timed per controller and horizon.
    pub samples: usize,
    /// Steps of a discarded run before the timed one.
    pub warmup: usize,
    /// Samples per block for the median-of-means statistic.
    pub block: usize,
    pub seed: u64,
    pub train: PolicyTrainConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            horizons: DEFAULT_HORIZONS.to_vec(),
            epochs: 200,
            samples: 2016,
            warmup: 64,
            block: 32,
            seed: 0,
            train: PolicyTrainConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config("bench horizons must be positive and non-empty".into()));
        }
        if self.samples == 0 || self.block == 0 {
            return Err(Error::Config("bench samples and block must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub controller: String,
    pub horizon: usize,
    pub samples: usize,
    pub mean_s: f64,
    pub max_s: f64,
    pub median_of_means_s: f64,
    /// Set when each sample is the mean over repeated calls because the
    /// clock could not resolve a single one.
    pub amortized: bool,
    /// Online solver statistics, for controllers that solve a problem per step.
    pub mean_iterations: Option<f64>,
    pub max_primal_residual: Option<f64>,
}

impl TimingRecord {
    pub const CSV_HEADER: &'static str =
        "controller,N,samples,mean_s,max_s,median_of_means_s,amortized,mean_iterations,max_primal_residual";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.controller,
            self.horizon,
            self.samples,
            self.mean_s,
            self.max_s,
            self.median_of_means_s,
            self.amortized,
            opt(self.mean_iterations),
            opt(self.max_primal_residual)
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_s > 0.0 && self.max_s >= self.mean_s) {
            return Err(Error::Numeric(format!("inconsistent timing record {self:?}")));
        }
        Ok(())
    }
}

/// Smallest observable nonzero step of the monotonic clock.
pub fn clock_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

/// Wraps a controller and records the wall time of every `control` call.
struct Timed<C> {
    inner: C,
    reps: usize,
    times: Vec<f64>,
    solves: Vec<SolveTelemetry>,
}

impl<C: Controller> Controller for Timed<C> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn reset(&mut self) {
        self.inner.reset();
        self.times.clear();
        self.solves.clear();
    }

    fn control(&mut self, k: usize, x: &[f64], sc: &Scenario) -> Result<Vec<f64>> {
        let t0 = Instant::now();
        let mut u = self.inner.control(k, x, sc)?;
        for _ in 1..self.reps {
            u = self.inner.control(k, x, sc)?;
        }
        self.times.push(t0.elapsed().as_secs_f64() / self.reps as f64);
        self.solves.extend(self.inner.telemetry());
        Ok(u)
    }

    fn nu(&self) -> usize {
        self.inner.nu()
    }
}

/// Times `ctrl` over a closed-loop run of `sc` after a discarded warmup run
/// of `warmup` steps. Only the controller call is inside the measured
/// section; plant updates and bookkeeping are not.
pub fn time_controller<C: Controller>(
    plant: &PlantModel,
    ctrl: C,
    sc: &Scenario,
    horizon: usize,
    warmup: usize,
    block: usize,
    amortize: bool,
) -> Result<TimingRecord> {
    let mut timed = Timed {
        inner: ctrl,
        reps: if amortize { 16 } else { 1 },
        times: Vec::new(),
        solves: Vec::new(),
    };
    let mut rng = substream(0, "bench");
    if warmup > 0 {
        simulate(plant, &mut timed, &sc.truncated(warmup), &UncertaintySpec::NONE, &mut rng)?;
    }
    simulate(plant, &mut timed, sc, &UncertaintySpec::NONE, &mut rng)?;
    let name = timed.name();
    let mut rec = summarize(name, horizon, &timed.times, block, amortize)?;
    if !timed.solves.is_empty() {
        let n = timed.solves.len() as f64;
        rec.mean_iterations = Some(timed.solves.iter().map(|s| s.iterations as f64).sum::<f64>() / n);
        rec.max_primal_residual = Some(timed.solves.iter().map(|s| s.primal_residual).fold(0.0, f64::max));
    }
    Ok(rec)
}

fn summarize(controller: String, horizon: usize, t: &[f64], block: usize, amortized: bool) -> Result<TimingRecord> {
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let max = t.iter().copied().fold(0.0, f64::max);
    let mut means: Vec<f64> = t
        .chunks(block)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let mid = means.len() / 2;
    let median = if means.len() % 2 == 1 {
        means[mid]
    } else {
        0.5 * (means[mid - 1] + means[mid])
    };
    let rec = TimingRecord {
        controller,
        horizon,
        samples: t.len(),
        mean_s: mean,
        max_s: max,
        median_of_means_s: median,
        amortized,
        mean_iterations: None,
        max_primal_residual: None,
    };
    rec.validate()?;
    Ok(rec)
}

/// Least-squares slope of `ln t` against `ln N`.
pub fn fit_exponent(horizons: &[usize], times: &[f64]) -> Result<f64> {
    if horizons.len() != times.len() || horizons.len() < 2 {
        return Err(Error::Config("exponent fit needs at least two paired points".into()));
    }
    if times.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Numeric("exponent fit needs positive times".into()));
    }
    let xs: Vec<f64> = horizons.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("exponent fit needs distinct horizons".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// DLMPC and implicit MPC timings for every horizon in `cfg`. A policy with
/// `10 N` hidden units is trained against the plant for each `N`; the MPC
/// solves the full constrained QP at every step. Runs single-threaded.
pub fn run_bench(plant: &PlantModel, ds: &Dataset, cfg: &BenchConfig) -> Result<Vec<TimingRecord>> {
    cfg.validate()?;
    let pad = cfg.horizons.iter().copied().max().unwrap_or(1) + 1;
    let bounds: BoundsConfig = cfg.train.bounds;
    let full = Scenario::test_week(ds, plant, &bounds, pad)?;
    if full.steps < cfg.samples {
        eprintln!("warning: test week holds {} steps, fewer than the {} requested", full.steps, cfg.samples);
    }
    let sc = full.truncated(cfg.samples);
    let amortize = clock_resolution() > MIN_CLOCK_RESOLUTION;
    if amortize {
        eprintln!("warning: clock resolution above 100 ns; timing batches of calls");
    }
    let split = ds.split()?;
    let dtrain = ds.d.slice_rows(split.train.start, split.train.len());
    let model = plant.to_model();
    let mut out = Vec::new();
    for &n in &cfg.horizons {
        let pcfg = PolicyTrainConfig {
            epochs: cfg.epochs,
            seed: cfg.seed,
            hidden: None,
            sampling: SamplingConfig {
                horizon: n,
                ..cfg.train.sampling
            },
            ..cfg.train.clone()
        };
        let (policy, _) = train_policy(&model, plant.observed, &dtrain, split.train.start, &pcfg)?;
        let dl = DlmpcController::new(policy, None)?;
        out.push(time_controller(plant, dl, &sc, n, cfg.warmup, cfg.block, amortize)?);
        let mpc = MpcBaseline::new(plant, n, pcfg.weights, bounds.u_hi)?;
        let mut rec = time_controller(plant, mpc, &sc, n, cfg.warmup, cfg.block, amortize)?;
        rec.controller = "impc".into();
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_of_power_law() {
        let ns = [1, 2, 4, 6, 8];
        let t: Vec<f64> = ns.iter().map(|&n| 3e-6 * (n as f64).powf(1.3)).collect();
        assert!((fit_exponent(&ns, &t).unwrap() - 1.3).abs() < 1e-12);
        assert!(fit_exponent(&[2, 2], &[1.0, 2.0]).is_err());
        assert!(fit_exponent(&[1, 2], &[0.0, 2.0]).is_err());
    }

    #[test]
    fn summary_statistics() {
        let t = [1.0, 2.0, 3.0, 4.0, 10.0];
        let r = summarize("x".into(), 1, &t, 2, false).unwrap();
        assert_eq!(r.mean_s, 4.0);
        assert_eq!(r.max_s, 10.0);
        // block means 1.5, 3.5, 10
        assert_eq!(r.median_of_means_s, 3.5);
        assert_eq!(r.samples, 5);
    }

    #[test]
    fn clock_is_fine_grained_enough_to_measure() {
        assert!(clock_resolution() < Duration::from_millis(1));
    }
}
