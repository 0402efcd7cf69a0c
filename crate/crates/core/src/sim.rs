//! Closed-loop simulation harness and the tracking, energy and constraint
//! metrics reported for every controller.

use serde::{Deserialize, Serialize};

use crate::baselines::{nominal_mpc_step, LqiController, LqrController, MpcBuilder, MpcWindow, ServoWeights};
use crate::data::{eval_reference, BoundsConfig, Dataset};
use crate::dpc::{LossWeights, Policy};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::Model;
use crate::plant::{PlantModel, UncertaintyMode, UncertaintySpec};
use crate::rng::{indexed, Rng};

/// Everything exogenous to one closed-loop run.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    /// Absolute sample index of step 0 (sets the time of day).
    pub start: usize,
    pub steps: usize,
    pub x0: Vec<f64>,
    /// Disturbances for `steps + pad` samples so forecasts never run out.
    pub d: Matrix,
    /// `r[k]` is the reference for `x_k`; length `steps + pad + 1`.
    pub r: Vec<f64>,
    /// Bounds on the measured state at `x_k`; same length as `r`.
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: f64,
    pub u_hi: f64,
    pub observed: usize,
}

impl Scenario {
    /// Test week of `ds` with the evaluation reference, starting at the
    /// steady state that puts the room on the first reference value.
    pub fn test_week(ds: &Dataset, plant: &PlantModel, bounds: &BoundsConfig, pad: usize) -> Result<Scenario> {
        let split = ds.split()?;
        let start = split.test.start;
        let steps = split.test.len();
        let total = steps + pad;
        let nd = ds.d.cols();
        let d = Matrix::from_fn(total + 1, nd, |k, j| {
            let row = (start + k).min(ds.len() - 1);
            ds.d[(row, j)]
        });
        let r: Vec<f64> = (0..=total).map(|k| eval_reference(start + k)).collect();
        let x_lo: Vec<f64> = (0..=total).map(|k| bounds.x_lo_at(start + k)).collect();
        let servo = LqrController::new(plant, &ServoWeights::default())?;
        let (x0, _) = servo.targets(d.row_slice(0), r[0])?;
        Ok(Scenario {
            start,
            steps,
            x0,
            d,
            r,
            x_lo,
            x_hi: vec![bounds.x_hi; total + 1],
            u_lo: bounds.u_lo,
            u_hi: bounds.u_hi,
            observed: plant.observed,
        })
    }

    /// Same scenario truncated to its first `steps` samples.
    pub fn truncated(&self, steps: usize) -> Scenario {
        Scenario {
            steps: steps.min(self.steps),
            ..self.clone()
        }
    }

    /// State bounds with ±∞ on unmeasured states.
    pub fn state_bounds(&self, k: usize, nx: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::NEG_INFINITY; nx];
        let mut hi = vec![f64::INFINITY; nx];
        lo[self.observed] = self.x_lo[k];
        hi[self.observed] = self.x_hi[k];
        (lo, hi)
    }

    pub fn validate(&self, nx: usize, nd: usize) -> Result<()> {
        let need = self.steps + 1;
        if self.x0.len() != nx || self.d.cols() != nd || self.observed >= nx {
            return Err(Error::Config(format!(
                "scenario has {} states / {} disturbances, plant has {nx} / {nd}",
                self.x0.len(),
                self.d.cols()
            )));
        }
        if self.d.rows() < self.steps || self.r.len() < need || self.x_lo.len() < need || self.x_hi.len() < need {
            return Err(Error::Config("scenario series shorter than its step count".into()));
        }
        Ok(())
    }
}

/// Solver statistics of one online optimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveTelemetry {
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// A feedback law evaluated once per sample.
pub trait Controller {
    fn name(&self) -> String;

    /// Called before every run.
    fn reset(&mut self) {}

    /// Input for step `k` given the measured state `x_k`.
    fn control(&mut self, k: usize, x: &[f64], sc: &Scenario) -> Result<Vec<f64>>;

    /// Model prediction of `x_{k+1}` made during the last `control` call.
    fn predicted(&self) -> Option<Vec<f64>> {
        None
    }

    /// Statistics of the online solve in the last `control` call.
    fn telemetry(&self) -> Option<SolveTelemetry> {
        None
    }

    /// Input dimension the controller produces.
    fn nu(&self) -> usize {
        1
    }
}

fn clamp_inputs(u: &mut [f64], lo: f64, hi: f64) {
    for v in u {
        *v = v.clamp(lo, hi);
    }
}

/// `u ≡ 0`.
pub struct ZeroController;

impl Controller for ZeroController {
    fn name(&self) -> String {
        "zero".into()
    }

    fn control(&mut self, _k: usize, _x: &[f64], _sc: &Scenario) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }
}

/// Learned explicit policy; optionally clamps to the input bounds and runs
/// a model alongside for predictions.
pub struct DlmpcController {
    pub policy: Policy,
    pub clamp: bool,
    pub model: Option<Model>,
    last_prediction: Option<Vec<f64>>,
}

impl DlmpcController {
    pub fn new(policy: Policy, model: Option<&Model>) -> Result<Self> {
        let model = match model {
            Some(m) => {
                if m.dims() != policy.dims {
                    return Err(Error::Config(format!(
                        "model dims {:?} do not match policy dims {:?}",
                        m.dims(),
                        policy.dims
                    )));
                }
                Some(m.stepper()?)
            }
            None => None,
        };
        Ok(DlmpcController {
            policy,
            clamp: true,
            model,
            last_prediction: None,
        })
    }
}

/// Raw policy features at step `k` for measured (or corrected) state `x`.
pub fn policy_features(policy: &Policy, k: usize, x: &[f64], sc: &Scenario) -> Result<Vec<f64>> {
    let nx = policy.dims.nx;
    let (lo, hi) = sc.state_bounds(k + 1, nx);
    let r: Vec<f64> = match policy.tracking.mode {
        crate::dpc::Tracking::Observed => vec![sc.r[k + 1]],
        crate::dpc::Tracking::Full => vec![sc.r[k + 1]; nx],
    };
    let nu = policy.dims.nu;
    policy.features(x, sc.d.row_slice(k), &r, &lo, &hi, &vec![sc.u_lo; nu], &vec![sc.u_hi; nu])
}

impl Controller for DlmpcController {
    fn name(&self) -> String {
        "dlmpc".into()
    }

    fn reset(&mut self) {
        self.last_prediction = None;
    }

    fn control(&mut self, k: usize, x: &[f64], sc: &Scenario) -> Result<Vec<f64>> {
        let xi = policy_features(&self.policy, k, x, sc)?;
        let mut u = self.policy.evaluate(&xi)?;
        if self.clamp {
            clamp_inputs(&mut u, sc.u_lo, sc.u_hi);
        }
        if let Some(m) = &self.model {
            self.last_prediction = Some(m.step(x, &u, sc.d.row_slice(k))?);
        }
        Ok(u)
    }

    fn predicted(&self) -> Option<Vec<f64>> {
        self.last_prediction.clone()
    }

    fn nu(&self) -> usize {
        self.policy.dims.nu
    }
}

/// Servo LQR, unclamped.
pub struct LqrBaseline(pub LqrController);

impl Controller for LqrBaseline {
    fn name(&self) -> String {
        "lqr".into()
    }

    fn control(&mut self, k: usize, x: &[f64], sc: &Scenario) -> Result<Vec<f64>> {
        self.0.control(x, sc.d.row_slice(k), sc.r[k + 1])
    }
}

/// LQI with its integrator reset per run, unclamped.
pub struct LqiBaseline(pub LqiController);

impl Controller for LqiBaseline {
    fn name(&self) -> String {
        "lqi".into()
    }

    fn reset(&mut self) {
        self.0.reset();
    }

    fn control(&mut self, k: usize, x: &[f64], sc: &Scenario) -> Result<Vec<f64>> {
        Ok(self.0.control(x, sc.r[k]))
    }
}

/// Receding-horizon QP with perfect forecasts, output clamped.
pub struct MpcBaseline {
    pub builder: MpcBuilder,
    pub last: Option<SolveTelemetry>,
}

impl MpcBaseline {
    pub fn new(plant: &PlantModel, horizon: usize, weights: LossWeights, u_scale: f64) -> Result<Self> {
        Ok(MpcBaseline {
            builder: MpcBuilder::new(plant, horizon, weights, u_scale)?,
            last: None,
        })
    }

    pub fn solve(&mut self, k: usize, x: &[f64], sc: &Scenario) -> Result<Vec<f64>> {
        let n = self.builder.horizon;
        if k + n + 1 > sc.r.len() || k + n > sc.d.rows() {
            return Err(Error::Config(format!("scenario too short for horizon {n} at step {k}")));
        }
        let d = sc.d.slice_rows(k, n);
        let w = MpcWindow {
            d: &d,
            r: &sc.r[k + 1..k + 1 + n],
            x_lo: &sc.x_lo[k + 1..k + 1 + n],
            x_hi: &sc.x_hi[k + 1..k + 1 + n],
            u_lo: sc.u_lo,
            u_hi: sc.u_hi,
        };
        let (u, sol) = nominal_mpc_step(&self.builder, x, &w)?;
        self.last = Some(SolveTelemetry {
            iterations: sol.iterations,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
        });
        Ok(u)
    }
}

impl Controller for MpcBaseline {
    fn name(&self) -> String {
        format!("mpc-n{}", self.builder.horizon)
    }

    fn control(&mut self, k: usize, x: &[f64], sc: &Scenario) -> Result<Vec<f64>> {
        let mut u = self.solve(k, x, sc)?;
        clamp_inputs(&mut u, sc.u_lo, sc.u_hi);
        Ok(u)
    }

    fn telemetry(&self) -> Option<SolveTelemetry> {
        self.last
    }
}

/// States, inputs and optional one-step predictions of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// `x_0 … x_T`.
    pub x: Matrix,
    /// `u_0 … u_{T−1}`.
    pub u: Matrix,
    /// Prediction of `x_{k+1}` made at step `k`.
    pub pred: Option<Matrix>,
}

pub fn simulate(
    plant: &PlantModel,
    ctrl: &mut dyn Controller,
    sc: &Scenario,
    unc: &UncertaintySpec,
    rng: &mut Rng,
) -> Result<Trace> {
    let dims = plant.dims();
    sc.validate(dims.nx, dims.nd)?;
    if ctrl.nu() != dims.nu {
        return Err(Error::Config(format!(
            "controller {} produces {} inputs, plant takes {}",
            ctrl.name(),
            ctrl.nu(),
            dims.nu
        )));
    }
    ctrl.reset();
    let t = sc.steps;
    let mut xs = Matrix::zeros(t + 1, dims.nx);
    let mut us = Matrix::zeros(t, dims.nu);
    let mut pred: Option<Matrix> = None;
    xs.row_slice_mut(0).copy_from_slice(&sc.x0);
    let mut x = sc.x0.clone();
    for k in 0..t {
        let u = ctrl.control(k, &x, sc)?;
        if u.len() != dims.nu || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("controller {} returned {u:?} at step {k}", ctrl.name())));
        }
        if let Some(p) = ctrl.predicted() {
            pred.get_or_insert_with(|| Matrix::zeros(t, dims.nx))
                .row_slice_mut(k)
                .copy_from_slice(&p);
        }
        let d = sc.d.row_slice(k);
        x = if unc.is_nominal() {
            plant.step(&x, &u, d)
        } else {
            plant.step_uncertain(&x, &u, d, unc, rng)
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("closed loop diverged at step {k}")));
        }
        us.row_slice_mut(k).copy_from_slice(&u);
        xs.row_slice_mut(k + 1).copy_from_slice(&x);
    }
    Ok(Trace { x: xs, u: us, pred })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean squared one-step prediction error of the measured state.
    pub mse_mod: Option<f64>,
    /// Mean absolute one-step prediction gap of the measured state.
    pub gap: Option<f64>,
    pub mse_ref: f64,
    pub ma_ene: f64,
    pub ma_con: f64,
}

/// Metrics over `x_1 … x_T` and `u_0 … u_{T−1}`.
pub fn metrics(trace: &Trace, sc: &Scenario) -> Metrics {
    let t = sc.steps;
    let o = sc.observed;
    let tf = t as f64;
    let mut mse_ref = 0.0;
    let mut ma_con = 0.0;
    for k in 1..=t {
        let v = trace.x[(k, o)];
        mse_ref += (sc.r[k] - v).powi(2);
        ma_con += (sc.x_lo[k] - v).max(0.0) + (v - sc.x_hi[k]).max(0.0);
    }
    let ma_ene = trace.u.as_slice().iter().map(|v| v.abs()).sum::<f64>() / tf;
    let (mse_mod, gap) = match &trace.pred {
        Some(p) => {
            let mut sq = 0.0;
            let mut ab = 0.0;
            for k in 0..t {
                let e = p[(k, o)] - trace.x[(k + 1, o)];
                sq += e * e;
                ab += e.abs();
            }
            (Some(sq / tf), Some(ab / tf))
        }
        None => (None, None),
    };
    Metrics {
        mse_mod,
        gap,
        mse_ref: mse_ref / tf,
        ma_ene,
        ma_con: ma_con / tf,
    }
}

/// Per-run metrics for one uncertainty mode. Run `i` draws its noise from
/// the `i`-th uncertainty substream, so modes and controllers share seeds.
pub fn run_mode<C, F>(
    plant: &PlantModel,
    make: F,
    sc: &Scenario,
    base: &UncertaintySpec,
    mode: UncertaintyMode,
    runs: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<Metrics>>
where
    C: Controller,
    F: Fn() -> Result<C> + Sync,
{
    if runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    let unc = base.for_mode(mode);
    let one = |i: usize| -> Result<Metrics> {
        let mut ctrl = make()?;
        let mut rng = indexed(seed, "uncertainty", i as u64);
        let tr = simulate(plant, &mut ctrl, sc, &unc, &mut rng)?;
        Ok(metrics(&tr, sc))
    };
    let workers = workers.clamp(1, runs);
    if workers == 1 {
        return (0..runs).map(one).collect();
    }
    let mut out: Vec<Option<Result<Metrics>>> = (0..runs).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunks: Vec<Vec<usize>> = (0..workers).map(|w| (w..runs).step_by(workers).collect()).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|idx| {
                let one = &one;
                s.spawn(move || idx.into_iter().map(|i| (i, one(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("simulation worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every run assigned")).collect()
}

/// Mean of every field over runs.
pub fn mean_metrics(runs: &[Metrics]) -> Metrics {
    let n = runs.len().max(1) as f64;
    let avg = |f: &dyn Fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let opt_avg = |f: &dyn Fn(&Metrics) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = runs.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / n)
    };
    Metrics {
        mse_mod: opt_avg(&|m| m.mse_mod),
        gap: opt_avg(&|m| m.gap),
        mse_ref: avg(&|m| m.mse_ref),
        ma_ene: avg(&|m| m.ma_ene),
        ma_con: avg(&|m| m.ma_con),
    }
}
