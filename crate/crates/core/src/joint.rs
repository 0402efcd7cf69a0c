//! Simultaneous system identification and policy learning, and the online
//! adaptation used at deployment.
//!
//! One tape carries two branches through the same model: the control branch
//! of the policy loss and an identification branch driven by measured
//! trajectories. At deployment only the policy's last layer and a state
//! correction `x̂` keep learning, a few gradient steps per sample.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{BoundsConfig, Dataset};
use crate::dpc::{
    apply_policy_step, initial_policy, mpc_policy_step, policy_grads, policy_loss, run_policy_training,
    ControlBatch, ControlSampler, LossPoint, LossWeights, Policy, PolicyStepOutput, PolicyTrainConfig,
    PolicyVars, SamplingConfig, StepContext, Tracking, TrainReport, TrackingTarget, POLICY_PARAM_NAMES,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::{Dims, Model, ModelKind, ModelVars, DEFAULT_SSM_EPS};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::substream;
use crate::sim::{policy_features, Controller, Scenario};
use crate::sysid::input_scales;

/// Control weights plus the identification and smoothing weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointWeights {
    #[serde(flatten)]
    pub control: LossWeights,
    pub q_id: f64,
    pub q_dx: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        JointWeights {
            control: LossWeights::default(),
            q_id: 100.0,
            q_dx: 1.0,
        }
    }
}

impl JointWeights {
    pub fn validate(&self) -> Result<()> {
        self.control.validate()?;
        if !(self.q_id.is_finite() && self.q_id >= 0.0 && self.q_dx.is_finite() && self.q_dx >= 0.0) {
            return Err(Error::Config(format!("joint weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct JointStepOutput {
    pub control: PolicyStepOutput,
    /// Model prediction from the measured state and input.
    pub x_next_id: Var,
    /// `x̃₊ᴵᴰ − xᴵᴰ`.
    pub dx_id: Var,
}

/// Control branch as in [`mpc_policy_step`] plus the identification branch
/// `x̃₊ᴵᴰ = f(xᴵᴰ, uᴵᴰ, d)` through the same model handles.
#[allow(clippy::too_many_arguments)]
pub fn id_policy_step(
    tape: &mut Tape,
    pv: &PolicyVars,
    policy: &Policy,
    mv: &ModelVars,
    x: Var,
    ctx: &StepContext,
    x_id: Var,
    u_id: Var,
) -> Result<JointStepOutput> {
    let control = mpc_policy_step(tape, pv, policy, mv, x, ctx)?;
    let d = tape.constant(ctx.d.clone());
    let x_next_id = mv.step(tape, x_id, u_id, d)?;
    let dx_id = tape.sub(x_next_id, x_id)?;
    Ok(JointStepOutput {
        control,
        x_next_id,
        dx_id,
    })
}

/// Control loss plus `Q_ID‖x₊ᴵᴰ − x̃₊ᴵᴰ‖²` on the measured state and
/// `Q_Δx‖Δxᴵᴰ‖²` on the full state, averaged over batch and steps.
pub fn joint_loss(
    tape: &mut Tape,
    outputs: &[JointStepOutput],
    x_next_id: &[Matrix],
    r: &[Matrix],
    w: &JointWeights,
    target: TrackingTarget,
) -> Result<Var> {
    if outputs.len() != x_next_id.len() {
        return Err(Error::Contract(format!(
            "{} joint outputs but {} identification targets",
            outputs.len(),
            x_next_id.len()
        )));
    }
    let control: Vec<PolicyStepOutput> = outputs.iter().map(|o| o.control).collect();
    let mut total = policy_loss(tape, &control, r, &w.control, target)?;
    let batch = tape.shape(outputs[0].x_next_id).0 as f64;
    let norm = 1.0 / (batch * outputs.len() as f64);
    for (o, tgt) in outputs.iter().zip(x_next_id) {
        let pred = tape.slice_cols(o.x_next_id, target.observed, 1)?;
        let meas = tape.constant(tgt.slice_cols(target.observed, 1));
        let e = tape.sub(meas, pred)?;
        let id = tape.sum_sq(e);
        let id = tape.scale(id, w.q_id * norm);
        let dx = tape.sum_sq(o.dx_id);
        let dx = tape.scale(dx, w.q_dx * norm);
        total = tape.add(total, id)?;
        total = tape.add(total, dx)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointTrainConfig {
    pub weights: JointWeights,
    pub sampling: SamplingConfig,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub tracking: Tracking,
    pub hidden: Option<usize>,
    pub bounds: BoundsConfig,
    pub eval_every: usize,
    pub kind: ModelKind,
    pub eps: f64,
    /// Drop the identification branch and freeze the model; training then
    /// coincides with policy training against the initial model.
    pub detach_id: bool,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        JointTrainConfig {
            weights: JointWeights::default(),
            sampling: SamplingConfig::default(),
            epochs: 40_000,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
            tracking: Tracking::Observed,
            hidden: None,
            bounds: BoundsConfig::default(),
            eval_every: 100,
            kind: ModelKind::Ssm,
            eps: DEFAULT_SSM_EPS,
            detach_id: false,
        }
    }
}

impl JointTrainConfig {
    pub fn policy_config(&self) -> PolicyTrainConfig {
        PolicyTrainConfig {
            weights: self.weights.control,
            sampling: self.sampling,
            epochs: self.epochs,
            optimizer: self.optimizer,
            seed: self.seed,
            tracking: self.tracking,
            hidden: self.hidden,
            bounds: self.bounds,
            eval_every: self.eval_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.policy_config().validate()
    }
}

/// Measured tuples aligned with a control batch: for every sample and step,
/// the dataset row at the same time index as the drawn disturbance.
struct IdBatch {
    x: Vec<Matrix>,
    u: Vec<Matrix>,
    x_next: Vec<Matrix>,
}

fn id_batch(ds: &Dataset, offset: usize, batch: &ControlBatch) -> IdBatch {
    let n = batch.steps.len();
    let rows = |m: &Matrix, shift: usize| -> Vec<Matrix> {
        (0..n)
            .map(|k| {
                Matrix::from_fn(batch.start.len(), m.cols(), |i, j| m[(offset + batch.start[i] + k + shift, j)])
            })
            .collect()
    };
    IdBatch {
        x: rows(&ds.x, 0),
        u: rows(&ds.u, 0),
        x_next: rows(&ds.x, 1),
    }
}

fn joint_tape(
    model: &Model,
    policy: &Policy,
    scales: &(Vec<f64>, Vec<f64>),
    batch: &ControlBatch,
    id: &IdBatch,
    w: &JointWeights,
) -> Result<(Tape, Var, ModelVars, PolicyVars)> {
    let mut tape = Tape::new();
    let mv = model.register(&mut tape)?.with_input_scaling(&scales.0, &scales.1)?;
    let pv = policy.register(&mut tape)?;
    let mut x = tape.constant(batch.x0.clone());
    let mut outs = Vec::with_capacity(batch.steps.len());
    for (k, ctx) in batch.steps.iter().enumerate() {
        let xi = tape.constant(id.x[k].clone());
        let ui = tape.constant(id.u[k].clone());
        let o = id_policy_step(&mut tape, &pv, policy, &mv, x, ctx, xi, ui)?;
        x = o.control.x_next;
        outs.push(o);
    }
    let r: Vec<Matrix> = batch.steps.iter().map(|s| s.r.clone()).collect();
    let loss = joint_loss(&mut tape, &outs, &id.x_next, &r, w, policy.tracking)?;
    Ok((tape, loss, mv, pv))
}

/// Learns a model (from random initialization) and a policy together on the
/// training week of `ds`; returns the snapshot pair with the lowest loss on
/// a fixed validation batch from the validation week.
pub fn train_joint(ds: &Dataset, cfg: &JointTrainConfig) -> Result<(Model, Policy, TrainReport)> {
    cfg.validate()?;
    ds.validate()?;
    let split = ds.split()?;
    let dims = Dims {
        nx: ds.nx(),
        nu: ds.u.cols(),
        nd: ds.d.cols(),
    };
    let mut model = Model::init(cfg.kind, dims, cfg.eps, &mut substream(cfg.seed, "init"))?;
    let scales = input_scales(ds, split.train.clone());
    let inv = |s: &[f64]| s.iter().map(|v| 1.0 / v).collect::<Vec<_>>();
    let pcfg = cfg.policy_config();
    let d_train = ds.d.slice_rows(split.train.start, split.train.len());
    let policy = initial_policy(dims, ds.observed, &d_train, &pcfg)?;
    let sampler = ControlSampler {
        disturbances: &d_train,
        offset: split.train.start,
        bounds: cfg.bounds,
        sampling: cfg.sampling,
        dims,
        target: policy.tracking,
    };

    if cfg.detach_id {
        let mut raw = model.clone();
        raw.rescale_inputs(&inv(&scales.0), &inv(&scales.1))?;
        let frozen = raw.stepper()?;
        let (p, rep) = run_policy_training(&frozen, policy, &sampler, &pcfg)?;
        return Ok((raw, p, rep));
    }

    let d_val = ds.d.slice_rows(split.val.start, split.val.len());
    let val_sampler = ControlSampler {
        disturbances: &d_val,
        offset: split.val.start,
        ..sampler.clone()
    };
    let val_batch = val_sampler.sample(&mut substream(cfg.seed, "validation"))?;
    let val_id = id_batch(ds, split.val.start, &val_batch);
    let val_loss = |m: &Model, p: &Policy| -> Result<f64> {
        let (tape, loss, _, _) = joint_tape(m, p, &scales, &val_batch, &val_id, &cfg.weights)?;
        Ok(tape.scalar(loss))
    };

    let mut policy = policy;
    let mut rng = substream(cfg.seed, "sampling");
    let mut popt = Optimizer::new(cfg.optimizer)?;
    let mut mopt = Optimizer::new(cfg.optimizer)?;
    let mut best = (model.clone(), policy.clone());
    let mut best_val = val_loss(&model, &policy)?;
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        best_val,
        curve: Vec::new(),
    };
    let names = model.param_names();
    for epoch in 1..=cfg.epochs {
        let batch = sampler.sample(&mut rng)?;
        let id = id_batch(ds, split.train.start, &batch);
        let (tape, loss, mv, pv) = joint_tape(&model, &policy, &scales, &batch, &id, &cfg.weights)?;
        let train = tape.scalar(loss);
        if !train.is_finite() {
            return Err(Error::Training {
                epoch,
                detail: format!("non-finite joint loss {train}"),
            });
        }
        let grads = tape.backward(loss)?;
        let pg = policy_grads(&grads, &pv);
        let mg: Vec<Matrix> = mv.params.iter().map(|&v| grads.get(v)).collect();
        let wrap = |e: Error| Error::Training {
            epoch,
            detail: e.to_string(),
        };
        apply_policy_step(&mut popt, &mut policy, &pg).map_err(wrap)?;
        {
            let mut params: Vec<(&str, &mut Matrix)> = names.iter().copied().zip(model.params_mut()).collect();
            let g: Vec<&Matrix> = mg.iter().collect();
            mopt.step(&mut params, &g).map_err(wrap)?;
        }
        report.epochs_run = epoch;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let val = val_loss(&model, &policy)?;
            report.curve.push(LossPoint { epoch, train, val });
            if val < best_val {
                best_val = val;
                best = (model.clone(), policy.clone());
                report.best_epoch = epoch;
                report.best_val = val;
            }
        }
    }
    let (mut model, policy) = best;
    model.rescale_inputs(&inv(&scales.0), &inv(&scales.1))?;
    Ok((model, policy, report))
}

/// Names of everything that adapts online; the rest is frozen.
pub const ADAPT_TRAINABLE: [&str; 3] = ["W2", "b2", "x_hat"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Gradient steps per sample.
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Zero `x̂` before every sample instead of carrying it over.
    pub reset_each_step: bool,
    pub weights: JointWeights,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 10,
            optimizer: OptimizerConfig::adam(1e-3),
            reset_each_step: false,
            weights: JointWeights::default(),
        }
    }
}

/// Learnable state correction and the optimizer state of the online phase.
#[derive(Clone, Debug)]
pub struct OnlineAdaptState {
    pub config: AdaptConfig,
    pub x_hat: Vec<f64>,
    optimizer: Optimizer,
}

/// One measured transition for the identification terms.
#[derive(Clone, Debug, PartialEq)]
pub struct IdSample {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    pub x_next: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptStep {
    pub loss_before: f64,
    pub loss_after: f64,
}

impl OnlineAdaptState {
    pub fn new(nx: usize, config: AdaptConfig) -> Result<Self> {
        config.weights.validate()?;
        Ok(OnlineAdaptState {
            x_hat: vec![0.0; nx],
            optimizer: Optimizer::new(config.optimizer)?,
            config,
        })
    }

    pub fn reset(&mut self) -> Result<()> {
        self.x_hat.iter_mut().for_each(|v| *v = 0.0);
        self.optimizer = Optimizer::new(self.config.optimizer)?;
        Ok(())
    }

    /// Trainable and frozen parameter names; asserts they partition the
    /// full set exactly.
    pub fn partition(model: &Model) -> Result<(Vec<String>, Vec<String>)> {
        let mut all: Vec<String> = POLICY_PARAM_NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(model.param_names().iter().map(|s| format!("model.{s}")));
        all.push("x_hat".into());
        let trainable: Vec<String> = all.iter().filter(|n| ADAPT_TRAINABLE.contains(&n.as_str())).cloned().collect();
        let frozen: Vec<String> = all.iter().filter(|n| !ADAPT_TRAINABLE.contains(&n.as_str())).cloned().collect();
        let overlap = trainable.iter().any(|t| frozen.contains(t));
        if overlap || trainable.len() + frozen.len() != all.len() || trainable.len() != ADAPT_TRAINABLE.len() {
            return Err(Error::Contract("online adaptation mask does not partition the parameters".into()));
        }
        Ok((trainable, frozen))
    }
}

fn adapt_loss(
    tape: &mut Tape,
    policy: &Policy,
    mv: &ModelVars,
    pv: &PolicyVars,
    x_hat: Var,
    x: &[f64],
    ctx: &StepContext,
    id: Option<&IdSample>,
    w: &JointWeights,
) -> Result<Var> {
    let xm = tape.constant(Matrix::row(x));
    let xc = tape.add(xm, x_hat)?;
    match id {
        Some(s) => {
            let id_ctx = StepContext {
                d: Matrix::row(&s.d),
                ..ctx.clone()
            };
            let control = mpc_policy_step(tape, pv, policy, mv, xc, ctx)?;
            let xi = tape.constant(Matrix::row(&s.x));
            let ui = tape.constant(Matrix::row(&s.u));
            let d = tape.constant(id_ctx.d.clone());
            let x_next_id = mv.step(tape, xi, ui, d)?;
            let dx_id = tape.sub(x_next_id, xi)?;
            let out = JointStepOutput {
                control,
                x_next_id,
                dx_id,
            };
            joint_loss(tape, &[out], &[Matrix::row(&s.x_next)], std::slice::from_ref(&ctx.r), w, policy.tracking)
        }
        None => {
            let o = mpc_policy_step(tape, pv, policy, mv, xc, ctx)?;
            policy_loss(tape, &[o], std::slice::from_ref(&ctx.r), &w.control, policy.tracking)
        }
    }
}

/// A few gradient steps on the single current tuple with `x` replaced by
/// `x + x̂`. Only the policy's last layer and `x̂` change.
pub fn online_adapt(
    state: &mut OnlineAdaptState,
    policy: &mut Policy,
    model: &Model,
    x: &[f64],
    ctx: &StepContext,
    id: Option<&IdSample>,
) -> Result<AdaptStep> {
    OnlineAdaptState::partition(model)?;
    if ctx.rows() != 1 || x.len() != policy.dims.nx || state.x_hat.len() != policy.dims.nx {
        return Err(Error::dim(
            "online_adapt",
            format!("{} context rows, state {}, x̂ {}", ctx.rows(), x.len(), state.x_hat.len()),
        ));
    }
    if state.config.reset_each_step {
        state.x_hat.iter_mut().for_each(|v| *v = 0.0);
    }
    let w = state.config.weights;
    let mut before = None;
    for _ in 0..state.config.epochs {
        let mut tape = Tape::new();
        let mv = model.register(&mut tape)?;
        let pv = policy.register(&mut tape)?;
        let xh = tape.leaf(Matrix::row(&state.x_hat));
        let loss = adapt_loss(&mut tape, policy, &mv, &pv, xh, x, ctx, id, &w)?;
        before.get_or_insert(tape.scalar(loss));
        let grads = tape.backward(loss)?;
        let g = [grads.get(pv.w2), grads.get(pv.b2), grads.get(xh)];
        let mut xh_m = Matrix::row(&state.x_hat);
        {
            let mut params: [(&str, &mut Matrix); 3] = [
                (ADAPT_TRAINABLE[0], &mut policy.w2),
                (ADAPT_TRAINABLE[1], &mut policy.b2),
                (ADAPT_TRAINABLE[2], &mut xh_m),
            ];
            let gr: Vec<&Matrix> = g.iter().collect();
            state.optimizer.step(&mut params, &gr)?;
        }
        state.x_hat = xh_m.into_vec();
    }
    let after = {
        let mut tape = Tape::new();
        let mv = model.register(&mut tape)?;
        let pv = policy.register(&mut tape)?;
        let xh = tape.constant(Matrix::row(&state.x_hat));
        let loss = adapt_loss(&mut tape, policy, &mv, &pv, xh, x, ctx, id, &w)?;
        tape.scalar(loss)
    };
    Ok(AdaptStep {
        loss_before: before.unwrap_or(after),
        loss_after: after,
    })
}

/// Jointly learned policy and model in closed loop, optionally adapting
/// online. Predictions come from the model at the corrected state.
pub struct JointController {
    pub policy: Policy,
    pub model: Model,
    pub adapt: Option<OnlineAdaptState>,
    pub clamp: bool,
    initial_policy: Policy,
    prev: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    prediction: Option<Vec<f64>>,
}

impl JointController {
    pub fn new(policy: Policy, model: &Model, adapt: Option<AdaptConfig>) -> Result<Self> {
        if model.dims() != policy.dims {
            return Err(Error::Config(format!(
                "model dims {:?} do not match policy dims {:?}",
                model.dims(),
                policy.dims
            )));
        }
        let adapt = match adapt {
            Some(c) => Some(OnlineAdaptState::new(policy.dims.nx, c)?),
            None => None,
        };
        Ok(JointController {
            initial_policy: policy.clone(),
            policy,
            model: model.stepper()?,
            adapt,
            clamp: true,
            prev: None,
            prediction: None,
        })
    }

    fn context(&self, k: usize, sc: &Scenario) -> StepContext {
        let nx = self.policy.dims.nx;
        let nu = self.policy.dims.nu;
        let (lo, hi) = sc.state_bounds(k + 1, nx);
        let r = match self.policy.tracking.mode {
            Tracking::Observed => vec![sc.r[k + 1]],
            Tracking::Full => vec![sc.r[k + 1]; nx],
        };
        StepContext::single(sc.d.row_slice(k), &r, &lo, &hi, &vec![sc.u_lo; nu], &vec![sc.u_hi; nu])
    }
}

impl Controller for JointController {
    fn name(&self) -> String {
        if self.adapt.is_some() {
            "joint-adapt".into()
        } else {
            "joint".into()
        }
    }

    fn reset(&mut self) {
        self.policy = self.initial_policy.clone();
        if let Some(a) = &mut self.adapt {
            a.reset().expect("optimizer config was validated at construction");
        }
        self.prev = None;
        self.prediction = None;
    }

    fn control(&mut self, k: usize, x: &[f64], sc: &Scenario) -> Result<Vec<f64>> {
        let ctx = self.context(k, sc);
        if let Some(state) = &mut self.adapt {
            let id = self.prev.as_ref().map(|(xp, up, dp)| IdSample {
                x: xp.clone(),
                u: up.clone(),
                d: dp.clone(),
                x_next: x.to_vec(),
            });
            online_adapt(state, &mut self.policy, &self.model, x, &ctx, id.as_ref())?;
        }
        let xc: Vec<f64> = match &self.adapt {
            Some(s) => x.iter().zip(&s.x_hat).map(|(a, b)| a + b).collect(),
            None => x.to_vec(),
        };
        let xi = policy_features(&self.policy, k, &xc, sc)?;
        let mut u = self.policy.evaluate(&xi)?;
        if self.clamp {
            for v in u.iter_mut() {
                *v = v.clamp(sc.u_lo, sc.u_hi);
            }
        }
        let d = sc.d.row_slice(k).to_vec();
        self.prediction = Some(self.model.step(&xc, &u, &d)?);
        self.prev = Some((x.to_vec(), u.clone(), d));
        Ok(u)
    }

    fn predicted(&self) -> Option<Vec<f64>> {
        self.prediction.clone()
    }

    fn nu(&self) -> usize {
        self.policy.dims.nu
    }
}

#[derive(Serialize, Deserialize)]
struct AdaptFile {
    format: String,
    version: u32,
    config: AdaptConfig,
    x_hat: Vec<f64>,
}

impl AdaptConfig {
    /// Writes the adapt-state file of a joint checkpoint bundle.
    pub fn save(&self, path: &Path, x_hat: &[f64]) -> Result<()> {
        let f = AdaptFile {
            format: "dlmpc-adapt".into(),
            version: 1,
            config: *self,
            x_hat: x_hat.to_vec(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&f)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(AdaptConfig, Vec<f64>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: AdaptFile = serde_json::from_str(&text)?;
        if f.format != "dlmpc-adapt" || f.version != 1 {
            return Err(Error::Schema(format!("expected dlmpc-adapt v1, found {} v{}", f.format, f.version)));
        }
        Ok((f.config, f.x_hat))
    }
}
