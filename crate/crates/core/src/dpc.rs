//! Neural constrained control policy trained by backpropagating an MPC-style
//! loss through a frozen dynamics model.
//!
//! The policy sees `ξ = [x, d, r, x̲, x̄, u̲, ū]` and returns `u`. Bound
//! violations are measured with ReLU slacks so the whole loss stays
//! differentiable; infinite bounds simply never produce slack.

use std::path::Path;

use rand::Rng as _;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{BoundsConfig, TRAIN_R_RANGE, TRAIN_X_RANGE};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::{Dims, Model, ModelVars};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{substream, Rng};

/// Weights of the control loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub q_r: f64,
    pub q_u: f64,
    /// State slack weight λ.
    pub q_sx: f64,
    /// Input slack weight μ.
    pub q_su: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            q_r: 20.0,
            q_u: 1e-6,
            q_sx: 50.0,
            q_su: 5e-7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.q_r, self.q_u, self.q_sx, self.q_su];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Which part of the imagined state is compared with the reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tracking {
    /// Only the measured state against a scalar reference.
    #[default]
    Observed,
    /// Every state against a reference of the same length.
    Full,
}

impl std::str::FromStr for Tracking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "observed" => Ok(Tracking::Observed),
            "full" => Ok(Tracking::Full),
            _ => Err(Error::Config(format!("unknown tracking mode '{s}' (observed|full)"))),
        }
    }
}

/// Tracking mode plus the index of the measured state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackingTarget {
    pub mode: Tracking,
    pub observed: usize,
}

impl TrackingTarget {
    pub fn observed(index: usize) -> Self {
        TrackingTarget {
            mode: Tracking::Observed,
            observed: index,
        }
    }

    /// Length of the reference vector.
    pub fn nr(&self, nx: usize) -> usize {
        match self.mode {
            Tracking::Observed => 1,
            Tracking::Full => nx,
        }
    }
}

/// `ReLU(lo − x) + ReLU(x − hi)`, i.e. the distance to the violated bound.
pub fn slack(x: &[f64], lo: &[f64], hi: &[f64]) -> Result<Vec<f64>> {
    if x.len() != lo.len() || x.len() != hi.len() {
        return Err(Error::dim(
            "slack",
            format!("x {} lo {} hi {}", x.len(), lo.len(), hi.len()),
        ));
    }
    if let Some(i) = (0..x.len()).find(|&i| lo[i] > hi[i]) {
        return Err(Error::Config(format!("slack bound {i}: lo {} > hi {}", lo[i], hi[i])));
    }
    Ok(x
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&l, &h))| (l - v).max(0.0) + (v - h).max(0.0))
        .collect())
}

/// Slack on the tape. `lo` and `hi` are constants with the shape of `x`.
pub fn slack_on_tape(tape: &mut Tape, x: Var, lo: &Matrix, hi: &Matrix) -> Result<Var> {
    if lo.shape() != tape.shape(x) || hi.shape() != tape.shape(x) {
        return Err(Error::dim(
            "slack",
            format!("x {:?} lo {:?} hi {:?}", tape.shape(x), lo.shape(), hi.shape()),
        ));
    }
    if lo.as_slice().iter().zip(hi.as_slice()).any(|(l, h)| l > h) {
        return Err(Error::Config("slack lower bound above upper bound".into()));
    }
    let lo = tape.constant(lo.clone());
    let hi = tape.constant(hi.clone());
    let below = tape.sub(lo, x)?;
    let below = tape.relu(below);
    let above = tape.sub(x, hi)?;
    let above = tape.relu(above);
    tape.add(below, above)
}

/// Fixed affine normalization of the policy features. Non-finite raw
/// values (infinite bounds) map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureNorm {
    pub fn apply(&self, raw: &[f64], out: &mut [f64]) {
        for (i, (o, v)) in out.iter_mut().zip(raw).enumerate() {
            *o = if v.is_finite() {
                (v - self.center[i]) / self.scale[i]
            } else {
                0.0
            };
        }
    }

    fn apply_matrix(&self, raw: &Matrix, offset: usize) -> Matrix {
        let mut out = Matrix::zeros(raw.rows(), raw.cols());
        let sub = FeatureNorm {
            center: self.center[offset..offset + raw.cols()].to_vec(),
            scale: self.scale[offset..offset + raw.cols()].to_vec(),
        };
        for i in 0..raw.rows() {
            sub.apply(raw.row_slice(i), out.row_slice_mut(i));
        }
        out
    }
}

/// Two-layer ReLU policy `u = s ⊙ (W₂ ReLU(W₁ ξ̂ + b₁) + b₂)` where `ξ̂` is the
/// normalized feature vector and `s` a fixed per-input output scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub norm: FeatureNorm,
    pub u_scale: Vec<f64>,
    pub dims: Dims,
    pub tracking: TrackingTarget,
    /// Imagination horizon the policy was trained for.
    pub horizon: usize,
}

pub const POLICY_PARAM_NAMES: [&str; 4] = ["W1", "b1", "W2", "b2"];

/// `|ξ| = nx + nd + nr + 2 nx + 2 nu`.
pub fn feature_dim(dims: Dims, nr: usize) -> usize {
    dims.nx + dims.nd + nr + 2 * dims.nx + 2 * dims.nu
}

/// Normalization used for every trained policy: states and state bounds
/// relative to the sampling range, disturbances by their observed range,
/// references by their sampling range, input bounds by the output scale.
pub fn default_feature_norm(dims: Dims, nr: usize, disturbances: &Matrix, u_scale: &[f64]) -> FeatureNorm {
    let xc = 0.5 * (TRAIN_X_RANGE.0 + TRAIN_X_RANGE.1);
    let xs = 0.5 * (TRAIN_X_RANGE.1 - TRAIN_X_RANGE.0);
    let rc = 0.5 * (TRAIN_R_RANGE.0 + TRAIN_R_RANGE.1);
    let rs = 0.5 * (TRAIN_R_RANGE.1 - TRAIN_R_RANGE.0);
    let mut center = Vec::new();
    let mut scale = Vec::new();
    let mut push = |c: f64, s: f64, n: usize| {
        center.extend(std::iter::repeat_n(c, n));
        scale.extend(std::iter::repeat_n(s, n));
    };
    push(xc, xs, dims.nx);
    for j in 0..dims.nd {
        let col = disturbances.col_vec(j);
        let (lo, hi) = col
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let (c, s) = if lo.is_finite() && hi > lo {
            (0.5 * (lo + hi), 0.5 * (hi - lo))
        } else {
            (0.0, 1.0)
        };
        push(c, s, 1);
    }
    push(rc, rs, nr);
    push(xc, xs, 2 * dims.nx);
    for _ in 0..2 {
        for &s in u_scale {
            push(0.0, s, 1);
        }
    }
    FeatureNorm { center, scale }
}

/// Largest finite input-bound magnitude per input, or 1.
pub fn output_scale(bounds: &BoundsConfig, nu: usize) -> Vec<f64> {
    let m = [bounds.u_lo, bounds.u_hi]
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0_f64, |a, v| a.max(v.abs()));
    vec![if m > 0.0 { m } else { 1.0 }; nu]
}

impl Policy {
    /// Uniform `±1/√fan_in` initialization of both layers.
    pub fn init(
        dims: Dims,
        tracking: TrackingTarget,
        hidden: usize,
        norm: FeatureNorm,
        u_scale: Vec<f64>,
        horizon: usize,
        rng: &mut Rng,
    ) -> Result<Policy> {
        let nin = feature_dim(dims, tracking.nr(dims.nx));
        if hidden == 0 {
            return Err(Error::Config("policy hidden width must be positive".into()));
        }
        if norm.center.len() != nin || norm.scale.len() != nin || u_scale.len() != dims.nu {
            return Err(Error::dim(
                "policy_init",
                format!("feature norm {} / output scale {} for {nin} features", norm.center.len(), u_scale.len()),
            ));
        }
        let mut draw = |rows: usize, cols: usize, fan_in: usize| -> Result<Matrix> {
            let k = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-k, k).map_err(|e| Error::Config(e.to_string()))?;
            Ok(Matrix::from_fn(rows, cols, |_, _| rng.sample(dist)))
        };
        let w1 = draw(hidden, nin, nin)?;
        let b1 = draw(1, hidden, nin)?;
        let w2 = draw(dims.nu, hidden, hidden)?;
        let b2 = draw(1, dims.nu, hidden)?;
        let p = Policy {
            w1,
            b1,
            w2,
            b2,
            norm,
            u_scale,
            dims,
            tracking,
            horizon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.dims, self.tracking.nr(self.dims.nx))
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let nin = self.feature_dim();
        let h = self.w1.rows();
        let nu = self.dims.nu;
        let ok = self.w1.shape() == (h, nin)
            && self.b1.shape() == (1, h)
            && self.w2.shape() == (nu, h)
            && self.b2.shape() == (1, nu)
            && self.norm.center.len() == nin
            && self.norm.scale.len() == nin
            && self.u_scale.len() == nu
            && self.tracking.observed < self.dims.nx;
        if !ok {
            return Err(Error::dim(
                "policy",
                format!(
                    "W1 {:?} b1 {:?} W2 {:?} b2 {:?} for {nin} features, {nu} inputs",
                    self.w1.shape(),
                    self.b1.shape(),
                    self.w2.shape(),
                    self.b2.shape()
                ),
            ));
        }
        if self.norm.scale.iter().chain(&self.u_scale).any(|s| !(s.is_finite() && *s != 0.0)) {
            return Err(Error::Config("policy scales must be finite and nonzero".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Raw feature vector `[x, d, r, x̲, x̄, u̲, ū]`.
    #[allow(clippy::too_many_arguments)]
    pub fn features(
        &self,
        x: &[f64],
        d: &[f64],
        r: &[f64],
        x_lo: &[f64],
        x_hi: &[f64],
        u_lo: &[f64],
        u_hi: &[f64],
    ) -> Result<Vec<f64>> {
        let parts = [x, d, r, x_lo, x_hi, u_lo, u_hi];
        let xi: Vec<f64> = parts.concat();
        if xi.len() != self.feature_dim() {
            return Err(Error::dim(
                "policy_features",
                format!("{} features, policy expects {}", xi.len(), self.feature_dim()),
            ));
        }
        Ok(xi)
    }

    /// Plain forward pass on a raw feature vector; pure and allocation-light.
    pub fn evaluate(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let nin = self.feature_dim();
        if xi.len() != nin {
            return Err(Error::dim("policy_evaluate", format!("{} features, expected {nin}", xi.len())));
        }
        let mut z = vec![0.0; nin];
        self.norm.apply(xi, &mut z);
        let h = self.hidden();
        let mut hid = vec![0.0; h];
        for (i, hv) in hid.iter_mut().enumerate() {
            let w = self.w1.row_slice(i);
            let s: f64 = w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + self.b1[(0, i)];
            *hv = s.max(0.0);
        }
        Ok((0..self.dims.nu)
            .map(|j| {
                let w = self.w2.row_slice(j);
                let s: f64 = w.iter().zip(&hid).map(|(a, b)| a * b).sum::<f64>() + self.b2[(0, j)];
                s * self.u_scale[j]
            })
            .collect())
    }

    pub fn register(&self, tape: &mut Tape) -> Result<PolicyVars> {
        self.validate()?;
        Ok(PolicyVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PolicyFile::from_policy(self))?)
    }

    pub fn from_json(text: &str) -> Result<Policy> {
        let f: PolicyFile = serde_json::from_str(text)?;
        f.into_policy()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Policy> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Policy::from_json(&text)
    }
}

const POLICY_FORMAT: &str = "dlmpc-policy";
const POLICY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format: String,
    version: u32,
    nx: usize,
    nu: usize,
    nd: usize,
    tracking: TrackingTarget,
    horizon: usize,
    norm: FeatureNorm,
    u_scale: Vec<f64>,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

impl PolicyFile {
    fn from_policy(p: &Policy) -> Self {
        PolicyFile {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            nx: p.dims.nx,
            nu: p.dims.nu,
            nd: p.dims.nd,
            tracking: p.tracking,
            horizon: p.horizon,
            norm: p.norm.clone(),
            u_scale: p.u_scale.clone(),
            w1: p.w1.clone(),
            b1: p.b1.clone(),
            w2: p.w2.clone(),
            b2: p.b2.clone(),
        }
    }

    fn into_policy(self) -> Result<Policy> {
        if self.format != POLICY_FORMAT || self.version != POLICY_VERSION {
            return Err(Error::Schema(format!(
                "expected {POLICY_FORMAT} v{POLICY_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        let p = Policy {
            w1: self.w1,
            b1: self.b1,
            w2: self.w2,
            b2: self.b2,
            norm: self.norm,
            u_scale: self.u_scale,
            dims: Dims {
                nx: self.nx,
                nu: self.nu,
                nd: self.nd,
            },
            tracking: self.tracking,
            horizon: self.horizon,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Tape handles of the policy parameters.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl PolicyVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Batch forward where the state part of `ξ` is a tape variable and the
    /// remaining features are constants.
    pub fn forward(&self, tape: &mut Tape, policy: &Policy, x: Var, ctx: &StepContext) -> Result<Var> {
        let nx = policy.dims.nx;
        let (rows, cols) = tape.shape(x);
        if cols != nx || ctx.rows() != rows {
            return Err(Error::dim(
                "policy_forward",
                format!("x {:?} with {} context rows, nx {nx}", (rows, cols), ctx.rows()),
            ));
        }
        let center = Matrix::row(&policy.norm.center[..nx].iter().map(|c| -c).collect::<Vec<_>>());
        let center = tape.constant(center);
        let xc = tape.add_row(x, center)?;
        let inv: Vec<f64> = policy.norm.scale[..nx].iter().map(|s| 1.0 / s).collect();
        let xn = tape.scale_cols(xc, &inv)?;
        let rest = ctx.rest_features(policy)?;
        let rest = tape.constant(rest);
        let xi = tape.concat_cols(&[xn, rest])?;
        let pre = tape.matmul_t(xi, self.w1)?;
        let pre = tape.add_row(pre, self.b1)?;
        let h = tape.relu(pre);
        let out = tape.matmul_t(h, self.w2)?;
        let out = tape.add_row(out, self.b2)?;
        tape.scale_cols(out, &policy.u_scale)
    }
}

/// Exogenous part of one imagination step, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct StepContext {
    pub d: Matrix,
    /// Reference for the next state, fed to the policy and tracked.
    pub r: Matrix,
    pub x_lo: Matrix,
    pub x_hi: Matrix,
    pub u_lo: Matrix,
    pub u_hi: Matrix,
}

impl StepContext {
    pub fn rows(&self) -> usize {
        self.d.rows()
    }

    /// Single-sample context.
    #[allow(clippy::too_many_arguments)]
    pub fn single(d: &[f64], r: &[f64], x_lo: &[f64], x_hi: &[f64], u_lo: &[f64], u_hi: &[f64]) -> Self {
        StepContext {
            d: Matrix::row(d),
            r: Matrix::row(r),
            x_lo: Matrix::row(x_lo),
            x_hi: Matrix::row(x_hi),
            u_lo: Matrix::row(u_lo),
            u_hi: Matrix::row(u_hi),
        }
    }

    /// Normalized `[d, r, x̲, x̄, u̲, ū]`.
    fn rest_features(&self, policy: &Policy) -> Result<Matrix> {
        let raw = Matrix::try_concat_cols(&[&self.d, &self.r, &self.x_lo, &self.x_hi, &self.u_lo, &self.u_hi])?;
        if raw.cols() + policy.dims.nx != policy.feature_dim() {
            return Err(Error::dim(
                "policy_features",
                format!("{} context features + {} states, policy expects {}", raw.cols(), policy.dims.nx, policy.feature_dim()),
            ));
        }
        Ok(policy.norm.apply_matrix(&raw, policy.dims.nx))
    }
}

/// Result of one policy-plus-model step on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PolicyStepOutput {
    pub u: Var,
    pub x_next: Var,
    pub sx: Var,
    pub su: Var,
}

/// One step of the policy: features, control, input slack, imagined next
/// state through the model, state slack on that state.
pub fn mpc_policy_step(
    tape: &mut Tape,
    pv: &PolicyVars,
    policy: &Policy,
    mv: &ModelVars,
    x: Var,
    ctx: &StepContext,
) -> Result<PolicyStepOutput> {
    if mv.dims != policy.dims {
        return Err(Error::dim(
            "mpc_policy_step",
            format!("model {:?} vs policy {:?}", mv.dims, policy.dims),
        ));
    }
    let u = pv.forward(tape, policy, x, ctx)?;
    let su = slack_on_tape(tape, u, &ctx.u_lo, &ctx.u_hi)?;
    let d = tape.constant(ctx.d.clone());
    let x_next = mv.step(tape, x, u, d)?;
    let sx = slack_on_tape(tape, x_next, &ctx.x_lo, &ctx.x_hi)?;
    Ok(PolicyStepOutput { u, x_next, sx, su })
}

/// Tracking error variable of one step.
pub(crate) fn tracking_error(tape: &mut Tape, x_next: Var, r: &Matrix, target: TrackingTarget) -> Result<Var> {
    let tracked = match target.mode {
        Tracking::Observed => tape.slice_cols(x_next, target.observed, 1)?,
        Tracking::Full => x_next,
    };
    let r = tape.constant(r.clone());
    tape.sub(r, tracked)
}

/// Batch- and horizon-averaged control loss
/// `Q_r‖r − x̃‖² + Q_u‖u‖² + λ‖sˣ‖² + μ‖sᵘ‖²`.
pub fn policy_loss(
    tape: &mut Tape,
    outputs: &[PolicyStepOutput],
    r: &[Matrix],
    w: &LossWeights,
    target: TrackingTarget,
) -> Result<Var> {
    if outputs.is_empty() || outputs.len() != r.len() {
        return Err(Error::Contract(format!(
            "policy_loss needs matching non-empty steps: {} outputs, {} references",
            outputs.len(),
            r.len()
        )));
    }
    let batch = tape.shape(outputs[0].u).0 as f64;
    let norm = 1.0 / (batch * outputs.len() as f64);
    let mut total: Option<Var> = None;
    for (o, rk) in outputs.iter().zip(r) {
        let e = tracking_error(tape, o.x_next, rk, target)?;
        let terms = [(e, w.q_r), (o.u, w.q_u), (o.sx, w.q_sx), (o.su, w.q_su)];
        for (v, weight) in terms {
            let sq = tape.sum_sq(v);
            let t = tape.scale(sq, weight * norm);
            total = Some(match total {
                Some(acc) => tape.add(acc, t)?,
                None => t,
            });
        }
    }
    Ok(total.expect("at least one step"))
}

/// How training tuples are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub batch: usize,
    pub x_range: (f64, f64),
    pub r_range: (f64, f64),
    /// Imagination steps per sample.
    pub horizon: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            batch: crate::data::SAMPLES_PER_WEEK,
            x_range: TRAIN_X_RANGE,
            r_range: TRAIN_R_RANGE,
            horizon: 1,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.horizon == 0 {
            return Err(Error::Config("sampling batch and horizon must be positive".into()));
        }
        for (name, (lo, hi)) in [("x_range", self.x_range), ("r_range", self.r_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("{name} must be a finite increasing pair, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// Batch of sampled initial states and per-step contexts.
#[derive(Clone, Debug)]
pub struct ControlBatch {
    pub x0: Matrix,
    pub steps: Vec<StepContext>,
    /// Row of the disturbance table used for the first step of each sample.
    pub start: Vec<usize>,
}

/// Draws control batches from a table of disturbance rows. Bounds follow the
/// time of day of the drawn disturbance row.
#[derive(Clone, Debug)]
pub struct ControlSampler<'a> {
    pub disturbances: &'a Matrix,
    /// Absolute sample index of the first disturbance row (for time-varying bounds).
    pub offset: usize,
    pub bounds: BoundsConfig,
    pub sampling: SamplingConfig,
    pub dims: Dims,
    pub target: TrackingTarget,
}

impl ControlSampler<'_> {
    fn check(&self) -> Result<()> {
        self.sampling.validate()?;
        self.bounds.validate()?;
        if self.disturbances.cols() != self.dims.nd {
            return Err(Error::dim(
                "control_sampler",
                format!("{} disturbance columns, model expects {}", self.disturbances.cols(), self.dims.nd),
            ));
        }
        if self.disturbances.rows() <= self.sampling.horizon {
            return Err(Error::Config(format!(
                "need more than {} disturbance rows, got {}",
                self.sampling.horizon,
                self.disturbances.rows()
            )));
        }
        Ok(())
    }

    pub fn state_bounds(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let nx = self.dims.nx;
        let mut lo = vec![f64::NEG_INFINITY; nx];
        let mut hi = vec![f64::INFINITY; nx];
        lo[self.target.observed] = self.bounds.x_lo_at(k);
        hi[self.target.observed] = self.bounds.x_hi;
        (lo, hi)
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<ControlBatch> {
        self.check()?;
        let s = &self.sampling;
        let (nx, nu, nd) = (self.dims.nx, self.dims.nu, self.dims.nd);
        let nr = self.target.nr(nx);
        let xd = Uniform::new(s.x_range.0, s.x_range.1).map_err(|e| Error::Config(e.to_string()))?;
        let rd = Uniform::new(s.r_range.0, s.r_range.1).map_err(|e| Error::Config(e.to_string()))?;
        let last = self.disturbances.rows() - s.horizon;
        let b = s.batch;
        let mut x0 = Matrix::zeros(b, nx);
        let mut start = Vec::with_capacity(b);
        let mut steps: Vec<StepContext> = (0..s.horizon)
            .map(|_| StepContext {
                d: Matrix::zeros(b, nd),
                r: Matrix::zeros(b, nr),
                x_lo: Matrix::zeros(b, nx),
                x_hi: Matrix::zeros(b, nx),
                u_lo: Matrix::filled(b, nu, self.bounds.u_lo),
                u_hi: Matrix::filled(b, nu, self.bounds.u_hi),
            })
            .collect();
        for i in 0..b {
            for v in x0.row_slice_mut(i) {
                *v = rng.sample(xd);
            }
            let k0 = rng.random_range(0..last);
            start.push(k0);
            for (k, ctx) in steps.iter_mut().enumerate() {
                for v in ctx.r.row_slice_mut(i) {
                    *v = rng.sample(rd);
                }
                ctx.d.row_slice_mut(i).copy_from_slice(self.disturbances.row_slice(k0 + k));
                let (lo, hi) = self.state_bounds(self.offset + k0 + k);
                ctx.x_lo.row_slice_mut(i).copy_from_slice(&lo);
                ctx.x_hi.row_slice_mut(i).copy_from_slice(&hi);
            }
        }
        Ok(ControlBatch { x0, steps, start })
    }
}

/// Unrolls the policy for every step of the batch.
pub fn imagine(
    tape: &mut Tape,
    pv: &PolicyVars,
    policy: &Policy,
    mv: &ModelVars,
    x0: Var,
    steps: &[StepContext],
) -> Result<Vec<PolicyStepOutput>> {
    let mut x = x0;
    let mut out = Vec::with_capacity(steps.len());
    for ctx in steps {
        let o = mpc_policy_step(tape, pv, policy, mv, x, ctx)?;
        x = o.x_next;
        out.push(o);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainConfig {
    pub weights: LossWeights,
    pub sampling: SamplingConfig,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub tracking: Tracking,
    /// Hidden width; `10 · horizon` when unset.
    pub hidden: Option<usize>,
    pub bounds: BoundsConfig,
    /// Validation loss is computed every this many epochs.
    pub eval_every: usize,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            weights: LossWeights::default(),
            sampling: SamplingConfig::default(),
            epochs: 30_000,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
            tracking: Tracking::Observed,
            hidden: None,
            bounds: BoundsConfig::default(),
            eval_every: 100,
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.sampling.validate()?;
        self.optimizer.validate()?;
        self.bounds.validate()?;
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(10 * self.sampling.horizon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub curve: Vec<LossPoint>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss";

    pub fn csv_rows(&self) -> Vec<String> {
        self.curve
            .iter()
            .map(|p| format!("{},{},{}", p.epoch, p.train, p.val))
            .collect()
    }
}

/// Fresh policy for `model`-sized problems with the default normalization.
pub fn initial_policy(dims: Dims, observed: usize, disturbances: &Matrix, cfg: &PolicyTrainConfig) -> Result<Policy> {
    let target = TrackingTarget {
        mode: cfg.tracking,
        observed,
    };
    let u_scale = output_scale(&cfg.bounds, dims.nu);
    let norm = default_feature_norm(dims, target.nr(dims.nx), disturbances, &u_scale);
    let mut rng = substream(cfg.seed, "policy-init");
    Policy::init(dims, target, cfg.hidden_width(), norm, u_scale, cfg.sampling.horizon, &mut rng)
}

pub(crate) fn policy_grads(
    grads: &crate::autodiff::Gradients,
    pv: &PolicyVars,
) -> [Matrix; 4] {
    pv.all().map(|v| grads.get(v))
}

pub(crate) fn apply_policy_step(opt: &mut Optimizer, policy: &mut Policy, grads: &[Matrix; 4]) -> Result<()> {
    let [w1, b1, w2, b2] = policy.params_mut();
    let mut params: [(&str, &mut Matrix); 4] = [
        (POLICY_PARAM_NAMES[0], w1),
        (POLICY_PARAM_NAMES[1], b1),
        (POLICY_PARAM_NAMES[2], w2),
        (POLICY_PARAM_NAMES[3], b2),
    ];
    let g: Vec<&Matrix> = grads.iter().collect();
    opt.step(&mut params, &g)
}

/// Loss of `policy` through a frozen `model` on one batch, without gradients.
pub fn batch_loss(
    model: &Model,
    policy: &Policy,
    batch: &ControlBatch,
    w: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mv = model.register(&mut tape)?;
    let pv = policy.register(&mut tape)?;
    let x0 = tape.constant(batch.x0.clone());
    let outs = imagine(&mut tape, &pv, policy, &mv, x0, &batch.steps)?;
    let refs: Vec<Matrix> = batch.steps.iter().map(|s| s.r.clone()).collect();
    let loss = policy_loss(&mut tape, &outs, &refs, w, policy.tracking)?;
    Ok(tape.scalar(loss))
}

/// Trains a policy against a frozen model on batches drawn from
/// `disturbances` (rows starting at absolute sample `offset`). Returns the
/// snapshot with the lowest loss on a fixed validation batch.
pub fn train_policy(
    model: &Model,
    observed: usize,
    disturbances: &Matrix,
    offset: usize,
    cfg: &PolicyTrainConfig,
) -> Result<(Policy, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    let dims = model.dims();
    let policy = initial_policy(dims, observed, disturbances, cfg)?;
    let sampler = ControlSampler {
        disturbances,
        offset,
        bounds: cfg.bounds,
        sampling: cfg.sampling,
        dims,
        target: policy.tracking,
    };
    let frozen = model.stepper()?;
    run_policy_training(&frozen, policy, &sampler, cfg)
}

pub(crate) fn run_policy_training(
    model: &Model,
    mut policy: Policy,
    sampler: &ControlSampler<'_>,
    cfg: &PolicyTrainConfig,
) -> Result<(Policy, TrainReport)> {
    let mut rng = substream(cfg.seed, "sampling");
    let val_batch = sampler.sample(&mut substream(cfg.seed, "validation"))?;
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut best = policy.clone();
    let mut best_val = batch_loss(model, &policy, &val_batch, &cfg.weights)?;
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        best_val,
        curve: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        let batch = sampler.sample(&mut rng)?;
        let mut tape = Tape::new();
        let mv = model.register(&mut tape)?;
        let pv = policy.register(&mut tape)?;
        let x0 = tape.constant(batch.x0.clone());
        let outs = imagine(&mut tape, &pv, &policy, &mv, x0, &batch.steps)?;
        let refs: Vec<Matrix> = batch.steps.iter().map(|s| s.r.clone()).collect();
        let loss = policy_loss(&mut tape, &outs, &refs, &cfg.weights, policy.tracking)?;
        let train = tape.scalar(loss);
        if !train.is_finite() {
            return Err(Error::Training {
                epoch,
                detail: format!("non-finite policy loss {train}"),
            });
        }
        let grads = tape.backward(loss)?;
        let g = policy_grads(&grads, &pv);
        apply_policy_step(&mut opt, &mut policy, &g).map_err(|e| Error::Training {
            epoch,
            detail: e.to_string(),
        })?;
        report.epochs_run = epoch;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let val = batch_loss(model, &policy, &val_batch, &cfg.weights)?;
            report.curve.push(LossPoint { epoch, train, val });
            if val < best_val {
                best_val = val;
                best = policy.clone();
                report.best_epoch = epoch;
                report.best_val = val;
            }
        }
    }
    Ok((best, report))
}
