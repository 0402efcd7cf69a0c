//! Learnable dynamics cells: linear, ReLU recurrent, gated recurrent and the
//! stability-constrained state space model.
//!
//! Samples are stored as rows, so a batch step reads
//! `X+ = X Ãᵀ + U B̃ᵀ + D Ẽᵀ` for the affine cells.

use std::path::Path;

use rand::Rng as _;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

pub const DEFAULT_SSM_EPS: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lin,
    Rnn,
    Gru,
    Ssm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Lin, ModelKind::Rnn, ModelKind::Gru, ModelKind::Ssm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lin => "lin",
            ModelKind::Rnn => "rnn",
            ModelKind::Gru => "gru",
            ModelKind::Ssm => "ssm",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lin" => Ok(ModelKind::Lin),
            "rnn" => Ok(ModelKind::Rnn),
            "gru" => Ok(ModelKind::Gru),
            "ssm" => Ok(ModelKind::Ssm),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub nu: usize,
    pub nd: usize,
}

impl Dims {
    pub const BUILDING: Dims = Dims { nx: 4, nu: 1, nd: 3 };
}

/// `(Ã, B̃, Ẽ)` triple used by the linear and ReLU cells and by each GRU gate.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub a: Matrix,
    pub b: Matrix,
    pub e: Matrix,
}

impl LinearParams {
    pub fn new(a: Matrix, b: Matrix, e: Matrix) -> Result<Self> {
        let p = LinearParams { a, b, e };
        p.dims()?;
        Ok(p)
    }

    pub fn dims(&self) -> Result<Dims> {
        let nx = self.a.rows();
        if !self.a.is_square() || self.b.rows() != nx || self.e.rows() != nx {
            return Err(Error::dim(
                "linear params",
                format!(
                    "A {:?}, B {:?}, E {:?}",
                    self.a.shape(),
                    self.b.shape(),
                    self.e.shape()
                ),
            ));
        }
        Ok(Dims {
            nx,
            nu: self.b.cols(),
            nd: self.e.cols(),
        })
    }

    fn loose_dims(&self) -> Dims {
        Dims {
            nx: self.a.rows(),
            nu: self.b.cols(),
            nd: self.e.cols(),
        }
    }

    fn affine(&self, x: &Matrix, u: &Matrix, d: &Matrix) -> Result<Matrix> {
        let mut out = x.try_matmul_t(&self.a)?;
        out.add_assign_scaled(&u.try_matmul_t(&self.b)?, 1.0);
        out.add_assign_scaled(&d.try_matmul_t(&self.e)?, 1.0);
        Ok(out)
    }

    fn random(dims: Dims, a_scale: f64, rng: &mut Rng) -> Self {
        LinearParams {
            a: uniform(dims.nx, dims.nx, a_scale / (dims.nx as f64).sqrt(), rng),
            b: uniform(dims.nx, dims.nu, 0.1 / (dims.nu as f64).sqrt(), rng),
            e: uniform(dims.nx, dims.nd, 0.1 / (dims.nd as f64).sqrt(), rng),
        }
    }
}

/// Three gate triples: reset `w`, candidate `n`, update `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub gates: [LinearParams; 3],
}

/// `Ã = softmax_rows(Ã′) ⊙ (1 − ε σ(M′))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub a_raw: Matrix,
    pub m_raw: Matrix,
    pub eps: f64,
    pub b: Matrix,
    pub e: Matrix,
    /// Permits ε < 0, which lets row sums exceed one.
    pub allow_negative_eps: bool,
}

impl SsmParams {
    pub fn check_eps(&self) -> Result<()> {
        let lo_ok = self.eps >= 0.0 || self.allow_negative_eps;
        if !(lo_ok && self.eps < 1.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("ssm eps {} outside [0, 1)", self.eps)));
        }
        Ok(())
    }

    pub fn damping(&self) -> Result<Matrix> {
        self.check_eps()?;
        Ok(self.m_raw.map(|m| 1.0 - self.eps * sigmoid(m)))
    }

    pub fn materialize(&self) -> Result<Matrix> {
        let m = self.damping()?;
        softmax_rows(&self.a_raw).try_hadamard(&m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Lin(LinearParams),
    Rnn(LinearParams),
    Gru(GruParams),
    Ssm(SsmParams),
}

fn uniform(rows: usize, cols: usize, half_width: f64, rng: &mut Rng) -> Matrix {
    let dist = Uniform::new_inclusive(-half_width, half_width).expect("finite width");
    Matrix::from_fn(rows, cols, |_, _| rng.sample(dist))
}

/// Transition weights of the unconstrained cells start in a contracting regime.
const UNCONSTRAINED_A_SCALE: f64 = 0.5;

impl Model {
    pub fn init(kind: ModelKind, dims: Dims, eps: f64, rng: &mut Rng) -> Result<Model> {
        let model = match kind {
            ModelKind::Lin => Model::Lin(LinearParams::random(dims, UNCONSTRAINED_A_SCALE, rng)),
            ModelKind::Rnn => Model::Rnn(LinearParams::random(dims, UNCONSTRAINED_A_SCALE, rng)),
            ModelKind::Gru => Model::Gru(GruParams {
                gates: [
                    LinearParams::random(dims, UNCONSTRAINED_A_SCALE, rng),
                    LinearParams::random(dims, UNCONSTRAINED_A_SCALE, rng),
                    LinearParams::random(dims, UNCONSTRAINED_A_SCALE, rng),
                ],
            }),
            ModelKind::Ssm => {
                let a_raw = uniform(dims.nx, dims.nx, 1.0, rng);
                let m_raw = uniform(dims.nx, dims.nx, 1.0, rng);
                let p = LinearParams::random(dims, 0.0, rng);
                let ssm = SsmParams {
                    a_raw,
                    m_raw,
                    eps,
                    b: p.b,
                    e: p.e,
                    allow_negative_eps: false,
                };
                ssm.check_eps()?;
                Model::Ssm(ssm)
            }
        };
        Ok(model)
    }

    pub fn linear(a: Matrix, b: Matrix, e: Matrix) -> Result<Model> {
        Ok(Model::Lin(LinearParams::new(a, b, e)?))
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Lin(_) => ModelKind::Lin,
            Model::Rnn(_) => ModelKind::Rnn,
            Model::Gru(_) => ModelKind::Gru,
            Model::Ssm(_) => ModelKind::Ssm,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            Model::Lin(p) | Model::Rnn(p) => p.loose_dims(),
            Model::Gru(p) => p.gates[0].loose_dims(),
            Model::Ssm(p) => Dims {
                nx: p.a_raw.rows(),
                nu: p.b.cols(),
                nd: p.e.cols(),
            },
        }
    }

    /// Checks every parameter block against the dimensions of the first one.
    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Lin(p) | Model::Rnn(p) => p.dims().map(|_| ()),
            Model::Gru(g) => {
                let d0 = g.gates[0].dims()?;
                for gate in &g.gates[1..] {
                    if gate.dims()? != d0 {
                        return Err(Error::dim("gru params", "gate shapes differ"));
                    }
                }
                Ok(())
            }
            Model::Ssm(p) => {
                let nx = p.a_raw.rows();
                if !p.a_raw.is_square()
                    || p.m_raw.shape() != (nx, nx)
                    || p.b.rows() != nx
                    || p.e.rows() != nx
                {
                    return Err(Error::dim(
                        "ssm params",
                        format!(
                            "A' {:?}, M' {:?}, B {:?}, E {:?}",
                            p.a_raw.shape(),
                            p.m_raw.shape(),
                            p.b.shape(),
                            p.e.shape()
                        ),
                    ));
                }
                p.check_eps()
            }
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            Model::Lin(_) | Model::Rnn(_) => vec!["A", "B", "E"],
            Model::Gru(_) => vec!["A1", "B1", "E1", "A2", "B2", "E2", "A3", "B3", "E3"],
            Model::Ssm(_) => vec!["A_raw", "M_raw", "B", "E"],
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            Model::Lin(p) | Model::Rnn(p) => vec![&p.a, &p.b, &p.e],
            Model::Gru(g) => g.gates.iter().flat_map(|p| [&p.a, &p.b, &p.e]).collect(),
            Model::Ssm(p) => vec![&p.a_raw, &p.m_raw, &p.b, &p.e],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Model::Lin(p) | Model::Rnn(p) => vec![&mut p.a, &mut p.b, &mut p.e],
            Model::Gru(g) => g
                .gates
                .iter_mut()
                .flat_map(|p| [&mut p.a, &mut p.b, &mut p.e])
                .collect(),
            Model::Ssm(p) => vec![&mut p.a_raw, &mut p.m_raw, &mut p.b, &mut p.e],
        }
    }

    /// Effective state transition matrix; the GRU has none.
    pub fn transition_matrix(&self) -> Result<Matrix> {
        match self {
            Model::Lin(p) | Model::Rnn(p) => Ok(p.a.clone()),
            Model::Ssm(p) => p.materialize(),
            Model::Gru(_) => Err(Error::Unsupported(
                "gru has no single transition matrix".into(),
            )),
        }
    }

    /// Multiplies input and disturbance columns by the given factors.
    ///
    /// A model fitted on inputs divided by `s` becomes the equivalent model on
    /// raw inputs after `rescale_inputs(1/s)`. Exact for all four cells since
    /// inputs enter only through `B̃ u` and `Ẽ d`.
    pub fn rescale_inputs(&mut self, u_scale: &[f64], d_scale: &[f64]) -> Result<()> {
        let dims = self.dims();
        if u_scale.len() != dims.nu || d_scale.len() != dims.nd {
            return Err(Error::dim(
                "rescale_inputs",
                format!("{} / {} scales for {:?}", u_scale.len(), d_scale.len(), dims),
            ));
        }
        let scale_cols = |m: &mut Matrix, s: &[f64]| {
            for i in 0..m.rows() {
                for (v, f) in m.row_slice_mut(i).iter_mut().zip(s) {
                    *v *= f;
                }
            }
        };
        match self {
            Model::Lin(p) | Model::Rnn(p) => {
                scale_cols(&mut p.b, u_scale);
                scale_cols(&mut p.e, d_scale);
            }
            Model::Gru(g) => {
                for p in g.gates.iter_mut() {
                    scale_cols(&mut p.b, u_scale);
                    scale_cols(&mut p.e, d_scale);
                }
            }
            Model::Ssm(p) => {
                scale_cols(&mut p.b, u_scale);
                scale_cols(&mut p.e, d_scale);
            }
        }
        Ok(())
    }

    fn check_batch(&self, x: &Matrix, u: &Matrix, d: &Matrix) -> Result<()> {
        let dims = self.dims();
        let b = x.rows();
        if x.cols() != dims.nx
            || u.cols() != dims.nu
            || d.cols() != dims.nd
            || u.rows() != b
            || d.rows() != b
        {
            return Err(Error::dim(
                "model step",
                format!(
                    "x {:?}, u {:?}, d {:?} for {:?}",
                    x.shape(),
                    u.shape(),
                    d.shape(),
                    dims
                ),
            ));
        }
        Ok(())
    }

    /// One step for a batch of row samples.
    pub fn step_batch(&self, x: &Matrix, u: &Matrix, d: &Matrix) -> Result<Matrix> {
        self.check_batch(x, u, d)?;
        match self {
            Model::Lin(p) => p.affine(x, u, d),
            Model::Rnn(p) => Ok(p.affine(x, u, d)?.map(|v| v.max(0.0))),
            Model::Gru(g) => {
                let [g1, g2, g3] = &g.gates;
                let w = g1.affine(x, u, d)?.map(sigmoid);
                let ax = x.try_matmul_t(&g2.a)?.try_hadamard(&w)?;
                let mut n = u.try_matmul_t(&g2.b)?;
                n.add_assign_scaled(&d.try_matmul_t(&g2.e)?, 1.0);
                n.add_assign_scaled(&ax, 1.0);
                let n = n.map(f64::tanh);
                let z = g3.affine(x, u, d)?.map(sigmoid);
                let mut out = n;
                for ((o, zi), xi) in out
                    .as_mut_slice()
                    .iter_mut()
                    .zip(z.as_slice())
                    .zip(x.as_slice())
                {
                    *o = (1.0 - zi) * *o + zi * xi;
                }
                Ok(out)
            }
            Model::Ssm(p) => {
                let a = p.materialize()?;
                let mut out = x.try_matmul_t(&a)?;
                out.add_assign_scaled(&u.try_matmul_t(&p.b)?, 1.0);
                out.add_assign_scaled(&d.try_matmul_t(&p.e)?, 1.0);
                Ok(out)
            }
        }
    }

    pub fn step(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .step_batch(&Matrix::row(x), &Matrix::row(u), &Matrix::row(d))?
            .into_vec())
    }

    /// States `x̃_1..x̃_N` from `x0` under input rows `u` and disturbance rows `d`.
    pub fn rollout(&self, x0: &[f64], u: &Matrix, d: &Matrix) -> Result<Matrix> {
        if u.rows() != d.rows() || u.rows() == 0 {
            return Err(Error::Contract(format!(
                "rollout needs equal nonzero lengths, got {} inputs and {} disturbances",
                u.rows(),
                d.rows()
            )));
        }
        let stepper = self.stepper()?;
        let nx = self.dims().nx;
        if x0.len() != nx {
            return Err(Error::dim("rollout", format!("x0 has {} entries, expected {nx}", x0.len())));
        }
        let mut out = Matrix::zeros(u.rows(), nx);
        let mut x = x0.to_vec();
        for k in 0..u.rows() {
            x = stepper.step(&x, u.row_slice(k), d.row_slice(k))?;
            out.row_slice_mut(k).copy_from_slice(&x);
        }
        Ok(out)
    }

    /// A copy with the SSM transition matrix precomputed, for repeated stepping.
    pub fn stepper(&self) -> Result<Model> {
        self.validate()?;
        Ok(match self {
            Model::Ssm(p) => Model::Lin(LinearParams {
                a: p.materialize()?,
                b: p.b.clone(),
                e: p.e.clone(),
            }),
            other => other.clone(),
        })
    }

    /// Registers every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<ModelVars> {
        self.validate()?;
        let params: Vec<Var> = self.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
        let a_eff = match self {
            Model::Ssm(p) => {
                let soft = tape.softmax_rows(params[0])?;
                let sig = tape.sigmoid(params[1]);
                let scaled = tape.scale(sig, -p.eps);
                let damping = tape.add_scalar(scaled, 1.0);
                Some(tape.hadamard(soft, damping)?)
            }
            _ => None,
        };
        Ok(ModelVars {
            kind: self.kind(),
            dims: self.dims(),
            params,
            a_eff,
            inv_scale: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&ModelFile::from_model(self))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from_model(self))?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }
}

/// Tape handles for one registration of a [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub kind: ModelKind,
    pub dims: Dims,
    /// Same order as [`Model::param_names`].
    pub params: Vec<Var>,
    a_eff: Option<Var>,
    /// Reciprocal input and disturbance scales applied before every step.
    inv_scale: Option<(Vec<f64>, Vec<f64>)>,
}

impl ModelVars {
    fn affine(&self, tape: &mut Tape, a: Var, b: Var, e: Var, x: Var, u: Var, d: Var) -> Result<Var> {
        let xa = tape.matmul_t(x, a)?;
        let ub = tape.matmul_t(u, b)?;
        let de = tape.matmul_t(d, e)?;
        let s = tape.add(xa, ub)?;
        tape.add(s, de)
    }

    /// Makes [`ModelVars::step`] see `u / u_scale` and `d / d_scale`, so the
    /// parameters live in scaled input coordinates (undo with
    /// [`Model::rescale_inputs`]).
    pub fn with_input_scaling(mut self, u_scale: &[f64], d_scale: &[f64]) -> Result<Self> {
        if u_scale.len() != self.dims.nu || d_scale.len() != self.dims.nd {
            return Err(Error::dim(
                "input_scaling",
                format!("{} / {} scales for {:?}", u_scale.len(), d_scale.len(), self.dims),
            ));
        }
        let inv = |s: &[f64]| s.iter().map(|v| 1.0 / v).collect::<Vec<_>>();
        self.inv_scale = Some((inv(u_scale), inv(d_scale)));
        Ok(self)
    }

    /// Batch step on the tape; `x`, `u`, `d` hold one sample per row.
    pub fn step(&self, tape: &mut Tape, x: Var, u: Var, d: Var) -> Result<Var> {
        let (u, d) = match &self.inv_scale {
            Some((iu, id)) => (tape.scale_cols(u, iu)?, tape.scale_cols(d, id)?),
            None => (u, d),
        };
        let p = &self.params;
        match self.kind {
            ModelKind::Lin => self.affine(tape, p[0], p[1], p[2], x, u, d),
            ModelKind::Rnn => {
                let s = self.affine(tape, p[0], p[1], p[2], x, u, d)?;
                Ok(tape.relu(s))
            }
            ModelKind::Gru => {
                let pre_w = self.affine(tape, p[0], p[1], p[2], x, u, d)?;
                let w = tape.sigmoid(pre_w);
                let ax = tape.matmul_t(x, p[3])?;
                let wax = tape.hadamard(w, ax)?;
                let ub = tape.matmul_t(u, p[4])?;
                let de = tape.matmul_t(d, p[5])?;
                let s = tape.add(ub, de)?;
                let s = tape.add(s, wax)?;
                let n = tape.tanh(s);
                let pre_z = self.affine(tape, p[6], p[7], p[8], x, u, d)?;
                let z = tape.sigmoid(pre_z);
                // (1 - z) ⊙ n + z ⊙ x = n + z ⊙ (x - n)
                let x_minus_n = tape.sub(x, n)?;
                let zx = tape.hadamard(z, x_minus_n)?;
                tape.add(n, zx)
            }
            ModelKind::Ssm => {
                let a = self.a_eff.expect("ssm registration materializes A");
                self.affine(tape, a, p[2], p[3], x, u, d)
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct NamedMatrix {
    name: String,
    value: Matrix,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    kind: ModelKind,
    nx: usize,
    nu: usize,
    nd: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[serde(default)]
    allow_negative_eps: bool,
    params: Vec<NamedMatrix>,
}

const MODEL_FORMAT: &str = "dlmpc-model";
const MODEL_VERSION: u32 = 1;

impl ModelFile {
    fn from_model(m: &Model) -> Self {
        let dims = m.dims();
        let (eps, allow_negative_eps) = match m {
            Model::Ssm(p) => (Some(p.eps), p.allow_negative_eps),
            _ => (None, false),
        };
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            kind: m.kind(),
            nx: dims.nx,
            nu: dims.nu,
            nd: dims.nd,
            eps,
            allow_negative_eps,
            params: m
                .param_names()
                .into_iter()
                .zip(m.params())
                .map(|(n, v)| NamedMatrix {
                    name: n.into(),
                    value: v.clone(),
                })
                .collect(),
        }
    }

    fn into_model(self) -> Result<Model> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        let dims = Dims {
            nx: self.nx,
            nu: self.nu,
            nd: self.nd,
        };
        let mut rng = crate::rng::substream(0, "placeholder");
        let mut model = Model::init(self.kind, dims, self.eps.unwrap_or(0.0), &mut rng)?;
        let names = model.param_names();
        if names.len() != self.params.len() {
            return Err(Error::Schema(format!(
                "{} model needs {} parameter blocks, found {}",
                self.kind,
                names.len(),
                self.params.len()
            )));
        }
        for ((slot, name), stored) in model.params_mut().into_iter().zip(names).zip(self.params) {
            if stored.name != name {
                return Err(Error::Schema(format!("expected block {name}, found {}", stored.name)));
            }
            if stored.value.shape() != slot.shape() {
                return Err(Error::Schema(format!(
                    "block {name} has shape {:?}, expected {:?}",
                    stored.value.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.value;
        }
        if let Model::Ssm(p) = &mut model {
            p.eps = self
                .eps
                .ok_or_else(|| Error::Schema("ssm model without eps".into()))?;
            p.allow_negative_eps = self.allow_negative_eps;
        }
        model.validate()?;
        Ok(model)
    }
}
