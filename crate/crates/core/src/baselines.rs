//! Classical comparators: discrete LQR and LQI through the Riccati equation,
//! and receding-horizon MPC solved online as a dense soft-constrained QP.

use serde::{Deserialize, Serialize};

use crate::dpc::LossWeights;
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::plant::PlantModel;

pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITER: usize = 100_000;

/// Stabilizing solution of `P = AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q` by fixed-point
/// iteration from `P = Q`. Stops when `‖ΔP‖∞ < 1e-12 · max(1, ‖P‖∞)`.
pub fn dare_solve(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if !a.is_square() || b.rows() != n || q.shape() != (n, n) || r.shape() != (b.cols(), b.cols()) {
        return Err(Error::dim(
            "dare_solve",
            format!("A {:?} B {:?} Q {:?} R {:?}", a.shape(), b.shape(), q.shape(), r.shape()),
        ));
    }
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let next = riccati_map(&p, a, b, q, r)?;
        let delta = (&next - &p).norm_inf();
        p = next;
        if !p.is_finite() {
            break;
        }
        if delta < DARE_TOL * p.norm_inf().max(1.0) {
            return Ok(p);
        }
    }
    Err(Error::Numeric(format!(
        "Riccati iteration did not converge in {DARE_MAX_ITER} steps (pair may not be stabilizable)"
    )))
}

/// One application of the Riccati map, symmetrized.
pub fn riccati_map(p: &Matrix, a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let pa = p.try_matmul(a)?;
    let pb = p.try_matmul(b)?;
    let atpa = a.try_t_matmul(&pa)?;
    let btpa = b.try_t_matmul(&pa)?;
    let s = r.try_add(&b.try_t_matmul(&pb)?)?;
    let k = s.solve(&btpa)?;
    let corr = btpa.try_t_matmul(&k)?;
    Ok(atpa.try_sub(&corr)?.try_add(q)?.symmetrize())
}

/// `‖P − Ric(P)‖∞`.
pub fn riccati_residual(p: &Matrix, a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<f64> {
    Ok(p.try_sub(&riccati_map(p, a, b, q, r)?)?.norm_inf())
}

/// `K = (R + BᵀPB)⁻¹BᵀPA`.
pub fn lqr_gain(p: &Matrix, a: &Matrix, b: &Matrix, r: &Matrix) -> Result<Matrix> {
    let s = r.try_add(&b.try_t_matmul(&p.try_matmul(b)?)?)?;
    let btpa = b.try_t_matmul(&p.try_matmul(a)?)?;
    s.solve(&btpa)
        .map_err(|e| Error::Numeric(format!("R + BᵀPB is singular: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrGain {
    pub k: Matrix,
    pub p: Matrix,
    pub q: Matrix,
    pub r: Matrix,
}

pub fn lqr(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<LqrGain> {
    let p = dare_solve(a, b, q, r)?;
    let k = lqr_gain(&p, a, b, r)?;
    Ok(LqrGain {
        k,
        p,
        q: q.clone(),
        r: r.clone(),
    })
}

/// Weights shared by the LQR and LQI designs. The state weight sits on the
/// measured state only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServoWeights {
    pub q_r: f64,
    pub q_u: f64,
    /// Weight on the integral of the tracking error (LQI only).
    pub q_i: f64,
}

impl Default for ServoWeights {
    fn default() -> Self {
        let w = LossWeights::default();
        ServoWeights {
            q_r: w.q_r,
            q_u: w.q_u,
            q_i: 1e-2 * w.q_r,
        }
    }
}

fn output_weight(nx: usize, observed: usize, w: f64) -> Matrix {
    let mut q = Matrix::zeros(nx, nx);
    q[(observed, observed)] = w;
    q
}

/// Servo LQR: drives the state to the steady state that puts the measured
/// state on the reference under the current disturbance.
#[derive(Clone, Debug)]
pub struct LqrController {
    pub gain: LqrGain,
    plant: PlantModel,
    /// `[I − A, −B; C, 0]` for the steady-state targets.
    target_system: Matrix,
}

impl LqrController {
    pub fn new(plant: &PlantModel, w: &ServoWeights) -> Result<Self> {
        let nx = plant.a.rows();
        let nu = plant.b.cols();
        if nu != 1 {
            return Err(Error::Unsupported("servo LQR targets assume a single input".into()));
        }
        let q = output_weight(nx, plant.observed, w.q_r);
        let r = Matrix::diag(&vec![w.q_u; nu]);
        let gain = lqr(&plant.a, &plant.b, &q, &r)?;
        let mut m = Matrix::zeros(nx + 1, nx + 1);
        m.set_block(0, 0, &(&Matrix::identity(nx) - &plant.a));
        m.set_block(0, nx, &plant.b.scale(-1.0));
        m[(nx, plant.observed)] = 1.0;
        Ok(LqrController {
            gain,
            plant: plant.clone(),
            target_system: m,
        })
    }

    /// `(x_ss, u_ss)` with `x_ss = A x_ss + B u_ss + E d` and `x_ss[obs] = r`.
    pub fn targets(&self, d: &[f64], r: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let nx = self.plant.a.rows();
        let mut rhs = self.plant.e.matvec(d);
        rhs.push(r);
        let sol = self.target_system.solve(&Matrix::column(&rhs))?.into_vec();
        Ok((sol[..nx].to_vec(), sol[nx..].to_vec()))
    }

    pub fn control(&self, x: &[f64], d: &[f64], r: f64) -> Result<Vec<f64>> {
        let (xs, us) = self.targets(d, r)?;
        let dx: Vec<f64> = xs.iter().zip(x).map(|(a, b)| a - b).collect();
        let kdx = self.gain.k.matvec(&dx);
        Ok(us.iter().zip(kdx).map(|(u, k)| u + k).collect())
    }
}

/// LQR on `[x; q]` with `q₊ = q + (r − x[obs])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqiGain {
    pub kx: Matrix,
    pub ki: Matrix,
    pub p: Matrix,
    pub a_aug: Matrix,
    pub b_aug: Matrix,
}

pub fn lqi_gain(plant: &PlantModel, w: &ServoWeights) -> Result<LqiGain> {
    let nx = plant.a.rows();
    let nu = plant.b.cols();
    let n = nx + 1;
    let mut a = Matrix::zeros(n, n);
    a.set_block(0, 0, &plant.a);
    a[(nx, plant.observed)] = -1.0;
    a[(nx, nx)] = 1.0;
    let mut b = Matrix::zeros(n, nu);
    b.set_block(0, 0, &plant.b);
    let mut q = output_weight(n, plant.observed, w.q_r);
    q[(nx, nx)] = w.q_i;
    let r = Matrix::diag(&vec![w.q_u; nu]);
    let p = dare_solve(&a, &b, &q, &r)?;
    let k = lqr_gain(&p, &a, &b, &r)?;
    Ok(LqiGain {
        kx: k.slice_cols(0, nx),
        ki: k.slice_cols(nx, 1),
        p,
        a_aug: a,
        b_aug: b,
    })
}

#[derive(Clone, Debug)]
pub struct LqiController {
    pub gain: LqiGain,
    pub observed: usize,
    /// Integrated tracking error.
    pub q: f64,
}

impl LqiController {
    pub fn new(plant: &PlantModel, w: &ServoWeights) -> Result<Self> {
        Ok(LqiController {
            gain: lqi_gain(plant, w)?,
            observed: plant.observed,
            q: 0.0,
        })
    }

    pub fn reset(&mut self) {
        self.q = 0.0;
    }

    /// `u = −Kx x − Ki q`, then integrates the current tracking error.
    pub fn control(&mut self, x: &[f64], r: f64) -> Vec<f64> {
        let kx = self.gain.kx.matvec(x);
        let u = kx
            .iter()
            .enumerate()
            .map(|(j, v)| -v - self.gain.ki[(j, 0)] * self.q)
            .collect();
        self.q += r - x[self.observed];
        u
    }
}

/// `min ½zᵀHz + fᵀz` subject to `lower ≤ A z ≤ upper`. Rows with equal
/// bounds are equalities; `G z ≤ h` is the special case `lower = −∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: Matrix,
    pub f: Vec<f64>,
    pub a: Matrix,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    pub fn inequality(h: Matrix, f: Vec<f64>, g: Matrix, hv: Vec<f64>) -> Result<Self> {
        let m = g.rows();
        let p = QpProblem {
            h,
            f,
            a: g,
            lower: vec![f64::NEG_INFINITY; m],
            upper: hv,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.h.rows()
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.h.rows();
        let m = self.a.rows();
        if !self.h.is_square() || self.f.len() != n || (m > 0 && self.a.cols() != n) || self.lower.len() != m || self.upper.len() != m {
            return Err(Error::dim(
                "qp",
                format!(
                    "H {:?} f {} A {:?} bounds {}/{}",
                    self.h.shape(),
                    self.f.len(),
                    self.a.shape(),
                    self.lower.len(),
                    self.upper.len()
                ),
            ));
        }
        if (&self.h - &self.h.transpose()).max_abs() > 1e-9 * self.h.max_abs().max(1.0) {
            return Err(Error::Config("QP Hessian is not symmetric".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
            return Err(Error::Config("QP lower bound above upper bound".into()));
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let hz = self.h.matvec(z);
        0.5 * dot(z, &hz) + dot(&self.f, z)
    }

    /// Largest bound violation of `A z`.
    pub fn primal_residual(&self, z: &[f64]) -> f64 {
        let az = self.a.matvec(z);
        az.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (l - v).max(v - u).max(0.0))
            .fold(0.0, f64::max)
    }

    /// `‖Hz + f + Aᵀy‖∞`.
    pub fn dual_residual(&self, z: &[f64], y: &[f64]) -> f64 {
        let mut g = self.h.matvec(z);
        for (gi, fi) in g.iter_mut().zip(&self.f) {
            *gi += fi;
        }
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                for (gj, aij) in g.iter_mut().zip(self.a.row_slice(i)) {
                    *gj += yi * aij;
                }
            }
        }
        g.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|yᵢ| · distance to the bound its sign selects`, plus sign errors.
    pub fn complementarity(&self, z: &[f64], y: &[f64]) -> f64 {
        let az = self.a.matvec(z);
        let mut worst: f64 = 0.0;
        for i in 0..self.m() {
            let (l, u) = (self.lower[i], self.upper[i]);
            let v = if y[i] > 0.0 {
                if u.is_finite() {
                    y[i] * (u - az[i]).abs()
                } else {
                    y[i]
                }
            } else if y[i] < 0.0 {
                if l.is_finite() {
                    -y[i] * (az[i] - l).abs()
                } else {
                    -y[i]
                }
            } else {
                0.0
            };
            worst = worst.max(v);
        }
        worst
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Solved,
    MaxIter,
}

impl QpStatus {
    pub fn name(self) -> &'static str {
        match self {
            QpStatus::Solved => "solved",
            QpStatus::MaxIter => "max-iter",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub z: Vec<f64>,
    /// Multipliers of `A z`; positive on active upper bounds, negative on lower.
    pub y: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// ADMM stops at this residual and hands over to polishing.
    pub admm_tol: f64,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            admm_tol: 1e-5,
            polish: true,
        }
    }
}

pub const QP_TOL: f64 = 1e-8;
pub const QP_MAX_ITER: usize = 20_000;

/// Rows with `lower == upper` must be jointly consistent.
fn check_equalities(p: &QpProblem) -> Result<()> {
    let eq: Vec<usize> = (0..p.m()).filter(|&i| p.lower[i] == p.upper[i]).collect();
    if eq.is_empty() {
        return Ok(());
    }
    let n = p.n();
    let e = Matrix::from_fn(eq.len(), n, |r, c| p.a[(eq[r], c)]);
    let b: Vec<f64> = eq.iter().map(|&i| p.upper[i]).collect();
    // Least-norm solve through the regularized Gram matrix, refined once.
    let gram = e.try_matmul_t(&e)?;
    let reg = 1e-12 * gram.max_abs().max(1.0);
    let g = &gram + &Matrix::identity(eq.len()).scale(reg);
    let chol = Cholesky::factor(&g)?;
    let mut w = chol.solve_vec(&b);
    let mut z = e.transpose().matvec(&w);
    for _ in 0..3 {
        let res: Vec<f64> = b.iter().zip(e.matvec(&z)).map(|(bi, ez)| bi - ez).collect();
        let dw = chol.solve_vec(&res);
        for (wi, d) in w.iter_mut().zip(&dw) {
            *wi += d;
        }
        z = e.transpose().matvec(&w);
    }
    let res = b
        .iter()
        .zip(e.matvec(&z))
        .fold(0.0_f64, |m, (bi, ez)| m.max((bi - ez).abs()));
    if res > 1e-6 * (1.0 + b.iter().fold(0.0_f64, |m, v| m.max(v.abs()))) {
        return Err(Error::Numeric(format!("infeasible equality system (residual {res:e})")));
    }
    Ok(())
}

/// Operator-splitting (ADMM) QP solver with active-set polishing.
///
/// ADMM runs until both residuals drop below `admm_tol`; the active set read
/// off the multipliers is then refined by solving equality-constrained KKT
/// systems until primal feasibility and multiplier signs both hold. If
/// polishing fails, ADMM continues to `tol` or the iteration cap.
pub fn qp_solve(p: &QpProblem, tol: f64, cap: usize) -> Result<QpSolution> {
    qp_solve_with(p, tol, cap, &QpSettings::default())
}

pub fn qp_solve_with(p: &QpProblem, tol: f64, cap: usize, s: &QpSettings) -> Result<QpSolution> {
    p.validate()?;
    check_equalities(p)?;
    let mut admm = Admm::new(p, s)?;
    let mut tried_polish = false;
    let mut it = 0;
    while it < cap {
        admm.iterate(p, s)?;
        it += 1;
        if it % 10 != 0 && it != cap {
            continue;
        }
        let (rp, rd) = admm.residuals(p);
        if s.polish && !tried_polish && rp <= s.admm_tol.max(tol) && rd <= s.admm_tol.max(tol) {
            tried_polish = true;
            if let Some(sol) = polish(p, &admm.x, &admm.y, tol) {
                return Ok(QpSolution { iterations: it, ..sol });
            }
        }
        if rp <= tol && rd <= tol {
            return Ok(QpSolution {
                z: admm.x.clone(),
                y: admm.y.clone(),
                status: QpStatus::Solved,
                iterations: it,
                primal_residual: p.primal_residual(&admm.x),
                dual_residual: p.dual_residual(&admm.x, &admm.y),
                polished: false,
            });
        }
        if it % 50 == 0 {
            admm.adapt_rho(p, s, rp, rd)?;
        }
    }
    if s.polish {
        if let Some(sol) = polish(p, &admm.x, &admm.y, tol) {
            return Ok(QpSolution { iterations: it, ..sol });
        }
    }
    Ok(QpSolution {
        primal_residual: p.primal_residual(&admm.x),
        dual_residual: p.dual_residual(&admm.x, &admm.y),
        z: admm.x,
        y: admm.y,
        status: QpStatus::MaxIter,
        iterations: it,
        polished: false,
    })
}

struct Admm {
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    rho: Vec<f64>,
    rho_base: f64,
    chol: Cholesky,
}

impl Admm {
    fn new(p: &QpProblem, s: &QpSettings) -> Result<Self> {
        let n = p.n();
        let m = p.m();
        let rho = Self::rho_vec(p, s.rho);
        let chol = Self::factor(p, s.sigma, &rho)?;
        Ok(Admm {
            x: vec![0.0; n],
            z: vec![0.0; m],
            y: vec![0.0; m],
            rho,
            rho_base: s.rho,
            chol,
        })
    }

    /// Equality rows get a much stiffer penalty, free rows a tiny one.
    fn rho_vec(p: &QpProblem, rho: f64) -> Vec<f64> {
        (0..p.m())
            .map(|i| {
                if p.lower[i] == p.upper[i] {
                    1e3 * rho
                } else if p.lower[i].is_infinite() && p.upper[i].is_infinite() {
                    1e-6
                } else {
                    rho
                }
            })
            .collect()
    }

    fn factor(p: &QpProblem, sigma: f64, rho: &[f64]) -> Result<Cholesky> {
        let n = p.n();
        let mut k = p.h.clone();
        for i in 0..n {
            k[(i, i)] += sigma;
        }
        for (r, &ri) in rho.iter().enumerate() {
            let row = p.a.row_slice(r);
            for i in 0..n {
                if row[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    k[(i, j)] += ri * row[i] * row[j];
                }
            }
        }
        Cholesky::factor(&k)
    }

    fn iterate(&mut self, p: &QpProblem, s: &QpSettings) -> Result<()> {
        let n = p.n();
        let m = p.m();
        let mut rhs: Vec<f64> = (0..n).map(|i| s.sigma * self.x[i] - p.f[i]).collect();
        for r in 0..m {
            let c = self.rho[r] * self.z[r] - self.y[r];
            for (ri, a) in rhs.iter_mut().zip(p.a.row_slice(r)) {
                *ri += c * a;
            }
        }
        let xt = self.chol.solve_vec(&rhs);
        let zt = p.a.matvec(&xt);
        for i in 0..n {
            self.x[i] = s.alpha * xt[i] + (1.0 - s.alpha) * self.x[i];
        }
        for r in 0..m {
            let relaxed = s.alpha * zt[r] + (1.0 - s.alpha) * self.z[r];
            let znew = (relaxed + self.y[r] / self.rho[r]).clamp(p.lower[r], p.upper[r]);
            self.y[r] += self.rho[r] * (relaxed - znew);
            self.z[r] = znew;
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("QP iterate diverged".into()));
        }
        Ok(())
    }

    fn residuals(&self, p: &QpProblem) -> (f64, f64) {
        let ax = p.a.matvec(&self.x);
        let rp = ax
            .iter()
            .zip(&self.z)
            .fold(0.0_f64, |m, (a, z)| m.max((a - z).abs()));
        (rp, p.dual_residual(&self.x, &self.y))
    }

    /// Rebalances ρ toward equal scaled residuals.
    fn adapt_rho(&mut self, p: &QpProblem, s: &QpSettings, rp: f64, rd: f64) -> Result<()> {
        let ax = p.a.matvec(&self.x);
        let norm_ax = ax.iter().chain(&self.z).fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
        let hx = p.h.matvec(&self.x);
        let aty = p.a.transpose().matvec(&self.y);
        let norm_d = hx
            .iter()
            .chain(&aty)
            .chain(&p.f)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let ratio = ((rp / norm_ax) / (rd / norm_d).max(1e-300)).sqrt();
        let new = (self.rho_base * ratio).clamp(1e-6, 1e6);
        if new > 5.0 * self.rho_base || new < 0.2 * self.rho_base {
            self.rho_base = new;
            self.rho = Self::rho_vec(p, new);
            self.chol = Self::factor(p, s.sigma, &self.rho)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
}

/// Equality-constrained solve on the active rows, with iterative refinement.
fn kkt_solve(p: &QpProblem, active: &[(usize, Side)]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = p.n();
    let k = active.len();
    let dim = n + k;
    let mut kkt = Matrix::zeros(dim, dim);
    kkt.set_block(0, 0, &p.h);
    let mut rhs = vec![0.0; dim];
    for i in 0..n {
        rhs[i] = -p.f[i];
    }
    for (j, &(row, side)) in active.iter().enumerate() {
        for c in 0..n {
            let v = p.a[(row, c)];
            kkt[(n + j, c)] = v;
            kkt[(c, n + j)] = v;
        }
        rhs[n + j] = match side {
            Side::Lower => p.lower[row],
            Side::Upper => p.upper[row],
        };
    }
    let delta = 1e-10 * p.h.max_abs().max(1.0);
    let mut reg = kkt.clone();
    for i in 0..dim {
        reg[(i, i)] += if i < n { delta } else { -delta };
    }
    let lu = crate::linalg::Lu::factor(&reg).ok()?;
    let mut sol = lu.solve(&Matrix::column(&rhs)).ok()?.into_vec();
    for _ in 0..5 {
        let ks = kkt.matvec(&sol);
        let res: Vec<f64> = rhs.iter().zip(&ks).map(|(r, v)| r - v).collect();
        let d = lu.solve(&Matrix::column(&res)).ok()?.into_vec();
        for (s, di) in sol.iter_mut().zip(&d) {
            *s += di;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let z = sol[..n].to_vec();
    let mut y = vec![0.0; p.m()];
    for (j, &(row, _)) in active.iter().enumerate() {
        y[row] = sol[n + j];
    }
    Some((z, y))
}

fn polish(p: &QpProblem, x: &[f64], y: &[f64], tol: f64) -> Option<QpSolution> {
    let m = p.m();
    let ax = p.a.matvec(x);
    let scale = 1.0 + y.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut active: Vec<(usize, Side)> = Vec::new();
    for i in 0..m {
        let eq = p.lower[i] == p.upper[i];
        if eq || y[i] > 1e-7 * scale || (p.upper[i].is_finite() && y[i] >= 0.0 && ax[i] >= p.upper[i]) {
            active.push((i, Side::Upper));
        } else if y[i] < -1e-7 * scale || (p.lower[i].is_finite() && y[i] <= 0.0 && ax[i] <= p.lower[i]) {
            active.push((i, Side::Lower));
        }
    }
    let max_rounds = 3 * m + 10;
    for _ in 0..max_rounds {
        let (z, yy) = kkt_solve(p, &active)?;
        let az = p.a.matvec(&z);
        let mut worst_primal = (tol, None);
        for i in 0..m {
            if active.iter().any(|&(r, _)| r == i) {
                continue;
            }
            let lo = p.lower[i] - az[i];
            let hi = az[i] - p.upper[i];
            if hi > worst_primal.0 {
                worst_primal = (hi, Some((i, Side::Upper)));
            }
            if lo > worst_primal.0 {
                worst_primal = (lo, Some((i, Side::Lower)));
            }
        }
        let dual_tol = 1e-9 * (1.0 + yy.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
        let mut worst_dual = (dual_tol, None);
        for (j, &(row, side)) in active.iter().enumerate() {
            if p.lower[row] == p.upper[row] {
                continue;
            }
            let wrong = match side {
                Side::Upper => -yy[row],
                Side::Lower => yy[row],
            };
            if wrong > worst_dual.0 {
                worst_dual = (wrong, Some(j));
            }
        }
        match (worst_primal.1, worst_dual.1) {
            (None, None) => {
                let pr = p.primal_residual(&z);
                let dr = p.dual_residual(&z, &yy);
                if pr > tol || dr > 1e-6 {
                    return None;
                }
                return Some(QpSolution {
                    primal_residual: pr,
                    dual_residual: dr,
                    z,
                    y: yy,
                    status: QpStatus::Solved,
                    iterations: 0,
                    polished: true,
                });
            }
            (Some(add), _) => active.push(add),
            (None, Some(j)) => {
                active.remove(j);
            }
        }
    }
    None
}

/// Dense single-shooting MPC with quadratic slack penalties.
///
/// Decision vector: scaled inputs `u/ū_s` for every step, then one state
/// slack per step for every bounded state, then one input slack per input
/// and step. Bounded means a finite lower or upper bound.
#[derive(Clone, Debug)]
pub struct MpcBuilder {
    pub a: Matrix,
    pub b: Matrix,
    pub e: Matrix,
    pub observed: usize,
    pub horizon: usize,
    pub weights: LossWeights,
    /// Inputs are optimized in units of this scale for conditioning.
    pub u_scale: f64,
}

/// Forecast window for one MPC solve.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcWindow<'a> {
    /// `N × nd` disturbance forecast.
    pub d: &'a Matrix,
    /// References for `x₁ … x_N` (measured state).
    pub r: &'a [f64],
    /// Bounds on the measured state at `x₁ … x_N`.
    pub x_lo: &'a [f64],
    pub x_hi: &'a [f64],
    pub u_lo: f64,
    pub u_hi: f64,
}

impl MpcBuilder {
    pub fn new(plant: &PlantModel, horizon: usize, weights: LossWeights, u_scale: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("MPC horizon must be positive".into()));
        }
        if plant.b.cols() != 1 {
            return Err(Error::Unsupported("MPC builder assumes a single input".into()));
        }
        weights.validate()?;
        Ok(MpcBuilder {
            a: plant.a.clone(),
            b: plant.b.clone(),
            e: plant.e.clone(),
            observed: plant.observed,
            horizon,
            weights,
            u_scale: if u_scale > 0.0 && u_scale.is_finite() { u_scale } else { 1.0 },
        })
    }

    /// Builds the QP for state `x0`. Returns the problem; the first entry of
    /// the solution times `u_scale` is the control move.
    pub fn build(&self, x0: &[f64], w: &MpcWindow<'_>) -> Result<QpProblem> {
        let nn = self.horizon;
        let nx = self.a.rows();
        if w.d.rows() < nn || w.r.len() < nn || w.x_lo.len() < nn || w.x_hi.len() < nn || x0.len() != nx {
            return Err(Error::dim(
                "mpc_build",
                format!(
                    "horizon {nn}: d {:?}, r {}, bounds {}/{}, x0 {}",
                    w.d.shape(),
                    w.r.len(),
                    w.x_lo.len(),
                    w.x_hi.len(),
                    x0.len()
                ),
            ));
        }
        let c = self.observed;
        // Free response of the measured state and its input sensitivities.
        let mut free = Vec::with_capacity(nn);
        let mut x = x0.to_vec();
        for k in 0..nn {
            let mut nx_ = self.a.matvec(&x);
            for (v, ed) in nx_.iter_mut().zip(self.e.matvec(w.d.row_slice(k))) {
                *v += ed;
            }
            x = nx_;
            free.push(x[c]);
        }
        // g[k] = C A^k B (scaled), response of x_{j+k+1} to u_j.
        let mut g = Vec::with_capacity(nn);
        let mut col = self.b.col_vec(0);
        for _ in 0..nn {
            g.push(col[c] * self.u_scale);
            col = self.a.matvec(&col);
        }
        let gamma = Matrix::from_fn(nn, nn, |i, j| if j <= i { g[i - j] } else { 0.0 });

        let bounded: Vec<usize> = (0..nn)
            .filter(|&k| w.x_lo[k].is_finite() || w.x_hi[k].is_finite())
            .collect();
        let nsx = bounded.len();
        let nsu = if w.u_lo.is_finite() || w.u_hi.is_finite() { nn } else { 0 };
        let nz = nn + nsx + nsu;
        let lw = &self.weights;
        let inv_n = 1.0 / nn as f64;

        // ½zᵀHz + fᵀz equals the N-averaged loss up to a constant and factor 2.
        let mut h = Matrix::zeros(nz, nz);
        let mut f = vec![0.0; nz];
        let gg = gamma.try_t_matmul(&gamma)?;
        for i in 0..nn {
            for j in 0..nn {
                h[(i, j)] = 2.0 * inv_n * lw.q_r * gg[(i, j)];
            }
            h[(i, i)] += 2.0 * inv_n * lw.q_u * self.u_scale * self.u_scale;
        }
        for j in 0..nn {
            let mut s = 0.0;
            for k in 0..nn {
                s += gamma[(k, j)] * (free[k] - w.r[k]);
            }
            f[j] = 2.0 * inv_n * lw.q_r * s;
        }
        for i in 0..nsx {
            h[(nn + i, nn + i)] = 2.0 * inv_n * lw.q_sx;
        }
        for i in 0..nsu {
            h[(nn + nsx + i, nn + nsx + i)] = 2.0 * inv_n * lw.q_su * self.u_scale * self.u_scale;
        }
        // Tiny curvature keeps zero-weight slacks bounded.
        for i in nn..nz {
            h[(i, i)] = h[(i, i)].max(1e-12);
        }

        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for (s, &k) in bounded.iter().enumerate() {
            // lo ≤ free + Γu + s  and  free + Γu − s ≤ hi
            if w.x_lo[k].is_finite() {
                let mut row = vec![0.0; nz];
                row[..nn].copy_from_slice(gamma.row_slice(k));
                row[nn + s] = 1.0;
                rows.push(row);
                lower.push(w.x_lo[k] - free[k]);
                upper.push(f64::INFINITY);
            }
            if w.x_hi[k].is_finite() {
                let mut row = vec![0.0; nz];
                row[..nn].copy_from_slice(gamma.row_slice(k));
                row[nn + s] = -1.0;
                rows.push(row);
                lower.push(f64::NEG_INFINITY);
                upper.push(w.x_hi[k] - free[k]);
            }
        }
        for k in 0..nsu {
            let sj = nn + nsx + k;
            if w.u_lo.is_finite() {
                let mut row = vec![0.0; nz];
                row[k] = 1.0;
                row[sj] = 1.0;
                rows.push(row);
                lower.push(w.u_lo / self.u_scale);
                upper.push(f64::INFINITY);
            }
            if w.u_hi.is_finite() {
                let mut row = vec![0.0; nz];
                row[k] = 1.0;
                row[sj] = -1.0;
                rows.push(row);
                lower.push(f64::NEG_INFINITY);
                upper.push(w.u_hi / self.u_scale);
            }
        }
        for s in nn..nz {
            let mut row = vec![0.0; nz];
            row[s] = 1.0;
            rows.push(row);
            lower.push(0.0);
            upper.push(f64::INFINITY);
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let a = if refs.is_empty() {
            Matrix::zeros(0, nz)
        } else {
            Matrix::from_rows(&refs)
        };
        let p = QpProblem {
            h: h.symmetrize(),
            f,
            a,
            lower,
            upper,
        };
        p.validate()?;
        Ok(p)
    }
}

/// First move of the receding-horizon solution, in physical units.
pub fn nominal_mpc_step(mpc: &MpcBuilder, x: &[f64], w: &MpcWindow<'_>) -> Result<(Vec<f64>, QpSolution)> {
    let qp = mpc.build(x, w)?;
    let sol = qp_solve(&qp, QP_TOL, QP_MAX_ITER)?;
    Ok((vec![sol.z[0] * mpc.u_scale], sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_radius;
    use crate::plant::build_default_plant;

    fn m1(v: f64) -> Matrix {
        Matrix::filled(1, 1, v)
    }

    #[test]
    fn scalar_riccati_matches_closed_form() {
        let (a, b, q, r) = (0.5, 1.0, 1.0, 1.0);
        let p = dare_solve(&m1(a), &m1(b), &m1(q), &m1(r)).unwrap()[(0, 0)];
        // p = a²p − a²p²b²/(r + b²p) + q  ⇔  b²p² + (r − a²r − q b²)p − q r = 0
        let qa = b * b;
        let qb = r - a * a * r - q * b * b;
        let qc = -q * r;
        let root = (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
        assert!((p - root).abs() < 1e-10);
        let k = lqr_gain(&m1(p), &m1(a), &m1(b), &m1(r)).unwrap()[(0, 0)];
        assert!((k - a * b * p / (r + b * b * p)).abs() < 1e-12);
    }

    #[test]
    fn zero_dynamics_give_q() {
        let q = Matrix::diag(&[1.0, 2.0]);
        let p = dare_solve(&Matrix::zeros(2, 2), &Matrix::ones(2, 1), &q, &m1(1.0)).unwrap();
        assert_eq!(p, q);
        let k = lqr_gain(&p, &Matrix::identity(2).scale(0.5), &Matrix::zeros(2, 1), &m1(1.0)).unwrap();
        assert_eq!(k.max_abs(), 0.0);
    }

    #[test]
    fn unstabilizable_pair_is_numeric_error() {
        let r = dare_solve(&m1(1.5), &m1(0.0), &m1(1.0), &m1(1.0));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn surrogate_lqr_is_stabilizing() {
        let plant = build_default_plant();
        let c = LqrController::new(&plant, &ServoWeights::default()).unwrap();
        let g = &c.gain;
        assert!(riccati_residual(&g.p, &plant.a, &plant.b, &g.q, &g.r).unwrap() < 1e-10);
        assert!((&g.p - &g.p.transpose()).norm_inf() < 1e-10);
        let cl = &plant.a - &plant.b.try_matmul(&g.k).unwrap();
        assert!(spectral_radius(&cl).unwrap() < 1.0);
    }

    #[test]
    fn lqi_removes_steady_state_error() {
        let plant = build_default_plant();
        let mut c = LqiController::new(&plant, &ServoWeights::default()).unwrap();
        let d = [5.0, 100.0, 200.0];
        let mut x = vec![18.0; 4];
        for _ in 0..5000 {
            let u = c.control(&x, 21.0);
            x = plant.step(&x, &u, &d);
        }
        assert!((x[3] - 21.0).abs() < 1e-6, "error {}", x[3] - 21.0);
    }

    #[test]
    fn qp_trivial_cases() {
        let p = QpProblem::inequality(m1(2.0), vec![-6.0], Matrix::zeros(0, 1), vec![]).unwrap();
        let s = qp_solve(&p, QP_TOL, QP_MAX_ITER).unwrap();
        assert!((s.z[0] - 3.0).abs() < 1e-9);
        // min z² s.t. z ≥ 1  ⇔  −z ≤ −1
        let p = QpProblem::inequality(m1(2.0), vec![0.0], m1(-1.0), vec![-1.0]).unwrap();
        let s = qp_solve(&p, QP_TOL, QP_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Solved);
        assert!((s.z[0] - 1.0).abs() < 1e-9);
        assert!(s.primal_residual <= 1e-8);
    }

    #[test]
    fn inconsistent_equalities_are_rejected() {
        let p = QpProblem {
            h: Matrix::identity(2),
            f: vec![0.0; 2],
            a: Matrix::from_rows(&[&[1.0, 1.0], &[2.0, 2.0]]),
            lower: vec![1.0, 3.0],
            upper: vec![1.0, 3.0],
        };
        assert!(matches!(qp_solve(&p, QP_TOL, QP_MAX_ITER), Err(Error::Numeric(_))));
    }

    #[test]
    fn unconstrained_mpc_matches_closed_form() {
        let plant = build_default_plant();
        let w = LossWeights::default();
        let mpc = MpcBuilder::new(&plant, 1, w, 5000.0).unwrap();
        let x = [15.0, 16.0, 17.0, 18.0];
        let d = Matrix::row(&[5.0, 100.0, 50.0]);
        let win = MpcWindow {
            d: &d,
            r: &[21.0],
            x_lo: &[-1e6],
            x_hi: &[1e6],
            u_lo: -1e6,
            u_hi: 1e6,
        };
        let (u, _) = nominal_mpc_step(&mpc, &x, &win).unwrap();
        let free = plant.step(&x, &[0.0], d.row_slice(0))[3];
        let b = plant.b[(3, 0)];
        // argmin Q_r (r − free − b u)² + Q_u u²
        let expect = w.q_r * b * (21.0 - free) / (w.q_r * b * b + w.q_u);
        assert!((u[0] - expect).abs() < 1e-8 * expect.abs().max(1.0), "{} vs {expect}", u[0]);
    }
}
