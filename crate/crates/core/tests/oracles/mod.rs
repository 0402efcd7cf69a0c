//! Independent reference implementations used by the integration tests.
//! None of these call into the code they check, apart from `Matrix` as a
//! plain container and the tape whose gradients are being compared.

#![allow(dead_code)]

use dlmpc::autodiff::{Tape, Var};
use dlmpc::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| scale * normal(rng))
}

// ---------------------------------------------------------------------------
// Random composite graphs against finite differences.

#[derive(Clone, Debug)]
enum GOp {
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Neg(usize),
    AddScalar(usize, f64),
    ScaleCols(usize, Vec<f64>),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Softmax(usize),
    Mse(usize, usize),
    SumSq(usize),
    Sum(usize),
}

/// A replayable graph: parameter leaves, constants, then ops on earlier nodes.
/// The loss reads every node out through a fixed random weighting.
#[derive(Clone, Debug)]
pub struct Recipe {
    pub params: Vec<Matrix>,
    consts: Vec<Matrix>,
    ops: Vec<GOp>,
    readout: Vec<Matrix>,
}

impl Recipe {
    pub fn random(rng: &mut ChaCha8Rng) -> Recipe {
        let np = rng.random_range(1..=4);
        let mut shapes = Vec::new();
        let mut params = Vec::new();
        for _ in 0..np {
            let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
            params.push(randn(rng, r, c, 0.8));
            shapes.push((r, c));
        }
        let mut consts = Vec::new();
        for _ in 0..rng.random_range(0..=2) {
            let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
            consts.push(randn(rng, r, c, 0.8));
            shapes.push((r, c));
        }
        let mut ops = Vec::new();
        let nops = rng.random_range(3..=12);
        for _ in 0..nops {
            let a = rng.random_range(0..shapes.len());
            let (ar, ac) = shapes[a];
            let find = |rng: &mut ChaCha8Rng, pred: &dyn Fn((usize, usize)) -> bool| -> Option<usize> {
                let c: Vec<usize> = (0..shapes.len()).filter(|&i| pred(shapes[i])).collect();
                if c.is_empty() {
                    None
                } else {
                    Some(c[rng.random_range(0..c.len())])
                }
            };
            let choice = rng.random_range(0..23);
            let (op, shape) = match choice {
                0 => match find(rng, &|s| s.0 == ac) {
                    Some(b) => (GOp::MatMul(a, b), (ar, shapes[b].1)),
                    None => (GOp::Tanh(a), (ar, ac)),
                },
                1 => match find(rng, &|s| s.1 == ac) {
                    Some(b) => (GOp::MatMulT(a, b), (ar, shapes[b].0)),
                    None => (GOp::Sigmoid(a), (ar, ac)),
                },
                2 => (GOp::Transpose(a), (ac, ar)),
                3..=5 => {
                    let b = find(rng, &|s| s == (ar, ac)).expect("a matches itself");
                    let op = match choice {
                        3 => GOp::Add(a, b),
                        4 => GOp::Sub(a, b),
                        _ => GOp::Hadamard(a, b),
                    };
                    (op, (ar, ac))
                }
                6 => match find(rng, &|s| s == (1, ac)) {
                    Some(b) => (GOp::AddRow(a, b), (ar, ac)),
                    None => (GOp::Neg(a), (ar, ac)),
                },
                7 => (GOp::Scale(a, rng.random_range(-2.0..2.0)), (ar, ac)),
                8 => (GOp::Neg(a), (ar, ac)),
                9 => (GOp::AddScalar(a, rng.random_range(-1.0..1.0)), (ar, ac)),
                10 => (
                    GOp::ScaleCols(a, (0..ac).map(|_| rng.random_range(-2.0..2.0)).collect()),
                    (ar, ac),
                ),
                11 => {
                    let b = find(rng, &|s| s.1 == ac).expect("a matches itself");
                    (GOp::ConcatRows(a, b), (ar + shapes[b].0, ac))
                }
                12 => {
                    let b = find(rng, &|s| s.0 == ar).expect("a matches itself");
                    (GOp::ConcatCols(a, b), (ar, ac + shapes[b].1))
                }
                13 => {
                    let len = rng.random_range(1..=ar);
                    let start = rng.random_range(0..=ar - len);
                    (GOp::SliceRows(a, start, len), (len, ac))
                }
                14 => {
                    let len = rng.random_range(1..=ac);
                    let start = rng.random_range(0..=ac - len);
                    (GOp::SliceCols(a, start, len), (ar, len))
                }
                15 | 16 => (GOp::Relu(a), (ar, ac)),
                17 => (GOp::Sigmoid(a), (ar, ac)),
                18 => (GOp::Tanh(a), (ar, ac)),
                // exp only of squashed values keeps magnitudes moderate
                19 => (GOp::Exp(a), (ar, ac)),
                20 => (GOp::Softmax(a), (ar, ac)),
                21 => {
                    let b = find(rng, &|s| s == (ar, ac)).expect("a matches itself");
                    (GOp::Mse(a, b), (1, 1))
                }
                _ => {
                    if rng.random_bool(0.5) {
                        (GOp::SumSq(a), (1, 1))
                    } else {
                        (GOp::Sum(a), (1, 1))
                    }
                }
            };
            ops.push(op);
            shapes.push(shape);
        }
        let readout = shapes.iter().map(|&(r, c)| randn(rng, r, c, 0.5)).collect();
        Recipe {
            params,
            consts,
            ops,
            readout,
        }
    }

    /// Builds the graph at `params`; returns the tape, the loss, the
    /// parameter leaves and the smallest nonzero |input| seen by a ReLU.
    pub fn build(&self, params: &[Matrix]) -> (Tape, Var, Vec<Var>, f64) {
        let mut t = Tape::new();
        let mut nodes: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let leaves = nodes.clone();
        for c in &self.consts {
            nodes.push(t.constant(c.clone()));
        }
        let mut kink = f64::INFINITY;
        for op in &self.ops {
            let n = |i: &usize| nodes[*i];
            let v = match op {
                GOp::MatMul(a, b) => t.matmul(n(a), n(b)).unwrap(),
                GOp::MatMulT(a, b) => t.matmul_t(n(a), n(b)).unwrap(),
                GOp::Transpose(a) => t.transpose(n(a)),
                GOp::Add(a, b) => t.add(n(a), n(b)).unwrap(),
                GOp::Sub(a, b) => t.sub(n(a), n(b)).unwrap(),
                GOp::Hadamard(a, b) => t.hadamard(n(a), n(b)).unwrap(),
                GOp::AddRow(a, b) => t.add_row(n(a), n(b)).unwrap(),
                GOp::Scale(a, s) => t.scale(n(a), *s),
                GOp::Neg(a) => t.neg(n(a)),
                GOp::AddScalar(a, c) => t.add_scalar(n(a), *c),
                GOp::ScaleCols(a, s) => t.scale_cols(n(a), s).unwrap(),
                GOp::ConcatRows(a, b) => t.concat_rows(&[n(a), n(b)]).unwrap(),
                GOp::ConcatCols(a, b) => t.concat_cols(&[n(a), n(b)]).unwrap(),
                GOp::SliceRows(a, s, l) => t.slice_rows(n(a), *s, *l).unwrap(),
                GOp::SliceCols(a, s, l) => t.slice_cols(n(a), *s, *l).unwrap(),
                GOp::Relu(a) => {
                    for &x in t.value(n(a)).as_slice() {
                        if x != 0.0 {
                            kink = kink.min(x.abs());
                        }
                    }
                    t.relu(n(a))
                }
                GOp::Sigmoid(a) => t.sigmoid(n(a)),
                GOp::Tanh(a) => t.tanh(n(a)),
                GOp::Exp(a) => {
                    let s = t.tanh(n(a));
                    t.exp(s)
                }
                GOp::Softmax(a) => t.softmax_rows(n(a)).unwrap(),
                GOp::Mse(a, b) => t.mse(n(a), n(b)).unwrap(),
                GOp::SumSq(a) => t.sum_sq(n(a)),
                GOp::Sum(a) => t.sum(n(a)),
            };
            nodes.push(v);
        }
        let mut loss: Option<Var> = None;
        for (v, w) in nodes.clone().into_iter().zip(&self.readout) {
            let w = t.constant(w.clone());
            let h = t.hadamard(v, w).unwrap();
            let s = t.sum(h);
            loss = Some(match loss {
                Some(l) => t.add(l, s).unwrap(),
                None => s,
            });
        }
        let last = *nodes.last().unwrap();
        let sq = t.sum_sq(last);
        let sq = t.scale(sq, 0.5);
        let loss = t.add(loss.unwrap(), sq).unwrap();
        (t, loss, leaves, kink)
    }

    pub fn value(&self, params: &[Matrix]) -> f64 {
        let (t, l, _, _) = self.build(params);
        t.scalar(l)
    }
}

pub const FD_STEP: f64 = 1e-4;
/// ReLU inputs closer to zero than this would let the stencil cross the kink.
pub const KINK_MARGIN: f64 = 1e-2;
/// Gradients below this magnitude are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Fourth-order central difference of the recipe's loss in one entry.
pub fn fd_entry(recipe: &Recipe, p: usize, idx: usize) -> f64 {
    let h = FD_STEP;
    let at = |delta: f64| {
        let mut ps = recipe.params.clone();
        ps[p].as_mut_slice()[idx] += delta;
        recipe.value(&ps)
    };
    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
}

/// Largest relative gradient error over every parameter entry, or `None`
/// when the graph sits too close to a ReLU kink for finite differences.
pub fn graph_gradient_error(recipe: &Recipe) -> Option<f64> {
    let (tape, loss, leaves, kink) = recipe.build(&recipe.params);
    if kink < KINK_MARGIN || !tape.scalar(loss).is_finite() {
        return None;
    }
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (p, &leaf) in leaves.iter().enumerate() {
        let g = grads.get(leaf);
        for idx in 0..g.len() {
            let a = g.as_slice()[idx];
            let n = fd_entry(recipe, p, idx);
            let denom = a.abs().max(n.abs()).max(GRAD_FLOOR);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    Some(worst)
}

// ---------------------------------------------------------------------------
// Characteristic polynomial roots.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct C(pub f64, pub f64);

impl C {
    fn add(self, o: C) -> C {
        C(self.0 + o.0, self.1 + o.1)
    }
    fn sub(self, o: C) -> C {
        C(self.0 - o.0, self.1 - o.1)
    }
    fn mul(self, o: C) -> C {
        C(self.0 * o.0 - self.1 * o.1, self.0 * o.1 + self.1 * o.0)
    }
    fn div(self, o: C) -> C {
        let d = o.0 * o.0 + o.1 * o.1;
        C((self.0 * o.0 + self.1 * o.1) / d, (self.1 * o.0 - self.0 * o.1) / d)
    }
    pub fn abs(self) -> f64 {
        self.0.hypot(self.1)
    }
}

/// Monic characteristic polynomial `λⁿ + c₁λⁿ⁻¹ + … + cₙ` by Faddeev–LeVerrier;
/// returns `[1, c₁, …, cₙ]`.
pub fn char_poly(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut coeffs = vec![1.0];
    let mut m = Matrix::zeros(n, n);
    let id = Matrix::identity(n);
    let mut c = 1.0;
    for k in 1..=n {
        let am = a.try_matmul(&m).unwrap();
        m = &am + &id.scale(c);
        let amk = a.try_matmul(&m).unwrap();
        let tr: f64 = (0..n).map(|i| amk[(i, i)]).sum();
        c = -tr / k as f64;
        coeffs.push(c);
    }
    coeffs
}

fn horner(coeffs: &[f64], z: C) -> C {
    coeffs.iter().fold(C(0.0, 0.0), |acc, &c| acc.mul(z).add(C(c, 0.0)))
}

fn horner_deriv(coeffs: &[f64], z: C) -> C {
    let n = coeffs.len() - 1;
    let d: Vec<f64> = coeffs[..n].iter().enumerate().map(|(i, c)| c * (n - i) as f64).collect();
    horner(&d, z)
}

/// All roots of a monic polynomial by Durand–Kerner, polished with Newton.
pub fn poly_roots(coeffs: &[f64]) -> Vec<C> {
    let n = coeffs.len() - 1;
    let bound = 1.0 + coeffs[1..].iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let seed = C(0.4, 0.9);
    let mut z: Vec<C> = (0..n)
        .map(|i| {
            let mut p = C(1.0, 0.0);
            for _ in 0..i {
                p = p.mul(seed);
            }
            C(p.0 * bound * 0.5, p.1 * bound * 0.5)
        })
        .collect();
    for _ in 0..5000 {
        let mut delta: f64 = 0.0;
        for i in 0..n {
            let mut den = C(1.0, 0.0);
            for j in 0..n {
                if i != j {
                    den = den.mul(z[i].sub(z[j]));
                }
            }
            let step = horner(coeffs, z[i]).div(den);
            z[i] = z[i].sub(step);
            delta = delta.max(step.abs());
        }
        if delta < 1e-15 {
            break;
        }
    }
    for zi in z.iter_mut() {
        for _ in 0..3 {
            let d = horner_deriv(coeffs, *zi);
            if d.abs() > 1e-300 {
                *zi = zi.sub(horner(coeffs, *zi).div(d));
            }
        }
    }
    z
}

/// Largest distance under the best pairing of two equal-length root sets.
pub fn matched_distance(a: &[C], b: &[C]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let d = (0..n).map(|i| a[i].sub(b[p[i]]).abs()).fold(0.0, f64::max);
        best = best.min(d);
    });
    best
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

// ---------------------------------------------------------------------------
// Convex QP oracles for `min ½zᵀHz + fᵀz  s.t.  G z ≤ h` with `H ≻ 0`.

#[derive(Clone, Debug)]
pub struct IneqQp {
    pub h: Matrix,
    pub f: Vec<f64>,
    pub g: Matrix,
    pub hv: Vec<f64>,
}

impl IneqQp {
    pub fn objective(&self, z: &[f64]) -> f64 {
        let hz = self.h.matvec(z);
        0.5 * dot(z, &hz) + dot(&self.f, z)
    }

    pub fn max_violation(&self, z: &[f64]) -> f64 {
        self.g
            .matvec(z)
            .iter()
            .zip(&self.hv)
            .map(|(v, h)| (v - h).max(0.0))
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random strictly convex instance with a known strictly feasible point.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (IneqQp, Vec<f64>) {
    let l = randn(rng, n, n, 1.0);
    let mut h = l.transpose().try_matmul(&l).unwrap();
    let reg = rng.random_range(0.05..1.0);
    for i in 0..n {
        h[(i, i)] += reg;
    }
    let h = h.symmetrize();
    let f: Vec<f64> = (0..n).map(|_| 4.0 * normal(rng)).collect();
    let g = randn(rng, m, n, 1.0);
    let z0: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let hv: Vec<f64> = g.matvec(&z0).iter().map(|v| v + rng.random_range(0.05..1.0)).collect();
    (IneqQp { h, f, g, hv }, z0)
}

/// Gaussian elimination with partial pivoting; `None` when singular.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[p][k].abs() < 1e-11 * scale {
            return None;
        }
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let m = a[i][k] / a[k][k];
            if m != 0.0 {
                for j in k..n {
                    a[i][j] -= m * a[k][j];
                }
                b[i] -= m * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    Some(x)
}

/// Minimizer and multipliers of the QP with the rows in `active` held as
/// equalities: `[H Gᵀ; G 0][z; λ] = [−f; h]`.
pub fn equality_qp(qp: &IneqQp, active: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = qp.f.len();
    let k = active.len();
    let mut a = vec![vec![0.0; n + k]; n + k];
    let mut b = vec![0.0; n + k];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = qp.h[(i, j)];
        }
        b[i] = -qp.f[i];
    }
    for (r, &c) in active.iter().enumerate() {
        for j in 0..n {
            a[n + r][j] = qp.g[(c, j)];
            a[j][n + r] = qp.g[(c, j)];
        }
        b[n + r] = qp.hv[c];
    }
    let x = gauss_solve(a, b)?;
    Some((x[..n].to_vec(), x[n..].to_vec()))
}

/// Exhaustive search over active sets of size at most `n`. The optimum's
/// active set is among them, and every candidate is feasible, so the
/// smallest feasible objective is optimal.
pub fn brute_force_qp(qp: &IneqQp) -> Vec<f64> {
    let n = qp.f.len();
    let m = qp.hv.len();
    assert!(m <= 16, "brute force is exponential in the constraint count");
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1u32 << m) {
        if mask.count_ones() as usize > n {
            continue;
        }
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let Some((z, _)) = equality_qp(qp, &active) else { continue };
        if qp.max_violation(&z) > 1e-9 {
            continue;
        }
        let obj = qp.objective(&z);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, z));
        }
    }
    best.expect("the unconstrained or some active-set solution is feasible").1
}

/// Primal active-set method started from a feasible point.
pub fn active_set_qp(qp: &IneqQp, z0: &[f64]) -> Vec<f64> {
    let n = qp.f.len();
    let m = qp.hv.len();
    let mut z = z0.to_vec();
    let mut w: Vec<usize> = Vec::new();
    for _ in 0..50 * (n + m + 10) {
        // Step p minimizes the model with the working set held: shift the
        // problem so the equality system solves for the new iterate directly.
        let (target, lambda) = equality_qp(
            &IneqQp {
                hv: (0..m).map(|i| if w.contains(&i) { dot(qp.g.row_slice(i), &z) } else { qp.hv[i] }).collect(),
                ..qp.clone()
            },
            &w,
        )
        .expect("working set stays linearly independent");
        let p: Vec<f64> = target.iter().zip(&z).map(|(t, zi)| t - zi).collect();
        let pn = p.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if pn < 1e-12 * (1.0 + z.iter().fold(0.0_f64, |a, v| a.max(v.abs()))) {
            let (idx, &lmin) = match lambda.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
                Some(x) => x,
                None => return z,
            };
            if lmin >= -1e-12 {
                return z;
            }
            w.remove(idx);
            continue;
        }
        let mut alpha = 1.0;
        let mut block = None;
        for i in 0..m {
            if w.contains(&i) {
                continue;
            }
            let gp = dot(qp.g.row_slice(i), &p);
            if gp > 1e-14 {
                let room = (qp.hv[i] - dot(qp.g.row_slice(i), &z)).max(0.0);
                let a = room / gp;
                if a < alpha {
                    alpha = a;
                    block = Some(i);
                }
            }
        }
        for (zi, pi) in z.iter_mut().zip(&p) {
            *zi += alpha * pi;
        }
        if let Some(i) = block {
            w.push(i);
        }
    }
    panic!("active-set oracle did not converge");
}
