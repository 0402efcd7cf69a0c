//! Eigenvalues of small dense real matrices.
//!
//! [`eig_all`] computes the full spectrum by Householder reduction to upper
//! Hessenberg form followed by Francis double-shift QR iteration, so complex
//! conjugate pairs come out without complex arithmetic. [`dominant_eig`] is
//! a power iteration that, for nonnegative input, stops on the
//! Collatz–Wielandt bracket.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Relative size below which a subdiagonal entry is treated as zero.
pub const QR_DEFLATION_TOL: f64 = 1e-12;
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;
pub const MAX_EIG_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    pub fn real(re: f64) -> Self {
        Complex { re, im: 0.0 }
    }

    pub fn norm(&self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn dist(&self, other: &Complex) -> f64 {
        (self.re - other.re).hypot(self.im - other.im)
    }
}

/// Descending modulus, then descending real part, then descending imaginary part.
fn spectral_order(a: &Complex, b: &Complex) -> Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then(b.re.total_cmp(&a.re))
        .then(b.im.total_cmp(&a.im))
}

/// All eigenvalues of a square matrix, with multiplicity, sorted by
/// descending modulus.
pub fn eig_all(a: &Matrix) -> Result<Vec<Complex>> {
    if !a.is_square() {
        return Err(Error::dim("eig_all", format!("non-square {:?}", a.shape())));
    }
    let n = a.rows();
    if n > MAX_EIG_DIM {
        return Err(Error::Contract(format!(
            "eig_all supports n <= {MAX_EIG_DIM}, got {n}"
        )));
    }
    if !a.is_finite() {
        return Err(Error::Numeric("eig_all input has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h = a.clone();
    hessenberg_reduce(&mut h);
    let mut eigs = hessenberg_qr(&mut h)?;
    eigs.sort_by(spectral_order);
    Ok(eigs)
}

/// In-place Householder reduction to upper Hessenberg form.
fn hessenberg_reduce(a: &mut Matrix) {
    let n = a.rows();
    if n < 3 {
        return;
    }
    let mut v = vec![0.0; n];
    for k in 0..n - 2 {
        let alpha_norm: f64 = (k + 1..n).map(|i| a[(i, k)] * a[(i, k)]).sum::<f64>().sqrt();
        if alpha_norm == 0.0 {
            continue;
        }
        let x0 = a[(k + 1, k)];
        let alpha = if x0 >= 0.0 { -alpha_norm } else { alpha_norm };
        for i in 0..n {
            v[i] = 0.0;
        }
        v[k + 1] = x0 - alpha;
        for i in k + 2..n {
            v[i] = a[(i, k)];
        }
        let vnorm2: f64 = v[k + 1..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // A <- H A with H = I - 2 v v^T / (v^T v)
        for j in 0..n {
            let dot: f64 = (k + 1..n).map(|i| v[i] * a[(i, j)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k + 1..n {
                a[(i, j)] -= f * v[i];
            }
        }
        // A <- A H
        for i in 0..n {
            let dot: f64 = (k + 1..n).map(|j| a[(i, j)] * v[j]).sum();
            let f = 2.0 * dot / vnorm2;
            for j in k + 1..n {
                a[(i, j)] -= f * v[j];
            }
        }
        for i in k + 2..n {
            a[(i, k)] = 0.0;
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix (destroyed).
fn hessenberg_qr(a: &mut Matrix) -> Result<Vec<Complex>> {
    let n = a.rows();
    let cap = (10 * n * n).max(30);
    let mut eig = vec![Complex::real(0.0); n];
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[(i, j)].abs();
        }
    }
    let mut total_its = 0usize;
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            // Look for a single small subdiagonal element.
            let mut l = nu;
            while l >= 1 {
                let mut s = a[(l - 1, l - 1)].abs() + a[(l, l)].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[(l, l - 1)].abs() <= QR_DEFLATION_TOL * s {
                    a[(l, l - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[(nu, nu)];
            if l == nu {
                eig[nu] = Complex::real(x + t);
                nn -= 1;
                break;
            }
            let mut y = a[(nu - 1, nu - 1)];
            let mut w = a[(nu, nu - 1)] * a[(nu - 1, nu)];
            if l == nu - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    let z = p + sign(z, p);
                    eig[nu - 1] = Complex::real(x + z);
                    eig[nu] = Complex::real(if z != 0.0 { x - w / z } else { x + z });
                } else {
                    eig[nu - 1] = Complex::new(x + p, -z);
                    eig[nu] = Complex::new(x + p, z);
                }
                nn -= 2;
                break;
            }
            if total_its >= cap {
                return Err(Error::Numeric(format!(
                    "QR iteration did not converge within {cap} sweeps"
                )));
            }
            if its == 10 || its == 20 {
                // Exceptional shift.
                t += x;
                for i in 0..=nu {
                    a[(i, i)] -= x;
                }
                let s = a[(nu, nu - 1)].abs() + a[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            total_its += 1;

            // Form the shift and look for two consecutive small subdiagonals.
            let mut m = nu - 2;
            let (mut p, mut q, mut r);
            loop {
                let z = a[(m, m)];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a[(m + 1, m)] + a[(m, m + 1)];
                q = a[(m + 1, m + 1)] - z - rr - ss;
                r = a[(m + 2, m + 1)];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[(m, m - 1)].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[(m - 1, m - 1)].abs() + z.abs() + a[(m + 1, m + 1)].abs());
                if u <= f64::EPSILON * v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                a[(i, i - 2)] = 0.0;
                if i != m + 2 {
                    a[(i, i - 3)] = 0.0;
                }
            }
            // Double QR step on rows l..=nn and columns m..=nn.
            let mut k = m;
            while k < nu {
                let mut xk = 0.0;
                if k != m {
                    p = a[(k, k - 1)];
                    q = a[(k + 1, k - 1)];
                    r = if k != nu - 1 { a[(k + 2, k - 1)] } else { 0.0 };
                    xk = p.abs() + q.abs() + r.abs();
                    if xk != 0.0 {
                        p /= xk;
                        q /= xk;
                        r /= xk;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            a[(k, k - 1)] = -a[(k, k - 1)];
                        }
                    } else {
                        a[(k, k - 1)] = -s * xk;
                    }
                    p += s;
                    let xx = p / s;
                    let yy = q / s;
                    let zz = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        let mut pp = a[(k, j)] + q * a[(k + 1, j)];
                        if k != nu - 1 {
                            pp += r * a[(k + 2, j)];
                            a[(k + 2, j)] -= pp * zz;
                        }
                        a[(k + 1, j)] -= pp * yy;
                        a[(k, j)] -= pp * xx;
                    }
                    let mmin = if nu < k + 3 { nu } else { k + 3 };
                    for i in l..=mmin {
                        let mut pp = xx * a[(i, k)] + yy * a[(i, k + 1)];
                        if k != nu - 1 {
                            pp += zz * a[(i, k + 2)];
                            a[(i, k + 2)] -= pp * r;
                        }
                        a[(i, k + 1)] -= pp * q;
                        a[(i, k)] -= pp;
                    }
                }
                k += 1;
            }
        }
    }
    Ok(eig)
}

/// Spectral radius estimate by power iteration.
///
/// With `nonneg` set, the input must be entrywise nonnegative. The iteration
/// then runs on `A + I`, which keeps the Perron root dominant even for
/// periodic `A` (eigenvalues spread on the circle `|λ| = ρ`), and stops once
/// the Collatz–Wielandt bounds `min_i (Bx)_i / x_i <= ρ(B) <= max_i (Bx)_i / x_i`
/// agree to [`POWER_TOL`]. Inputs whose bounds never close, such as some
/// reducible matrices, fall back to the full spectrum.
pub fn dominant_eig(a: &Matrix, nonneg: bool) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::dim("dominant_eig", format!("non-square {:?}", a.shape())));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(0.0);
    }
    if nonneg && a.as_slice().iter().any(|v| *v < 0.0) {
        return Err(Error::Contract("dominant_eig: nonneg flag set on a matrix with negative entries".into()));
    }
    let mut x: Vec<f64> = if nonneg {
        vec![1.0; n]
    } else {
        // Deterministic start with no special alignment to common eigenvectors.
        (0..n).map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64).collect()
    };
    normalize(&mut x);
    let mut prev = f64::NAN;
    let mut settled = 0;
    for _ in 0..POWER_MAX_ITER {
        let mut y = a.matvec(&x);
        if nonneg {
            y.iter_mut().zip(&x).for_each(|(yi, xi)| *yi += xi);
        }
        let positive = nonneg && x.iter().all(|v| *v > 1e-300);
        if positive {
            let (lo, hi) = y
                .iter()
                .zip(&x)
                .map(|(yi, xi)| yi / xi)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
            if hi - lo < POWER_TOL {
                return Ok(0.5 * (lo + hi) - 1.0);
            }
        }
        let ny = norm2(&y);
        if ny == 0.0 {
            return Ok(0.0);
        }
        let est = ny / norm2(&x) - if nonneg { 1.0 } else { 0.0 };
        // A stalled norm ratio is not proof of convergence when the spectral
        // gap is small; positive iterates wait for the bracket instead.
        if !positive && (est - prev).abs() < POWER_TOL * est.max(1.0) {
            settled += 1;
            if settled >= 3 {
                return Ok(est);
            }
        } else {
            settled = 0;
        }
        prev = est;
        x = y;
        normalize(&mut x);
    }
    if nonneg {
        return spectral_radius(a);
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge in {POWER_MAX_ITER} iterations"
    )))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Largest eigenvalue modulus from the full spectrum.
pub fn spectral_radius(a: &Matrix) -> Result<f64> {
    Ok(eig_all(a)?.first().map_or(0.0, |e| e.norm()))
}
