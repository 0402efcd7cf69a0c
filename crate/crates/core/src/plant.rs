//! Ground-truth linear plant and its uncertain variant.
//!
//! The default plant is a four-state building model: three envelope states
//! and the room air temperature (observed), one heat-flow input in W and three
//! disturbances (ambient temperature, solar gain, internal gains). Its state
//! matrix is a nonnegative arrowhead matrix whose spectrum is fixed in the
//! surrogate config; see [`SurrogateDesign`].

use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eig_all, spectral_radius, Matrix};
use crate::models::{Dims, Model};
use crate::rng::Rng;

/// Checked-in surrogate building parameters.
pub const DEFAULT_PLANT_TOML: &str = include_str!("../config/surrogate_plant.toml");

#[derive(Clone, Debug, PartialEq)]
pub struct PlantModel {
    pub a: Matrix,
    pub b: Matrix,
    pub e: Matrix,
    /// Index of the measured state used for tracking and bounds.
    pub observed: usize,
}

impl PlantModel {
    pub fn new(a: Matrix, b: Matrix, e: Matrix, observed: usize) -> Result<Self> {
        let n = a.rows();
        if !a.is_square() || b.rows() != n || e.rows() != n || observed >= n {
            return Err(Error::Config(format!(
                "plant shapes A {:?}, B {:?}, E {:?}, observed {observed}",
                a.shape(),
                b.shape(),
                e.shape()
            )));
        }
        if a.as_slice().iter().any(|v| *v < 0.0) {
            return Err(Error::Config("plant A must be entrywise nonnegative".into()));
        }
        if !(a.is_finite() && b.is_finite() && e.is_finite()) {
            return Err(Error::Config("plant matrices must be finite".into()));
        }
        let rho = spectral_radius(&a)?;
        if rho >= 1.0 {
            return Err(Error::Config(format!("plant spectral radius {rho} is not below 1")));
        }
        Ok(PlantModel { a, b, e, observed })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            nx: self.a.rows(),
            nu: self.b.cols(),
            nd: self.e.cols(),
        }
    }

    pub fn step(&self, x: &[f64], u: &[f64], d: &[f64]) -> Vec<f64> {
        let mut out = self.a.matvec(x);
        for (o, (bu, ed)) in out.iter_mut().zip(self.b.matvec(u).into_iter().zip(self.e.matvec(d))) {
            *o += bu + ed;
        }
        out
    }

    /// `A(v) x + B u + E d + w` with `v`, `w` drawn from `rng`.
    pub fn step_uncertain(
        &self,
        x: &[f64],
        u: &[f64],
        d: &[f64],
        unc: &UncertaintySpec,
        rng: &mut Rng,
    ) -> Vec<f64> {
        let n = x.len();
        let mut out = vec![0.0; n];
        let shared = match (unc.sigma_v > 0.0, unc.parametric) {
            (true, Parametric::SharedScalar) => 1.0 + unc.sigma_v * std_normal(rng),
            _ => 1.0,
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.a.row_slice(i);
            let mut acc = 0.0;
            for (aij, xj) in row.iter().zip(x) {
                let factor = match (unc.sigma_v > 0.0, unc.parametric) {
                    (true, Parametric::PerEntry) => 1.0 + unc.sigma_v * std_normal(rng),
                    _ => shared,
                };
                acc += aij * factor * xj;
            }
            *o = acc;
        }
        for (o, (bu, ed)) in out.iter_mut().zip(self.b.matvec(u).into_iter().zip(self.e.matvec(d))) {
            *o += bu + ed;
        }
        if unc.sigma_w > 0.0 {
            for o in out.iter_mut() {
                *o += unc.sigma_w * std_normal(rng);
            }
        }
        out
    }

    /// `(I − A)⁻¹ (B u + E d)`.
    pub fn steady_state(&self, u: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        let n = self.a.rows();
        let lhs = &Matrix::identity(n) - &self.a;
        let mut rhs = self.b.matvec(u);
        for (r, ed) in rhs.iter_mut().zip(self.e.matvec(d)) {
            *r += ed;
        }
        Ok(lhs.solve(&Matrix::column(&rhs))?.into_vec())
    }

    /// The plant as an exact linear model.
    pub fn to_model(&self) -> Model {
        Model::linear(self.a.clone(), self.b.clone(), self.e.clone()).expect("plant shapes are valid")
    }
}

fn std_normal(rng: &mut Rng) -> f64 {
    rng.sample(Normal::new(0.0, 1.0).expect("unit normal"))
}

/// How the parametric noise `v` perturbs `A`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parametric {
    /// `A_ij (1 + v_ij)` with independent `v_ij` every step.
    #[default]
    PerEntry,
    /// `A (1 + v)` with one scalar per step.
    SharedScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintySpec {
    pub sigma_v: f64,
    pub sigma_w: f64,
    pub parametric: Parametric,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        UncertaintySpec {
            sigma_v: 0.01,
            sigma_w: 0.1,
            parametric: Parametric::PerEntry,
        }
    }
}

impl UncertaintySpec {
    pub const NONE: UncertaintySpec = UncertaintySpec {
        sigma_v: 0.0,
        sigma_w: 0.0,
        parametric: Parametric::PerEntry,
    };

    pub fn validate(&self) -> Result<()> {
        if self.sigma_v >= 0.0 && self.sigma_w >= 0.0 && self.sigma_v.is_finite() && self.sigma_w.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("uncertainty std devs must be >= 0, got {self:?}")))
        }
    }

    pub fn is_nominal(&self) -> bool {
        self.sigma_v == 0.0 && self.sigma_w == 0.0
    }

    /// Restricts this spec to the sources active under `mode`.
    pub fn for_mode(&self, mode: UncertaintyMode) -> UncertaintySpec {
        let (v, w) = match mode {
            UncertaintyMode::None => (0.0, 0.0),
            UncertaintyMode::W => (0.0, self.sigma_w),
            UncertaintyMode::V => (self.sigma_v, 0.0),
            UncertaintyMode::Wv => (self.sigma_v, self.sigma_w),
        };
        UncertaintySpec {
            sigma_v: v,
            sigma_w: w,
            parametric: self.parametric,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMode {
    None,
    W,
    V,
    Wv,
}

impl UncertaintyMode {
    pub const ALL: [UncertaintyMode; 4] = [
        UncertaintyMode::None,
        UncertaintyMode::W,
        UncertaintyMode::V,
        UncertaintyMode::Wv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyMode::None => "none",
            UncertaintyMode::W => "w",
            UncertaintyMode::V => "v",
            UncertaintyMode::Wv => "wv",
        }
    }
}

impl std::fmt::Display for UncertaintyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for UncertaintyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(UncertaintyMode::None),
            "w" => Ok(UncertaintyMode::W),
            "v" => Ok(UncertaintyMode::V),
            "wv" | "vw" | "w&v" => Ok(UncertaintyMode::Wv),
            other => Err(Error::Config(format!("unknown uncertainty mode '{other}'"))),
        }
    }
}

/// Building envelope parameters from which the plant matrices are derived.
///
/// `A` is an arrowhead matrix: envelope states `j = 1..3` only exchange heat
/// with the room (`A[j][j] = wall_diagonal[j]`, `A[j][4] = coupling[j]`), and
/// the room row is solved so that the spectrum equals `eigenvalues` exactly.
/// For an arrowhead matrix with diagonal `δ`, the characteristic polynomial is
/// `(λ − δ₄) Π(λ − δ_j) − Σ_j c_j Π_{k≠j}(λ − δ_k)` with `c_j = A[j][4] A[4][j]`,
/// so `δ₄ = Σλ − Σδ_j` and `c_j = −Π_i(δ_j − λ_i) / Π_{k≠j}(δ_j − δ_k)`.
/// Strict interlacing of `wall_diagonal` with `eigenvalues` makes every
/// `c_j` positive and so every entry nonnegative.
///
/// The ambient column of `E` is `1 − rowsum(A)`, so a building without heat
/// sources settles at ambient temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateDesign {
    pub eigenvalues: Vec<f64>,
    pub wall_diagonal: Vec<f64>,
    /// `A[j][4] = coupling_fraction · (1 − wall_diagonal[j])`.
    pub coupling_fraction: f64,
    /// Room temperature rise per W per sample.
    pub heater_gain: f64,
    /// Per-state solar gain as a fraction of `heater_gain`.
    pub solar_share: Vec<f64>,
    /// Per-state internal gain as a fraction of `heater_gain`.
    pub internal_share: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PlantConfigFile {
    surrogate: SurrogateDesign,
}

impl SurrogateDesign {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: PlantConfigFile = toml::from_str(text)?;
        Ok(file.surrogate)
    }

    pub fn default_building() -> Self {
        Self::from_toml(DEFAULT_PLANT_TOML).expect("bundled plant config parses")
    }

    pub fn build(&self) -> Result<PlantModel> {
        let nw = self.wall_diagonal.len();
        let n = nw + 1;
        if self.eigenvalues.len() != n || self.solar_share.len() != n || self.internal_share.len() != n {
            return Err(Error::Config(format!(
                "surrogate design needs {n} eigenvalues and gain shares for {nw} walls"
            )));
        }
        if !(self.coupling_fraction > 0.0 && self.coupling_fraction < 1.0) || self.heater_gain <= 0.0 {
            return Err(Error::Config("coupling fraction must be in (0, 1) and heater gain > 0".into()));
        }
        let lam = &self.eigenvalues;
        let dw = &self.wall_diagonal;
        let mut a = Matrix::zeros(n, n);
        let room = nw;
        a[(room, room)] = lam.iter().sum::<f64>() - dw.iter().sum::<f64>();
        for j in 0..nw {
            let num: f64 = lam.iter().map(|l| dw[j] - l).product();
            let den: f64 = (0..nw).filter(|&k| k != j).map(|k| dw[j] - dw[k]).product();
            let c = -num / den;
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!(
                    "wall diagonal {} does not interlace the target eigenvalues",
                    dw[j]
                )));
            }
            let up = self.coupling_fraction * (1.0 - dw[j]);
            a[(j, j)] = dw[j];
            a[(j, room)] = up;
            a[(room, j)] = c / up;
        }
        let sums = a.row_sums();
        if sums.iter().any(|s| *s >= 1.0) {
            return Err(Error::Config(format!("row sums {sums:?} leave no ambient coupling")));
        }
        let mut b = Matrix::zeros(n, 1);
        b[(room, 0)] = self.heater_gain;
        let mut e = Matrix::zeros(n, 3);
        for i in 0..n {
            e[(i, 0)] = 1.0 - sums[i];
            e[(i, 1)] = self.heater_gain * self.solar_share[i];
            e[(i, 2)] = self.heater_gain * self.internal_share[i];
        }
        PlantModel::new(a, b, e, room)
    }
}

/// The surrogate building plant from the bundled config.
pub fn build_default_plant() -> PlantModel {
    SurrogateDesign::default_building()
        .build()
        .expect("bundled surrogate design is valid")
}

/// Designed eigenvalues of the bundled surrogate, in descending order.
pub fn default_plant_eigenvalues() -> Vec<f64> {
    SurrogateDesign::default_building().eigenvalues
}

/// Eigenvalues of `A` sorted by descending modulus.
pub fn plant_spectrum(p: &PlantModel) -> Result<Vec<crate::linalg::Complex>> {
    eig_all(&p.a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plant_matches_design() {
        let p = build_default_plant();
        assert!(p.a.as_slice().iter().all(|v| *v >= 0.0));
        let eig = plant_spectrum(&p).unwrap();
        for (z, t) in eig.iter().zip([0.999, 0.994, 0.983, 0.254]) {
            assert!((z.re - t).abs() < 1e-9 && z.im.abs() < 1e-9, "{z:?} vs {t}");
        }
        assert_eq!(p.observed, 3);
        assert!(p.b[(3, 0)] > 0.0);
    }

    #[test]
    fn ambient_is_the_unforced_equilibrium() {
        let p = build_default_plant();
        let x = p.steady_state(&[0.0], &[10.0, 0.0, 0.0]).unwrap();
        for v in x {
            assert!((v - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_noise_equals_nominal() {
        let p = build_default_plant();
        let mut rng = crate::rng::substream(1, "uncertainty");
        let x = [20.0, 19.0, 18.0, 21.0];
        let (u, d) = ([1000.0], [5.0, 300.0, 200.0]);
        assert_eq!(p.step(&x, &u, &d), p.step_uncertain(&x, &u, &d, &UncertaintySpec::NONE, &mut rng));
    }

    #[test]
    fn non_interlacing_design_is_rejected() {
        let mut d = SurrogateDesign::default_building();
        d.wall_diagonal[0] = 0.9995;
        assert!(matches!(d.build(), Err(Error::Config(_))));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("wv".parse::<UncertaintyMode>().unwrap(), UncertaintyMode::Wv);
        assert!("x".parse::<UncertaintyMode>().is_err());
        let s = UncertaintySpec::default().for_mode(UncertaintyMode::W);
        assert_eq!((s.sigma_v, s.sigma_w), (0.0, 0.1));
    }
}
