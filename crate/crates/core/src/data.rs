//! Time-series datasets: synthetic generation, reference and bound series,
//! week splits and CSV ingestion.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::plant::PlantModel;
use crate::rng::{substream, Rng};

pub const SAMPLES_PER_DAY: usize = 288;
pub const SAMPLES_PER_WEEK: usize = 7 * SAMPLES_PER_DAY;
pub const SAMPLE_PERIOD_S: f64 = 300.0;
pub const MIN_DAYS: usize = 28;

/// Heat-flow excitation used when generating identification data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Excitation {
    /// `max(0, 4000 sin(2πk/288))`: heating only, zero half of each day.
    #[default]
    ClippedSine,
    /// `2000 + 2000 sin(2πk/288)`.
    OffsetSine,
    /// Piecewise-constant uniform levels in `[0, 4000]`, held for 1 to 12 samples.
    RandomSteps,
}

impl std::str::FromStr for Excitation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clipped-sine" => Ok(Excitation::ClippedSine),
            "offset-sine" => Ok(Excitation::OffsetSine),
            "random-steps" => Ok(Excitation::RandomSteps),
            other => Err(Error::Config(format!("unknown excitation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsConfig {
    pub x_lo: f64,
    pub x_hi: f64,
    pub u_lo: f64,
    pub u_hi: f64,
    /// Lowers `x_lo` by this much outside 07:00-19:00 when set.
    pub night_setback: Option<f64>,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            x_lo: 19.0,
            x_hi: 25.0,
            u_lo: 0.0,
            u_hi: 5000.0,
            night_setback: None,
        }
    }
}

impl BoundsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.x_lo > self.x_hi || self.u_lo > self.u_hi {
            return Err(Error::Config(format!("lower bound above upper bound in {self:?}")));
        }
        Ok(())
    }

    pub fn x_lo_at(&self, k: usize) -> f64 {
        match self.night_setback {
            Some(s) => {
                let h = hour_of_day(k);
                if (7.0..19.0).contains(&h) {
                    self.x_lo
                } else {
                    self.x_lo - s
                }
            }
            None => self.x_lo,
        }
    }
}

/// Evaluation reference `20 + 2 sin(2πk/288)` °C.
pub fn eval_reference(k: usize) -> f64 {
    20.0 + 2.0 * (2.0 * PI * k as f64 / SAMPLES_PER_DAY as f64).sin()
}

pub fn hour_of_day(k: usize) -> f64 {
    (k % SAMPLES_PER_DAY) as f64 * 24.0 / SAMPLES_PER_DAY as f64
}

/// Index ranges of the train/validation/test weeks (2nd, 3rd and 4th week).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    pub fn standard() -> Split {
        let w = SAMPLES_PER_WEEK;
        Split {
            train: w..2 * w,
            val: 2 * w..3 * w,
            test: 3 * w..4 * w,
        }
    }

    pub fn get(&self, part: SplitPart) -> Range<usize> {
        match part {
            SplitPart::Train => self.train.clone(),
            SplitPart::Val => self.val.clone(),
            SplitPart::Test => self.test.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Val, SplitPart::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
        }
    }
}

/// Aligned series sampled every 300 s. Bounds apply to the observed state
/// and to every input; other states are unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub u: Matrix,
    pub d: Matrix,
    pub r: Vec<f64>,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub observed: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn nx(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let lens = [
            self.u.rows(),
            self.d.rows(),
            self.r.len(),
            self.x_lo.len(),
            self.x_hi.len(),
            self.u_lo.len(),
            self.u_hi.len(),
        ];
        if lens.iter().any(|l| *l != t) {
            return Err(Error::Schema(format!("series lengths differ: {t} states vs {lens:?}")));
        }
        if self.observed >= self.nx() {
            return Err(Error::Schema(format!(
                "observed index {} out of range for {} states",
                self.observed,
                self.nx()
            )));
        }
        Ok(())
    }

    /// Standard week split; needs at least four weeks of data.
    pub fn split(&self) -> Result<Split> {
        if self.len() < MIN_DAYS * SAMPLES_PER_DAY {
            return Err(Error::Config(format!(
                "dataset has {} samples, the standard split needs {}",
                self.len(),
                MIN_DAYS * SAMPLES_PER_DAY
            )));
        }
        Ok(Split::standard())
    }

    /// Per-state bound vectors at sample `k` (±∞ for unobserved states).
    pub fn state_bounds(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.nx();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        lo[self.observed] = self.x_lo[k];
        hi[self.observed] = self.x_hi[k];
        (lo, hi)
    }

    pub fn input_bounds(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let m = self.u.cols();
        (vec![self.u_lo[k]; m], vec![self.u_hi[k]; m])
    }

    pub fn observed_series(&self, range: Range<usize>) -> Vec<f64> {
        range.map(|k| self.x[(k, self.observed)]).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["k".to_string()];
        header.extend((1..=self.x.cols()).map(|i| format!("x{i}")));
        header.extend((1..=self.u.cols()).map(|i| format!("u{i}")));
        header.extend((1..=self.d.cols()).map(|i| format!("d{i}")));
        header.extend(["r", "xlo", "xhi", "ulo", "uhi"].map(String::from));
        out.push_str(&header.join(","));
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{k}");
            let row = self
                .x
                .row_slice(k)
                .iter()
                .chain(self.u.row_slice(k))
                .chain(self.d.row_slice(k))
                .chain([&self.r[k], &self.x_lo[k], &self.x_hi[k], &self.u_lo[k], &self.u_hi[k]]);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn load_csv(path: &Path, defaults: &BoundsConfig) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_csv(&text, defaults)
    }

    /// Parses CSV text. Columns `r`, `xlo`, `xhi`, `ulo`, `uhi` are optional
    /// and default to the evaluation reference and `defaults`. The last state
    /// column is treated as the observed state.
    pub fn from_csv(text: &str, defaults: &BoundsConfig) -> Result<Dataset> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Schema("empty CSV input".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let find = |name: &str| cols.iter().position(|c| *c == name);
        let family = |prefix: &str| -> Vec<usize> {
            (1..)
                .map(|i| find(&format!("{prefix}{i}")))
                .take_while(Option::is_some)
                .flatten()
                .collect()
        };
        let (xc, uc, dc) = (family("x"), family("u"), family("d"));
        if find("k").is_none() || xc.is_empty() || uc.is_empty() || dc.is_empty() {
            return Err(Error::Schema(format!(
                "header must contain k, x1.., u1.., d1..; got '{header}'"
            )));
        }
        let opt = ["r", "xlo", "xhi", "ulo", "uhi"].map(find);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    detail: format!("expected {} fields, found {}", cols.len(), fields.len()),
                });
            }
            let mut vals = Vec::with_capacity(fields.len());
            for (f, name) in fields.iter().zip(&cols) {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    detail: format!("column {name}: '{f}' is not a number"),
                })?;
                vals.push(v);
            }
            rows.push(vals);
        }
        let t = rows.len();
        let pick = |idx: &[usize]| Matrix::from_fn(t, idx.len(), |i, j| rows[i][idx[j]]);
        let series = |col: Option<usize>, default: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..t)
                .map(|i| col.map_or_else(|| default(i), |c| rows[i][c]))
                .collect()
        };
        let ds = Dataset {
            x: pick(&xc),
            u: pick(&uc),
            d: pick(&dc),
            r: series(opt[0], &eval_reference),
            x_lo: series(opt[1], &|k| defaults.x_lo_at(k)),
            x_hi: series(opt[2], &|_| defaults.x_hi),
            u_lo: series(opt[3], &|_| defaults.u_lo),
            u_hi: series(opt[4], &|_| defaults.u_hi),
            observed: xc.len() - 1,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub days: usize,
    pub x0: f64,
    pub excitation: Excitation,
    pub amplitude: f64,
    pub bounds: BoundsConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            days: MIN_DAYS,
            x0: 20.0,
            excitation: Excitation::ClippedSine,
            amplitude: 4000.0,
            bounds: BoundsConfig::default(),
        }
    }
}

/// Daily-periodic ambient temperature, solar gain and internal gains.
pub fn synthesize_disturbances(t: usize, rng: &mut Rng) -> Matrix {
    let ambient_noise = Normal::new(0.0, 0.1).expect("valid std");
    let gain_noise = Normal::new(0.0, 25.0).expect("valid std");
    let cloud = Uniform::new(0.6, 1.0).expect("valid range");
    let day_offset = Normal::new(0.0, 1.0).expect("valid std");
    let mut d = Matrix::zeros(t, 3);
    let mut drift = 0.0;
    let mut cloudiness = 1.0;
    let mut offset = 0.0;
    for k in 0..t {
        if k % SAMPLES_PER_DAY == 0 {
            cloudiness = rng.sample(cloud);
            offset = rng.sample(day_offset);
        }
        let h = hour_of_day(k);
        drift = 0.98 * drift + rng.sample(ambient_noise);
        let ambient = 7.5 + 7.5 * (2.0 * PI * (h - 9.0) / 24.0).sin() + offset + drift;
        let solar = if (7.0..=19.0).contains(&h) {
            800.0 * (PI * (h - 7.0) / 12.0).sin().max(0.0) * cloudiness
        } else {
            0.0
        };
        let occupancy = smoothstep(h - 7.5) * smoothstep(18.5 - h);
        let internal = (500.0 * occupancy + rng.sample(gain_noise) * occupancy).max(0.0);
        d[(k, 0)] = ambient;
        d[(k, 1)] = solar.clamp(0.0, 800.0);
        d[(k, 2)] = internal;
    }
    d
}

/// 0 below 0, 1 above 1, cubic in between.
fn smoothstep(v: f64) -> f64 {
    let t = v.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn excitation_series(cfg: &DataConfig, t: usize, rng: &mut Rng) -> Vec<f64> {
    let a = cfg.amplitude;
    match cfg.excitation {
        Excitation::ClippedSine => (0..t)
            .map(|k| (a * (2.0 * PI * k as f64 / SAMPLES_PER_DAY as f64).sin()).max(0.0))
            .collect(),
        Excitation::OffsetSine => (0..t)
            .map(|k| 0.5 * a + 0.5 * a * (2.0 * PI * k as f64 / SAMPLES_PER_DAY as f64).sin())
            .collect(),
        Excitation::RandomSteps => {
            let level = Uniform::new_inclusive(0.0, a).expect("valid range");
            let hold = Uniform::new_inclusive(1usize, 12).expect("valid range");
            let mut out = Vec::with_capacity(t);
            while out.len() < t {
                let v = rng.sample(level);
                let n = rng.sample(hold);
                out.extend(std::iter::repeat_n(v, n));
            }
            out.truncate(t);
            out
        }
    }
}

/// Simulates the nominal plant from a uniform initial temperature.
pub fn generate_sysid_dataset(p: &PlantModel, cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    if cfg.days < MIN_DAYS {
        return Err(Error::Config(format!(
            "need at least {MIN_DAYS} days for the week split, got {}",
            cfg.days
        )));
    }
    cfg.bounds.validate()?;
    let dims = p.dims();
    if dims.nu != 1 || dims.nd != 3 {
        return Err(Error::Config(format!(
            "dataset generator drives one heat input and three disturbances, plant has {dims:?}"
        )));
    }
    let t = cfg.days * SAMPLES_PER_DAY;
    let mut rng = substream(seed, "data");
    let d = synthesize_disturbances(t, &mut rng);
    let u_series = excitation_series(cfg, t, &mut rng);
    let mut x = Matrix::zeros(t, dims.nx);
    let mut state = vec![cfg.x0; dims.nx];
    for k in 0..t {
        x.row_slice_mut(k).copy_from_slice(&state);
        state = p.step(&state, &[u_series[k]], d.row_slice(k));
    }
    let refs = generate_control_references(t, seed, &cfg.bounds);
    Ok(Dataset {
        x,
        u: Matrix::column(&u_series),
        d,
        r: refs.eval_r,
        x_lo: refs.x_lo,
        x_hi: refs.x_hi,
        u_lo: refs.u_lo,
        u_hi: refs.u_hi,
        observed: p.observed,
    })
}

/// Evaluation reference, bound series and training samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlReferences {
    pub eval_r: Vec<f64>,
    /// Independent `U(15, 25)` draws.
    pub train_r: Vec<f64>,
    /// Independent `U(0, 25)` draws for every state entry.
    pub train_x: Matrix,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
}

pub const TRAIN_R_RANGE: (f64, f64) = (15.0, 25.0);
pub const TRAIN_X_RANGE: (f64, f64) = (0.0, 25.0);

pub fn generate_control_references(t: usize, seed: u64, bounds: &BoundsConfig) -> ControlReferences {
    let mut rng = substream(seed, "sampling");
    let rd = Uniform::new(TRAIN_R_RANGE.0, TRAIN_R_RANGE.1).expect("valid range");
    let xd = Uniform::new(TRAIN_X_RANGE.0, TRAIN_X_RANGE.1).expect("valid range");
    let train_r = (0..t).map(|_| rng.sample(rd)).collect();
    let train_x = Matrix::from_fn(t, 4, |_, _| rng.sample(xd));
    ControlReferences {
        eval_r: (0..t).map(eval_reference).collect(),
        train_r,
        train_x,
        x_lo: (0..t).map(|k| bounds.x_lo_at(k)).collect(),
        x_hi: vec![bounds.x_hi; t],
        u_lo: vec![bounds.u_lo; t],
        u_hi: vec![bounds.u_hi; t],
    }
}
