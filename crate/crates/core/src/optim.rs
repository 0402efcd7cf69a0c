//! Adam and AdamW with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adam,
    /// Decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            algorithm: Algorithm::AdamW,
            lr,
            weight_decay,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers are created lazily on the first step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every `(name, param)` pair with its gradient.
    pub fn step(&mut self, params: &mut [(&str, &mut Matrix)], grads: &[&Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "optimizer_step",
                    format!("parameter {name} {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| Matrix::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, (_, p))| m.shape() != p.shape())
        {
            return Err(Error::dim("optimizer_step", "parameter set changed between steps"));
        }

        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = match c.algorithm {
            Algorithm::Adam => 1.0,
            Algorithm::AdamW => 1.0 - c.lr * c.weight_decay,
        };
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.as_mut_slice();
            let md = m.as_mut_slice();
            let vd = v.as_mut_slice();
            for (i, &gi) in g.as_slice().iter().enumerate() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] = pd[i] * decay - c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cfg: OptimizerConfig, w0: f64, grad: impl Fn(f64) -> f64, steps: usize) -> f64 {
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut w = Matrix::row(&[w0]);
        for _ in 0..steps {
            let g = Matrix::row(&[grad(w[(0, 0)])]);
            opt.step(&mut [("w", &mut w)], &[&g]).unwrap();
        }
        w[(0, 0)]
    }

    #[test]
    fn single_adam_step_moves_by_lr() {
        // First step: m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps).
        let w1 = run(OptimizerConfig::adam(0.1), 1.0, |w| 2.0 * w, 1);
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((w1 - expected).abs() < 1e-15);
        assert!((w1 - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient() {
        assert_eq!(run(OptimizerConfig::adam(0.1), 1.5, |_| 0.0, 5), 1.5);
        let w = run(OptimizerConfig::adamw(0.1, 0.01), 1.5, |_| 0.0, 1);
        assert!((w - 1.5 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let w = run(OptimizerConfig::adam(0.1), 0.0, |w| 2.0 * (w - 3.0), 200);
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
        let mut w = Matrix::row(&[1.0]);
        let g = Matrix::row(&[f64::NAN]);
        let err = opt.step(&mut [("policy.w2", &mut w)], &[&g]).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref s) if s.contains("policy.w2")));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn step_count_increments() {
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        let mut w = Matrix::zeros(2, 2);
        let g = Matrix::ones(2, 2);
        for k in 1..=3 {
            opt.step(&mut [("w", &mut w)], &[&g]).unwrap();
            assert_eq!(opt.steps(), k);
        }
        let mut wrong = Matrix::zeros(3, 1);
        let g3 = Matrix::ones(3, 1);
        assert!(opt.step(&mut [("w", &mut wrong)], &[&g3]).is_err());
    }
}
