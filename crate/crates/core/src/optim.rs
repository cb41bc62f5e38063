//! First-order optimizers over flat parameter vectors. Both step in the
//! descent direction; callers that maximize pass the negated gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    AdaptiveMoments { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::AdaptiveMoments { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::SgdMomentum { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::AdaptiveMoments { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Learning rate `initial * factor^(step / every)`; `every = 0` keeps it
/// constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_every: usize,
    #[serde(default = "one")]
    pub decay_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, decay_every: 0, decay_factor: 1.0 }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.decay_every == 0 {
            self.initial
        } else {
            self.initial * self.decay_factor.powi((step / self.decay_every) as i32)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial >= 0.0 && self.initial.is_finite() && self.decay_factor > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad learning rate schedule {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let second = match kind {
            OptimizerKind::AdaptiveMoments { .. } => vec![0.0; n_params],
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self { kind, first: vec![0.0; n_params], second, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One descent step. A zero learning rate leaves `params` untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        assert_eq!(grad.len(), params.len(), "gradient length mismatch");
        self.t += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *m = momentum * *m + g;
                    if lr != 0.0 {
                        *p -= lr * *m;
                    }
                }
            }
            OptimizerKind::AdaptiveMoments { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), s) in params.iter_mut().zip(grad).zip(&mut self.first).zip(&mut self.second) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *s = beta2 * *s + (1.0 - beta2) * g * g;
                    if lr != 0.0 {
                        *p -= lr * (*m / c1) / ((*s / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_descends() {
        for kind in [OptimizerKind::default(), OptimizerKind::SgdMomentum { momentum: 0.9 }] {
            let mut x = vec![3.0, -2.0];
            let mut st = OptimizerState::new(kind, 2);
            for _ in 0..2000 {
                let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
                st.step(&mut x, &g, 0.01);
            }
            assert!(x.iter().all(|v| v.abs() < 1e-2), "{kind:?}: {x:?}");
        }
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut x = vec![0.1, 0.2];
        let before = x.clone();
        let mut st = OptimizerState::new(OptimizerKind::default(), 2);
        st.step(&mut x, &[1.0, -1.0], 0.0);
        assert_eq!(x, before);
    }

    #[test]
    fn schedule_decays() {
        let s = LrSchedule { initial: 1.0, decay_every: 10, decay_factor: 0.5 };
        assert_eq!(s.at(9), 1.0);
        assert_eq!(s.at(10), 0.5);
        assert_eq!(s.at(25), 0.25);
        assert_eq!(LrSchedule::constant(0.3).at(1000), 0.3);
    }
}
