//! First-order optimizers with explicit, serializable state.

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd(0.1, 0.9, 5e-4)
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate schedule across the epochs of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, epoch: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if total == 0 => base,
            LrSchedule::Cosine => {
                base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
            }
        }
    }
}

/// One parameter tensor and its gradient.
pub struct Param<'a, T> {
    pub value: &'a mut [T],
    pub grad: &'a [T],
}

/// Optimizer slots for an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub step: u64,
    /// Momentum buffer (SGD) or first moment (Adam), per parameter.
    pub first: Vec<Vec<T>>,
    /// Second moment (Adam only).
    pub second: Vec<Vec<T>>,
}

impl<T> Default for OptimizerState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub state: OptimizerState<T>,
}

impl<T: Float> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
        }
    }

    /// Applies one update with learning rate `lr` to `params`, which must be
    /// passed in the same order on every call.
    pub fn step(&mut self, params: &mut [Param<'_, T>], lr: f64) {
        let c = &self.config;
        let st = &mut self.state;
        if st.first.len() != params.len() {
            st.first = params
                .iter()
                .map(|p| vec![T::zero(); p.value.len()])
                .collect();
            st.second = match c.kind {
                OptimizerKind::Adam => params
                    .iter()
                    .map(|p| vec![T::zero(); p.value.len()])
                    .collect(),
                OptimizerKind::Sgd => Vec::new(),
            };
        }
        st.step += 1;
        let t = |x: f64| T::from(x).expect("representable");
        let (lr_t, wd, mom) = (t(lr), t(c.weight_decay), t(c.momentum));
        match c.kind {
            OptimizerKind::Sgd => {
                let first_step = st.step == 1;
                for (p, buf) in params.iter_mut().zip(st.first.iter_mut()) {
                    for ((w, &g), b) in p.value.iter_mut().zip(p.grad).zip(buf.iter_mut()) {
                        let g = g + wd * *w;
                        *b = if first_step || mom == T::zero() {
                            g
                        } else {
                            mom * *b + g
                        };
                        *w = *w - lr_t * *b;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (c.beta1, c.beta2);
                let bc1 = 1.0 - b1.powi(st.step as i32);
                let bc2 = 1.0 - b2.powi(st.step as i32);
                let (b1t, b2t, eps) = (t(b1), t(b2), t(c.eps));
                let (one_b1, one_b2) = (t(1.0 - b1), t(1.0 - b2));
                let (bc1t, bc2t) = (t(bc1), t(bc2));
                for ((p, m), v) in params
                    .iter_mut()
                    .zip(st.first.iter_mut())
                    .zip(st.second.iter_mut())
                {
                    for (((w, &g), m), v) in p
                        .value
                        .iter_mut()
                        .zip(p.grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let g = g + wd * *w;
                        *m = b1t * *m + one_b1 * g;
                        *v = b2t * *v + one_b2 * g * g;
                        let mhat = *m / bc1t;
                        let vhat = *v / bc2t;
                        *w = *w - lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
