use super::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub gamma_grad: Vec<f32>,
    pub beta_grad: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

/// State saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            gamma_grad: vec![0.0; channels],
            beta_grad: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Normalizes with batch statistics. Running statistics move only when
    /// `update_running` is set.
    pub fn forward_train(&mut self, x: &Tensor, update_running: bool) -> (Tensor, BnCache) {
        assert_eq!(x.c, self.channels);
        let hw = x.plane_len();
        let count = (x.n * hw) as f64;
        let mut y = x.clone();
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0f32; self.channels];
        for c in 0..self.channels {
            let (mut sum, mut sq) = (0.0f64, 0.0f64);
            for i in 0..x.n {
                for &v in x.plane(i, c) {
                    sum += v as f64;
                }
            }
            let mean = sum / count;
            for i in 0..x.n {
                for &v in x.plane(i, c) {
                    let d = v as f64 - mean;
                    sq += d * d;
                }
            }
            let var = sq / count;
            let istd = 1.0 / (var + BN_EPS as f64).sqrt();
            inv_std[c] = istd as f32;
            let (g, b) = (self.gamma[c], self.beta[c]);
            for i in 0..x.n {
                let off = (i * x.c + c) * hw;
                for j in off..off + hw {
                    let xh = ((x.data[j] as f64 - mean) * istd) as f32;
                    xhat.data[j] = xh;
                    y.data[j] = g * xh + b;
                }
            }
            if update_running {
                let m = BN_MOMENTUM;
                let unbiased = if count > 1.0 {
                    var * count / (count - 1.0)
                } else {
                    var
                };
                self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean as f32;
                self.running_var[c] = (1.0 - m) * self.running_var[c] + m * unbiased as f32;
            }
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels);
        let hw = x.plane_len();
        let (scale, shift) = self.eval_affine();
        let mut y = x.clone();
        for (p, chunk) in y.data.chunks_mut(hw).enumerate() {
            let c = p % self.channels;
            let (s, t) = (scale[c], shift[c]);
            chunk.iter_mut().for_each(|v| *v = *v * s + t);
        }
        y
    }

    /// Per-channel `(scale, shift)` applied in evaluation mode.
    pub fn eval_affine(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = (0..self.channels)
            .map(|c| self.gamma[c] / (self.running_var[c] + BN_EPS).sqrt())
            .collect();
        let shift = (0..self.channels)
            .map(|c| self.beta[c] - self.running_mean[c] * scale[c])
            .collect();
        (scale, shift)
    }

    /// Gradient of a training-mode forward. Parameter gradients accumulate when
    /// `param_grad` is set.
    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor, param_grad: bool) -> Tensor {
        let hw = dy.plane_len();
        let count = (dy.n * hw) as f64;
        let mut dx = dy.clone();
        for c in 0..self.channels {
            let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
            for i in 0..dy.n {
                let off = (i * dy.c + c) * hw;
                for j in off..off + hw {
                    sdy += dy.data[j] as f64;
                    sdyx += (dy.data[j] * cache.xhat.data[j]) as f64;
                }
            }
            if param_grad {
                self.gamma_grad[c] += sdyx as f32;
                self.beta_grad[c] += sdy as f32;
            }
            let k = self.gamma[c] as f64 * cache.inv_std[c] as f64 / count;
            for i in 0..dy.n {
                let off = (i * dy.c + c) * hw;
                for j in off..off + hw {
                    let v = count * dy.data[j] as f64 - sdy - cache.xhat.data[j] as f64 * sdyx;
                    dx.data[j] = (k * v) as f32;
                }
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.gamma_grad.iter_mut().for_each(|g| *g = 0.0);
        self.beta_grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn slice(&self, keep: &[usize]) -> BatchNorm2d {
        let pick = |v: &[f32]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        BatchNorm2d {
            channels: keep.len(),
            gamma: pick(&self.gamma),
            beta: pick(&self.beta),
            gamma_grad: vec![0.0; keep.len()],
            beta_grad: vec![0.0; keep.len()],
            running_mean: pick(&self.running_mean),
            running_var: pick(&self.running_var),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::from_vec(2, 2, 2, 1, vec![0.3, -1.2, 0.8, 2.0, 1.5, 0.1, -0.7, 0.4])
    }

    #[test]
    fn train_output_is_normalized() {
        let mut bn = BatchNorm2d::new(2);
        let (y, _) = bn.forward_train(&sample(), true);
        for c in 0..2 {
            let vals: Vec<f32> = (0..2).flat_map(|i| y.plane(i, c).to_vec()).collect();
            let mean: f32 = vals.iter().sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-6);
        }
        assert!(bn.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        bn.gamma = vec![1.3, 0.7];
        bn.beta = vec![0.1, -0.2];
        let x = sample();
        let probe: Vec<f32> = (0..8).map(|i| (i as f32 * 0.7).cos()).collect();
        let loss = |bn: &mut BatchNorm2d, x: &Tensor| -> f64 {
            let (y, _) = bn.forward_train(x, false);
            y.data
                .iter()
                .zip(&probe)
                .map(|(a, b)| (*a * *b) as f64)
                .sum()
        };
        let (_, cache) = bn.forward_train(&x, false);
        let dy = Tensor::from_vec(2, 2, 2, 1, probe.clone());
        let dx = bn.backward(&cache, &dy, true);
        let h = 1e-2f32;
        for idx in 0..8 {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h as f64);
            assert!(
                (fd - dx.data[idx] as f64).abs() < 2e-3,
                "{idx}: {fd} vs {}",
                dx.data[idx]
            );
        }
    }

    #[test]
    fn frozen_running_stats_stay_put() {
        let mut bn = BatchNorm2d::new(2);
        let before = bn.clone();
        bn.forward_train(&sample(), false);
        assert_eq!(bn, before);
    }
}
