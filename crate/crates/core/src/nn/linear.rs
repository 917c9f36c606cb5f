use super::tensor::{gemm, Tensor};
use rand::Rng;

/// Fully-connected layer on `N × in` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub weight_grad: Vec<f32>,
    pub bias_grad: Vec<f32>,
}

impl Linear {
    /// Uniform init in `±1/sqrt(inputs)` for weight and bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f32).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            inputs,
            outputs,
            weight,
            bias,
            weight_grad: vec![0.0; inputs * outputs],
            bias_grad: vec![0.0; outputs],
        }
    }

    /// `x` is `N × inputs` flattened.
    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        let mut y = vec![0.0; n * self.outputs];
        for row in y.chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            n,
            self.inputs,
            self.outputs,
            x,
            self.inputs as isize,
            1,
            &self.weight,
            1,
            self.inputs as isize,
            1.0,
            &mut y,
            self.outputs as isize,
            1,
        );
        y
    }

    pub fn backward(&mut self, x: &[f32], dy: &[f32], n: usize, param_grad: bool) -> Vec<f32> {
        if param_grad {
            gemm(
                self.outputs,
                n,
                self.inputs,
                dy,
                1,
                self.outputs as isize,
                x,
                self.inputs as isize,
                1,
                1.0,
                &mut self.weight_grad,
                self.inputs as isize,
                1,
            );
            for row in dy.chunks(self.outputs) {
                for (g, d) in self.bias_grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dx = vec![0.0; n * self.inputs];
        gemm(
            n,
            self.outputs,
            self.inputs,
            dy,
            self.outputs as isize,
            1,
            &self.weight,
            self.inputs as isize,
            1,
            0.0,
            &mut dx,
            self.inputs as isize,
            1,
        );
        dx
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.iter_mut().for_each(|g| *g = 0.0);
        self.bias_grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Keep the input columns `ins`.
    pub fn slice_inputs(&self, ins: &[usize]) -> Linear {
        let mut weight = Vec::with_capacity(self.outputs * ins.len());
        for o in 0..self.outputs {
            weight.extend(ins.iter().map(|&i| self.weight[o * self.inputs + i]));
        }
        Linear {
            inputs: ins.len(),
            outputs: self.outputs,
            weight,
            bias: self.bias.clone(),
            weight_grad: vec![0.0; self.outputs * ins.len()],
            bias_grad: vec![0.0; self.outputs],
        }
    }
}

/// `N × C × H × W` to `N × C` by spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let hw = x.plane_len();
    x.data
        .chunks(hw)
        .map(|p| p.iter().sum::<f32>() / hw as f32)
        .collect()
}

pub fn global_avg_pool_backward(dy: &[f32], n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (p, chunk) in dx.data.chunks_mut(hw).enumerate() {
        let g = dy[p] / hw as f32;
        chunk.iter_mut().for_each(|v| *v = g);
    }
    dx
}
