use super::tensor::{gemm, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// 2-D convolution without bias; padding is `kernel / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out_ch × in_ch × kernel × kernel`.
    pub weight: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let len = out_ch * in_ch * kernel * kernel;
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    /// He-normal init with fan-out scaling.
    pub fn kaiming<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mut c = Self::zeros(in_ch, out_ch, kernel, stride);
        let std = (2.0 / (out_ch * kernel * kernel) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        for w in &mut c.weight {
            *w = dist.sample(rng) as f32;
        }
        c
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let ohw = oh * ow;
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kh) * k + kw) * ohw;
                    let dst = &mut col[row..row + ohw];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + kh as isize - p;
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kw as isize - p;
                            *o = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let ohw = oh * ow;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kh) * k + kw) * ohw;
                    let src = &col[row..row + ohw];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + kh as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kw as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_ch, "conv input channel mismatch");
        let (oh, ow) = self.out_size(x.h, x.w);
        let mut y = Tensor::zeros(x.n, self.out_ch, oh, ow);
        if self.out_ch == 0 || self.in_ch == 0 {
            return y;
        }
        let rows = self.col_rows();
        let ohw = oh * ow;
        let mut col = vec![0.0f32; rows * ohw];
        for i in 0..x.n {
            self.im2col(x.sample(i), x.h, x.w, oh, ow, &mut col);
            gemm(
                self.out_ch,
                rows,
                ohw,
                &self.weight,
                rows as isize,
                1,
                &col,
                ohw as isize,
                1,
                0.0,
                y.sample_mut(i),
                ohw as isize,
                1,
            );
        }
        y
    }

    /// Back-propagates `dy`. Accumulates into `self.grad` when `weight_grad`,
    /// and returns the input gradient when `input_grad`.
    pub fn backward(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        weight_grad: bool,
        input_grad: bool,
    ) -> Option<Tensor> {
        let (oh, ow) = (dy.h, dy.w);
        let mut dx = input_grad.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        if self.out_ch == 0 || self.in_ch == 0 {
            return dx;
        }
        let rows = self.col_rows();
        let ohw = oh * ow;
        let mut col = vec![0.0f32; rows * ohw];
        for i in 0..x.n {
            let dys = dy.sample(i);
            if weight_grad {
                self.im2col(x.sample(i), x.h, x.w, oh, ow, &mut col);
                // grad[F × rows] += dy[F × ohw] · colᵀ
                gemm(
                    self.out_ch,
                    ohw,
                    rows,
                    dys,
                    ohw as isize,
                    1,
                    &col,
                    1,
                    ohw as isize,
                    1.0,
                    &mut self.grad,
                    rows as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcol[rows × ohw] = Wᵀ · dy
                gemm(
                    rows,
                    self.out_ch,
                    ohw,
                    &self.weight,
                    1,
                    rows as isize,
                    dys,
                    ohw as isize,
                    1,
                    0.0,
                    &mut col,
                    ohw as isize,
                    1,
                );
                self.col2im(&col, x.h, x.w, oh, ow, dx.sample_mut(i));
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Keep output filters `outs` and input channels `ins`, in the given order.
    pub fn slice(&self, outs: &[usize], ins: &[usize]) -> Conv2d {
        let mut c = Conv2d::zeros(ins.len(), outs.len(), self.kernel, self.stride);
        let kk = self.kernel * self.kernel;
        for (fo, &f) in outs.iter().enumerate() {
            for (co, &ci) in ins.iter().enumerate() {
                let src = (f * self.in_ch + ci) * kk;
                let dst = (fo * ins.len() + co) * kk;
                c.weight[dst..dst + kk].copy_from_slice(&self.weight[src..src + kk]);
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.out_size(x.h, x.w);
        let p = conv.pad() as isize;
        let k = conv.kernel;
        let mut y = Tensor::zeros(x.n, conv.out_ch, oh, ow);
        for n in 0..x.n {
            for f in 0..conv.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for c in 0..conv.in_ch {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iy = (oy * conv.stride) as isize + kh as isize - p;
                                    let ix = (ox * conv.stride) as isize + kw as isize - p;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < x.h
                                        && (ix as usize) < x.w
                                    {
                                        let xv = x.data[((n * x.c + c) * x.h + iy as usize) * x.w
                                            + ix as usize];
                                        let wv =
                                            conv.weight[((f * conv.in_ch + c) * k + kh) * k + kw];
                                        acc += (xv * wv) as f64;
                                    }
                                }
                            }
                        }
                        y.data[((n * conv.out_ch + f) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(
            n,
            c,
            h,
            w,
            (0..n * c * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(3, 1), (3, 2), (1, 2), (1, 1)] {
            let conv = Conv2d::kaiming(3, 4, k, s, &mut rng);
            let x = random_tensor(&mut rng, 2, 3, 6, 5);
            let y = conv.forward(&x);
            assert!(y.max_abs_diff(&naive(&conv, &x)) < 1e-5, "k={k} s={s}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::kaiming(2, 3, 3, 2, &mut rng);
        let x = random_tensor(&mut rng, 2, 2, 5, 5);
        let probe = random_tensor(&mut rng, 2, 3, 3, 3);
        let loss = |c: &Conv2d, x: &Tensor| -> f64 {
            c.forward(x)
                .data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let dx = conv.backward(&x, &probe, true, true).unwrap();
        let h = 1e-2f32;
        for idx in [0, 5, 17, 40] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h as f64);
            assert!(
                (fd - dx.data[idx] as f64).abs() < 1e-3,
                "dx[{idx}] {fd} vs {}",
                dx.data[idx]
            );
        }
        for idx in [0, 7, 30, 53] {
            let mut cp = conv.clone();
            cp.weight[idx] += h;
            let mut cm = conv.clone();
            cm.weight[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h as f64);
            assert!((fd - conv.grad[idx] as f64).abs() < 1e-3, "dw[{idx}]");
        }
    }

    #[test]
    fn empty_channels_produce_zeros() {
        let conv = Conv2d::zeros(0, 3, 3, 1);
        let y = conv.forward(&Tensor::zeros(2, 0, 4, 4));
        assert_eq!((y.c, y.h), (3, 4));
        assert!(y.data.iter().all(|&v| v == 0.0));
    }
}
