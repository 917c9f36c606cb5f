//! CIFAR-style basic-block ResNets with per-convolution gates.
//!
//! Gates are indexed by prunable slot: slot 0 is the stem, and block `b`
//! owns slots `1 + 2b` (first conv) and `2 + 2b` (second conv). Gates
//! multiply batch-normalized outputs before the ReLU. The second conv's gate
//! multiplies the residual sum, so the shortcut branch is gated with the same
//! channel mask and the block output stays dimensionally consistent after
//! surgery.
//!
//! The same type represents extracted models: channel counts shrink, identity
//! shortcuts carry an index map from output to input channels, and a block
//! whose first conv lost every filter keeps only the batch norm of its second
//! conv, which evaluates on an all-zero input.

use crate::error::{Error, Result};
use crate::graph::{ArchGraph, ResNetShape};
use crate::nn::batchnorm::BnCache;
use crate::nn::linear::{global_avg_pool, global_avg_pool_backward};
use crate::nn::{BatchNorm2d, Conv2d, Linear, Param, Tensor};
use crate::objective::CountBasis;
use crate::pruner::{FilterBank, PrunerLayer};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    fn new<R: Rng + ?Sized>(
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::kaiming(inp, out, kernel, stride, rng),
            bn: BatchNorm2d::new(out),
        }
    }

    fn eval(&self, x: &Tensor) -> Tensor {
        self.bn.forward_eval(&self.conv.forward(x))
    }

    fn train(&mut self, x: &Tensor, update_running: bool) -> (Tensor, BnCache) {
        let a = self.conv.forward(x);
        self.bn.forward_train(&a, update_running)
    }

    fn backward(
        &mut self,
        x: &Tensor,
        cache: &BnCache,
        dy: &Tensor,
        params: bool,
        input: bool,
    ) -> Option<Tensor> {
        let da = self.bn.backward(cache, dy, params);
        self.conv.backward(x, &da, params, input)
    }

    fn zero_grad(&mut self) {
        self.conv.zero_grad();
        self.bn.zero_grad();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut {
    /// `map[j]` is the input channel feeding output channel `j`, if any.
    Identity {
        map: Vec<Option<usize>>,
    },
    Projection(ConvBn),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Residual {
    Active {
        conv1: ConvBn,
        conv2: ConvBn,
    },
    /// The first conv kept no filters; only the second conv's batch norm
    /// remains, acting on zeros.
    Eliminated {
        bn: BatchNorm2d,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub residual: Residual,
    pub shortcut: Shortcut,
}

impl Block {
    pub fn is_eliminated(&self) -> bool {
        matches!(self.residual, Residual::Eliminated { .. })
    }

    fn shortcut_eval(&self, x: &Tensor) -> Tensor {
        match &self.shortcut {
            Shortcut::Identity { map } => identity_gather(x, map),
            Shortcut::Projection(p) => p.eval(x),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }
}

fn identity_gather(x: &Tensor, map: &[Option<usize>]) -> Tensor {
    let hw = x.plane_len();
    let mut y = Tensor::zeros(x.n, map.len(), x.h, x.w);
    for i in 0..x.n {
        for (j, src) in map.iter().enumerate() {
            if let Some(s) = *src {
                let dst = (i * map.len() + j) * hw;
                y.data[dst..dst + hw].copy_from_slice(x.plane(i, s));
            }
        }
    }
    y
}

fn identity_scatter(dy: &Tensor, map: &[Option<usize>], dx: &mut Tensor) {
    let hw = dy.plane_len();
    for i in 0..dy.n {
        for (j, src) in map.iter().enumerate() {
            if let Some(s) = *src {
                let from = (i * dy.c + j) * hw;
                let to = (i * dx.c + s) * hw;
                for k in 0..hw {
                    dx.data[to + k] += dy.data[from + k];
                }
            }
        }
    }
}

/// Per-channel gate factors, one vector per prunable slot.
pub type Gates = [Vec<f32>];

#[derive(Debug, Clone, PartialEq)]
pub struct ResNet {
    pub shape: ResNetShape,
    pub stem: ConvBn,
    pub blocks: Vec<Block>,
    pub fc: Linear,
}

struct BlockTrace {
    c1: Option<BnCache>,
    u1: Option<Tensor>,
    h: Option<Tensor>,
    c2: BnCache,
    cs: Option<BnCache>,
    u2: Tensor,
    g1: Option<Vec<f32>>,
    g2: Option<Vec<f32>>,
}

/// Activations retained by a training-mode forward pass.
pub struct Trace {
    input: Tensor,
    stem_cache: BnCache,
    stem_u: Tensor,
    stem_g: Option<Vec<f32>>,
    /// `acts[0]` is the stem output, `acts[b + 1]` the output of block `b`.
    acts: Vec<Tensor>,
    blocks: Vec<BlockTrace>,
    pooled: Vec<f32>,
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub weights: bool,
    pub gates: bool,
}

fn gate_grad(dp: &Tensor, u: &Tensor) -> Vec<f64> {
    let hw = dp.plane_len();
    let mut g = vec![0.0f64; dp.c];
    for (p, (a, b)) in dp.data.chunks(hw).zip(u.data.chunks(hw)).enumerate() {
        let s: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (*x as f64) * (*y as f64))
            .sum();
        g[p % dp.c] += s;
    }
    g
}

fn relu_backward(dy: &mut Tensor, y: &Tensor) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

impl ResNet {
    pub fn new<R: Rng + ?Sized>(shape: &ResNetShape, rng: &mut R) -> Result<Self> {
        let n = shape.blocks_per_stage()?;
        shape.validate()?;
        let stem = ConvBn::new(shape.in_channels, shape.base_width, 3, 1, rng);
        let mut blocks = Vec::new();
        let mut width = shape.base_width;
        for stage in 0..3 {
            let out = shape.base_width << stage;
            for index in 0..n {
                let stride = if stage > 0 && index == 0 { 2 } else { 1 };
                let conv1 = ConvBn::new(width, out, 3, stride, rng);
                let conv2 = ConvBn::new(out, out, 3, 1, rng);
                let shortcut = if stride != 1 || width != out {
                    Shortcut::Projection(ConvBn::new(width, out, 1, stride, rng))
                } else {
                    Shortcut::Identity {
                        map: (0..out).map(Some).collect(),
                    }
                };
                blocks.push(Block {
                    in_channels: width,
                    out_channels: out,
                    stride,
                    residual: Residual::Active { conv1, conv2 },
                    shortcut,
                });
                width = out;
            }
        }
        let fc = Linear::new(width, shape.num_classes, rng);
        Ok(Self {
            shape: *shape,
            stem,
            blocks,
            fc,
        })
    }

    pub fn num_slots(&self) -> usize {
        1 + 2 * self.blocks.len()
    }

    /// Convolution owning prunable slot `slot`, if it still exists.
    pub fn conv_for_slot(&self, slot: usize) -> Option<&Conv2d> {
        if slot == 0 {
            return Some(&self.stem.conv);
        }
        let b = self.blocks.get((slot - 1) / 2)?;
        match &b.residual {
            Residual::Active { conv1, conv2 } => Some(if slot % 2 == 1 {
                &conv1.conv
            } else {
                &conv2.conv
            }),
            Residual::Eliminated { .. } => None,
        }
    }

    pub fn filter_bank(&self, slot: usize, name: &str) -> Result<FilterBank> {
        let conv = self
            .conv_for_slot(slot)
            .ok_or_else(|| Error::Config(format!("slot {slot} has no convolution")))?;
        FilterBank::from_f32(name, conv.out_ch, conv.in_ch, conv.kernel, &conv.weight)
    }

    fn slot_width(&self, slot: usize) -> usize {
        if slot == 0 {
            return self.stem.conv.out_ch;
        }
        let b = &self.blocks[(slot - 1) / 2];
        match (&b.residual, slot % 2) {
            (Residual::Active { conv1, .. }, 1) => conv1.conv.out_ch,
            _ => b.out_channels,
        }
    }

    fn check_gates(&self, gates: Option<&Gates>) -> Result<()> {
        let Some(g) = gates else { return Ok(()) };
        if g.len() != self.num_slots() {
            return Err(Error::Config(format!(
                "{} gate vectors for {} slots",
                g.len(),
                self.num_slots()
            )));
        }
        for (slot, v) in g.iter().enumerate() {
            if v.len() != self.slot_width(slot) {
                return Err(Error::Config(format!(
                    "gate {slot} has {} entries, layer has {} channels",
                    v.len(),
                    self.slot_width(slot)
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.shape.image_size;
        if x.c != self.shape.in_channels || x.h != s || x.w != s {
            return Err(Error::Config(format!(
                "input is {}x{}x{}, model expects {}x{s}x{s}",
                x.c, x.h, x.w, self.shape.in_channels
            )));
        }
        Ok(())
    }

    /// Evaluation-mode logits, `N × classes`.
    pub fn forward_eval(&self, x: &Tensor, gates: Option<&Gates>) -> Result<Vec<f32>> {
        self.check_input(x)?;
        self.check_gates(gates)?;
        let out = self.features_eval(x, gates, None);
        Ok(self.fc.forward(&global_avg_pool(&out), x.n))
    }

    /// Evaluation-mode forward that also reports, for every block, the shortcut
    /// output and the residual-branch output (both before gating).
    pub fn block_branches_eval(
        &self,
        x: &Tensor,
        gates: Option<&Gates>,
    ) -> Result<Vec<(Tensor, Tensor)>> {
        self.check_input(x)?;
        self.check_gates(gates)?;
        let mut branches = Vec::with_capacity(self.blocks.len());
        self.features_eval(x, gates, Some(&mut branches));
        Ok(branches)
    }

    fn features_eval(
        &self,
        x: &Tensor,
        gates: Option<&Gates>,
        mut branches: Option<&mut Vec<(Tensor, Tensor)>>,
    ) -> Tensor {
        let mut cur = self.stem.eval(x);
        if let Some(g) = gates {
            cur.scale_channels(&g[0]);
        }
        cur.relu_inplace();
        for (b, block) in self.blocks.iter().enumerate() {
            let fx = match &block.residual {
                Residual::Active { conv1, conv2 } => {
                    let mut h = conv1.eval(&cur);
                    if let Some(g) = gates {
                        h.scale_channels(&g[1 + 2 * b]);
                    }
                    h.relu_inplace();
                    conv2.eval(&h)
                }
                Residual::Eliminated { bn } => {
                    let (oh, ow) = block.out_hw(cur.h, cur.w);
                    bn.forward_eval(&Tensor::zeros(cur.n, block.out_channels, oh, ow))
                }
            };
            let sc = block.shortcut_eval(&cur);
            let mut u = fx.clone();
            u.add_assign(&sc);
            if let Some(out) = branches.as_deref_mut() {
                out.push((sc, fx));
            }
            if let Some(g) = gates {
                u.scale_channels(&g[2 + 2 * b]);
            }
            u.relu_inplace();
            cur = u;
        }
        cur
    }

    /// Training-mode forward (batch statistics). Running statistics update only
    /// when `update_running` is set.
    pub fn forward_train(
        &mut self,
        x: &Tensor,
        gates: Option<&Gates>,
        update_running: bool,
    ) -> Result<(Vec<f32>, Trace)> {
        self.check_input(x)?;
        self.check_gates(gates)?;
        let (mut stem_u, stem_cache) = self.stem.train(x, update_running);
        let stem_g = gates.map(|g| g[0].clone());
        let mut cur = stem_u.clone();
        if let Some(g) = &stem_g {
            cur.scale_channels(g);
        }
        cur.relu_inplace();
        if stem_g.is_none() {
            // Without a gate the pre-activation is never read back.
            stem_u = Tensor::zeros(0, 0, 0, 0);
        }
        let mut acts = vec![cur];
        let mut traces = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            let g1 = gates.map(|g| g[1 + 2 * b].clone());
            let g2 = gates.map(|g| g[2 + 2 * b].clone());
            let x_in = acts.last().expect("stem output");
            let block = &mut self.blocks[b];
            let (fx, c1, u1, h, c2) = match &mut block.residual {
                Residual::Active { conv1, conv2 } => {
                    let (u1, c1) = conv1.train(x_in, update_running);
                    let mut h = u1.clone();
                    if let Some(g) = &g1 {
                        h.scale_channels(g);
                    }
                    h.relu_inplace();
                    let (fx, c2) = conv2.train(&h, update_running);
                    (fx, Some(c1), Some(u1), Some(h), c2)
                }
                Residual::Eliminated { bn } => {
                    let (oh, ow) = (
                        (x_in.h - 1) / block.stride + 1,
                        (x_in.w - 1) / block.stride + 1,
                    );
                    let zeros = Tensor::zeros(x_in.n, block.out_channels, oh, ow);
                    let (fx, c2) = bn.forward_train(&zeros, update_running);
                    (fx, None, None, None, c2)
                }
            };
            let (sc, cs) = match &mut block.shortcut {
                Shortcut::Identity { map } => (identity_gather(x_in, map), None),
                Shortcut::Projection(p) => {
                    let (s, c) = p.train(x_in, update_running);
                    (s, Some(c))
                }
            };
            let mut u2 = fx;
            u2.add_assign(&sc);
            let mut y = u2.clone();
            if let Some(g) = &g2 {
                y.scale_channels(g);
            }
            y.relu_inplace();
            traces.push(BlockTrace {
                c1,
                u1: if g1.is_some() { u1 } else { None },
                h,
                c2,
                cs,
                u2,
                g1,
                g2,
            });
            acts.push(y);
        }
        let last = acts.last().expect("block output");
        let pooled = global_avg_pool(last);
        let logits = self.fc.forward(&pooled, x.n);
        Ok((
            logits,
            Trace {
                input: x.clone(),
                stem_cache,
                stem_u,
                stem_g,
                acts,
                blocks: traces,
                pooled,
            },
        ))
    }

    /// Back-propagates `dlogits` through a training trace. Weight gradients
    /// accumulate into the layers; gate gradients are returned per slot.
    pub fn backward(
        &mut self,
        trace: &Trace,
        dlogits: &[f32],
        req: GradRequest,
    ) -> Option<Vec<Vec<f64>>> {
        let n = trace.input.n;
        let last = trace.acts.last().expect("block output");
        let dpool = self.fc.backward(&trace.pooled, dlogits, n, req.weights);
        let mut dcur = global_avg_pool_backward(&dpool, n, last.c, last.h, last.w);
        let want_gates = req.gates && trace.stem_g.is_some();
        let mut gate_grads: Vec<Vec<f64>> = if want_gates {
            vec![Vec::new(); self.num_slots()]
        } else {
            Vec::new()
        };

        for b in (0..self.blocks.len()).rev() {
            let t = &trace.blocks[b];
            let x_in = &trace.acts[b];
            let y = &trace.acts[b + 1];
            relu_backward(&mut dcur, y);
            if want_gates {
                gate_grads[2 + 2 * b] = gate_grad(&dcur, &t.u2);
            }
            if let Some(g) = &t.g2 {
                dcur.scale_channels(g);
            }
            let du2 = dcur;
            let block = &mut self.blocks[b];
            let mut dx = Tensor::zeros(x_in.n, x_in.c, x_in.h, x_in.w);
            match &mut block.shortcut {
                Shortcut::Identity { map } => identity_scatter(&du2, map, &mut dx),
                Shortcut::Projection(p) => {
                    let c = t.cs.as_ref().expect("projection cache");
                    if let Some(d) = p.backward(x_in, c, &du2, req.weights, true) {
                        dx.add_assign(&d);
                    }
                }
            }
            match &mut block.residual {
                Residual::Active { conv1, conv2 } => {
                    let h = t.h.as_ref().expect("hidden activations");
                    let mut dh = conv2
                        .backward(h, &t.c2, &du2, req.weights, true)
                        .expect("input grad");
                    relu_backward(&mut dh, h);
                    if want_gates {
                        gate_grads[1 + 2 * b] =
                            gate_grad(&dh, t.u1.as_ref().expect("gated pre-activation"));
                    }
                    if let Some(g) = &t.g1 {
                        dh.scale_channels(g);
                    }
                    let c1 = t.c1.as_ref().expect("conv1 cache");
                    if let Some(d) = conv1.backward(x_in, c1, &dh, req.weights, true) {
                        dx.add_assign(&d);
                    }
                }
                Residual::Eliminated { bn } => {
                    bn.backward(&t.c2, &du2, req.weights);
                }
            }
            dcur = dx;
        }
        relu_backward(&mut dcur, &trace.acts[0]);
        if want_gates {
            gate_grads[0] = gate_grad(&dcur, &trace.stem_u);
        }
        if let Some(g) = &trace.stem_g {
            dcur.scale_channels(g);
        }
        if req.weights {
            self.stem
                .backward(&trace.input, &trace.stem_cache, &dcur, true, false);
        }
        want_gates.then_some(gate_grads)
    }

    pub fn zero_grad(&mut self) {
        self.stem.zero_grad();
        for b in &mut self.blocks {
            match &mut b.residual {
                Residual::Active { conv1, conv2 } => {
                    conv1.zero_grad();
                    conv2.zero_grad();
                }
                Residual::Eliminated { bn } => bn.zero_grad(),
            }
            if let Shortcut::Projection(p) = &mut b.shortcut {
                p.zero_grad();
            }
        }
        self.fc.zero_grad();
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&mut self) -> Vec<Param<'_, f32>> {
        fn conv_bn<'a>(out: &mut Vec<Param<'a, f32>>, cb: &'a mut ConvBn) {
            out.push(Param {
                value: &mut cb.conv.weight,
                grad: &cb.conv.grad,
            });
            bn_params(out, &mut cb.bn);
        }
        fn bn_params<'a>(out: &mut Vec<Param<'a, f32>>, bn: &'a mut BatchNorm2d) {
            out.push(Param {
                value: &mut bn.gamma,
                grad: &bn.gamma_grad,
            });
            out.push(Param {
                value: &mut bn.beta,
                grad: &bn.beta_grad,
            });
        }
        let mut out = Vec::new();
        conv_bn(&mut out, &mut self.stem);
        for b in &mut self.blocks {
            match &mut b.residual {
                Residual::Active { conv1, conv2 } => {
                    conv_bn(&mut out, conv1);
                    conv_bn(&mut out, conv2);
                }
                Residual::Eliminated { bn } => bn_params(&mut out, bn),
            }
            if let Shortcut::Projection(p) = &mut b.shortcut {
                conv_bn(&mut out, p);
            }
        }
        out.push(Param {
            value: &mut self.fc.weight,
            grad: &self.fc.weight_grad,
        });
        out.push(Param {
            value: &mut self.fc.bias,
            grad: &self.fc.bias_grad,
        });
        out
    }

    /// Every stored array (parameters and running statistics) by name.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        fn conv_bn<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f32])>, p: &str, cb: &'a ConvBn) {
            let c = &cb.conv;
            out.push((
                format!("{p}.conv.weight"),
                vec![c.out_ch, c.in_ch, c.kernel, c.kernel],
                &c.weight,
            ));
            bn(out, &format!("{p}.bn"), &cb.bn);
        }
        fn bn<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f32])>, p: &str, b: &'a BatchNorm2d) {
            let s = vec![b.channels];
            out.push((format!("{p}.gamma"), s.clone(), &b.gamma));
            out.push((format!("{p}.beta"), s.clone(), &b.beta));
            out.push((format!("{p}.running_mean"), s.clone(), &b.running_mean));
            out.push((format!("{p}.running_var"), s, &b.running_var));
        }
        let mut out = Vec::new();
        conv_bn(&mut out, "stem", &self.stem);
        for (i, b) in self.blocks.iter().enumerate() {
            match &b.residual {
                Residual::Active { conv1, conv2 } => {
                    conv_bn(&mut out, &format!("block{i}.conv1"), conv1);
                    conv_bn(&mut out, &format!("block{i}.conv2"), conv2);
                }
                Residual::Eliminated { bn: b2 } => bn(&mut out, &format!("block{i}.conv2.bn"), b2),
            }
            if let Shortcut::Projection(p) = &b.shortcut {
                conv_bn(&mut out, &format!("block{i}.shortcut"), p);
            }
        }
        out.push((
            "fc.weight".into(),
            vec![self.fc.outputs, self.fc.inputs],
            &self.fc.weight,
        ));
        out.push(("fc.bias".into(), vec![self.fc.outputs], &self.fc.bias));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        fn conv_bn<'a>(out: &mut Vec<(String, &'a mut Vec<f32>)>, p: &str, cb: &'a mut ConvBn) {
            out.push((format!("{p}.conv.weight"), &mut cb.conv.weight));
            bn(out, &format!("{p}.bn"), &mut cb.bn);
        }
        fn bn<'a>(out: &mut Vec<(String, &'a mut Vec<f32>)>, p: &str, b: &'a mut BatchNorm2d) {
            out.push((format!("{p}.gamma"), &mut b.gamma));
            out.push((format!("{p}.beta"), &mut b.beta));
            out.push((format!("{p}.running_mean"), &mut b.running_mean));
            out.push((format!("{p}.running_var"), &mut b.running_var));
        }
        let mut out = Vec::new();
        conv_bn(&mut out, "stem", &mut self.stem);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            match &mut b.residual {
                Residual::Active { conv1, conv2 } => {
                    conv_bn(&mut out, &format!("block{i}.conv1"), conv1);
                    conv_bn(&mut out, &format!("block{i}.conv2"), conv2);
                }
                Residual::Eliminated { bn: b2 } => bn(&mut out, &format!("block{i}.conv2.bn"), b2),
            }
            if let Shortcut::Projection(p) = &mut b.shortcut {
                conv_bn(&mut out, &format!("block{i}.shortcut"), p);
            }
        }
        out.push(("fc.weight".into(), &mut self.fc.weight));
        out.push(("fc.bias".into(), &mut self.fc.bias));
        out
    }

    /// Overwrites stored arrays from `(name, data)` pairs; every array of the
    /// model must be present with the right length.
    pub fn load_tensors<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a [f32]>,
    ) -> Result<()> {
        for (name, dst) in self.named_tensors_mut() {
            let src =
                lookup(&name).ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
            if src.len() != dst.len() {
                return Err(Error::Config(format!(
                    "tensor {name} has {} values, expected {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    /// FNV-1a over the bytes of every stored array.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, _, data) in self.named_tensors() {
            h.write(name.as_bytes());
            for v in data {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn conv_weight_count(&self) -> u64 {
        self.count_params(CountBasis::ConvOnly)
    }

    /// Stored parameter count under the same basis used for pruning ratios.
    pub fn count_params(&self, basis: CountBasis) -> u64 {
        let with_bn = basis == CountBasis::WithBnFc;
        let cb = |c: &ConvBn| -> u64 {
            c.conv.weight.len() as u64 + if with_bn { 2 * c.bn.channels as u64 } else { 0 }
        };
        let mut total = cb(&self.stem);
        for b in &self.blocks {
            total += match &b.residual {
                Residual::Active { conv1, conv2 } => cb(conv1) + cb(conv2),
                Residual::Eliminated { bn } => {
                    if with_bn {
                        2 * bn.channels as u64
                    } else {
                        0
                    }
                }
            };
            if let Shortcut::Projection(p) = &b.shortcut {
                total += cb(p);
            }
        }
        if with_bn {
            total += (self.fc.weight.len() + self.fc.bias.len()) as u64;
        }
        total
    }

    /// Structural description sufficient to rebuild the model with
    /// [`ResNet::from_desc`].
    pub fn describe(&self) -> ModelDesc {
        ModelDesc {
            shape: self.shape,
            stem_width: self.stem.conv.out_ch,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockDesc {
                    in_channels: b.in_channels,
                    out_channels: b.out_channels,
                    stride: b.stride,
                    mid_channels: match &b.residual {
                        Residual::Active { conv1, .. } => Some(conv1.conv.out_ch),
                        Residual::Eliminated { .. } => None,
                    },
                    identity_map: match &b.shortcut {
                        Shortcut::Identity { map } => Some(map.clone()),
                        Shortcut::Projection(_) => None,
                    },
                })
                .collect(),
            fc_inputs: self.fc.inputs,
        }
    }

    /// Zero-initialised model with the described structure.
    pub fn from_desc(desc: &ModelDesc) -> Result<Self> {
        let s = &desc.shape;
        let zero_cb = |i: usize, o: usize, k: usize, st: usize| ConvBn {
            conv: Conv2d::zeros(i, o, k, st),
            bn: BatchNorm2d::new(o),
        };
        let stem = zero_cb(s.in_channels, desc.stem_width, 3, 1);
        let mut prev = desc.stem_width;
        let mut blocks = Vec::with_capacity(desc.blocks.len());
        for (i, b) in desc.blocks.iter().enumerate() {
            if b.in_channels != prev || b.stride == 0 {
                return Err(Error::Config(format!(
                    "block {i} description is inconsistent"
                )));
            }
            let residual = match b.mid_channels {
                Some(mid) => Residual::Active {
                    conv1: zero_cb(b.in_channels, mid, 3, b.stride),
                    conv2: zero_cb(mid, b.out_channels, 3, 1),
                },
                None => Residual::Eliminated {
                    bn: BatchNorm2d::new(b.out_channels),
                },
            };
            let shortcut = match &b.identity_map {
                Some(map) => {
                    if map.len() != b.out_channels
                        || map.iter().flatten().any(|&c| c >= b.in_channels)
                        || b.stride != 1
                    {
                        return Err(Error::Config(format!("block {i} identity map is invalid")));
                    }
                    Shortcut::Identity { map: map.clone() }
                }
                None => Shortcut::Projection(zero_cb(b.in_channels, b.out_channels, 1, b.stride)),
            };
            blocks.push(Block {
                in_channels: b.in_channels,
                out_channels: b.out_channels,
                stride: b.stride,
                residual,
                shortcut,
            });
            prev = b.out_channels;
        }
        if desc.fc_inputs != prev {
            return Err(Error::Config(
                "classifier width does not match last block".into(),
            ));
        }
        let fc = Linear {
            inputs: prev,
            outputs: s.num_classes,
            weight: vec![0.0; prev * s.num_classes],
            bias: vec![0.0; s.num_classes],
            weight_grad: vec![0.0; prev * s.num_classes],
            bias_grad: vec![0.0; s.num_classes],
        };
        Ok(Self {
            shape: *s,
            stem,
            blocks,
            fc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDesc {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Width of the first conv, `None` when the block was eliminated.
    pub mid_channels: Option<usize>,
    /// Present for identity shortcuts.
    pub identity_map: Option<Vec<Option<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDesc {
    pub shape: ResNetShape,
    pub stem_width: usize,
    pub blocks: Vec<BlockDesc>,
    pub fc_inputs: usize,
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Standard ResNet for `32 × 32` RGB input and its connectivity graph.
pub fn build_resnet<R: Rng + ?Sized>(
    depth: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<(ResNet, ArchGraph)> {
    build_resnet_shape(&ResNetShape::cifar(depth, num_classes), rng)
}

pub fn build_resnet_shape<R: Rng + ?Sized>(
    shape: &ResNetShape,
    rng: &mut R,
) -> Result<(ResNet, ArchGraph)> {
    let graph = ArchGraph::resnet(shape)?;
    let model = ResNet::new(shape, rng)?;
    Ok((model, graph))
}

/// One zero-initialised pruner per prunable convolution, sized from the
/// model's own filter banks.
pub fn attach_pruners(model: &ResNet, graph: &ArchGraph, slope_a: f64) -> Result<Vec<PrunerLayer>> {
    if graph.prunable.len() != model.num_slots() {
        return Err(Error::Config(format!(
            "graph has {} prunable layers, model has {} slots",
            graph.prunable.len(),
            model.num_slots()
        )));
    }
    graph
        .prunable
        .iter()
        .enumerate()
        .map(|(slot, &id)| {
            let layer = &graph.layers[id];
            let conv = model
                .conv_for_slot(slot)
                .ok_or_else(|| Error::Config(format!("slot {slot} has no convolution")))?;
            let spec = &layer.spec;
            if (conv.out_ch, conv.in_ch, conv.kernel)
                != (spec.filters, spec.in_channels, spec.kernel)
            {
                return Err(Error::Config(format!(
                    "layer {} does not match its convolution",
                    layer.name
                )));
            }
            PrunerLayer::zeros(layer.name.clone(), conv.out_ch, conv.weight.len(), slope_a)
        })
        .collect()
}

/// FNV-1a over every pruner projection.
pub fn pruner_checksum(pruners: &[PrunerLayer]) -> u64 {
    let mut h = Fnv::new();
    for p in pruners {
        h.write(p.layer_id.as_bytes());
        h.write(&p.slope_a.to_le_bytes());
        for v in &p.projection {
            h.write(&v.to_le_bytes());
        }
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ResNetShape {
        ResNetShape {
            depth: 8,
            num_classes: 3,
            base_width: 2,
            image_size: 8,
            in_channels: 2,
        }
    }

    fn input(rng: &mut ChaCha8Rng, n: usize, s: &ResNetShape) -> Tensor {
        let len = n * s.in_channels * s.image_size * s.image_size;
        Tensor::from_vec(
            n,
            s.in_channels,
            s.image_size,
            s.image_size,
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn slot_layout_matches_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, g) = build_resnet(20, 10, &mut rng).unwrap();
        assert_eq!(m.num_slots(), g.prunable.len());
        for (slot, &id) in g.prunable.iter().enumerate() {
            let conv = m.conv_for_slot(slot).unwrap();
            let spec = g.layers[id].spec;
            assert_eq!(
                (conv.out_ch, conv.in_ch, conv.kernel, conv.stride),
                (spec.filters, spec.in_channels, spec.kernel, spec.stride)
            );
        }
    }

    #[test]
    fn pruner_shape_for_16x16x3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, g) = build_resnet(20, 10, &mut rng).unwrap();
        let p = attach_pruners(&m, &g, 0.01).unwrap();
        assert_eq!((p[1].fan_in, p[1].filters), (2304, 16));
    }

    /// Central difference, or `None` when the one-sided slopes disagree
    /// (a ReLU kink inside the step).
    fn smooth_fd(mut f: impl FnMut(f32) -> f64, h: f32) -> Option<f64> {
        let (p, z, m) = (f(h), f(0.0), f(-h));
        let (fwd, bwd) = ((p - z) / h as f64, (z - m) / h as f64);
        ((fwd - bwd).abs() <= 2e-3 + 5e-2 * fwd.abs().max(bwd.abs()))
            .then_some((p - m) / (2.0 * h as f64))
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = tiny();
        let mut m = ResNet::new(&s, &mut rng).unwrap();
        let x = input(&mut rng, 3, &s);
        let labels = [0u8, 2, 1];
        let gates: Vec<Vec<f32>> = (0..m.num_slots())
            .map(|slot| {
                (0..m.slot_width(slot))
                    .map(|_| rng.random_range(0.5..1.2))
                    .collect()
            })
            .collect();
        let loss = |m: &mut ResNet, g: &[Vec<f32>]| -> f64 {
            let (logits, _) = m.forward_train(&x, Some(g), false).unwrap();
            crate::nn::cross_entropy(&logits, &labels, 3).loss
        };
        let (logits, trace) = m.forward_train(&x, Some(&gates), false).unwrap();
        let ce = crate::nn::cross_entropy(&logits, &labels, 3);
        let gg = m
            .backward(
                &trace,
                &ce.grad,
                GradRequest {
                    weights: false,
                    gates: true,
                },
            )
            .unwrap();
        let (mut checked, mut total) = (0, 0);
        for slot in 0..m.num_slots() {
            for c in 0..gates[slot].len() {
                total += 1;
                let fd = smooth_fd(
                    |d| {
                        let mut g = gates.clone();
                        g[slot][c] += d;
                        loss(&mut m, &g)
                    },
                    1e-2,
                );
                let Some(fd) = fd else { continue };
                checked += 1;
                let an = gg[slot][c];
                assert!(
                    (fd - an).abs() < 2e-3 + 2e-2 * an.abs(),
                    "slot {slot} ch {c}: fd {fd} vs {an}"
                );
            }
        }
        assert!(
            checked * 4 >= total * 3,
            "only {checked}/{total} smooth coordinates"
        );
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = tiny();
        let mut m = ResNet::new(&s, &mut rng).unwrap();
        let x = input(&mut rng, 4, &s);
        let labels = [0u8, 2, 1, 1];
        let (logits, trace) = m.forward_train(&x, None, false).unwrap();
        let ce = crate::nn::cross_entropy(&logits, &labels, 3);
        m.zero_grad();
        m.backward(
            &trace,
            &ce.grad,
            GradRequest {
                weights: true,
                gates: false,
            },
        );
        let analytic: Vec<Vec<f32>> = m.params().iter().map(|p| p.grad.to_vec()).collect();
        let (mut checked, mut total) = (0, 0);
        for (pi, grad) in analytic.iter().enumerate() {
            for idx in [0usize, 1].into_iter().filter(|&i| i < grad.len()) {
                total += 1;
                let eval = |delta: f32| {
                    let mut mm = m.clone();
                    mm.params()[pi].value[idx] += delta;
                    let (lg, _) = mm.forward_train(&x, None, false).unwrap();
                    crate::nn::cross_entropy(&lg, &labels, 3).loss
                };
                let Some(fd) = smooth_fd(eval, 3e-3) else {
                    continue;
                };
                checked += 1;
                let an = grad[idx] as f64;
                assert!(
                    (fd - an).abs() < 3e-3 + 3e-2 * an.abs(),
                    "param {pi}[{idx}]: fd {fd} vs {an}"
                );
            }
        }
        assert!(
            checked * 4 >= total * 3,
            "only {checked}/{total} smooth coordinates"
        );
    }

    #[test]
    fn ones_gates_are_bit_identical_to_ungated() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = tiny();
        let m = ResNet::new(&s, &mut rng).unwrap();
        let x = input(&mut rng, 2, &s);
        let ones: Vec<Vec<f32>> = (0..m.num_slots())
            .map(|k| vec![1.0; m.slot_width(k)])
            .collect();
        assert_eq!(
            m.forward_eval(&x, None).unwrap(),
            m.forward_eval(&x, Some(&ones)).unwrap()
        );
    }

    #[test]
    fn desc_round_trip_rebuilds_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = ResNet::new(&tiny(), &mut rng).unwrap();
        let mut rebuilt = ResNet::from_desc(&m.describe()).unwrap();
        let named: Vec<(String, Vec<f32>)> = m
            .named_tensors()
            .into_iter()
            .map(|(n, _, d)| (n, d.to_vec()))
            .collect();
        rebuilt
            .load_tensors(|k| {
                named
                    .iter()
                    .find(|(n, _)| n == k)
                    .map(|(_, d)| d.as_slice())
            })
            .unwrap();
        assert_eq!(rebuilt.checksum(), m.checksum());
        assert_eq!(rebuilt, m);
    }
}
