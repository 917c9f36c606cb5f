//! Parameter/flop accounting and the score-sparsity objective.

use crate::error::{Error, Result};
use crate::graph::{ArchGraph, LayerRole};
use crate::pruner::{BinaryMask, ScoreVector};
use serde::{Deserialize, Serialize};

/// Geometry of one convolution (or a fully-connected layer seen as a 1×1
/// convolution over a 1×1 map). Padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_height: usize,
    pub in_width: usize,
}

impl LayerSpec {
    pub fn new(
        in_channels: usize,
        filters: usize,
        kernel: usize,
        in_height: usize,
        in_width: usize,
    ) -> Self {
        Self {
            in_channels,
            filters,
            kernel,
            stride: 1,
            in_height,
            in_width,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.filters,
            self.kernel,
            self.stride,
            self.in_height,
            self.in_width,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer spec fields must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    fn out_dim(&self, len: usize) -> usize {
        let pad = self.kernel / 2;
        (len + 2 * pad - self.kernel) / self.stride + 1
    }

    pub fn out_height(&self) -> usize {
        self.out_dim(self.in_height)
    }

    pub fn out_width(&self) -> usize {
        self.out_dim(self.in_width)
    }
}

/// `C · F · K · K`.
pub fn layer_params(spec: &LayerSpec) -> u64 {
    (spec.in_channels * spec.filters * spec.kernel * spec.kernel) as u64
}

/// `C · F · K · K · H · W` over the layer's output map.
pub fn layer_flops(spec: &LayerSpec) -> u64 {
    layer_params(spec) * (spec.out_height() * spec.out_width()) as u64
}

/// Input area of `spec` relative to the input area of `last`.
pub fn flops_weight(spec: &LayerSpec, last: &LayerSpec) -> f64 {
    (spec.in_height * spec.in_width) as f64 / (last.in_height * last.in_width) as f64
}

/// Penalty strength on the score l1 norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizerConfig {
    pub lambda: f64,
    pub flops_balanced: bool,
    /// Target kept fraction; only used for reporting [`budget_gap`].
    pub target_ratio_p: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaPreset::ResNet56Medium.value(),
            flops_balanced: true,
            target_ratio_p: 0.5,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.target_ratio_p) {
            return Err(Error::Config(format!(
                "target_ratio_p must lie in [0, 1], got {}",
                self.target_ratio_p
            )));
        }
        Ok(())
    }
}

/// Regularization strengths used for the published ResNet runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaPreset {
    #[serde(rename = "resnet56-medium")]
    ResNet56Medium,
    #[serde(rename = "resnet56-high")]
    ResNet56High,
    #[serde(rename = "resnet110-medium")]
    ResNet110Medium,
    #[serde(rename = "resnet110-high")]
    ResNet110High,
}

impl LambdaPreset {
    pub const ALL: [LambdaPreset; 4] = [
        LambdaPreset::ResNet56Medium,
        LambdaPreset::ResNet56High,
        LambdaPreset::ResNet110Medium,
        LambdaPreset::ResNet110High,
    ];

    pub fn value(self) -> f64 {
        match self {
            LambdaPreset::ResNet56Medium => 5e-4,
            LambdaPreset::ResNet56High => 15e-4,
            LambdaPreset::ResNet110Medium => 2e-4,
            LambdaPreset::ResNet110High => 5.5e-4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LambdaPreset::ResNet56Medium => "resnet56-medium",
            LambdaPreset::ResNet56High => "resnet56-high",
            LambdaPreset::ResNet110Medium => "resnet110-medium",
            LambdaPreset::ResNet110High => "resnet110-high",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Per-layer multipliers on `‖S_l‖₁`: the flops weight relative to the last
/// prunable layer when balancing, otherwise 1.
pub fn regularizer_weights(specs: &[LayerSpec], cfg: &RegularizerConfig) -> Vec<f64> {
    match (cfg.flops_balanced, specs.last()) {
        (true, Some(last)) => specs.iter().map(|s| flops_weight(s, last)).collect(),
        _ => vec![1.0; specs.len()],
    }
}

/// `class_loss + λ Σ_l w_l ‖S_l‖₁`.
pub fn regularized_loss(
    class_loss: f64,
    scores: &[ScoreVector],
    cfg: &RegularizerConfig,
    specs: &[LayerSpec],
) -> Result<f64> {
    if scores.len() != specs.len() {
        return Err(Error::Config(format!(
            "{} score vectors for {} layer specs",
            scores.len(),
            specs.len()
        )));
    }
    for (s, spec) in scores.iter().zip(specs) {
        if s.len() != spec.filters {
            return Err(Error::Config(format!(
                "score vector {} has {} entries, layer has {} filters",
                s.source_layer,
                s.len(),
                spec.filters
            )));
        }
    }
    let weights = regularizer_weights(specs, cfg);
    let penalty: f64 = scores
        .iter()
        .zip(&weights)
        .map(|(s, w)| w * s.l1_norm())
        .sum();
    Ok(class_loss + cfg.lambda * penalty)
}

/// Which weights count towards the pruning ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountBasis {
    /// Convolution kernels only (stem, block and shortcut convolutions).
    #[default]
    ConvOnly,
    /// Convolutions plus batch-norm affine parameters and the classifier.
    WithBnFc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningRatios {
    pub dense_params: u64,
    pub kept_params: u64,
    pub dense_flops: u64,
    pub kept_flops: u64,
    /// Fraction of parameters removed.
    pub param_ratio: f64,
    /// Fraction of flops removed.
    pub flop_ratio: f64,
}

fn ratio(removed: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        removed as f64 / total as f64
    }
}

/// Parameters and flops of one graph layer given survival counts.
pub(crate) fn layer_cost(
    role: LayerRole,
    spec: &LayerSpec,
    kept_in: usize,
    kept_out: usize,
    basis: CountBasis,
) -> (u64, u64) {
    let k2 = (spec.kernel * spec.kernel) as u64;
    let hw = (spec.out_height() * spec.out_width()) as u64;
    let weights = kept_in as u64 * kept_out as u64 * k2;
    match (role, basis) {
        (LayerRole::Fc, CountBasis::ConvOnly) => (0, 0),
        (LayerRole::Fc, CountBasis::WithBnFc) => (weights + kept_out as u64, weights),
        (_, CountBasis::ConvOnly) => (weights, weights * hw),
        (_, CountBasis::WithBnFc) => (weights + 2 * kept_out as u64, weights * hw),
    }
}

/// Fractions of parameters and flops removed by `masks`, including the input
/// channels of downstream layers that lose their producers.
pub fn pruning_ratios(
    graph: &ArchGraph,
    masks: &[BinaryMask],
    basis: CountBasis,
) -> Result<PruningRatios> {
    graph.validate()?;
    graph.check_masks(masks)?;
    let full: Vec<BinaryMask> = graph
        .prunable
        .iter()
        .map(|&id| BinaryMask::ones(graph.layers[id].spec.filters))
        .collect();
    let mut totals = [(0u64, 0u64); 2];
    for (slot, ms) in [&full[..], masks].into_iter().enumerate() {
        let kept = graph.kept_outputs(ms);
        for (id, layer) in graph.layers.iter().enumerate() {
            let kin = match layer.input {
                None => layer.spec.in_channels,
                Some(src) => kept[src].iter().filter(|&&b| b).count(),
            };
            let kout = kept[id].iter().filter(|&&b| b).count();
            let (p, f) = layer_cost(layer.role, &layer.spec, kin, kout, basis);
            totals[slot].0 += p;
            totals[slot].1 += f;
        }
    }
    let [(dp, df), (kp, kf)] = totals;
    Ok(PruningRatios {
        dense_params: dp,
        kept_params: kp,
        dense_flops: df,
        kept_flops: kf,
        param_ratio: ratio(dp - kp, dp),
        flop_ratio: ratio(df - kf, df),
    })
}

/// `Σ ‖mask_l‖₁ − p Σ F_l`. Positive means more filters survive than the target.
pub fn budget_gap(masks: &[BinaryMask], specs: &[LayerSpec], p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("p must lie in [0, 1], got {p}")));
    }
    let kept: usize = masks.iter().map(BinaryMask::popcount).sum();
    let total: usize = specs.iter().map(|s| s.filters).sum();
    Ok(kept as f64 - p * total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ArchGraph;
    use proptest::prelude::*;

    #[test]
    fn params_and_flops_examples() {
        let s = LayerSpec::new(3, 16, 3, 32, 32);
        assert_eq!(layer_params(&s), 432);
        assert_eq!(layer_flops(&s), 442_368);
        let unit = LayerSpec::new(1, 1, 1, 1, 1);
        assert_eq!(layer_params(&unit), 1);
        assert_eq!(layer_flops(&unit), 1);
        let strided = LayerSpec::new(16, 32, 3, 32, 32).with_stride(2);
        let twin = LayerSpec::new(16, 32, 3, 32, 32);
        assert_eq!(layer_flops(&strided) * 4, layer_flops(&twin));
    }

    #[test]
    fn flops_weight_examples() {
        let last = LayerSpec::new(64, 64, 3, 8, 8);
        assert_eq!(flops_weight(&last, &last), 1.0);
        assert_eq!(
            flops_weight(&LayerSpec::new(16, 16, 3, 32, 32), &last),
            16.0
        );
        assert_eq!(flops_weight(&LayerSpec::new(32, 32, 3, 16, 16), &last), 4.0);
    }

    #[test]
    fn regularized_loss_examples() {
        let spec = [LayerSpec::new(1, 4, 1, 1, 1)];
        let scores = [ScoreVector::from_values("l", vec![1.0, 2.0, 3.0, 4.0])];
        let zero = RegularizerConfig {
            lambda: 0.0,
            flops_balanced: false,
            target_ratio_p: 0.5,
        };
        assert_eq!(regularized_loss(2.0, &scores, &zero, &spec).unwrap(), 2.0);
        let cfg = RegularizerConfig {
            lambda: 0.1,
            ..zero
        };
        assert!((regularized_loss(2.0, &scores, &cfg, &spec).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_ones_scores_give_weighted_filter_count() {
        let specs = [
            LayerSpec::new(3, 16, 3, 32, 32),
            LayerSpec::new(16, 32, 3, 16, 16),
            LayerSpec::new(32, 64, 3, 8, 8),
        ];
        let cfg = RegularizerConfig {
            lambda: 1.0,
            flops_balanced: true,
            target_ratio_p: 0.5,
        };
        let scores: Vec<_> = specs
            .iter()
            .map(|s| ScoreVector::from_values("l", vec![1.0; s.filters]))
            .collect();
        let got = regularized_loss(0.0, &scores, &cfg, &specs).unwrap();
        assert_eq!(got, 16.0 * 16.0 + 4.0 * 32.0 + 64.0);
    }

    #[test]
    fn budget_gap_examples() {
        let specs = [LayerSpec::new(1, 100, 1, 1, 1)];
        let ones = [BinaryMask::ones(100)];
        assert_eq!(budget_gap(&ones, &specs, 1.0).unwrap(), 0.0);
        assert_eq!(budget_gap(&ones, &specs, 0.5).unwrap(), 50.0);
        let toy = [BinaryMask::from_bits(&[1, 0, 1, 0])];
        assert_eq!(
            budget_gap(&toy, &[LayerSpec::new(1, 4, 1, 1, 1)], 0.5).unwrap(),
            0.0
        );
        assert!(budget_gap(&toy, &specs, 1.5).is_err());
    }

    #[test]
    fn ratio_extremes() {
        let g = ArchGraph::chain("toy", 3, &[(4, 1), (4, 1)], 1, 1).unwrap();
        let ones = vec![BinaryMask::ones(4), BinaryMask::ones(4)];
        let r = pruning_ratios(&g, &ones, CountBasis::ConvOnly).unwrap();
        assert_eq!((r.param_ratio, r.flop_ratio), (0.0, 0.0));
        let zeros = vec![BinaryMask::zeros(4), BinaryMask::zeros(4)];
        let r = pruning_ratios(&g, &zeros, CountBasis::ConvOnly).unwrap();
        assert_eq!((r.param_ratio, r.flop_ratio), (1.0, 1.0));
    }

    #[test]
    fn lambda_presets_resolve() {
        assert_eq!(
            LambdaPreset::from_name("resnet56-high").unwrap().value(),
            15e-4
        );
        assert_eq!(
            LambdaPreset::from_name("resnet110-medium").unwrap().value(),
            2e-4
        );
        assert!(LambdaPreset::from_name("resnet20").is_none());
    }

    #[test]
    fn invalid_regularizer_rejected() {
        let mut c = RegularizerConfig::default();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        c.lambda = 0.0;
        c.target_ratio_p = 2.0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn flops_are_params_times_area(c in 1usize..64, f in 1usize..64, k in 1usize..4,
                                       h in 1usize..40, w in 1usize..40) {
            let s = LayerSpec::new(c, f, k, h, w);
            prop_assert_eq!(layer_flops(&s), layer_params(&s) * (s.out_height() * s.out_width()) as u64);
        }

        #[test]
        fn loss_monotone_in_lambda(l1 in 0.0f64..1e-2, l2 in 0.0f64..1e-2,
                                   vals in proptest::collection::vec(1e-3f64..1.1, 1..8)) {
            let spec = [LayerSpec::new(1, vals.len(), 1, 1, 1)];
            let s = [ScoreVector::from_values("l", vals)];
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let mk = |lambda| RegularizerConfig { lambda, flops_balanced: false, target_ratio_p: 0.5 };
            prop_assert!(regularized_loss(1.0, &s, &mk(lo), &spec).unwrap()
                <= regularized_loss(1.0, &s, &mk(hi), &spec).unwrap());
        }

        #[test]
        fn budget_gap_linear_in_popcount(bits in proptest::collection::vec(any::<bool>(), 1..32), p in 0.0f64..1.0) {
            let n = bits.len();
            let m = BinaryMask { bits };
            let spec = [LayerSpec::new(1, n, 1, 1, 1)];
            let gap = budget_gap(std::slice::from_ref(&m), &spec, p).unwrap();
            prop_assert!((gap - (m.popcount() as f64 - p * n as f64)).abs() < 1e-12);
        }
    }
}
