//! Pruner layers: per-filter scores learned from a convolution's own weights.
//!
//! A pruner owns a projection matrix of shape `(F·C·K·K) × F`. The layer's
//! filter bank is flattened (filter-major, then `(C, K, K)` row-major inside
//! each filter, i.e. the natural memory order of an `F×C×K×K` array) and
//! projected to one pre-activation per filter. The leaky-exponential
//! activation turns pre-activations into strictly positive scores that start
//! at exactly 1 when the projection is zero.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default slope of the linear branch of the activation.
pub const DEFAULT_SLOPE: f64 = 0.01;

/// Scores at or above this value survive binarization.
pub const GATE_THRESHOLD: f64 = 0.5;

fn check_finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be finite, got {x}")))
    }
}

fn check_slope(a: f64) -> Result<()> {
    if a.is_finite() && a > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "slope must be finite and > 0, got {a}"
        )))
    }
}

/// `e^x` below zero, `1 + a·x` at and above zero.
pub fn leaky_exponential(x: f64, a: f64) -> Result<f64> {
    check_finite(x, "activation input")?;
    check_slope(a)?;
    Ok(leaky_exp_unchecked(x, a))
}

/// Derivative of [`leaky_exponential`]. At `x = 0` the linear branch is used,
/// so the value there is `a`.
pub fn leaky_exponential_grad(x: f64, a: f64) -> Result<f64> {
    check_finite(x, "activation input")?;
    check_slope(a)?;
    Ok(leaky_exp_grad_unchecked(x, a))
}

#[inline]
pub(crate) fn leaky_exp_unchecked(x: f64, a: f64) -> f64 {
    if x < 0.0 {
        x.exp()
    } else {
        1.0 + a * x
    }
}

#[inline]
pub(crate) fn leaky_exp_grad_unchecked(x: f64, a: f64) -> f64 {
    if x < 0.0 {
        x.exp()
    } else {
        a
    }
}

/// Weights of one convolution, `F × C × K × K`, stored flat in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub layer_id: String,
    pub filters: usize,
    pub channels: usize,
    pub kernel: usize,
    weights: Vec<f64>,
}

impl FilterBank {
    pub fn new(
        layer_id: impl Into<String>,
        filters: usize,
        channels: usize,
        kernel: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if filters == 0 || channels == 0 || kernel == 0 {
            return Err(Error::Config(format!(
                "filter bank dims must be >= 1, got F={filters} C={channels} K={kernel}"
            )));
        }
        let expected = filters * channels * kernel * kernel;
        if weights.len() != expected {
            return Err(Error::Config(format!(
                "filter bank expects {expected} weights, got {}",
                weights.len()
            )));
        }
        if let Some(bad) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::Domain(format!("filter weight {bad} is not finite")));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            filters,
            channels,
            kernel,
            weights,
        })
    }

    pub fn from_f32(
        layer_id: impl Into<String>,
        filters: usize,
        channels: usize,
        kernel: usize,
        weights: &[f32],
    ) -> Result<Self> {
        Self::new(
            layer_id,
            filters,
            channels,
            kernel,
            weights.iter().map(|&w| w as f64).collect(),
        )
    }

    /// Length of the flattened bank, `F·C·K·K`.
    pub fn fan_in(&self) -> usize {
        self.weights.len()
    }

    /// The flattened weights in the documented order.
    pub fn flattened(&self) -> &[f64] {
        &self.weights
    }
}

/// Per-sample activations of one layer, `F × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMaps {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config("feature maps need positive dims".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Config(format!(
                "feature maps {channels}x{height}x{width} need {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// The learnable part of a pruner: projection matrix and activation slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunerLayer {
    pub layer_id: String,
    pub filters: usize,
    pub fan_in: usize,
    pub slope_a: f64,
    /// Row-major `fan_in × filters`.
    pub projection: Vec<f64>,
}

impl PrunerLayer {
    /// Zero projection: every score starts at exactly 1.
    pub fn zeros(
        layer_id: impl Into<String>,
        filters: usize,
        fan_in: usize,
        slope_a: f64,
    ) -> Result<Self> {
        check_slope(slope_a)?;
        if filters == 0 || fan_in == 0 {
            return Err(Error::Config(
                "pruner needs at least one filter and one input".into(),
            ));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            filters,
            fan_in,
            slope_a,
            projection: vec![0.0; fan_in * filters],
        })
    }

    pub fn for_bank(bank: &FilterBank, slope_a: f64) -> Result<Self> {
        Self::zeros(bank.layer_id.clone(), bank.filters, bank.fan_in(), slope_a)
    }

    pub fn with_projection(mut self, projection: Vec<f64>) -> Result<Self> {
        if projection.len() != self.fan_in * self.filters {
            return Err(Error::Config(format!(
                "projection needs {} entries, got {}",
                self.fan_in * self.filters,
                projection.len()
            )));
        }
        self.projection = projection;
        Ok(self)
    }

    fn check_bank(&self, bank: &FilterBank) -> Result<()> {
        if bank.fan_in() != self.fan_in || bank.filters != self.filters {
            return Err(Error::Config(format!(
                "pruner {} is ({} x {}) but filter bank {} flattens to ({} x {})",
                self.layer_id,
                self.fan_in,
                self.filters,
                bank.layer_id,
                bank.fan_in(),
                bank.filters
            )));
        }
        Ok(())
    }

    /// `flatten(weights) · projection`, one value per filter.
    pub fn pre_activations(&self, bank: &FilterBank) -> Result<Vec<f64>> {
        self.check_bank(bank)?;
        Ok(self.project(bank.flattened()))
    }

    pub(crate) fn project(&self, flat: &[f64]) -> Vec<f64> {
        let f = self.filters;
        let mut z = vec![0.0; f];
        for (i, &w) in flat.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &self.projection[i * f..(i + 1) * f];
            for (zj, &p) in z.iter_mut().zip(row) {
                *zj += w * p;
            }
        }
        z
    }
}

/// Continuous scores of one layer plus the leak excess realized by them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub source_layer: String,
    pub values: Vec<f64>,
    /// `a · max(0, max pre-activation)`; equals `max(score) - 1` clamped at 0.
    pub realized_eps: f64,
}

impl ScoreVector {
    pub fn from_pre_activations(source_layer: impl Into<String>, z: &[f64], a: f64) -> Self {
        let values = z.iter().map(|&x| leaky_exp_unchecked(x, a)).collect();
        let max_z = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            source_layer: source_layer.into(),
            values,
            realized_eps: a * max_z.max(0.0),
        }
    }

    /// Scores given directly; ε is derived from the largest value.
    pub fn from_values(source_layer: impl Into<String>, values: Vec<f64>) -> Self {
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            source_layer: source_layer.into(),
            values,
            realized_eps: (max - 1.0).max(0.0),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

/// Keep/remove bits for one layer's filters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn ones(n: usize) -> Self {
        Self {
            bits: vec![true; n],
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            bits: vec![false; n],
        }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self {
            bits: bits.iter().map(|&b| b != 0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Indices of surviving filters in increasing order.
    pub fn keep_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Scores from a filter bank through its pruner.
pub fn compute_scores(filters: &FilterBank, pruner: &PrunerLayer) -> Result<ScoreVector> {
    let z = pruner.pre_activations(filters)?;
    Ok(ScoreVector::from_pre_activations(
        filters.layer_id.clone(),
        &z,
        pruner.slope_a,
    ))
}

/// Gradients of a scalar loss with respect to the pruner inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradients {
    /// Same layout as [`PrunerLayer::projection`].
    pub projection: Vec<f64>,
    /// Same layout as [`FilterBank::flattened`].
    pub filters: Vec<f64>,
}

/// Vector-Jacobian product of [`compute_scores`]: given `dL/dS`, returns
/// `dL/dW` and `dL/dF`.
pub fn score_vjp(
    filters: &FilterBank,
    pruner: &PrunerLayer,
    upstream: &[f64],
) -> Result<ScoreGradients> {
    if upstream.len() != pruner.filters {
        return Err(Error::Config(format!(
            "upstream gradient has {} entries, pruner has {} filters",
            upstream.len(),
            pruner.filters
        )));
    }
    let z = pruner.pre_activations(filters)?;
    let dz: Vec<f64> = z
        .iter()
        .zip(upstream)
        .map(|(&x, &u)| u * leaky_exp_grad_unchecked(x, pruner.slope_a))
        .collect();
    let f = pruner.filters;
    let flat = filters.flattened();
    let mut projection = vec![0.0; pruner.projection.len()];
    let mut filter_grad = vec![0.0; flat.len()];
    for (i, &w) in flat.iter().enumerate() {
        let row = &pruner.projection[i * f..(i + 1) * f];
        let grow = &mut projection[i * f..(i + 1) * f];
        let mut acc = 0.0;
        for j in 0..f {
            grow[j] = w * dz[j];
            acc += row[j] * dz[j];
        }
        filter_grad[i] = acc;
    }
    Ok(ScoreGradients {
        projection,
        filters: filter_grad,
    })
}

/// How scores act on feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Continuous,
    Binary,
}

/// The hard gate: 1 when `s >= 0.5`, else 0.
#[inline]
pub fn gate(s: f64) -> f64 {
    if s >= GATE_THRESHOLD {
        1.0
    } else {
        0.0
    }
}

/// Channel-wise scaling of feature maps by scores or their gates.
pub fn apply_scores(
    scores: &ScoreVector,
    maps: &FeatureMaps,
    mode: GateMode,
) -> Result<FeatureMaps> {
    if scores.len() != maps.channels {
        return Err(Error::Config(format!(
            "{} scores for {} channels",
            scores.len(),
            maps.channels
        )));
    }
    let hw = maps.height * maps.width;
    let mut out = maps.clone();
    for (c, &s) in scores.values.iter().enumerate() {
        let factor = match mode {
            GateMode::Continuous => s,
            GateMode::Binary => gate(s),
        };
        for v in &mut out.data[c * hw..(c + 1) * hw] {
            *v *= factor;
        }
    }
    Ok(out)
}

/// Hard threshold of every score. No gradient is defined through this.
pub fn binarize(scores: &ScoreVector) -> BinaryMask {
    BinaryMask {
        bits: scores.values.iter().map(|&s| s >= GATE_THRESHOLD).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn activation_examples() {
        assert_eq!(leaky_exponential(0.0, 0.01).unwrap(), 1.0);
        assert!((leaky_exponential(-std::f64::consts::LN_2, 0.01).unwrap() - 0.5).abs() < 1e-15);
        assert!((leaky_exponential(2.0, 0.01).unwrap() - 1.02).abs() < 1e-15);
    }

    #[test]
    fn activation_grad_examples() {
        assert!((leaky_exponential_grad(-1.0, 0.01).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(leaky_exponential_grad(3.0, 0.01).unwrap(), 0.01);
        assert_eq!(leaky_exponential_grad(0.0, 0.01).unwrap(), 0.01);
    }

    #[test]
    fn activation_rejects_non_finite() {
        assert!(matches!(
            leaky_exponential(f64::NAN, 0.01),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            leaky_exponential(f64::INFINITY, 0.01),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            leaky_exponential_grad(f64::NAN, 0.01),
            Err(Error::Domain(_))
        ));
        assert!(matches!(leaky_exponential(1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_projection_scores_are_one() {
        let bank = FilterBank::new("c", 3, 2, 1, vec![0.5, -1.0, 2.0, 3.0, -4.0, 0.1]).unwrap();
        let pruner = PrunerLayer::for_bank(&bank, DEFAULT_SLOPE).unwrap();
        let s = compute_scores(&bank, &pruner).unwrap();
        assert_eq!(s.values, vec![1.0; 3]);
        assert_eq!(s.realized_eps, 0.0);
    }

    #[test]
    fn hand_picked_projection_cancels() {
        let bank = FilterBank::new("c", 1, 2, 1, vec![1.0, 2.0]).unwrap();
        let pruner = PrunerLayer::for_bank(&bank, 0.01)
            .unwrap()
            .with_projection(vec![0.5, -0.25])
            .unwrap();
        let s = compute_scores(&bank, &pruner).unwrap();
        assert_eq!(s.values, vec![1.0]);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let bank = FilterBank::new("c", 2, 1, 1, vec![1.0, 2.0]).unwrap();
        let pruner = PrunerLayer::zeros("c", 3, 2, 0.01).unwrap();
        assert!(matches!(
            compute_scores(&bank, &pruner),
            Err(Error::Config(_))
        ));
        assert!(FilterBank::new("c", 2, 1, 1, vec![1.0]).is_err());
        assert!(FilterBank::new("c", 1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn realized_eps_tracks_largest_pre_activation() {
        let s = ScoreVector::from_pre_activations("x", &[-1.0, 3.0, 0.5], 0.01);
        assert!((s.realized_eps - 0.03).abs() < 1e-15);
        let max = s.values.iter().copied().fold(0.0, f64::max);
        assert!((max - 1.0 - s.realized_eps).abs() < 1e-15);
    }

    #[test]
    fn apply_scores_examples() {
        let maps = FeatureMaps::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = ScoreVector::from_values("x", vec![1.0, 1.0]);
        assert_eq!(
            apply_scores(&ones, &maps, GateMode::Continuous).unwrap(),
            maps
        );
        assert_eq!(apply_scores(&ones, &maps, GateMode::Binary).unwrap(), maps);

        let s = ScoreVector::from_values("x", vec![1.0, 0.3]);
        let out = apply_scores(&s, &maps, GateMode::Continuous).unwrap();
        assert_eq!(out.data, vec![1.0, 2.0, 3.0 * 0.3, 4.0 * 0.3]);

        let s = ScoreVector::from_values("x", vec![0.5, 0.49]);
        let out = apply_scores(&s, &maps, GateMode::Binary).unwrap();
        assert_eq!(out.data, vec![1.0, 2.0, 0.0, 0.0]);

        let bad = ScoreVector::from_values("x", vec![1.0]);
        assert!(apply_scores(&bad, &maps, GateMode::Binary).is_err());
    }

    #[test]
    fn binarize_examples() {
        let m = |v: Vec<f64>| binarize(&ScoreVector::from_values("x", v)).bits;
        assert_eq!(m(vec![1.0, 1.0]), vec![true, true]);
        assert_eq!(m(vec![0.5]), vec![true]);
        assert_eq!(m(vec![0.4999, 0.7, 0.01]), vec![false, true, false]);
    }

    proptest! {
        #[test]
        fn activation_positive(x in -700.0f64..700.0, a in 1e-6f64..1.0) {
            prop_assert!(leaky_exponential(x, a).unwrap() > 0.0);
            prop_assert!(leaky_exponential_grad(x, a).unwrap() > 0.0);
        }

        #[test]
        fn binarize_is_monotone(scores in proptest::collection::vec(1e-6f64..1.1, 1..16),
                                idx in 0usize..16, bump in 0.0f64..1.0) {
            let i = idx % scores.len();
            let before = binarize(&ScoreVector::from_values("x", scores.clone()));
            let mut raised = scores.clone();
            raised[i] += bump;
            let after = binarize(&ScoreVector::from_values("x", raised));
            for (b, a) in before.bits.iter().zip(&after.bits) {
                prop_assert!(!(*b && !*a));
            }
        }
    }
}
