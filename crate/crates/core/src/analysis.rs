//! Refinement-ratio bounds under score scaling, and per-layer budget reports.
//!
//! For a residual block with input `x`, branch output `f(x)` and a score
//! vector `S` with `δ = min S` and `1 + ε ≥ max S`, channel-wise scaling
//! changes each squared norm by a factor in `[δ², (1+ε)²]`. The ratio of two
//! such norms therefore moves by at most `((1+ε)/δ)²` in either direction.
//! That squared factor is what [`lemma1_check`] enforces. The unsquared
//! factor `(1+ε)/δ` is reported alongside, together with whether the scaled
//! ratio also stays inside the correspondingly tighter interval; it can fail
//! to, typically when `S` is small where `f(x)` is large.

use crate::error::{Error, Result};
use crate::graph::ArchGraph;
use crate::nn::Tensor;
use crate::objective::{pruning_ratios, CountBasis, PruningRatios};
use crate::pruner::{BinaryMask, FeatureMaps, ScoreVector};
use crate::schedule::continuous_gates;
use crate::zoo::ResNet;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Relative slack when comparing a ratio against its bounds.
pub const BOUND_TOL: f64 = 1e-9;

fn check_channels(s: &ScoreVector, x: &FeatureMaps, fx: &FeatureMaps) -> Result<()> {
    if s.len() != x.channels || x.channels != fx.channels || x.data.len() != fx.data.len() {
        return Err(Error::Config(format!(
            "{} scores, x has {} channels ({} values), f(x) has {} channels ({} values)",
            s.len(),
            x.channels,
            x.data.len(),
            fx.channels,
            fx.data.len()
        )));
    }
    Ok(())
}

/// Squared norms `(‖x‖², ‖f‖², ‖S⊙x‖², ‖S⊙f‖²)` of channel-major data in
/// which element `i` belongs to channel `(i / plane) % channels`.
fn norms(s: &[f64], x: &[f64], fx: &[f64], plane: usize) -> (f64, f64, f64, f64) {
    let c = s.len();
    let mut out = (0.0, 0.0, 0.0, 0.0);
    for (i, (&a, &b)) in x.iter().zip(fx).enumerate() {
        let k = s[(i / plane) % c];
        let k2 = k * k;
        out.0 += a * a;
        out.1 += b * b;
        out.2 += k2 * a * a;
        out.3 += k2 * b * b;
    }
    out
}

fn ratios_from(n: (f64, f64, f64, f64)) -> Result<(f64, f64)> {
    if !(n.0 > 0.0) {
        return Err(Error::Degenerate("input feature norm is zero".into()));
    }
    if !(n.2 > 0.0) {
        return Err(Error::Degenerate(
            "scaled input feature norm is zero".into(),
        ));
    }
    Ok((n.1 / n.0, n.3 / n.2))
}

/// `(‖f(x)‖²/‖x‖², ‖S⊙f(x)‖²/‖S⊙x‖²)` over all elements.
pub fn refinement_ratio(s: &ScoreVector, x: &FeatureMaps, fx: &FeatureMaps) -> Result<(f64, f64)> {
    check_channels(s, x, fx)?;
    let plane = x.height * x.width;
    ratios_from(norms(&s.values, &x.data, &fx.data, plane.max(1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub block_id: String,
    pub ratio_unscaled: f64,
    pub ratio_scaled: f64,
    pub delta: f64,
    pub eps: f64,
    /// `(δ/(1+ε))² · ratio_unscaled`.
    pub lower_bound: f64,
    /// `((1+ε)/δ)² · ratio_unscaled`.
    pub upper_bound: f64,
    pub violation: bool,
    /// `(1+ε)/δ`.
    pub bound_factor: f64,
    /// Whether the scaled ratio leaves `[r·δ/(1+ε), r·(1+ε)/δ]`.
    pub unsquared_violation: bool,
}

/// `(1+ε)/δ`.
pub fn bound_factor(delta: f64, eps: f64) -> f64 {
    (1.0 + eps) / delta
}

/// Realized `(δ, ε)` of a score vector.
pub fn delta_eps(s: &ScoreVector) -> Result<(f64, f64)> {
    if s.is_empty() || s.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(format!(
            "score vector {} is empty or non-finite",
            s.source_layer
        )));
    }
    let delta = s.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = s.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if delta <= 0.0 {
        return Err(Error::Degenerate(format!(
            "score vector {} has min score {delta}",
            s.source_layer
        )));
    }
    Ok((delta, (max - 1.0).max(0.0)))
}

fn outside(v: f64, lo: f64, hi: f64) -> bool {
    v < lo - BOUND_TOL * lo.abs() || v > hi + BOUND_TOL * hi.abs()
}

fn record(block_id: String, (ru, rs): (f64, f64), (delta, eps): (f64, f64)) -> RefinementRecord {
    let k = bound_factor(delta, eps);
    let (lo, hi) = (ru / (k * k), ru * k * k);
    RefinementRecord {
        block_id,
        ratio_unscaled: ru,
        ratio_scaled: rs,
        delta,
        eps,
        lower_bound: lo,
        upper_bound: hi,
        violation: outside(rs, lo, hi),
        bound_factor: k,
        unsquared_violation: outside(rs, ru / k, ru * k),
    }
}

/// Ratios, realized `δ`/`ε`, and the bound check for one block.
pub fn lemma1_check(
    block_id: &str,
    s: &ScoreVector,
    x: &FeatureMaps,
    fx: &FeatureMaps,
) -> Result<RefinementRecord> {
    let de = delta_eps(s)?;
    let r = refinement_ratio(s, x, fx)?;
    Ok(record(block_id.into(), r, de))
}

/// Same check on batched tensors (norms summed over the batch).
pub fn lemma1_check_tensors(
    block_id: &str,
    s: &ScoreVector,
    x: &Tensor,
    fx: &Tensor,
) -> Result<RefinementRecord> {
    if !x.same_shape(fx) || s.len() != x.c {
        return Err(Error::Config(format!(
            "block {block_id}: shapes of x, f(x) and scores differ"
        )));
    }
    let de = delta_eps(s)?;
    let xd: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
    let fd: Vec<f64> = fx.data.iter().map(|&v| v as f64).collect();
    let r = ratios_from(norms(&s.values, &xd, &fd, x.plane_len().max(1)))?;
    Ok(record(block_id.into(), r, de))
}

/// One record per block of `model`, using the score vector of each block's
/// second conv on both the shortcut output and the residual-branch output.
/// Blocks whose inputs are degenerate are skipped.
pub fn block_refinement(
    model: &ResNet,
    scores: &[ScoreVector],
    x: &Tensor,
) -> Result<Vec<RefinementRecord>> {
    let gates = continuous_gates(scores);
    let branches = model.block_branches_eval(x, Some(&gates))?;
    let mut out = Vec::with_capacity(branches.len());
    for (b, (sc, fx)) in branches.iter().enumerate() {
        let s = &scores[2 + 2 * b];
        match lemma1_check_tensors(&s.source_layer, s, sc, fx) {
            Ok(r) => out.push(r),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub name: String,
    pub filters: usize,
    pub remaining: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockBudget {
    pub name: String,
    pub first_remaining: usize,
    pub second_remaining: usize,
    pub first_fraction: f64,
    pub second_fraction: f64,
    /// The first conv keeps a smaller fraction than the second.
    pub first_sparser: bool,
    pub eliminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub model: String,
    pub layers: Vec<LayerBudget>,
    pub blocks: Vec<BlockBudget>,
    pub total_filters: usize,
    pub remaining_filters: usize,
    pub first_sparser_blocks: usize,
    pub ratios: PruningRatios,
    pub ratios_with_bn_fc: PruningRatios,
}

fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn budget_report(graph: &ArchGraph, masks: &[BinaryMask]) -> Result<PruneReport> {
    let ratios = pruning_ratios(graph, masks, CountBasis::ConvOnly)?;
    let ratios_with_bn_fc = pruning_ratios(graph, masks, CountBasis::WithBnFc)?;
    let layers: Vec<LayerBudget> = graph
        .prunable
        .iter()
        .zip(masks)
        .map(|(&id, m)| {
            let l = &graph.layers[id];
            LayerBudget {
                name: l.name.clone(),
                filters: l.spec.filters,
                remaining: m.popcount(),
                fraction: frac(m.popcount(), l.spec.filters),
            }
        })
        .collect();
    let mut blocks = Vec::with_capacity(graph.blocks.len());
    for b in &graph.blocks {
        let (Some(s1), Some(s2)) = (graph.prunable_slot(b.first), graph.prunable_slot(b.second))
        else {
            continue;
        };
        let (l1, l2) = (&layers[s1], &layers[s2]);
        blocks.push(BlockBudget {
            name: format!("s{}.b{}", b.stage, b.index),
            first_remaining: l1.remaining,
            second_remaining: l2.remaining,
            first_fraction: l1.fraction,
            second_fraction: l2.fraction,
            first_sparser: l1.fraction < l2.fraction,
            eliminated: l1.remaining == 0,
        });
    }
    Ok(PruneReport {
        model: graph.name.clone(),
        total_filters: layers.iter().map(|l| l.filters).sum(),
        remaining_filters: layers.iter().map(|l| l.remaining).sum(),
        first_sparser_blocks: blocks.iter().filter(|b| b.first_sparser).count(),
        layers,
        blocks,
        ratios,
        ratios_with_bn_fc,
    })
}

/// Horizontal-axis bar chart of per-layer remaining filters against the
/// original width.
pub fn budget_chart_svg(report: &PruneReport) -> String {
    let bar = 14.0;
    let gap = 4.0;
    let left = 40.0;
    let scale = 4.0;
    let max_f = report.layers.iter().map(|l| l.filters).max().unwrap_or(1) as f64;
    let width = left + report.layers.len() as f64 * (bar + gap) + 20.0;
    let height = max_f * scale + 90.0;
    let base = max_f * scale + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="16">{}: {} of {} filters kept, {:.1}% params / {:.1}% flops removed</text>"#,
        xml_escape(&report.model),
        report.remaining_filters,
        report.total_filters,
        100.0 * report.ratios.param_ratio,
        100.0 * report.ratios.flop_ratio
    );
    for (i, l) in report.layers.iter().enumerate() {
        let x = left + i as f64 * (bar + gap);
        let full = l.filters as f64 * scale;
        let kept = l.remaining as f64 * scale;
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{}" width="{bar}" height="{full}" fill="#ddd"/><rect x="{x}" y="{}" width="{bar}" height="{kept}" fill="#3572a5"><title>{}: {}/{}</title></rect>"##,
            base - full,
            base - kept,
            xml_escape(&l.name),
            l.remaining,
            l.filters
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{base}" x2="{}" y2="{base}" stroke="#000"/>"##,
        width - 20.0
    );
    let _ = writeln!(s, r#"<text x="{left}" y="{}">layer</text>"#, base + 16.0);
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
