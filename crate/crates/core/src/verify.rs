//! Runtime self-checks: gradient checks, refinement-bound battery, dense-start
//! exactness, surgery certification and accounting identities.

use crate::analysis::{lemma1_check, refinement_ratio};
use crate::error::Result;
use crate::graph::ResNetShape;
use crate::objective::{flops_weight, pruning_ratios, CountBasis};
use crate::pruner::{
    compute_scores, leaky_exponential, leaky_exponential_grad, score_vjp, BinaryMask, FeatureMaps,
    FilterBank, PrunerLayer, ScoreVector, DEFAULT_SLOPE,
};
use crate::schedule::{continuous_gates, current_scores, TrainingPlan};
use crate::surgery::{certify_equivalence, extract, plan_surgery, random_inputs};
use crate::zoo::{attach_pruners, build_resnet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Scale of the checks: `Quick` trims trial counts for interactive use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Quick,
    Full,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Positivity, continuity at 0, positive slope and derivative agreement on a
/// uniform grid over `[-20, 20]`.
pub fn check_activation(a: f64) -> Result<(bool, String)> {
    let n = 4001;
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut ok = true;
    for i in 0..n {
        let x = -20.0 + 40.0 * i as f64 / (n - 1) as f64;
        let v = leaky_exponential(x, a)?;
        let g = leaky_exponential_grad(x, a)?;
        ok &= v > 0.0 && g > 0.0;
        // Stay on one branch: forward differences from 0 upwards.
        let fd = if x >= 0.0 {
            (leaky_exponential(x + h, a)? - v) / h
        } else if x + h >= 0.0 {
            (v - leaky_exponential(x - h, a)?) / h
        } else {
            (leaky_exponential(x + h, a)? - leaky_exponential(x - h, a)?) / (2.0 * h)
        };
        worst = worst.max((fd - g).abs());
    }
    let gap = (leaky_exponential(1e-8, a)? - leaky_exponential(-1e-8, a)?).abs();
    let passed = ok && worst <= 1e-6 && gap < 1e-7;
    Ok((
        passed,
        format!("max |fd - grad| = {worst:.2e}, gap at 0 = {gap:.2e}"),
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Analytic score gradients against central differences of `Σ c_j S_j` on
/// random small banks.
pub fn check_pruner_gradients(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (f, c, k) = (
            rng.random_range(1..=4),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let fan = f * c * k * k;
        let w: Vec<f64> = (0..fan).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj: Vec<f64> = (0..fan * f).map(|_| rng.random_range(-0.5..0.5)).collect();
        let coef: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bank = FilterBank::new(format!("t{t}"), f, c, k, w.clone())?;
        let pr = PrunerLayer::zeros("p", f, fan, DEFAULT_SLOPE)?.with_projection(proj.clone())?;
        let loss = |b: &FilterBank, p: &PrunerLayer| -> Result<f64> {
            let s = compute_scores(b, p)?;
            Ok(s.values.iter().zip(&coef).map(|(s, c)| s * c).sum())
        };
        let z = pr.pre_activations(&bank)?;
        if z.iter().any(|v| v.abs() < 1e-4) {
            // Too close to the activation's kink for a central difference.
            continue;
        }
        let g = score_vjp(&bank, &pr, &coef)?;
        for i in 0..proj.len() {
            let mut pp = proj.clone();
            pp[i] += h;
            let mut pm = proj.clone();
            pm[i] -= h;
            let lp = loss(&bank, &pr.clone().with_projection(pp)?)?;
            let lm = loss(&bank, &pr.clone().with_projection(pm)?)?;
            worst = worst.max(rel_err((lp - lm) / (2.0 * h), g.projection[i]));
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let lp = loss(&FilterBank::new("x", f, c, k, wp)?, &pr)?;
            let lm = loss(&FilterBank::new("x", f, c, k, wm)?, &pr)?;
            worst = worst.max(rel_err((lp - lm) / (2.0 * h), g.filters[i]));
        }
    }
    Ok((
        worst <= 1e-4,
        format!("{trials} banks, max relative error {worst:.2e}"),
    ))
}

/// Random `(S, x, f(x))` instances against the refinement bounds, plus
/// uniform-score cancellation.
pub fn check_refinement_bounds(instances: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut violations, mut unsquared, mut worst_uniform) = (0usize, 0usize, 0.0f64);
    for i in 0..instances {
        let c = rng.random_range(1..=8);
        let hw = rng.random_range(1..=4) * rng.random_range(1..=4);
        let s =
            ScoreVector::from_values("b", (0..c).map(|_| rng.random_range(0.1..=1.05)).collect());
        let x = FeatureMaps::new(
            c,
            1,
            hw,
            (0..c * hw).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let fx = FeatureMaps::new(
            c,
            1,
            hw,
            (0..c * hw).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let r = lemma1_check(&format!("i{i}"), &s, &x, &fx)?;
        violations += r.violation as usize;
        unsquared += r.unsquared_violation as usize;
        let k = rng.random_range(0.1..=1.05);
        let u = ScoreVector::from_values("u", vec![k; c]);
        let (a, b) = refinement_ratio(&u, &x, &fx)?;
        worst_uniform = worst_uniform.max((a - b).abs() / a.abs().max(f64::MIN_POSITIVE));
    }
    Ok((
        violations == 0 && worst_uniform <= 1e-12,
        format!(
            "{instances} instances, {violations} violations, {unsquared} outside the unsquared interval, uniform-score error {worst_uniform:.1e}"
        ),
    ))
}

/// Zero projections give unit scores and a bit-identical forward pass.
pub fn check_dense_start(depth: usize, inputs: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, graph) = build_resnet(depth, 10, &mut rng)?;
    let pruners = attach_pruners(&model, &graph, DEFAULT_SLOPE)?;
    let scores = current_scores(&model, &pruners)?;
    let all_one = scores.iter().all(|s| s.values.iter().all(|&v| v == 1.0));
    let gates = continuous_gates(&scores);
    let x = random_inputs(&model, inputs, seed);
    let same = model.forward_eval(&x, Some(&gates))? == model.forward_eval(&x, None)?;
    Ok((
        all_one && same,
        format!("scores all 1: {all_one}, forward bit-identical: {same}"),
    ))
}

/// Random masks on a ResNet, at least one eliminating a block, certified in
/// evaluation mode and checked against the counted parameters.
pub fn check_surgery(
    depth: usize,
    configs: usize,
    inputs: usize,
    tol: f64,
    seed: u64,
) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut model, graph) = build_resnet(depth, 10, &mut rng)?;
    randomize_bn(&mut model, &mut rng);
    let mut worst = 0.0f64;
    let mut counts_ok = true;
    let mut eliminated = 0;
    for cfg in 0..configs {
        let keep_p = rng.random_range(0.3..0.95);
        let mut masks: Vec<BinaryMask> = graph
            .prunable_specs()
            .iter()
            .map(|s| BinaryMask {
                bits: (0..s.filters).map(|_| rng.random_bool(keep_p)).collect(),
            })
            .collect();
        if cfg == 0 {
            masks[1] = BinaryMask::zeros(masks[1].len());
        }
        let plan = plan_surgery(&graph, &masks)?;
        eliminated += plan.eliminated.len();
        let compact = extract(&model, &graph, &plan)?;
        let rep = certify_equivalence(
            &model,
            &masks,
            &compact,
            inputs,
            f64::INFINITY,
            seed + cfg as u64,
        )?;
        worst = worst.max(rep.max_deviation);
        for basis in [CountBasis::ConvOnly, CountBasis::WithBnFc] {
            counts_ok &=
                pruning_ratios(&graph, &masks, basis)?.kept_params == compact.count_params(basis);
        }
    }
    Ok((
        worst <= tol && counts_ok && eliminated > 0,
        format!("{configs} mask sets, {eliminated} blocks eliminated, max deviation {worst:.2e}, counts match: {counts_ok}"),
    ))
}

/// Non-trivial running statistics and affine terms, so equivalence checks
/// exercise every batch-norm path.
pub fn randomize_bn<R: Rng + ?Sized>(model: &mut crate::zoo::ResNet, rng: &mut R) {
    use crate::zoo::{Residual, Shortcut};
    let mut bns: Vec<&mut crate::nn::BatchNorm2d> = vec![&mut model.stem.bn];
    for b in &mut model.blocks {
        match &mut b.residual {
            Residual::Active { conv1, conv2 } => {
                bns.push(&mut conv1.bn);
                bns.push(&mut conv2.bn);
            }
            Residual::Eliminated { bn } => bns.push(bn),
        }
        if let Shortcut::Projection(p) = &mut b.shortcut {
            bns.push(&mut p.bn);
        }
    }
    for bn in bns {
        for c in 0..bn.channels {
            bn.gamma[c] = rng.random_range(0.5..1.5);
            bn.beta[c] = rng.random_range(-0.3..0.3);
            bn.running_mean[c] = rng.random_range(-0.5..0.5);
            bn.running_var[c] = rng.random_range(0.5..2.0);
        }
    }
}

/// First-stage vs last-stage flops weight, and graph parameter count against
/// the model's own arrays.
pub fn check_accounting(depth: usize) -> Result<(bool, String)> {
    let shape = ResNetShape::cifar(depth, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (model, graph) = build_resnet(depth, 10, &mut rng)?;
    let specs = graph.prunable_specs();
    let w = flops_weight(&specs[0], specs.last().expect("prunable layers"));
    let r = pruning_ratios(&graph, &graph.all_ones_masks(), CountBasis::ConvOnly)?;
    let direct = model.conv_weight_count();
    let ok = w == 16.0 && r.dense_params == direct && shape.blocks_per_stage()? * 6 + 2 == depth;
    Ok((
        ok,
        format!(
            "flops weight {w}, graph params {} vs model {direct}",
            r.dense_params
        ),
    ))
}

pub fn check_epoch_accounting() -> Result<(bool, String)> {
    let p = TrainingPlan::default();
    let n = p.pruning_epochs();
    Ok((
        n == 90,
        format!(
            "{} cycles x ({} + {}) = {n}",
            p.cycles, p.score_epochs, p.weight_epochs
        ),
    ))
}

/// Every check, in a fixed order.
pub fn run_suite(depth: Depth, seed: u64) -> Vec<CheckOutcome> {
    let (banks, instances, configs) = match depth {
        Depth::Quick => (20, 2_000, 3),
        Depth::Full => (20, 10_000, 25),
    };
    vec![
        timed("activation", || check_activation(DEFAULT_SLOPE)),
        timed("pruner-gradients", || check_pruner_gradients(banks, seed)),
        timed("dense-start", || check_dense_start(20, 10, seed)),
        timed("refinement-bounds", || {
            check_refinement_bounds(instances, seed)
        }),
        timed("surgery-equivalence", || {
            check_surgery(20, configs, 100, 1e-5, seed)
        }),
        timed("accounting", || check_accounting(20)),
        timed("epoch-accounting", check_epoch_accounting),
    ]
}
