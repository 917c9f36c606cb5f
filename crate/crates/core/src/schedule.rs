//! Warm-up, alternating score/weight training, and fine-tuning.
//!
//! During the pruning stage each cycle first trains only the pruner
//! projections against the regularized loss with continuous scores on the
//! feature maps, then trains only the network weights against the plain loss
//! with binary gates. Score phases run batch norm on batch statistics without
//! touching the running statistics, so every stored network array is left
//! byte-identical.

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::graph::ArchGraph;
use crate::nn::{
    cross_entropy, LrSchedule, Optimizer, OptimizerConfig, OptimizerState, Param, Tensor,
};
use crate::objective::{
    pruning_ratios, regularizer_weights, CountBasis, PruningRatios, RegularizerConfig,
};
use crate::pruner::{
    binarize, compute_scores, score_vjp, BinaryMask, FilterBank, PrunerLayer, ScoreVector,
    DEFAULT_SLOPE,
};
use crate::zoo::{GradRequest, ResNet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Score,
    Weight,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Score => "score",
            Phase::Weight => "weight",
            Phase::Finetune => "finetune",
        })
    }
}

/// Parameters held fixed during a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrozenSet {
    PrunerParams,
    NetworkParams,
    Nothing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: Phase,
    pub epoch: usize,
    pub frozen: FrozenSet,
}

impl PhaseState {
    pub fn new(phase: Phase, epoch: usize) -> Self {
        let frozen = match phase {
            Phase::Warmup | Phase::Weight => FrozenSet::PrunerParams,
            Phase::Score => FrozenSet::NetworkParams,
            Phase::Finetune => FrozenSet::Nothing,
        };
        Self {
            phase,
            epoch,
            frozen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingPlan {
    pub warmup_epochs: usize,
    pub cycles: usize,
    pub score_epochs: usize,
    pub weight_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub regularizer: RegularizerConfig,
    /// Warm-up optimizer for network weights.
    pub warmup_optimizer: OptimizerConfig,
    /// Network-weight optimizer during weight phases.
    pub weight_optimizer: OptimizerConfig,
    /// Pruner-projection optimizer during score phases.
    pub score_optimizer: OptimizerConfig,
    pub finetune_optimizer: OptimizerConfig,
    /// Applied within warm-up and within fine-tuning.
    pub lr_schedule: LrSchedule,
    pub slope_a: f64,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        Self {
            warmup_epochs: 50,
            cycles: 10,
            score_epochs: 3,
            weight_epochs: 6,
            finetune_epochs: 300,
            batch_size: 256,
            regularizer: RegularizerConfig::default(),
            warmup_optimizer: OptimizerConfig::sgd(0.1, 0.9, 5e-4),
            weight_optimizer: OptimizerConfig::adam(1e-3),
            score_optimizer: OptimizerConfig::adam(1e-6),
            finetune_optimizer: OptimizerConfig::sgd(0.1, 0.9, 5e-4),
            lr_schedule: LrSchedule::Cosine,
            slope_a: DEFAULT_SLOPE,
        }
    }
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.slope_a.is_finite() && self.slope_a > 0.0) {
            return Err(Error::Config(format!(
                "slope_a must be > 0, got {}",
                self.slope_a
            )));
        }
        self.regularizer.validate()?;
        for (name, o) in [
            ("warmup_optimizer", &self.warmup_optimizer),
            ("weight_optimizer", &self.weight_optimizer),
            ("score_optimizer", &self.score_optimizer),
            ("finetune_optimizer", &self.finetune_optimizer),
        ] {
            let ok = [o.lr, o.momentum, o.weight_decay, o.eps]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0)
                && (0.0..1.0).contains(&o.beta1)
                && (0.0..1.0).contains(&o.beta2);
            if !ok {
                return Err(Error::Config(format!("{name} has an invalid setting")));
            }
        }
        Ok(())
    }

    /// Epochs spent in the alternating stage.
    pub fn pruning_epochs(&self) -> usize {
        self.cycles * (self.score_epochs + self.weight_epochs)
    }

    /// Global epoch index of epoch `e` of the given pruning-stage phase.
    pub fn stage_epoch(&self, cycle: usize, phase: Phase, e: usize) -> usize {
        let offset = if phase == Phase::Weight {
            self.score_epochs
        } else {
            0
        };
        self.warmup_epochs + cycle * (self.score_epochs + self.weight_epochs) + offset + e
    }

    pub fn finetune_epoch(&self, e: usize) -> usize {
        self.warmup_epochs + self.pruning_epochs() + e
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Global epoch index across all phases, or the cycle's last epoch for
    /// cycle summaries.
    pub epoch: usize,
    pub phase: Phase,
    pub cycle: Option<usize>,
    /// Mean training classification loss.
    pub loss: f64,
    pub accuracy: f64,
    /// Mean `λ Σ w_l ‖S_l‖₁` over the epoch (score phases only).
    pub regularizer: Option<f64>,
    pub eval_loss: f64,
    /// Evaluation accuracy with the phase's own gating (continuous scores in
    /// score phases, binary masks otherwise).
    pub eval_accuracy: f64,
    /// Evaluation accuracy under binary masks during the pruning stage.
    pub eval_accuracy_binary: Option<f64>,
    pub mean_scores: Vec<f64>,
    pub popcounts: Vec<usize>,
    pub param_ratio: f64,
    pub flop_ratio: f64,
}

/// State after each completed cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub cycle: usize,
    pub mean_score: f64,
    pub mean_scores: Vec<f64>,
    pub popcounts: Vec<usize>,
    pub ratios: PruningRatios,
}

pub trait MetricsSink {
    fn record(&mut self, row: &MetricRow) -> Result<()>;

    fn cycle(&mut self, _summary: &CycleSummary) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<MetricRow> {
    fn record(&mut self, row: &MetricRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _row: &MetricRow) -> Result<()> {
        Ok(())
    }
}

/// Everything a phase reads besides the trained state.
pub struct Session<'a> {
    pub plan: &'a TrainingPlan,
    pub graph: &'a ArchGraph,
    pub data: &'a DataSplit,
    pub seed: u64,
    pub sink: &'a mut dyn MetricsSink,
}

/// Optimizer slots carried across the cycles of the pruning stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOptimizers {
    pub weights: Optimizer<f32>,
    pub scores: Optimizer<f64>,
}

impl PruneOptimizers {
    pub fn new(plan: &TrainingPlan) -> Self {
        Self {
            weights: Optimizer::new(plan.weight_optimizer),
            scores: Optimizer::new(plan.score_optimizer),
        }
    }

    pub fn with_state(
        plan: &TrainingPlan,
        weights: OptimizerState<f32>,
        scores: OptimizerState<f64>,
    ) -> Self {
        let mut o = Self::new(plan);
        o.weights.state = weights;
        o.scores.state = scores;
        o
    }
}

/// Next phase of the pruning stage to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCursor {
    pub cycle: usize,
    pub phase: Phase,
}

impl StageCursor {
    pub const START: StageCursor = StageCursor {
        cycle: 0,
        phase: Phase::Score,
    };

    pub fn next(self) -> Self {
        match self.phase {
            Phase::Score => StageCursor {
                phase: Phase::Weight,
                ..self
            },
            _ => StageCursor {
                cycle: self.cycle + 1,
                phase: Phase::Score,
            },
        }
    }

    pub fn is_done(&self, plan: &TrainingPlan) -> bool {
        self.cycle >= plan.cycles
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-epoch RNG for shuffling and augmentation, a pure function of the run
/// seed and the global epoch index.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Evaluation-mode loss and accuracy.
pub fn evaluate(
    model: &ResNet,
    data: &Dataset,
    gates: Option<&[Vec<f32>]>,
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<ChaCha8Rng>(chunk, None);
        let logits = model.forward_eval(&x, gates)?;
        let ce = cross_entropy(&logits, &y, data.classes);
        loss += ce.loss * chunk.len() as f64;
        correct += ce.correct;
    }
    Ok(EvalResult {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

fn filter_banks(model: &ResNet, pruners: &[PrunerLayer]) -> Result<Vec<FilterBank>> {
    if pruners.len() != model.num_slots() {
        return Err(Error::Config(format!(
            "{} pruners for {} prunable layers",
            pruners.len(),
            model.num_slots()
        )));
    }
    pruners
        .iter()
        .enumerate()
        .map(|(slot, p)| model.filter_bank(slot, &p.layer_id))
        .collect()
}

fn scores_for(banks: &[FilterBank], pruners: &[PrunerLayer]) -> Result<Vec<ScoreVector>> {
    banks
        .iter()
        .zip(pruners)
        .map(|(b, p)| compute_scores(b, p))
        .collect()
}

/// Scores of every prunable layer from the model's current filters.
pub fn current_scores(model: &ResNet, pruners: &[PrunerLayer]) -> Result<Vec<ScoreVector>> {
    scores_for(&filter_banks(model, pruners)?, pruners)
}

pub fn current_masks(model: &ResNet, pruners: &[PrunerLayer]) -> Result<Vec<BinaryMask>> {
    Ok(current_scores(model, pruners)?
        .iter()
        .map(binarize)
        .collect())
}

pub fn continuous_gates(scores: &[ScoreVector]) -> Vec<Vec<f32>> {
    scores
        .iter()
        .map(|s| s.values.iter().map(|&v| v as f32).collect())
        .collect()
}

pub fn binary_gates(masks: &[BinaryMask]) -> Vec<Vec<f32>> {
    masks.iter().map(BinaryMask::as_f32).collect()
}

fn check_data(data: &DataSplit, model: &ResNet) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.eval.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let s = &model.shape;
    for d in [&data.train, &data.eval] {
        if (d.channels, d.height, d.width) != (s.in_channels, s.image_size, s.image_size)
            || d.classes != s.num_classes
        {
            return Err(Error::Config(format!(
                "data is {}x{}x{} with {} classes, model expects {}x{}x{} with {}",
                d.channels,
                d.height,
                d.width,
                d.classes,
                s.in_channels,
                s.image_size,
                s.image_size,
                s.num_classes
            )));
        }
    }
    Ok(())
}

/// Runs one pass over the shuffled, augmented training set; `step` trains on
/// one batch and returns its loss, correct count and optional extra term.
fn train_epoch(
    data: &DataSplit,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mut step: impl FnMut(&Tensor, &[u8]) -> Result<(f64, usize, f64)>,
) -> Result<(f64, f64, f64)> {
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng);
    let (mut loss, mut correct, mut extra) = (0.0, 0usize, 0.0);
    for chunk in order.chunks(batch_size) {
        let (x, y) = data.train.batch(chunk, Some((&data.augment, &mut rng)));
        let (l, c, e) = step(&x, &y)?;
        loss += l * chunk.len() as f64;
        extra += e * chunk.len() as f64;
        correct += c;
    }
    let n = data.train.len() as f64;
    Ok((loss / n, correct as f64 / n, extra / n))
}

fn mean_scores(scores: &[ScoreVector]) -> Vec<f64> {
    scores.iter().map(ScoreVector::mean).collect()
}

fn popcounts(masks: &[BinaryMask]) -> Vec<usize> {
    masks.iter().map(BinaryMask::popcount).collect()
}

/// Dense training with every score pinned at 1. Pruners are only read.
pub fn run_warmup(model: &mut ResNet, pruners: &[PrunerLayer], s: &mut Session<'_>) -> Result<()> {
    s.plan.validate()?;
    check_data(s.data, model)?;
    let plan = s.plan;
    let total = plan.warmup_epochs;
    let mut opt = Optimizer::<f32>::new(plan.warmup_optimizer);
    for e in 0..total {
        let lr = plan.lr_schedule.lr_at(plan.warmup_optimizer.lr, e, total);
        let (loss, acc, _) = train_epoch(s.data, plan.batch_size, s.seed, e, |x, y| {
            let (logits, trace) = model.forward_train(x, None, true)?;
            let ce = cross_entropy(&logits, y, model.shape.num_classes);
            model.zero_grad();
            model.backward(
                &trace,
                &ce.grad,
                GradRequest {
                    weights: true,
                    gates: false,
                },
            );
            opt.step(&mut model.params(), lr);
            Ok((ce.loss, ce.correct, 0.0))
        })?;
        let ev = evaluate(model, &s.data.eval, None, plan.batch_size)?;
        let scores = current_scores(model, pruners)?;
        let masks: Vec<BinaryMask> = scores.iter().map(binarize).collect();
        let r = pruning_ratios(s.graph, &masks, CountBasis::ConvOnly)?;
        s.sink.record(&MetricRow {
            epoch: e,
            phase: Phase::Warmup,
            cycle: None,
            loss,
            accuracy: acc,
            regularizer: None,
            eval_loss: ev.loss,
            eval_accuracy: ev.accuracy,
            eval_accuracy_binary: None,
            mean_scores: mean_scores(&scores),
            popcounts: popcounts(&masks),
            param_ratio: r.param_ratio,
            flop_ratio: r.flop_ratio,
        })?;
    }
    Ok(())
}

fn stage_row(
    model: &ResNet,
    pruners: &[PrunerLayer],
    s: &mut Session<'_>,
    phase: Phase,
    cycle: usize,
    epoch: usize,
    train: (f64, f64, f64),
) -> Result<()> {
    let scores = current_scores(model, pruners)?;
    let masks: Vec<BinaryMask> = scores.iter().map(binarize).collect();
    let bs = s.plan.batch_size;
    let soft = evaluate(model, &s.data.eval, Some(&continuous_gates(&scores)), bs)?;
    let hard = evaluate(model, &s.data.eval, Some(&binary_gates(&masks)), bs)?;
    let own = if phase == Phase::Score { soft } else { hard };
    let r = pruning_ratios(s.graph, &masks, CountBasis::ConvOnly)?;
    s.sink.record(&MetricRow {
        epoch,
        phase,
        cycle: Some(cycle),
        loss: train.0,
        accuracy: train.1,
        regularizer: (phase == Phase::Score).then_some(train.2),
        eval_loss: own.loss,
        eval_accuracy: own.accuracy,
        eval_accuracy_binary: Some(hard.accuracy),
        mean_scores: mean_scores(&scores),
        popcounts: popcounts(&masks),
        param_ratio: r.param_ratio,
        flop_ratio: r.flop_ratio,
    })
}

/// Trains only the pruner projections: continuous scores on the feature maps,
/// regularized loss, network weights and batch-norm statistics untouched.
pub fn run_score_phase(
    model: &mut ResNet,
    pruners: &mut [PrunerLayer],
    opt: &mut Optimizer<f64>,
    s: &mut Session<'_>,
    cycle: usize,
) -> Result<()> {
    s.plan.validate()?;
    check_data(s.data, model)?;
    let plan = s.plan;
    let banks = filter_banks(model, pruners)?;
    let specs = s.graph.prunable_specs();
    let reg = plan.regularizer;
    let w = regularizer_weights(&specs, &reg);
    let lr = plan.score_optimizer.lr;
    for e in 0..plan.score_epochs {
        let epoch = plan.stage_epoch(cycle, Phase::Score, e);
        let train = train_epoch(s.data, plan.batch_size, s.seed, epoch, |x, y| {
            let scores = scores_for(&banks, pruners)?;
            let gates = continuous_gates(&scores);
            let (logits, trace) = model.forward_train(x, Some(&gates), false)?;
            let ce = cross_entropy(&logits, y, model.shape.num_classes);
            let dgate = model
                .backward(
                    &trace,
                    &ce.grad,
                    GradRequest {
                        weights: false,
                        gates: true,
                    },
                )
                .expect("gated pass yields gate gradients");
            let mut penalty = 0.0;
            let mut grads = Vec::with_capacity(pruners.len());
            for (l, ((bank, p), sv)) in banks.iter().zip(pruners.iter()).zip(&scores).enumerate() {
                penalty += w[l] * sv.l1_norm();
                // Scores are strictly positive, so d|s|/ds = 1.
                let up: Vec<f64> = dgate[l].iter().map(|g| g + reg.lambda * w[l]).collect();
                grads.push(score_vjp(bank, p, &up)?.projection);
            }
            let mut params: Vec<Param<'_, f64>> = pruners
                .iter_mut()
                .zip(&grads)
                .map(|(p, g)| Param {
                    value: &mut p.projection,
                    grad: g,
                })
                .collect();
            opt.step(&mut params, lr);
            Ok((ce.loss, ce.correct, reg.lambda * penalty))
        })?;
        stage_row(model, pruners, s, Phase::Score, cycle, epoch, train)?;
    }
    Ok(())
}

/// Trains only the network weights under binary gates and the plain loss.
/// Gates are re-derived from the current filters every batch; no gradient
/// flows through them.
pub fn run_weight_phase(
    model: &mut ResNet,
    pruners: &[PrunerLayer],
    opt: &mut Optimizer<f32>,
    s: &mut Session<'_>,
    cycle: usize,
) -> Result<()> {
    s.plan.validate()?;
    check_data(s.data, model)?;
    let plan = s.plan;
    let lr = plan.weight_optimizer.lr;
    for e in 0..plan.weight_epochs {
        let epoch = plan.stage_epoch(cycle, Phase::Weight, e);
        let train = train_epoch(s.data, plan.batch_size, s.seed, epoch, |x, y| {
            let gates = binary_gates(&current_masks(model, pruners)?);
            let (logits, trace) = model.forward_train(x, Some(&gates), true)?;
            let ce = cross_entropy(&logits, y, model.shape.num_classes);
            model.zero_grad();
            model.backward(
                &trace,
                &ce.grad,
                GradRequest {
                    weights: true,
                    gates: false,
                },
            );
            opt.step(&mut model.params(), lr);
            Ok((ce.loss, ce.correct, 0.0))
        })?;
        stage_row(model, pruners, s, Phase::Weight, cycle, epoch, train)?;
    }
    Ok(())
}

/// Called after every completed phase with the cursor of the next one.
pub type BoundaryHook<'h> =
    dyn FnMut(&ResNet, &[PrunerLayer], &PruneOptimizers, StageCursor) -> Result<()> + 'h;

/// Alternates score and weight phases from `start` until all cycles are done.
pub fn run_pruning_stage(
    model: &mut ResNet,
    pruners: &mut [PrunerLayer],
    opts: &mut PruneOptimizers,
    s: &mut Session<'_>,
    start: StageCursor,
    mut on_boundary: Option<&mut BoundaryHook<'_>>,
) -> Result<Vec<CycleSummary>> {
    s.plan.validate()?;
    check_data(s.data, model)?;
    let mut cursor = start;
    let mut summaries = Vec::new();
    while !cursor.is_done(s.plan) {
        match cursor.phase {
            Phase::Score => run_score_phase(model, pruners, &mut opts.scores, s, cursor.cycle)?,
            Phase::Weight => {
                run_weight_phase(model, pruners, &mut opts.weights, s, cursor.cycle)?;
                let scores = current_scores(model, pruners)?;
                let masks: Vec<BinaryMask> = scores.iter().map(binarize).collect();
                let total: usize = scores.iter().map(ScoreVector::len).sum();
                let sum: f64 = scores.iter().map(|v| v.values.iter().sum::<f64>()).sum();
                let summary = CycleSummary {
                    cycle: cursor.cycle,
                    mean_score: sum / total.max(1) as f64,
                    mean_scores: mean_scores(&scores),
                    popcounts: popcounts(&masks),
                    ratios: pruning_ratios(s.graph, &masks, CountBasis::ConvOnly)?,
                };
                s.sink.cycle(&summary)?;
                summaries.push(summary);
            }
            other => {
                return Err(Error::Config(format!(
                    "{other} is not a pruning-stage phase"
                )))
            }
        }
        cursor = cursor.next();
        if let Some(hook) = on_boundary.as_deref_mut() {
            hook(model, pruners, opts, cursor)?;
        }
    }
    Ok(summaries)
}

/// Trains an extracted model; `masks` only feed the reported ratios.
pub fn run_finetune(model: &mut ResNet, masks: &[BinaryMask], s: &mut Session<'_>) -> Result<()> {
    s.plan.validate()?;
    check_data(s.data, model)?;
    let plan = s.plan;
    let total = plan.finetune_epochs;
    let r = pruning_ratios(s.graph, masks, CountBasis::ConvOnly)?;
    let pops = popcounts(masks);
    let mut opt = Optimizer::<f32>::new(plan.finetune_optimizer);
    for e in 0..total {
        let lr = plan.lr_schedule.lr_at(plan.finetune_optimizer.lr, e, total);
        let epoch = plan.finetune_epoch(e);
        let (loss, acc, _) = train_epoch(s.data, plan.batch_size, s.seed, epoch, |x, y| {
            let (logits, trace) = model.forward_train(x, None, true)?;
            let ce = cross_entropy(&logits, y, model.shape.num_classes);
            model.zero_grad();
            model.backward(
                &trace,
                &ce.grad,
                GradRequest {
                    weights: true,
                    gates: false,
                },
            );
            opt.step(&mut model.params(), lr);
            Ok((ce.loss, ce.correct, 0.0))
        })?;
        let ev = evaluate(model, &s.data.eval, None, plan.batch_size)?;
        s.sink.record(&MetricRow {
            epoch,
            phase: Phase::Finetune,
            cycle: None,
            loss,
            accuracy: acc,
            regularizer: None,
            eval_loss: ev.loss,
            eval_accuracy: ev.accuracy,
            eval_accuracy_binary: None,
            mean_scores: Vec::new(),
            popcounts: pops.clone(),
            param_ratio: r.param_ratio,
            flop_ratio: r.flop_ratio,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_accounts_ninety_stage_epochs() {
        let p = TrainingPlan::default();
        assert_eq!(p.pruning_epochs(), 90);
        assert_eq!(
            (p.warmup_epochs, p.finetune_epochs, p.batch_size),
            (50, 300, 256)
        );
        assert_eq!(p.stage_epoch(0, Phase::Score, 0), 50);
        assert_eq!(p.stage_epoch(9, Phase::Weight, 5), 139);
        assert_eq!(p.finetune_epoch(0), 140);
    }

    #[test]
    fn cursor_walks_cycles() {
        let plan = TrainingPlan {
            cycles: 2,
            ..TrainingPlan::default()
        };
        let mut c = StageCursor::START;
        let mut seen = Vec::new();
        while !c.is_done(&plan) {
            seen.push((c.cycle, c.phase));
            c = c.next();
        }
        assert_eq!(
            seen,
            vec![
                (0, Phase::Score),
                (0, Phase::Weight),
                (1, Phase::Score),
                (1, Phase::Weight)
            ]
        );
    }

    #[test]
    fn phase_freezing_sets() {
        assert_eq!(
            PhaseState::new(Phase::Score, 0).frozen,
            FrozenSet::NetworkParams
        );
        assert_eq!(
            PhaseState::new(Phase::Weight, 0).frozen,
            FrozenSet::PrunerParams
        );
        assert_eq!(
            PhaseState::new(Phase::Warmup, 0).frozen,
            FrozenSet::PrunerParams
        );
        assert_eq!(
            PhaseState::new(Phase::Finetune, 0).frozen,
            FrozenSet::Nothing
        );
    }

    #[test]
    fn epoch_rng_is_a_function_of_seed_and_epoch() {
        use rand::Rng;
        let a: u64 = epoch_rng(5, 3).random();
        let b: u64 = epoch_rng(5, 3).random();
        let c: u64 = epoch_rng(5, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut p = TrainingPlan {
            batch_size: 0,
            ..TrainingPlan::default()
        };
        assert!(p.validate().is_err());
        p.batch_size = 1;
        p.regularizer.lambda = -1.0;
        assert!(p.validate().is_err());
    }
}
