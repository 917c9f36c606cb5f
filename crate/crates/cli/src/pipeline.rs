//! Command dispatch over a run directory.
//!
//! ```text
//! <out>/.lock                      held while a command runs
//! <out>/snapshots/<command>.toml   resolved config of the last invocation
//! <out>/checkpoints/<stage>/       see [`crate::checkpoint`]
//! <out>/metrics.csv, refinement.csv
//! <out>/certification.json         written by extract
//! <out>/report.json, budget.svg, accuracy.svg
//! <out>/verify.json
//! ```
//!
//! Each stage reads the previous stage's checkpoint and rewinds the CSV
//! streams to the row counts recorded in it before appending, so re-running
//! or resuming a stage never duplicates rows.

use crate::checkpoint::{stage_dir, Checkpoint, CheckpointError, MetaParts, Stage};
use crate::config::{ConfigError, RunConfig};
use crate::data::{ingest, DataError};
use crate::metrics::{
    accuracy_chart_svg, accuracy_trajectory, refinement_summary, CsvMetrics, MetricsError,
    RefinementLog, RefinementSummary, METRICS_FILE, REFINEMENT_FILE,
};
use filterprune::analysis::{block_refinement, budget_chart_svg, budget_report, PruneReport};
use filterprune::data::DataSplit;
use filterprune::nn::Tensor;
use filterprune::pruner::{binarize, BinaryMask, PrunerLayer};
use filterprune::schedule::{
    current_scores, run_finetune, run_pruning_stage, run_warmup, Phase, PruneOptimizers, Session,
    StageCursor,
};
use filterprune::surgery::{certify_equivalence, extract, plan_surgery, CertificationReport};
use filterprune::verify::{run_suite, CheckOutcome, Depth};
use filterprune::zoo::{attach_pruners, build_resnet_shape, ResNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::{Cell, RefCell};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Trials and tolerance used to certify an extracted network.
pub const CERTIFY_TRIALS: usize = 100;
pub const CERTIFY_TOL: f64 = 1e-5;
/// Evaluation images used for the per-phase refinement records.
pub const PROBE_IMAGES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Warmup,
    Prune,
    Extract,
    Finetune,
    Report,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Warmup => "warmup",
            Command::Prune => "prune",
            Command::Extract => "extract",
            Command::Finetune => "finetune",
            Command::Report => "report",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: RunConfig,
    /// Input checkpoint in place of the stage default.
    pub resume: Option<PathBuf>,
    /// `verify` only: run the trimmed suite.
    pub quick: bool,
    /// `prune` only: stop cleanly after this many phases of this invocation.
    pub stop_after_phases: Option<usize>,
}

impl Invocation {
    pub fn new(command: Command, config: RunConfig) -> Self {
        Self {
            command,
            config,
            resume: None,
            quick: false,
            stop_after_phases: None,
        }
    }
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub interrupted: bool,
    pub failed_checks: usize,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.failed_checks > 0 {
            3
        } else {
            0
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("`{command}` needs the {stage} checkpoint at {}; run `filterprune {stage}` first", .path.display())]
    Prerequisite {
        command: &'static str,
        stage: Stage,
        path: PathBuf,
    },
    #[error("{0}")]
    Incomplete(String),
    #[error("checkpoint {} holds stage {found}, `{command}` expects {expected}", .path.display())]
    WrongStage {
        command: &'static str,
        path: PathBuf,
        found: Stage,
        expected: String,
    },
    #[error("output directory {} is in use by another run; delete {} if that run is gone", .dir.display(), .dir.join(".lock").display())]
    Locked { dir: PathBuf },
    #[error(transparent)]
    Core(#[from] filterprune::Error),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 validation, 2 missing prerequisite, 3 failed verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Prerequisite { .. } | CliError::Incomplete(_) => 2,
            CliError::Data(DataError::FetchRequired { .. }) => 2,
            CliError::Core(filterprune::Error::Certification { .. }) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.into(),
        source,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_file(path, text)
}

/// Exclusive hold on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked { dir: dir.into() })
            }
            Err(e) => Err(CliError::Io { path, source: e }),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Runs one command to completion.
pub fn dispatch(inv: &Invocation) -> Result<Outcome, CliError> {
    inv.config.validate()?;
    let out = inv.config.output.dir.clone();
    let _lock = OutputLock::acquire(&out)?;
    let snapshots = out.join("snapshots");
    fs::create_dir_all(&snapshots).map_err(io_err(&snapshots))?;
    write_file(
        &snapshots.join(format!("{}.toml", inv.command.name())),
        inv.config.to_toml(),
    )?;
    match inv.command {
        Command::Warmup => warmup(inv, &out),
        Command::Prune => prune(inv, &out),
        Command::Extract => extract_cmd(inv, &out),
        Command::Finetune => finetune(inv, &out),
        Command::Report => report(inv, &out),
        Command::Verify => verify(inv, &out),
    }
}

fn load_input(
    inv: &Invocation,
    out: &Path,
    stage: Stage,
) -> Result<(PathBuf, Checkpoint), CliError> {
    let path = inv.resume.clone().unwrap_or_else(|| stage_dir(out, stage));
    if !path.join("meta.json").is_file() {
        return Err(CliError::Prerequisite {
            command: inv.command.name(),
            stage,
            path,
        });
    }
    let ck = Checkpoint::load(&path)?;
    if ck.meta.config.model != inv.config.model {
        return Err(ConfigError::Invalid {
            key: "model".into(),
            message: format!("differs from the model recorded in {}", path.display()),
        }
        .into());
    }
    if ck.meta.config.data != inv.config.data {
        log::warn!(
            "data settings differ from those recorded in {}",
            path.display()
        );
    }
    Ok((path, ck))
}

fn session<'a>(
    inv: &'a Invocation,
    ck_graph: &'a filterprune::graph::ArchGraph,
    data: &'a DataSplit,
    sink: &'a mut CsvMetrics,
) -> Session<'a> {
    Session {
        plan: &inv.config.plan,
        graph: ck_graph,
        data,
        seed: inv.config.data.seed,
        sink,
    }
}

fn masks_of(
    model: &ResNet,
    pruners: &[PrunerLayer],
) -> Result<(Vec<filterprune::pruner::ScoreVector>, Vec<BinaryMask>), CliError> {
    let scores = current_scores(model, pruners)?;
    let masks = scores.iter().map(binarize).collect();
    Ok((scores, masks))
}

fn warmup(inv: &Invocation, out: &Path) -> Result<Outcome, CliError> {
    if inv.resume.is_some() {
        return Err(ConfigError::Invalid {
            key: "--resume".into(),
            message: "warm-up always starts from a fresh network".into(),
        }
        .into());
    }
    let cfg = &inv.config;
    let data = ingest(&cfg.data, cfg.model.num_classes)?;
    let shape = cfg.shape(data.train.height, data.train.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    let (mut model, graph) = build_resnet_shape(&shape, &mut rng)?;
    let pruners = attach_pruners(&model, &graph, cfg.plan.slope_a)?;
    let mut sink = CsvMetrics::open(out, &graph.prunable_names(), 0)?;
    let refine = RefinementLog::open(out, 0)?;
    run_warmup(
        &mut model,
        &pruners,
        &mut session(inv, &graph, &data, &mut sink),
    )?;
    let ev = filterprune::schedule::evaluate(&model, &data.eval, None, cfg.plan.batch_size)?;
    let (scores, masks) = masks_of(&model, &pruners)?;
    let parts = MetaParts {
        stage: Stage::Warmup,
        graph: &graph,
        config: cfg,
        cursor: StageCursor::START,
        scores,
        masks,
        metrics_rows: sink.stream.rows(),
        refinement_rows: refine.stream.rows(),
    };
    let dir = stage_dir(out, Stage::Warmup);
    Checkpoint::assemble(parts, model, pruners, None).save(&dir)?;
    Ok(Outcome {
        lines: vec![
            format!(
                "warm-up: {} epochs, eval accuracy {:.4}",
                cfg.plan.warmup_epochs, ev.accuracy
            ),
            format!("checkpoint: {}", dir.display()),
        ],
        ..Outcome::default()
    })
}

fn probe_batch(data: &DataSplit) -> Tensor {
    let idx: Vec<usize> = (0..data.eval.len().min(PROBE_IMAGES)).collect();
    data.eval.batch::<ChaCha8Rng>(&idx, None).0
}

/// Phase that ends where `next` begins.
fn completed_before(next: StageCursor) -> (usize, Phase) {
    match next.phase {
        Phase::Weight => (next.cycle, Phase::Score),
        _ => (next.cycle - 1, Phase::Weight),
    }
}

fn prune(inv: &Invocation, out: &Path) -> Result<Outcome, CliError> {
    let default_input = if inv.resume.is_some() {
        Stage::Prune
    } else {
        Stage::Warmup
    };
    let (path, ck) = load_input(inv, out, default_input)?;
    if !matches!(ck.meta.stage, Stage::Warmup | Stage::Prune) {
        return Err(CliError::WrongStage {
            command: "prune",
            path,
            found: ck.meta.stage,
            expected: "warmup or prune".into(),
        });
    }
    let cfg = &inv.config;
    let start = if ck.meta.stage == Stage::Warmup {
        StageCursor::START
    } else {
        ck.meta.cursor
    };
    if start.is_done(&cfg.plan) {
        return Ok(Outcome {
            lines: vec![format!(
                "pruning stage already complete in {}",
                path.display()
            )],
            ..Outcome::default()
        });
    }
    let data = ingest(&cfg.data, cfg.model.num_classes)?;
    let graph = ck.meta.graph.clone();
    let mut sink = CsvMetrics::open(out, &graph.prunable_names(), ck.meta.metrics_rows)?;
    let metric_rows = sink.stream.counter();
    let refine = RefCell::new(RefinementLog::open(out, ck.meta.refinement_rows)?);
    let mut opts = match ck.optimizers {
        Some((w, s)) => PruneOptimizers::with_state(&cfg.plan, w, s),
        None => PruneOptimizers::new(&cfg.plan),
    };
    let (mut model, mut pruners) = (ck.model, ck.pruners);
    let probe = probe_batch(&data);
    let dir = stage_dir(out, Stage::Prune);
    let phases = Cell::new(0usize);
    let interrupted = Cell::new(false);
    let failure: RefCell<Option<CliError>> = RefCell::new(None);

    let mut boundary = |m: &ResNet,
                        p: &[PrunerLayer],
                        o: &PruneOptimizers,
                        next: StageCursor|
     -> filterprune::Result<()> {
        let step = || -> Result<(), CliError> {
            let (scores, masks) = masks_of(m, p)?;
            let (cycle, phase) = completed_before(next);
            let records = block_refinement(m, &scores, &probe)?;
            refine.borrow_mut().append(cycle, phase, &records)?;
            let parts = MetaParts {
                stage: Stage::Prune,
                graph: &graph,
                config: cfg,
                cursor: next,
                scores,
                masks,
                metrics_rows: metric_rows.get(),
                refinement_rows: refine.borrow().stream.rows(),
            };
            let opt_state = Some((o.weights.state.clone(), o.scores.state.clone()));
            Checkpoint::assemble(parts, m.clone(), p.to_vec(), opt_state).save(&dir)?;
            Ok(())
        };
        if let Err(e) = step() {
            *failure.borrow_mut() = Some(e);
            return Err(filterprune::Error::Config("checkpointing failed".into()));
        }
        phases.set(phases.get() + 1);
        if inv.stop_after_phases == Some(phases.get()) && !next.is_done(&cfg.plan) {
            interrupted.set(true);
            return Err(filterprune::Error::Config("interrupted".into()));
        }
        Ok(())
    };
    let result = run_pruning_stage(
        &mut model,
        &mut pruners,
        &mut opts,
        &mut session(inv, &graph, &data, &mut sink),
        start,
        Some(&mut boundary),
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let mut lines = Vec::new();
    match result {
        Ok(summaries) => {
            for s in &summaries {
                lines.push(format!(
                    "cycle {}: mean score {:.4}, params pruned {:.2}%, flops pruned {:.2}%",
                    s.cycle,
                    s.mean_score,
                    100.0 * s.ratios.param_ratio,
                    100.0 * s.ratios.flop_ratio
                ));
            }
        }
        Err(_) if interrupted.get() => {
            lines.push(format!("interrupted after {} phases", phases.get()));
        }
        Err(e) => return Err(e.into()),
    }
    lines.push(format!("checkpoint: {}", dir.display()));
    Ok(Outcome {
        lines,
        interrupted: interrupted.get(),
        ..Outcome::default()
    })
}

fn extract_cmd(inv: &Invocation, out: &Path) -> Result<Outcome, CliError> {
    let (path, ck) = load_input(inv, out, Stage::Prune)?;
    if ck.meta.stage != Stage::Prune {
        return Err(CliError::WrongStage {
            command: "extract",
            path,
            found: ck.meta.stage,
            expected: "prune".into(),
        });
    }
    if !ck.meta.cursor.is_done(&ck.meta.config.plan) {
        return Err(CliError::Incomplete(format!(
            "the pruning stage in {} stopped before cycle {} ({} phase); finish it with `filterprune prune --resume {}`",
            path.display(),
            ck.meta.cursor.cycle,
            ck.meta.cursor.phase,
            path.display()
        )));
    }
    let graph = &ck.meta.graph;
    let masks = ck.meta.masks.clone();
    let plan = plan_surgery(graph, &masks)?;
    let compact = extract(&ck.model, graph, &plan)?;
    let seed = inv.config.data.seed;
    let cert = certify_equivalence(
        &ck.model,
        &masks,
        &compact,
        CERTIFY_TRIALS,
        CERTIFY_TOL,
        seed,
    );
    let record = match &cert {
        Ok(r) => *r,
        Err(filterprune::Error::Certification {
            max_deviation,
            tol,
            worst_trial,
        }) => CertificationReport {
            trials: CERTIFY_TRIALS,
            max_deviation: *max_deviation,
            worst_trial: *worst_trial,
            tol: *tol,
        },
        Err(_) => CertificationReport {
            trials: 0,
            max_deviation: f64::NAN,
            worst_trial: 0,
            tol: CERTIFY_TOL,
        },
    };
    write_json(&out.join("certification.json"), &record)?;
    let report = cert?;
    let eliminated = plan.eliminated.len();
    let parts = MetaParts {
        stage: Stage::Extract,
        graph,
        config: &inv.config,
        cursor: ck.meta.cursor,
        scores: ck.meta.scores.clone(),
        masks,
        metrics_rows: ck.meta.metrics_rows,
        refinement_rows: ck.meta.refinement_rows,
    };
    let dir = stage_dir(out, Stage::Extract);
    let params = compact.count_params(filterprune::objective::CountBasis::ConvOnly);
    Checkpoint::assemble(parts, compact, Vec::new(), None).save(&dir)?;
    Ok(Outcome {
        lines: vec![
            format!(
                "extracted: {params} conv weights, {eliminated} blocks eliminated, max logit deviation {:.2e} over {} inputs",
                report.max_deviation, report.trials
            ),
            format!("checkpoint: {}", dir.display()),
        ],
        ..Outcome::default()
    })
}

fn finetune(inv: &Invocation, out: &Path) -> Result<Outcome, CliError> {
    let (path, ck) = load_input(inv, out, Stage::Extract)?;
    if !matches!(ck.meta.stage, Stage::Extract | Stage::Finetune) {
        return Err(CliError::WrongStage {
            command: "finetune",
            path,
            found: ck.meta.stage,
            expected: "extract".into(),
        });
    }
    let cfg = &inv.config;
    let data = ingest(&cfg.data, cfg.model.num_classes)?;
    let graph = ck.meta.graph.clone();
    let mut sink = CsvMetrics::open(out, &graph.prunable_names(), ck.meta.metrics_rows)?;
    let mut model = ck.model;
    let masks = ck.meta.masks.clone();
    run_finetune(
        &mut model,
        &masks,
        &mut session(inv, &graph, &data, &mut sink),
    )?;
    let ev = filterprune::schedule::evaluate(&model, &data.eval, None, cfg.plan.batch_size)?;
    let parts = MetaParts {
        stage: Stage::Finetune,
        graph: &graph,
        config: cfg,
        cursor: ck.meta.cursor,
        scores: ck.meta.scores,
        masks,
        metrics_rows: sink.stream.rows(),
        refinement_rows: ck.meta.refinement_rows,
    };
    let dir = stage_dir(out, Stage::Finetune);
    Checkpoint::assemble(parts, model, Vec::new(), None).save(&dir)?;
    Ok(Outcome {
        lines: vec![
            format!(
                "fine-tune: {} epochs, eval accuracy {:.4}",
                cfg.plan.finetune_epochs, ev.accuracy
            ),
            format!("checkpoint: {}", dir.display()),
        ],
        ..Outcome::default()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub phase: String,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub budget: PruneReport,
    pub final_eval_accuracy: Option<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub refinement: RefinementSummary,
}

fn report(inv: &Invocation, out: &Path) -> Result<Outcome, CliError> {
    let (path, ck) = match &inv.resume {
        Some(_) => load_input(inv, out, Stage::Warmup)?,
        None => {
            let latest = Stage::ALL
                .iter()
                .rev()
                .find(|s| stage_dir(out, **s).join("meta.json").is_file())
                .copied()
                .unwrap_or(Stage::Warmup);
            load_input(inv, out, latest)?
        }
    };
    let budget = budget_report(&ck.meta.graph, &ck.meta.masks)?;
    let metrics = out.join(METRICS_FILE);
    let trajectory = if metrics.is_file() {
        accuracy_trajectory(&metrics, ck.meta.metrics_rows)?
    } else {
        Vec::new()
    };
    let refinement_file = out.join(REFINEMENT_FILE);
    let refinement = if refinement_file.is_file() {
        refinement_summary(&refinement_file, ck.meta.refinement_rows)?
    } else {
        RefinementSummary::default()
    };
    let rep = RunReport {
        stage: ck.meta.stage,
        checkpoint: path,
        final_eval_accuracy: trajectory.last().map(|t| t.2),
        trajectory: trajectory
            .iter()
            .map(|(epoch, phase, acc)| TrajectoryPoint {
                epoch: *epoch,
                phase: phase.clone(),
                eval_accuracy: *acc,
            })
            .collect(),
        budget,
        refinement,
    };
    write_json(&out.join("report.json"), &rep)?;
    write_file(&out.join("budget.svg"), budget_chart_svg(&rep.budget))?;
    write_file(&out.join("accuracy.svg"), accuracy_chart_svg(&trajectory))?;
    let b = &rep.budget;
    let mut lines = vec![
        format!("stage: {}", rep.stage),
        format!(
            "filters kept: {}/{}, params pruned {:.2}%, flops pruned {:.2}% (with BN and FC: {:.2}% / {:.2}%)",
            b.remaining_filters,
            b.total_filters,
            100.0 * b.ratios.param_ratio,
            100.0 * b.ratios.flop_ratio,
            100.0 * b.ratios_with_bn_fc.param_ratio,
            100.0 * b.ratios_with_bn_fc.flop_ratio
        ),
        format!(
            "blocks with a sparser first conv: {}/{}, eliminated: {}",
            b.first_sparser_blocks,
            b.blocks.len(),
            b.blocks.iter().filter(|x| x.eliminated).count()
        ),
    ];
    for l in &b.layers {
        lines.push(format!(
            "  {:<16} {:>4}/{:<4} {:6.2}%",
            l.name,
            l.remaining,
            l.filters,
            100.0 * l.fraction
        ));
    }
    if let Some(a) = rep.final_eval_accuracy {
        lines.push(format!("final eval accuracy: {a:.4}"));
    }
    Ok(Outcome {
        lines,
        ..Outcome::default()
    })
}

fn verify(inv: &Invocation, out: &Path) -> Result<Outcome, CliError> {
    let depth = if inv.quick { Depth::Quick } else { Depth::Full };
    let outcomes: Vec<CheckOutcome> = run_suite(depth, inv.config.data.seed);
    write_json(&out.join("verify.json"), &outcomes)?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let mut lines: Vec<String> = outcomes
        .iter()
        .map(|o| {
            format!(
                "{} {:<20} {:>7.2}s  {}",
                if o.passed { "PASS" } else { "FAIL" },
                o.name,
                o.seconds,
                o.detail
            )
        })
        .collect();
    lines.push(format!(
        "{}/{} checks passed",
        outcomes.len() - failed,
        outcomes.len()
    ));
    Ok(Outcome {
        lines,
        failed_checks: failed,
        ..Outcome::default()
    })
}
