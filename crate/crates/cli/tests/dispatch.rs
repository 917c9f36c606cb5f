use filterprune_cli::checkpoint::{stage_dir, Checkpoint, Stage};
use filterprune_cli::config::{DatasetKind, RunConfig};
use filterprune_cli::data::{ingest, load_cifar10, CIFAR10_DIR};
use filterprune_cli::pipeline::{dispatch, CliError, Command, Invocation, OutputLock};
use std::fs;
use std::path::Path;
use std::process::Command as Process;

fn tiny(out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.depth = 8;
    c.model.base_width = 4;
    c.model.num_classes = 4;
    c.data.dataset = DatasetKind::Synthetic;
    c.data.synthetic.train = 64;
    c.data.synthetic.eval = 32;
    c.data.synthetic.image_size = 8;
    c.data.seed = 5;
    let p = &mut c.plan;
    p.warmup_epochs = 1;
    p.cycles = 2;
    p.score_epochs = 1;
    p.weight_epochs = 1;
    p.finetune_epochs = 1;
    p.batch_size = 16;
    p.regularizer.lambda = 0.5;
    p.score_optimizer.lr = 0.05;
    c.output.dir = out.to_path_buf();
    c
}

fn run(command: Command, cfg: &RunConfig) -> Result<filterprune_cli::Outcome, CliError> {
    dispatch(&Invocation::new(command, cfg.clone()))
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_filterprune"))
}

#[test]
fn stages_run_in_order_and_report_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    for c in [
        Command::Warmup,
        Command::Prune,
        Command::Extract,
        Command::Finetune,
        Command::Report,
    ] {
        run(c, &cfg).unwrap();
    }
    for f in [
        "metrics.csv",
        "refinement.csv",
        "certification.json",
        "report.json",
        "budget.svg",
        "accuracy.svg",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    for s in Stage::ALL {
        assert!(stage_dir(dir.path(), s).join("meta.json").is_file());
    }
    let rows = fs::read_to_string(dir.path().join("metrics.csv"))
        .unwrap()
        .lines()
        .count();
    // header + warm-up + 2 cycles of (score, weight) + fine-tune
    assert_eq!(rows, 1 + 1 + 4 + 1);
    let refinement = fs::read_to_string(dir.path().join("refinement.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(refinement, 1 + 4 * 3);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["stage"], "finetune");
    assert_eq!(report["trajectory"].as_array().unwrap().len(), 6);
}

#[test]
fn extract_without_prune_checkpoint_is_a_prerequisite_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = run(Command::Extract, &cfg).unwrap_err();
    assert!(
        matches!(
            err,
            CliError::Prerequisite {
                stage: Stage::Prune,
                ..
            }
        ),
        "{err}"
    );
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("prune"));
    let err = run(Command::Finetune, &cfg).unwrap_err();
    assert!(matches!(
        err,
        CliError::Prerequisite {
            stage: Stage::Extract,
            ..
        }
    ));
    let err = run(Command::Report, &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    let status = bin()
        .args(["extract", "--out"])
        .arg(dir.path().join("other"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn extract_refuses_an_unfinished_pruning_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run(Command::Warmup, &cfg).unwrap();
    let mut inv = Invocation::new(Command::Prune, cfg.clone());
    inv.stop_after_phases = Some(1);
    assert!(dispatch(&inv).unwrap().interrupted);
    let err = run(Command::Extract, &cfg).unwrap_err();
    assert!(matches!(err, CliError::Incomplete(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn report_on_dense_checkpoint_shows_no_pruning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run(Command::Warmup, &cfg).unwrap();
    let out = run(Command::Report, &cfg).unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["stage"], "warmup");
    let b = &report["budget"];
    assert_eq!(b["remaining_filters"], b["total_filters"]);
    for key in ["ratios", "ratios_with_bn_fc"] {
        assert_eq!(b[key]["param_ratio"].as_f64(), Some(0.0));
        assert_eq!(b[key]["flop_ratio"].as_f64(), Some(0.0));
    }
    for l in b["layers"].as_array().unwrap() {
        assert_eq!(l["remaining"], l["filters"]);
    }
    assert!(out.lines.iter().any(|l| l.contains("params pruned 0.00%")));
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run(Command::Warmup, &cfg).unwrap();
    let mut inv = Invocation::new(Command::Prune, cfg.clone());
    inv.stop_after_phases = Some(1);
    dispatch(&inv).unwrap();
    for stage in [Stage::Warmup, Stage::Prune] {
        let src = stage_dir(dir.path(), stage);
        let ck = Checkpoint::load(&src).unwrap();
        let copy = dir.path().join(format!("copy-{stage}"));
        ck.save(&copy).unwrap();
        let mut names: Vec<_> = fs::read_dir(&src)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        let mut copied: Vec<_> = fs::read_dir(&copy)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        copied.sort();
        assert_eq!(names, copied);
        for n in &names {
            assert_eq!(
                fs::read(src.join(n)).unwrap(),
                fs::read(copy.join(n)).unwrap(),
                "{stage} {n:?}"
            );
        }
    }
    let ck = Checkpoint::load(&stage_dir(dir.path(), Stage::Prune)).unwrap();
    assert!(ck.optimizers.is_some());
    assert_eq!(ck.meta.metrics_rows, 2);
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run(Command::Warmup, &cfg).unwrap();
    let weights = stage_dir(dir.path(), Stage::Warmup).join("weights.safetensors");
    let mut bytes = fs::read(&weights).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&weights, bytes).unwrap();
    assert!(Checkpoint::load(&stage_dir(dir.path(), Stage::Warmup)).is_err());
}

#[test]
fn resumed_run_reproduces_uninterrupted_metric_stream() {
    let whole = tempfile::tempdir().unwrap();
    let cfg = tiny(whole.path());
    run(Command::Warmup, &cfg).unwrap();
    run(Command::Prune, &cfg).unwrap();

    for stop in [1, 3] {
        let split = tempfile::tempdir().unwrap();
        let cfg2 = tiny(split.path());
        run(Command::Warmup, &cfg2).unwrap();
        let mut inv = Invocation::new(Command::Prune, cfg2.clone());
        inv.stop_after_phases = Some(stop);
        let first = dispatch(&inv).unwrap();
        assert!(first.interrupted);
        let mut inv = Invocation::new(Command::Prune, cfg2.clone());
        inv.resume = Some(stage_dir(split.path(), Stage::Prune));
        assert!(!dispatch(&inv).unwrap().interrupted);

        for f in ["metrics.csv", "refinement.csv"] {
            assert_eq!(
                fs::read_to_string(whole.path().join(f)).unwrap(),
                fs::read_to_string(split.path().join(f)).unwrap(),
                "{f} after stopping at phase {stop}"
            );
        }
        for blob in [
            "weights.safetensors",
            "pruners.safetensors",
            "optim.safetensors",
        ] {
            assert_eq!(
                fs::read(stage_dir(whole.path(), Stage::Prune).join(blob)).unwrap(),
                fs::read(stage_dir(split.path(), Stage::Prune).join(blob)).unwrap(),
                "{blob}"
            );
        }
    }
}

#[test]
fn rerunning_a_stage_rewinds_its_metric_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run(Command::Warmup, &cfg).unwrap();
    run(Command::Prune, &cfg).unwrap();
    let once = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    // A fresh prune from the warm-up checkpoint replaces the earlier rows.
    run(Command::Prune, &cfg).unwrap_or_else(|e| panic!("{e}"));
    let mut inv = Invocation::new(Command::Prune, cfg.clone());
    inv.resume = Some(stage_dir(dir.path(), Stage::Warmup));
    dispatch(&inv).unwrap();
    assert_eq!(
        once,
        fs::read_to_string(dir.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn output_directory_is_locked_while_in_use() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let held = OutputLock::acquire(dir.path()).unwrap();
    let err = run(Command::Warmup, &cfg).unwrap_err();
    assert!(matches!(err, CliError::Locked { .. }));
    assert_eq!(err.exit_code(), 1);
    assert!(OutputLock::acquire(dir.path()).is_err());
    drop(held);
    run(Command::Warmup, &cfg).unwrap();
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn every_invocation_writes_a_replayable_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run(Command::Warmup, &cfg).unwrap();
    let snap = dir.path().join("snapshots/warmup.toml");
    assert_eq!(filterprune_cli::parse_config(&snap).unwrap(), cfg);
}

#[test]
fn missing_dataset_without_download_requires_fetch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("run"));
    cfg.data.dataset = DatasetKind::Cifar10;
    cfg.model.num_classes = 10;
    cfg.data.root = dir.path().join("empty");
    cfg.data.download = false;
    let err = run(Command::Warmup, &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(err.to_string().contains("download"));
}

#[test]
fn subset_draw_is_deterministic_and_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.synthetic.train = 400;
    cfg.data.subset = 0.1;
    let a = ingest(&cfg.data, 4).unwrap();
    let b = ingest(&cfg.data, 4).unwrap();
    assert_eq!(a.train.len(), 40);
    assert_eq!(a.train.images, b.train.images);
    assert_eq!(a.train.labels, b.train.labels);
    assert_eq!(a.eval.labels, b.eval.labels);
    let (mean, std) = a.train.channel_stats();
    for (m, s) in mean.iter().zip(&std) {
        assert!(m.abs() < 1e-6, "{m}");
        assert!((s - 1.0).abs() < 1e-4, "{s}");
    }
    cfg.data.seed += 1;
    assert_ne!(ingest(&cfg.data, 4).unwrap().train.images, a.train.images);
}

fn fake_batch(path: &Path, n: usize, salt: u8) {
    let mut bytes = Vec::new();
    for i in 0..n {
        bytes.push((i % 10) as u8);
        bytes.extend((0..3072).map(|j| ((j * 7 + i * 13) as u8).wrapping_add(salt)));
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn binary_release_decodes_into_expected_splits() {
    let dir = tempfile::tempdir().unwrap();
    let batches = dir.path().join(CIFAR10_DIR);
    fs::create_dir_all(&batches).unwrap();
    for k in 1..=5 {
        fake_batch(&batches.join(format!("data_batch_{k}.bin")), 20, k);
    }
    fake_batch(&batches.join("test_batch.bin"), 10, 0);
    let (train, test) = load_cifar10(dir.path()).unwrap();
    assert_eq!((train.len(), test.len()), (100, 10));
    assert_eq!((train.channels, train.height, train.width), (3, 32, 32));
    assert_eq!(test.labels, (0..10).collect::<Vec<u8>>());
    assert_eq!(test.image(1)[1], ((7 + 13) as f32) / 255.0);

    let mut cfg = tiny(dir.path());
    cfg.data.dataset = DatasetKind::Cifar10;
    cfg.model.num_classes = 10;
    cfg.data.root = dir.path().to_path_buf();
    let split = ingest(&cfg.data, 10).unwrap();
    assert_eq!((split.train.len(), split.eval.len()), (100, 10));

    fs::write(batches.join("test_batch.bin"), [1u8, 2, 3]).unwrap();
    assert!(load_cifar10(dir.path()).is_err());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[regularizer]\nlambda = -1.0\n").unwrap();
    let status = bin()
        .args(["warmup", "--config"])
        .arg(&bad)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let status = bin()
        .arg("unknown-command")
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let status = bin()
        .arg("--help")
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let out = bin()
        .args(["verify", "--quick", "--out"])
        .arg(dir.path().join("v"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.lines().last().unwrap().ends_with("checks passed"),
        "{text}"
    );
    assert!(!text.contains("FAIL"));
}
