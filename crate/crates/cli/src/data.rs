//! Dataset ingestion: the CIFAR-10 binary release or the synthetic stand-in,
//! subset draw and per-channel normalization.

use crate::config::{DataConfig, DatasetKind};
use filterprune::data::{subset_indices, synthetic, DataSplit, Dataset};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CIFAR10_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
/// Overrides `data.root` when set.
pub const DATA_ROOT_ENV: &str = "FILTERPRUNE_DATA_ROOT";
pub const CIFAR10_DIR: &str = "cifar-10-batches-bin";

const RECORD: usize = 1 + 3 * 32 * 32;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Error)]
pub enum DataError {
    #[error(
        "CIFAR-10 is not present under {} (expected {CIFAR10_DIR}/); set data.download = true, \
         or point data.root or {DATA_ROOT_ENV} at an extracted copy",
        .root.display()
    )]
    FetchRequired { root: PathBuf },
    #[error("downloading {url} failed: {message}")]
    Download { url: String, message: String },
    #[error("{}: {message}", .path.display())]
    Corrupt { path: PathBuf, message: String },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] filterprune::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Effective dataset root: the environment override, else `data.root`.
pub fn data_root(cfg: &DataConfig) -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.root.clone())
}

/// Whether every CIFAR-10 batch file exists under `root`.
pub fn cifar10_present(root: &Path) -> bool {
    let dir = root.join(CIFAR10_DIR);
    TRAIN_FILES
        .iter()
        .chain([&TEST_FILE])
        .all(|f| dir.join(f).is_file())
}

/// Decodes one `label, 3072 pixel bytes` batch file into `[0, 1]` floats.
pub fn read_cifar_batch(path: &Path) -> Result<(Vec<f32>, Vec<u8>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(DataError::Corrupt {
            path: path.into(),
            message: format!(
                "{} bytes is not a whole number of {RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD;
    let mut images = Vec::with_capacity(n * (RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD) {
        if rec[0] > 9 {
            return Err(DataError::Corrupt {
                path: path.into(),
                message: format!("label {} outside 0..10", rec[0]),
            });
        }
        labels.push(rec[0]);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

fn read_split(dir: &Path, files: &[&str]) -> Result<Dataset, DataError> {
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for f in files {
        let (i, l) = read_cifar_batch(&dir.join(f))?;
        images.extend(i);
        labels.extend(l);
    }
    Ok(Dataset::new(3, 32, 32, 10, images, labels)?)
}

/// Full train (50000) and test (10000) splits of an extracted release.
pub fn load_cifar10(root: &Path) -> Result<(Dataset, Dataset), DataError> {
    if !cifar10_present(root) {
        return Err(DataError::FetchRequired { root: root.into() });
    }
    let dir = root.join(CIFAR10_DIR);
    Ok((
        read_split(&dir, &TRAIN_FILES)?,
        read_split(&dir, &[TEST_FILE])?,
    ))
}

/// Downloads and unpacks the binary release into `root`. The archive is
/// extracted into a private staging directory first and renamed into place,
/// so concurrent readers only ever see a complete copy.
pub fn fetch_cifar10(root: &Path) -> Result<(), DataError> {
    if cifar10_present(root) {
        return Ok(());
    }
    fs::create_dir_all(root).map_err(io_err(root))?;
    let download = |message: String| DataError::Download {
        url: CIFAR10_URL.into(),
        message,
    };
    log::info!("downloading {CIFAR10_URL}");
    let response = ureq::get(CIFAR10_URL)
        .call()
        .map_err(|e| download(e.to_string()))?;
    let mut body = Vec::new();
    response
        .into_body()
        .into_reader()
        .read_to_end(&mut body)
        .map_err(|e| download(e.to_string()))?;
    let staging = root.join(format!(".fetch-{}", std::process::id()));
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;
    let unpacked = tar::Archive::new(flate2::read::GzDecoder::new(&body[..]))
        .unpack(&staging)
        .map_err(|e| download(format!("unpacking: {e}")));
    let target = root.join(CIFAR10_DIR);
    let moved = unpacked.and_then(|()| match fs::rename(staging.join(CIFAR10_DIR), &target) {
        Ok(()) => Ok(()),
        // Another process finished first.
        Err(_) if cifar10_present(root) => Ok(()),
        Err(e) => Err(DataError::Io {
            path: target.clone(),
            source: e,
        }),
    });
    let _ = fs::remove_dir_all(&staging);
    moved?;
    if !cifar10_present(root) {
        return Err(download(
            "archive did not contain the expected batch files".into(),
        ));
    }
    Ok(())
}

/// Train/eval splits for a run. Both splits are cut to `subset` with the
/// configured seed, then normalized with the statistics of the training
/// subset. Augmentation is attached for training only.
pub fn ingest(cfg: &DataConfig, num_classes: usize) -> Result<DataSplit, DataError> {
    let (train, eval) = match cfg.dataset {
        DatasetKind::Cifar10 => {
            let root = data_root(cfg);
            if !cifar10_present(&root) {
                if !cfg.download {
                    return Err(DataError::FetchRequired { root });
                }
                fetch_cifar10(&root)?;
            }
            load_cifar10(&root)?
        }
        DatasetKind::Synthetic => {
            let s = &cfg.synthetic;
            // One draw so both splits share the class templates.
            let all = synthetic(
                s.train + s.eval,
                num_classes,
                3,
                s.image_size,
                s.noise,
                cfg.seed,
            )?;
            let train = all.subset(&(0..s.train).collect::<Vec<_>>());
            let eval = all.subset(&(s.train..s.train + s.eval).collect::<Vec<_>>());
            (train, eval)
        }
    };
    let mut train = train.subset(&subset_indices(train.len(), cfg.subset, cfg.seed)?);
    let mut eval = eval.subset(&subset_indices(
        eval.len(),
        cfg.subset,
        cfg.seed.wrapping_add(1),
    )?);
    let (mean, std) = train.channel_stats();
    let std: Vec<f64> = std.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect();
    train.normalize(&mean, &std)?;
    eval.normalize(&mean, &std)?;
    Ok(DataSplit {
        train,
        eval,
        augment: cfg.augment,
    })
}
