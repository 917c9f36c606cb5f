//! Checkpoint directories.
//!
//! ```text
//! <dir>/weights.safetensors   network tensors, f32, names from ResNet::named_tensors
//! <dir>/pruners.safetensors   projections, f64, `pruner.<layer>` of shape fan_in x filters
//! <dir>/optim.safetensors     optimizer slots of the pruning stage (optional)
//! <dir>/meta.json             everything else
//! ```
//!
//! Saving goes through a sibling staging directory that is renamed over the
//! old one, so a crash never leaves a half-written checkpoint behind.

use crate::config::RunConfig;
use filterprune::graph::ArchGraph;
use filterprune::nn::OptimizerState;
use filterprune::pruner::{BinaryMask, PrunerLayer, ScoreVector};
use filterprune::schedule::{current_scores, StageCursor};
use filterprune::zoo::{pruner_checksum, ModelDesc, ResNet};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const WEIGHTS: &str = "weights.safetensors";
const PRUNERS: &str = "pruners.safetensors";
const OPTIM: &str = "optim.safetensors";
const META: &str = "meta.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", .path.display())]
    Corrupt { path: PathBuf, message: String },
}

/// Pipeline stage that produced a checkpoint, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Prune,
    Extract,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Warmup, Stage::Prune, Stage::Extract, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Prune => "prune",
            Stage::Extract => "extract",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunerInfo {
    pub layer_id: String,
    pub filters: usize,
    pub fan_in: usize,
    pub slope_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format: u32,
    pub stage: Stage,
    /// Architecture of the stored weights (compact after extraction).
    pub model: ModelDesc,
    /// Dense architecture the masks refer to.
    pub graph: ArchGraph,
    pub config: RunConfig,
    /// Next pruning-stage phase to run.
    pub cursor: StageCursor,
    pub pruners: Vec<PrunerInfo>,
    pub scores: Vec<ScoreVector>,
    pub masks: Vec<BinaryMask>,
    /// Data rows of metrics.csv written when this checkpoint was taken.
    pub metrics_rows: usize,
    /// Data rows of refinement.csv written when this checkpoint was taken.
    pub refinement_rows: usize,
    pub optimizer_steps: Option<(u64, u64)>,
    pub model_checksum: u64,
    pub pruner_checksum: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Meta,
    pub model: ResNet,
    pub pruners: Vec<PrunerLayer>,
    pub optimizers: Option<(OptimizerState<f32>, OptimizerState<f64>)>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.into(),
        source,
    }
}

fn corrupt(path: &Path, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt {
        path: path.into(),
        message: message.into(),
    }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn serialize(
    path: &Path,
    tensors: Vec<(String, Dtype, Vec<usize>, Vec<u8>)>,
) -> Result<Vec<u8>, CheckpointError> {
    let views = tensors
        .iter()
        .map(|(n, d, s, b)| {
            Ok((
                n.clone(),
                TensorView::new(*d, s.clone(), b).map_err(|e| corrupt(path, e.to_string()))?,
            ))
        })
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    safetensors::tensor::serialize(views, None).map_err(|e| corrupt(path, e.to_string()))
}

/// Tensors of one element type in a blob; others are skipped.
fn decode<T>(
    path: &Path,
    dtype: Dtype,
    from: fn([u8; 8]) -> T,
    width: usize,
) -> Result<HashMap<String, Vec<T>>, CheckpointError> {
    let bytes = fs::read(path).map_err(io(path))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(path, e.to_string()))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != dtype {
            continue;
        }
        let vals = view
            .data()
            .chunks_exact(width)
            .map(|c| {
                let mut b = [0u8; 8];
                b[..width].copy_from_slice(c);
                from(b)
            })
            .collect();
        out.insert(name, vals);
    }
    Ok(out)
}

fn read_f32(path: &Path) -> Result<HashMap<String, Vec<f32>>, CheckpointError> {
    decode(
        path,
        Dtype::F32,
        |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
        4,
    )
}

fn read_f64(path: &Path) -> Result<HashMap<String, Vec<f64>>, CheckpointError> {
    decode(path, Dtype::F64, f64::from_le_bytes, 8)
}

fn state_tensors<T>(
    prefix: &str,
    st: &OptimizerState<T>,
    dtype: Dtype,
    bytes: fn(&[T]) -> Vec<u8>,
) -> Vec<(String, Dtype, Vec<usize>, Vec<u8>)> {
    let mut out = Vec::new();
    for (slot, list) in [("first", &st.first), ("second", &st.second)] {
        for (i, v) in list.iter().enumerate() {
            out.push((
                format!("{prefix}.{slot}.{i:04}"),
                dtype,
                vec![v.len()],
                bytes(v),
            ));
        }
    }
    out
}

fn state_from<T>(map: &mut HashMap<String, Vec<T>>, prefix: &str, step: u64) -> OptimizerState<T> {
    let mut st = OptimizerState {
        step,
        first: Vec::new(),
        second: Vec::new(),
    };
    for (slot, list) in [("first", &mut st.first), ("second", &mut st.second)] {
        while let Some(v) = map.remove(&format!("{prefix}.{slot}.{:04}", list.len())) {
            list.push(v);
        }
    }
    st
}

impl Checkpoint {
    /// Writes `dir`, replacing any previous checkpoint there.
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        let name = dir
            .file_name()
            .ok_or_else(|| corrupt(dir, "checkpoint path has no final component"))?;
        let parent = dir
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(io(parent))?;
        let staging = parent.join(format!(".{}.staging", name.to_string_lossy()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io(&staging))?;
        }
        fs::create_dir(&staging).map_err(io(&staging))?;
        for (file, bytes) in self.blobs(&staging)? {
            let p = staging.join(file);
            fs::write(&p, bytes).map_err(io(&p))?;
        }
        let old = parent.join(format!(".{}.old", name.to_string_lossy()));
        if dir.exists() {
            if old.exists() {
                fs::remove_dir_all(&old).map_err(io(&old))?;
            }
            fs::rename(dir, &old).map_err(io(dir))?;
        }
        fs::rename(&staging, dir).map_err(io(dir))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(io(&old))?;
        }
        Ok(())
    }

    /// File names and contents, exactly as [`Checkpoint::save`] writes them.
    pub fn blobs(&self, dir: &Path) -> Result<Vec<(&'static str, Vec<u8>)>, CheckpointError> {
        let weights = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, s, d)| (n, Dtype::F32, s, f32_bytes(d)))
            .collect();
        let pruners = self
            .pruners
            .iter()
            .map(|p| {
                (
                    format!("pruner.{}", p.layer_id),
                    Dtype::F64,
                    vec![p.fan_in, p.filters],
                    f64_bytes(&p.projection),
                )
            })
            .collect();
        let mut out = vec![
            (WEIGHTS, serialize(&dir.join(WEIGHTS), weights)?),
            (PRUNERS, serialize(&dir.join(PRUNERS), pruners)?),
        ];
        if let Some((w, s)) = &self.optimizers {
            let mut t = state_tensors("weights", w, Dtype::F32, f32_bytes);
            t.extend(state_tensors("scores", s, Dtype::F64, f64_bytes));
            out.push((OPTIM, serialize(&dir.join(OPTIM), t)?));
        }
        let meta = serde_json::to_vec_pretty(&self.meta)
            .map_err(|e| corrupt(&dir.join(META), e.to_string()))?;
        out.push((META, meta));
        Ok(out)
    }

    /// Reads `dir` and checks it against its own checksums; the stored score
    /// vectors must be reproduced bit for bit from weights and projections.
    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let meta_path = dir.join(META);
        let text = fs::read(&meta_path).map_err(io(&meta_path))?;
        let meta: Meta =
            serde_json::from_slice(&text).map_err(|e| corrupt(&meta_path, e.to_string()))?;
        if meta.format != FORMAT_VERSION {
            return Err(corrupt(
                &meta_path,
                format!("format {} is not {FORMAT_VERSION}", meta.format),
            ));
        }
        let weights_path = dir.join(WEIGHTS);
        let weights = read_f32(&weights_path)?;
        let mut model =
            ResNet::from_desc(&meta.model).map_err(|e| corrupt(&meta_path, e.to_string()))?;
        model
            .load_tensors(|n| weights.get(n).map(Vec::as_slice))
            .map_err(|e| corrupt(&weights_path, e.to_string()))?;
        if model.checksum() != meta.model_checksum {
            return Err(corrupt(
                &weights_path,
                "weights do not match the recorded checksum",
            ));
        }
        let pruner_path = dir.join(PRUNERS);
        let mut proj = read_f64(&pruner_path)?;
        let pruners = meta
            .pruners
            .iter()
            .map(|p| {
                let projection =
                    proj.remove(&format!("pruner.{}", p.layer_id))
                        .ok_or_else(|| {
                            corrupt(
                                &pruner_path,
                                format!("missing projection for {}", p.layer_id),
                            )
                        })?;
                PrunerLayer::zeros(p.layer_id.clone(), p.filters, p.fan_in, p.slope_a)
                    .and_then(|z| z.with_projection(projection))
                    .map_err(|e| corrupt(&pruner_path, e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if pruner_checksum(&pruners) != meta.pruner_checksum {
            return Err(corrupt(
                &pruner_path,
                "projections do not match the recorded checksum",
            ));
        }
        if !pruners.is_empty() {
            let scores = current_scores(&model, &pruners)
                .map_err(|e| corrupt(&pruner_path, e.to_string()))?;
            if scores != meta.scores {
                return Err(corrupt(
                    &meta_path,
                    "stored scores are not reproduced by the stored projections",
                ));
            }
        }
        let optimizers = match meta.optimizer_steps {
            None => None,
            Some((ws, ss)) => {
                let p = dir.join(OPTIM);
                let mut w = read_f32(&p)?;
                let mut s = read_f64(&p)?;
                Some((
                    state_from(&mut w, "weights", ws),
                    state_from(&mut s, "scores", ss),
                ))
            }
        };
        Ok(Self {
            meta,
            model,
            pruners,
            optimizers,
        })
    }
}

/// Metadata describing `model` and `pruners` at a pipeline position.
pub struct MetaParts<'a> {
    pub stage: Stage,
    pub graph: &'a ArchGraph,
    pub config: &'a RunConfig,
    pub cursor: StageCursor,
    pub scores: Vec<ScoreVector>,
    pub masks: Vec<BinaryMask>,
    pub metrics_rows: usize,
    pub refinement_rows: usize,
}

impl Checkpoint {
    pub fn assemble(
        parts: MetaParts<'_>,
        model: ResNet,
        pruners: Vec<PrunerLayer>,
        optimizers: Option<(OptimizerState<f32>, OptimizerState<f64>)>,
    ) -> Self {
        let meta = Meta {
            format: FORMAT_VERSION,
            stage: parts.stage,
            model: model.describe(),
            graph: parts.graph.clone(),
            config: parts.config.clone(),
            cursor: parts.cursor,
            pruners: pruners
                .iter()
                .map(|p| PrunerInfo {
                    layer_id: p.layer_id.clone(),
                    filters: p.filters,
                    fan_in: p.fan_in,
                    slope_a: p.slope_a,
                })
                .collect(),
            scores: parts.scores,
            masks: parts.masks,
            metrics_rows: parts.metrics_rows,
            refinement_rows: parts.refinement_rows,
            optimizer_steps: optimizers.as_ref().map(|(w, s)| (w.step, s.step)),
            model_checksum: model.checksum(),
            pruner_checksum: pruner_checksum(&pruners),
        };
        Self {
            meta,
            model,
            pruners,
            optimizers,
        }
    }
}

/// Default location of a stage's checkpoint inside a run directory.
pub fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join("checkpoints").join(stage.name())
}
