//! Physical removal of pruned filters.

use crate::error::{Error, Result};
use crate::graph::{ArchGraph, MaskSource};
use crate::nn::Tensor;
use crate::objective::LayerSpec;
use crate::pruner::BinaryMask;
use crate::zoo::{Block, ConvBn, ResNet, Residual, Shortcut};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryPlan {
    /// Sorted surviving filter indices, one list per prunable layer.
    pub keep: Vec<Vec<usize>>,
    /// Indices (into the graph's block list) of blocks whose first conv keeps
    /// nothing.
    pub eliminated: Vec<usize>,
    /// Every graph layer's geometry after removal.
    pub specs: Vec<LayerSpec>,
}

impl SurgeryPlan {
    pub fn validate(&self, graph: &ArchGraph) -> Result<()> {
        if self.keep.len() != graph.prunable.len() || self.specs.len() != graph.layers.len() {
            return Err(Error::Config(
                "surgery plan does not match the graph".into(),
            ));
        }
        for (k, &id) in self.keep.iter().zip(&graph.prunable) {
            let f = graph.layers[id].spec.filters;
            if k.windows(2).any(|w| w[0] >= w[1]) || k.last().is_some_and(|&i| i >= f) {
                return Err(Error::Config(format!(
                    "keep-list of {} is not strictly increasing within 0..{f}",
                    graph.layers[id].name
                )));
            }
        }
        for &b in &self.eliminated {
            let first = graph.blocks.get(b).map(|r| r.first);
            let slot = first.and_then(|id| graph.prunable_slot(id));
            if !slot.is_some_and(|s| self.keep[s].is_empty()) {
                return Err(Error::Config(format!(
                    "block {b} is eliminated but its first conv keeps filters"
                )));
            }
        }
        Ok(())
    }
}

/// Keep-lists, eliminated blocks and reduced layer shapes for `masks`.
pub fn plan_surgery(graph: &ArchGraph, masks: &[BinaryMask]) -> Result<SurgeryPlan> {
    graph.validate()?;
    graph.check_masks(masks)?;
    let keep: Vec<Vec<usize>> = masks.iter().map(BinaryMask::keep_indices).collect();
    let kept = graph.kept_outputs(masks);
    let count = |bits: &[bool]| bits.iter().filter(|&&b| b).count();
    let specs = graph
        .layers
        .iter()
        .enumerate()
        .map(|(id, l)| {
            let mut s = l.spec;
            s.filters = count(&kept[id]);
            if let Some(src) = l.input {
                s.in_channels = count(&kept[src]);
            }
            s
        })
        .collect();
    let eliminated = graph
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| match graph.layers[b.first].mask {
            MaskSource::Prunable(k) => keep[k].is_empty(),
            _ => false,
        })
        .map(|(i, _)| i)
        .collect();
    let plan = SurgeryPlan {
        keep,
        eliminated,
        specs,
    };
    plan.validate(graph)?;
    Ok(plan)
}

fn slice_cb(cb: &ConvBn, outs: &[usize], ins: &[usize]) -> ConvBn {
    ConvBn {
        conv: cb.conv.slice(outs, ins),
        bn: cb.bn.slice(outs),
    }
}

fn check_dense(model: &ResNet, graph: &ArchGraph) -> Result<()> {
    if graph.prunable.len() != model.num_slots() || graph.blocks.len() != model.blocks.len() {
        return Err(Error::Config(
            "model and graph disagree on the block structure".into(),
        ));
    }
    for (slot, &id) in graph.prunable.iter().enumerate() {
        let spec = graph.layers[id].spec;
        let ok = model.conv_for_slot(slot).is_some_and(|c| {
            (c.out_ch, c.in_ch, c.kernel, c.stride)
                == (spec.filters, spec.in_channels, spec.kernel, spec.stride)
        });
        if !ok {
            return Err(Error::Config(format!(
                "layer {} of the model does not match the graph; extract from the unpruned model",
                graph.layers[id].name
            )));
        }
    }
    for (i, b) in model.blocks.iter().enumerate() {
        let dense_identity = match &b.shortcut {
            Shortcut::Identity { map } => map.iter().enumerate().all(|(j, m)| *m == Some(j)),
            Shortcut::Projection(_) => true,
        };
        if !dense_identity
            || graph.blocks[i].shortcut.is_some() == matches!(b.shortcut, Shortcut::Identity { .. })
        {
            return Err(Error::Config(format!(
                "block {i} shortcut does not match the graph"
            )));
        }
    }
    Ok(())
}

/// Slices the dense `model` down to the surviving filters. The result carries
/// no gates and matches the binary-masked original in evaluation mode.
pub fn extract(model: &ResNet, graph: &ArchGraph, plan: &SurgeryPlan) -> Result<ResNet> {
    plan.validate(graph)?;
    check_dense(model, graph)?;
    let all_inputs: Vec<usize> = (0..model.shape.in_channels).collect();
    let stem_keep = &plan.keep[0];
    let stem = slice_cb(&model.stem, stem_keep, &all_inputs);
    let mut prev: Vec<usize> = stem_keep.clone();
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (b, block) in model.blocks.iter().enumerate() {
        let (k1, k2) = (&plan.keep[1 + 2 * b], &plan.keep[2 + 2 * b]);
        let Residual::Active { conv1, conv2 } = &block.residual else {
            return Err(Error::Config(format!("block {b} is already eliminated")));
        };
        let residual = if k1.is_empty() {
            Residual::Eliminated {
                bn: conv2.bn.slice(k2),
            }
        } else {
            Residual::Active {
                conv1: slice_cb(conv1, k1, &prev),
                conv2: slice_cb(conv2, k2, k1),
            }
        };
        let shortcut = match &block.shortcut {
            Shortcut::Identity { .. } => Shortcut::Identity {
                map: k2.iter().map(|c| prev.binary_search(c).ok()).collect(),
            },
            Shortcut::Projection(p) => Shortcut::Projection(slice_cb(p, k2, &prev)),
        };
        blocks.push(Block {
            in_channels: prev.len(),
            out_channels: k2.len(),
            stride: block.stride,
            residual,
            shortcut,
        });
        prev = k2.clone();
    }
    Ok(ResNet {
        shape: model.shape,
        stem,
        blocks,
        fc: model.fc.slice_inputs(&prev),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub trials: usize,
    pub max_deviation: f64,
    pub worst_trial: usize,
    pub tol: f64,
}

/// Random Gaussian inputs shaped for `model`.
pub fn random_inputs(model: &ResNet, n: usize, seed: u64) -> Tensor {
    let s = &model.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * s.in_channels * s.image_size * s.image_size;
    Tensor::from_vec(
        n,
        s.in_channels,
        s.image_size,
        s.image_size,
        (0..len)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect(),
    )
}

/// Compares evaluation-mode logits of the masked original and the extracted
/// model on `trials` random inputs.
pub fn certify_equivalence(
    original: &ResNet,
    masks: &[BinaryMask],
    extracted: &ResNet,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<CertificationReport> {
    if original.shape != extracted.shape {
        return Err(Error::Config("models take different inputs".into()));
    }
    let gates: Vec<Vec<f32>> = masks.iter().map(BinaryMask::as_f32).collect();
    let classes = original.shape.num_classes;
    let (mut max_dev, mut worst) = (0.0f64, 0usize);
    const CHUNK: usize = 25;
    let mut done = 0;
    while done < trials {
        let n = CHUNK.min(trials - done);
        let x = random_inputs(original, n, seed.wrapping_add(done as u64));
        let a = original.forward_eval(&x, Some(&gates))?;
        let b = extracted.forward_eval(&x, None)?;
        for i in 0..n {
            let dev = a[i * classes..(i + 1) * classes]
                .iter()
                .zip(&b[i * classes..(i + 1) * classes])
                .map(|(p, q)| (*p as f64 - *q as f64).abs())
                .fold(0.0, f64::max);
            if dev > max_dev || dev.is_nan() {
                max_dev = if dev.is_nan() { f64::INFINITY } else { dev };
                worst = done + i;
            }
        }
        done += n;
    }
    if max_dev > tol {
        return Err(Error::Certification {
            max_deviation: max_dev,
            tol,
            worst_trial: worst,
        });
    }
    Ok(CertificationReport {
        trials,
        max_deviation: max_dev,
        worst_trial: worst,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_mask_reduces_downstream_inputs() {
        let g = ArchGraph::chain("toy", 3, &[(4, 3), (5, 3)], 8, 8).unwrap();
        let masks = vec![BinaryMask::from_bits(&[1, 0, 1, 0]), BinaryMask::ones(5)];
        let plan = plan_surgery(&g, &masks).unwrap();
        assert_eq!(plan.keep[0], vec![0, 2]);
        assert_eq!(plan.specs[1].in_channels, 2);
        assert_eq!(plan.specs[0].filters, 2);
        assert!(plan.eliminated.is_empty());
    }

    #[test]
    fn mask_count_mismatch_is_config_error() {
        let g = ArchGraph::chain("toy", 3, &[(4, 3)], 8, 8).unwrap();
        assert!(matches!(plan_surgery(&g, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_plan_is_rejected() {
        let g = ArchGraph::chain("toy", 3, &[(4, 3)], 8, 8).unwrap();
        let mut plan = plan_surgery(&g, &[BinaryMask::ones(4)]).unwrap();
        plan.keep[0] = vec![2, 1];
        assert!(plan.validate(&g).is_err());
        plan.keep[0] = vec![1, 4];
        assert!(plan.validate(&g).is_err());
    }
}
