//! Layer connectivity of a prunable network.
//!
//! Each layer records which layer produces its input channels, so removing a
//! filter can be traced to the input channels it feeds. Shortcut convolutions
//! share the residual channel space with the second convolution of their block,
//! which is expressed by tying their output mask to that convolution.

use crate::error::{Error, Result};
use crate::objective::LayerSpec;
use crate::pruner::BinaryMask;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerRole {
    Conv,
    ShortcutConv,
    Fc,
}

/// Where a layer's output keep-set comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    /// Index into the list of prunable layers.
    Prunable(usize),
    /// Same keep-set as another layer (by layer id).
    Tied(usize),
    /// Never pruned.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphLayer {
    pub name: String,
    pub role: LayerRole,
    pub spec: LayerSpec,
    /// Producer of this layer's input channels; `None` for the network input.
    pub input: Option<usize>,
    pub mask: MaskSource,
}

/// A basic residual block, by layer id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub stage: usize,
    pub index: usize,
    pub first: usize,
    pub second: usize,
    pub shortcut: Option<usize>,
    /// Layer whose output is the block input.
    pub input: usize,
}

/// Shape hyper-parameters of a CIFAR-style ResNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetShape {
    pub depth: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub image_size: usize,
    pub in_channels: usize,
}

impl ResNetShape {
    /// The standard 32×32 RGB layout with widths 16/32/64.
    pub fn cifar(depth: usize, num_classes: usize) -> Self {
        Self {
            depth,
            num_classes,
            base_width: 16,
            image_size: 32,
            in_channels: 3,
        }
    }

    /// Blocks per stage, `(depth - 2) / 6`.
    pub fn blocks_per_stage(&self) -> Result<usize> {
        if self.depth < 8 || !(self.depth - 2).is_multiple_of(6) {
            return Err(Error::Config(format!(
                "ResNet depth must be 6n+2 with n >= 1, got {}",
                self.depth
            )));
        }
        Ok((self.depth - 2) / 6)
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks_per_stage()?;
        if self.num_classes == 0 || self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "ResNet widths and class count must be >= 1".into(),
            ));
        }
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchGraph {
    pub name: String,
    pub input_channels: usize,
    pub layers: Vec<GraphLayer>,
    pub blocks: Vec<BlockRef>,
    /// Layer ids of prunable convolutions; position = pruner index.
    pub prunable: Vec<usize>,
}

impl ArchGraph {
    /// Plain chain of `1 × 1`-spatial layers, every layer prunable. Each entry
    /// is `(filters, kernel)`.
    pub fn chain(
        name: &str,
        input_channels: usize,
        layers: &[(usize, usize)],
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers.len());
        let mut c = input_channels;
        for (i, &(f, k)) in layers.iter().enumerate() {
            out.push(GraphLayer {
                name: format!("layer{i}"),
                role: LayerRole::Conv,
                spec: LayerSpec::new(c, f, k, height, width),
                input: i.checked_sub(1),
                mask: MaskSource::Prunable(i),
            });
            c = f;
        }
        let g = Self {
            name: name.into(),
            input_channels,
            layers: out,
            blocks: Vec::new(),
            prunable: (0..layers.len()).collect(),
        };
        g.validate()?;
        Ok(g)
    }

    /// Three-stage basic-block ResNet: stem, `3n` blocks, classifier. Stage
    /// transitions halve the spatial size, double the width and use a 1×1
    /// strided projection shortcut.
    pub fn resnet(shape: &ResNetShape) -> Result<Self> {
        shape.validate()?;
        let n = shape.blocks_per_stage()?;
        let mut layers = Vec::new();
        let mut blocks = Vec::new();
        let mut prunable = Vec::new();
        let mut push = |layers: &mut Vec<GraphLayer>, l: GraphLayer, own: bool| -> usize {
            let id = layers.len();
            let mut l = l;
            if own {
                l.mask = MaskSource::Prunable(prunable.len());
                prunable.push(id);
            }
            layers.push(l);
            id
        };

        let mut size = shape.image_size;
        let mut width = shape.base_width;
        let stem = push(
            &mut layers,
            GraphLayer {
                name: "stem".into(),
                role: LayerRole::Conv,
                spec: LayerSpec::new(shape.in_channels, width, 3, size, size),
                input: None,
                mask: MaskSource::Full,
            },
            true,
        );
        let mut prev = stem;
        for stage in 0..3 {
            let stage_width = shape.base_width << stage;
            for index in 0..n {
                let stride = if stage > 0 && index == 0 { 2 } else { 1 };
                let out_size = size / stride;
                let first = push(
                    &mut layers,
                    GraphLayer {
                        name: format!("s{stage}.b{index}.conv1"),
                        role: LayerRole::Conv,
                        spec: LayerSpec::new(width, stage_width, 3, size, size).with_stride(stride),
                        input: Some(prev),
                        mask: MaskSource::Full,
                    },
                    true,
                );
                let second = push(
                    &mut layers,
                    GraphLayer {
                        name: format!("s{stage}.b{index}.conv2"),
                        role: LayerRole::Conv,
                        spec: LayerSpec::new(stage_width, stage_width, 3, out_size, out_size),
                        input: Some(first),
                        mask: MaskSource::Full,
                    },
                    true,
                );
                let shortcut = (stride != 1 || width != stage_width).then(|| {
                    push(
                        &mut layers,
                        GraphLayer {
                            name: format!("s{stage}.b{index}.shortcut"),
                            role: LayerRole::ShortcutConv,
                            spec: LayerSpec::new(width, stage_width, 1, size, size)
                                .with_stride(stride),
                            input: Some(prev),
                            mask: MaskSource::Tied(second),
                        },
                        false,
                    )
                });
                blocks.push(BlockRef {
                    stage,
                    index,
                    first,
                    second,
                    shortcut,
                    input: prev,
                });
                prev = second;
                size = out_size;
                width = stage_width;
            }
        }
        push(
            &mut layers,
            GraphLayer {
                name: "fc".into(),
                role: LayerRole::Fc,
                spec: LayerSpec::new(width, shape.num_classes, 1, 1, 1),
                input: Some(prev),
                mask: MaskSource::Full,
            },
            false,
        );
        let g = Self {
            name: format!("resnet{}", shape.depth),
            input_channels: shape.in_channels,
            layers,
            blocks,
            prunable,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("graph has no layers".into()));
        }
        for (id, l) in self.layers.iter().enumerate() {
            l.spec.validate()?;
            match l.input {
                None => {
                    if l.spec.in_channels != self.input_channels {
                        return Err(Error::Config(format!(
                            "layer {} reads the network input ({} channels) but expects {}",
                            l.name, self.input_channels, l.spec.in_channels
                        )));
                    }
                }
                Some(src) => {
                    let p = self.layers.get(src).filter(|_| src < id).ok_or_else(|| {
                        Error::Config(format!(
                            "layer {} reads from invalid producer {src}",
                            l.name
                        ))
                    })?;
                    if p.spec.filters != l.spec.in_channels {
                        return Err(Error::Config(format!(
                            "layer {} expects {} input channels but producer {} has {} filters",
                            l.name, l.spec.in_channels, p.name, p.spec.filters
                        )));
                    }
                    if l.role != LayerRole::Fc
                        && (p.spec.out_height() != l.spec.in_height
                            || p.spec.out_width() != l.spec.in_width)
                    {
                        return Err(Error::Config(format!(
                            "layer {} expects {}x{} input but producer {} emits {}x{}",
                            l.name,
                            l.spec.in_height,
                            l.spec.in_width,
                            p.name,
                            p.spec.out_height(),
                            p.spec.out_width()
                        )));
                    }
                }
            }
            match l.mask {
                MaskSource::Prunable(k) => {
                    if self.prunable.get(k) != Some(&id) || l.role == LayerRole::Fc {
                        return Err(Error::Config(format!(
                            "layer {} claims pruner slot {k} inconsistently",
                            l.name
                        )));
                    }
                }
                MaskSource::Tied(t) => {
                    let ok = t < id && self.layers[t].spec.filters == l.spec.filters;
                    if !ok {
                        return Err(Error::Config(format!(
                            "layer {} is tied to incompatible layer {t}",
                            l.name
                        )));
                    }
                }
                MaskSource::Full => {}
            }
        }
        for (k, &id) in self.prunable.iter().enumerate() {
            if self.layers.get(id).map(|l| l.mask) != Some(MaskSource::Prunable(k)) {
                return Err(Error::Config(format!(
                    "prunable slot {k} points at non-prunable layer {id}"
                )));
            }
        }
        for b in &self.blocks {
            let n = self.layers.len();
            if b.first >= n || b.second >= n || b.input >= n || b.shortcut.is_some_and(|s| s >= n) {
                return Err(Error::Config(format!(
                    "block s{}.b{} references unknown layers",
                    b.stage, b.index
                )));
            }
            if self.layers[b.second].input != Some(b.first)
                || self.layers[b.first].input != Some(b.input)
            {
                return Err(Error::Config(format!(
                    "block s{}.b{} is not wired first -> second",
                    b.stage, b.index
                )));
            }
        }
        Ok(())
    }

    pub fn check_masks(&self, masks: &[BinaryMask]) -> Result<()> {
        if masks.len() != self.prunable.len() {
            return Err(Error::Config(format!(
                "{} masks for {} prunable layers",
                masks.len(),
                self.prunable.len()
            )));
        }
        for (m, &id) in masks.iter().zip(&self.prunable) {
            let l = &self.layers[id];
            if m.len() != l.spec.filters {
                return Err(Error::Config(format!(
                    "mask for {} has {} bits, layer has {} filters",
                    l.name,
                    m.len(),
                    l.spec.filters
                )));
            }
        }
        Ok(())
    }

    /// Surviving output channels of every layer (by layer id).
    pub fn kept_outputs(&self, masks: &[BinaryMask]) -> Vec<Vec<bool>> {
        let mut kept: Vec<Vec<bool>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let bits = match l.mask {
                MaskSource::Prunable(k) => masks[k].bits.clone(),
                MaskSource::Tied(t) => kept[t].clone(),
                MaskSource::Full => vec![true; l.spec.filters],
            };
            kept.push(bits);
        }
        kept
    }

    pub fn prunable_specs(&self) -> Vec<LayerSpec> {
        self.prunable
            .iter()
            .map(|&id| self.layers[id].spec)
            .collect()
    }

    pub fn prunable_names(&self) -> Vec<String> {
        self.prunable
            .iter()
            .map(|&id| self.layers[id].name.clone())
            .collect()
    }

    pub fn total_prunable_filters(&self) -> usize {
        self.prunable
            .iter()
            .map(|&id| self.layers[id].spec.filters)
            .sum()
    }

    /// Pruner index of a layer, if it is prunable.
    pub fn prunable_slot(&self, layer_id: usize) -> Option<usize> {
        match self.layers.get(layer_id)?.mask {
            MaskSource::Prunable(k) => Some(k),
            _ => None,
        }
    }

    pub fn all_ones_masks(&self) -> Vec<BinaryMask> {
        self.prunable_specs()
            .iter()
            .map(|s| BinaryMask::ones(s.filters))
            .collect()
    }
}
