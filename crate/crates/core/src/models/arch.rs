//! Architecture descriptions and their conv layer tables.

use alloc::string::String;
use alloc::vec::Vec;

use crate::efficiency::{Geometry, LayerGeometry};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Plain,
    BasicResidual,
}

/// One element of a plain network body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlainItem {
    /// 3x3 conv (pad 1) + BN + ReLU with the given width.
    Conv(usize),
    /// 2x2 max pooling.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub width: usize,
    pub blocks: usize,
}

/// A base network. Plain nets are a list of [`PlainItem`]s; residual nets
/// are a 3x3 stem followed by stages of basic blocks, where every stage
/// after the first halves the resolution in its first block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub kind: ArchKind,
    pub input_channels: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub plain: Vec<PlainItem>,
    pub stem_width: usize,
    pub stages: Vec<Stage>,
}

const VGG16: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];

fn plain_items(cfg: &[usize]) -> Vec<PlainItem> {
    cfg.iter()
        .map(|&w| if w == 0 { PlainItem::Pool } else { PlainItem::Conv(w) })
        .collect()
}

impl ArchitectureSpec {
    pub fn plain(name: &str, items: Vec<PlainItem>, num_classes: usize, resolution: usize) -> Self {
        ArchitectureSpec {
            name: name.into(),
            kind: ArchKind::Plain,
            input_channels: 3,
            resolution,
            num_classes,
            plain: items,
            stem_width: 0,
            stages: Vec::new(),
        }
    }

    pub fn residual(name: &str, stem_width: usize, stages: Vec<Stage>, num_classes: usize, resolution: usize) -> Self {
        ArchitectureSpec {
            name: name.into(),
            kind: ArchKind::BasicResidual,
            input_channels: 3,
            resolution,
            num_classes,
            plain: Vec::new(),
            stem_width,
            stages,
        }
    }

    /// 13-conv VGG16 for 32x32 inputs.
    pub fn vgg16(num_classes: usize) -> Self {
        Self::plain("vgg16", plain_items(&VGG16), num_classes, 32)
    }

    /// Six-conv VGG-style net.
    pub fn vgg_small(num_classes: usize) -> Self {
        Self::plain("vgg-small", plain_items(&[32, 32, 0, 64, 64, 0, 128, 128, 0]), num_classes, 32)
    }

    /// Two convs with a pool in between.
    pub fn toy(num_classes: usize, resolution: usize) -> Self {
        Self::plain("toy", plain_items(&[8, 0, 16]), num_classes, resolution)
    }

    /// Basic-block ResNet of depth `6n + 2` with widths 16/32/64.
    pub fn resnet(n: usize, num_classes: usize) -> Self {
        let stages = [16, 32, 64].iter().map(|&width| Stage { width, blocks: n }).collect();
        Self::residual(&alloc::format!("resnet{}", 6 * n + 2), 16, stages, num_classes, 32)
    }

    /// Looks up a named architecture: `toy`, `vgg-small`, `vgg16`, or
    /// `resnet<6n+2>`.
    pub fn by_name(name: &str, num_classes: usize, resolution: usize) -> Result<Self> {
        let mut spec = match name {
            "toy" => Self::toy(num_classes, resolution),
            "vgg-small" | "vgg_small" => Self::vgg_small(num_classes),
            "vgg16" => Self::vgg16(num_classes),
            _ => {
                let depth: usize = name
                    .strip_prefix("resnet")
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(|| invalid(alloc::format!("unknown architecture {name:?}")))?;
                if depth < 8 || (depth - 2) % 6 != 0 {
                    return Err(invalid(alloc::format!("resnet depth {depth} is not 6n+2")));
                }
                Self::resnet((depth - 2) / 6, num_classes)
            }
        };
        spec.resolution = resolution;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.input_channels == 0 || self.resolution == 0 {
            return Err(invalid("architecture: zero classes, channels or resolution"));
        }
        match self.kind {
            ArchKind::Plain => {
                let mut size = self.resolution;
                let mut convs = 0;
                for item in &self.plain {
                    match *item {
                        PlainItem::Conv(0) => return Err(invalid("architecture: zero-width conv")),
                        PlainItem::Conv(_) => convs += 1,
                        PlainItem::Pool if size < 2 => return Err(invalid("architecture: pooling below 1x1")),
                        PlainItem::Pool => size /= 2,
                    }
                }
                if convs == 0 {
                    return Err(invalid("architecture: plain net without convs"));
                }
            }
            ArchKind::BasicResidual => {
                if self.stem_width == 0 || self.stages.is_empty() {
                    return Err(invalid("architecture: residual net needs a stem and stages"));
                }
                if self.stages.iter().any(|s| s.width == 0 || s.blocks == 0) {
                    return Err(invalid("architecture: empty stage"));
                }
                if self.resolution >> (self.stages.len() - 1) == 0 {
                    return Err(invalid("architecture: too many downsampling stages"));
                }
            }
        }
        Ok(())
    }

    /// Conv layer table in forward order.
    pub fn layers(&self) -> Result<Vec<ConvLayer>> {
        self.validate()?;
        let mut out = Vec::new();
        match self.kind {
            ArchKind::Plain => {
                let mut size = self.resolution;
                let mut prev: Option<usize> = None;
                let mut channels = self.input_channels;
                let mut pooled = false;
                for item in &self.plain {
                    match *item {
                        PlainItem::Pool => {
                            size /= 2;
                            pooled = true;
                        }
                        PlainItem::Conv(w) => {
                            out.push(ConvLayer {
                                role: LayerRole::Plain,
                                source: prev,
                                in_channels: channels,
                                out_channels: w,
                                kernel: 3,
                                stride: 1,
                                padding: 1,
                                in_size: size,
                                out_size: size,
                                downsample: pooled,
                            });
                            pooled = false;
                            prev = Some(out.len() - 1);
                            channels = w;
                        }
                    }
                }
            }
            ArchKind::BasicResidual => {
                let mut size = self.resolution;
                out.push(ConvLayer {
                    role: LayerRole::Stem,
                    source: None,
                    in_channels: self.input_channels,
                    out_channels: self.stem_width,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    in_size: size,
                    out_size: size,
                    downsample: false,
                });
                let mut block_in = 0;
                let mut channels = self.stem_width;
                for (si, stage) in self.stages.iter().enumerate() {
                    for b in 0..stage.blocks {
                        let stride = if si > 0 && b == 0 { 2 } else { 1 };
                        let out_size = (size - 1) / stride + 1;
                        let first = out.len();
                        out.push(ConvLayer {
                            role: LayerRole::BlockFirst,
                            source: Some(block_in),
                            in_channels: channels,
                            out_channels: stage.width,
                            kernel: 3,
                            stride,
                            padding: 1,
                            in_size: size,
                            out_size,
                            downsample: stride > 1,
                        });
                        if stride > 1 || channels != stage.width {
                            out.push(ConvLayer {
                                role: LayerRole::Projection,
                                source: Some(block_in),
                                in_channels: channels,
                                out_channels: stage.width,
                                kernel: 1,
                                stride,
                                padding: 0,
                                in_size: size,
                                out_size,
                                downsample: stride > 1,
                            });
                        }
                        out.push(ConvLayer {
                            role: LayerRole::BlockLast,
                            source: Some(first),
                            in_channels: stage.width,
                            out_channels: stage.width,
                            kernel: 3,
                            stride: 1,
                            padding: 1,
                            in_size: out_size,
                            out_size,
                            downsample: false,
                        });
                        block_in = out.len() - 1;
                        channels = stage.width;
                        size = out_size;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Encoding geometry derived from [`Self::layers`].
    pub fn geometry(&self) -> Result<Geometry> {
        let layers = self.layers()?;
        let last = layers.len() - 1;
        Ok(Geometry {
            input_channels: self.input_channels,
            layers: layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerGeometry {
                    out_h: l.out_size,
                    out_w: l.out_size,
                    kernel_h: l.kernel,
                    kernel_w: l.kernel,
                    downsample: l.downsample,
                    max_width: l.out_channels,
                    source: l.source,
                    gated: l.gateable(i == last),
                })
                .collect(),
        })
    }

    /// Conv layers per building block (residual) or per conv (plain).
    pub fn blocks(&self) -> Result<Vec<Vec<usize>>> {
        let layers = self.layers()?;
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            match l.role {
                LayerRole::BlockFirst => blocks.push(alloc::vec![i]),
                LayerRole::Projection | LayerRole::BlockLast => {
                    blocks.last_mut().ok_or_else(|| invalid("architecture: block without a first layer"))?.push(i)
                }
                LayerRole::Stem | LayerRole::Plain => blocks.push(alloc::vec![i]),
            }
        }
        Ok(blocks)
    }

    /// Weight layers counted by the usual depth convention: convs on the
    /// main path plus the classifier.
    pub fn depth(&self) -> Result<usize> {
        Ok(self.layers()?.iter().filter(|l| l.role != LayerRole::Projection).count() + 1)
    }

    pub fn num_layers(&self) -> Result<usize> {
        Ok(self.layers()?.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Stem,
    Plain,
    BlockFirst,
    BlockLast,
    /// 1x1 strided shortcut conv.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub role: LayerRole,
    pub source: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_size: usize,
    pub out_size: usize,
    pub downsample: bool,
}

impl ConvLayer {
    /// Block-final, stem and projection convs feed shortcuts and keep full
    /// width; so does the last conv of a plain net.
    pub fn gateable(&self, is_last: bool) -> bool {
        match self.role {
            LayerRole::BlockFirst => true,
            LayerRole::Plain => !is_last,
            _ => false,
        }
    }
}
