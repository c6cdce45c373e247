//! Convolutional backbones. Every variant has a full-resolution stem, one
//! stride-2 stage per configured width and a final 1×1 projection to the
//! embedding dimension, so a 64×64 input yields an 8×8 grid with three
//! stages.

use super::config::{Backbone, ModelConfig};
use super::layers::{BatchNorm, Conv, Ctx, SeparableConv};
use super::params::Initializer;
use crate::error::Result;
use crate::tensor::Var;

/// Pre-activation residual block. With `skip` unset the shortcut is the
/// identity, so zeroed convolutions make the block an exact identity map.
#[derive(Clone, Debug)]
pub(crate) struct ResidualBlock {
    pub bn1: BatchNorm,
    pub conv1: Conv,
    pub bn2: BatchNorm,
    pub conv2: Conv,
    /// 1×1 strided projection used when the block downsamples.
    pub skip: Option<Conv>,
}

impl ResidualBlock {
    pub fn new(init: &mut Initializer, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let skip = (stride != 1 || cin != cout).then(|| Conv::new(init, &format!("{name}.skip"), cin, cout, 1, stride, false));
        Self {
            bn1: BatchNorm::new(init, &format!("{name}.bn1"), cin),
            conv1: Conv::new(init, &format!("{name}.conv1"), cin, cout, 3, stride, false),
            bn2: BatchNorm::new(init, &format!("{name}.bn2"), cout),
            conv2: Conv::new(init, &format!("{name}.conv2"), cout, cout, 3, 1, false),
            skip,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.bn1.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let shortcut = match &self.skip {
            Some(proj) => proj.forward(ctx, h)?,
            None => x,
        };
        let y = self.conv1.forward(ctx, h)?;
        let y = self.bn2.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        let y = self.conv2.forward(ctx, y)?;
        ctx.tape.add(y, shortcut)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Block {
    Residual(ResidualBlock),
    /// conv → BN → ReLU
    Plain(Conv, BatchNorm),
    /// depthwise-separable conv → BN → ReLU
    Separable(SeparableConv, BatchNorm),
}

impl Block {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Block::Residual(b) => b.forward(ctx, x),
            Block::Plain(conv, bn) => {
                let y = conv.forward(ctx, x)?;
                let y = bn.forward(ctx, y)?;
                Ok(ctx.tape.relu(y))
            }
            Block::Separable(conv, bn) => {
                let y = conv.forward(ctx, x)?;
                let y = bn.forward(ctx, y)?;
                Ok(ctx.tape.relu(y))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BackboneNet {
    stem: Conv,
    /// Post-stem normalization for the plain and separable families; the
    /// residual family normalizes inside its pre-activation blocks.
    stem_bn: Option<BatchNorm>,
    pub blocks: Vec<Block>,
    final_bn: Option<BatchNorm>,
    proj: Conv,
}

/// Stage widths after compound width scaling (identity for other families).
pub(crate) fn stage_widths(cfg: &ModelConfig) -> Vec<usize> {
    match cfg.backbone {
        Backbone::Compound => cfg
            .widths
            .iter()
            .map(|&w| ((w as f64 * cfg.width_coefficient).round() as usize).max(1))
            .collect(),
        _ => cfg.widths.clone(),
    }
}

/// Blocks per stage after compound depth scaling.
pub(crate) fn stage_depth(cfg: &ModelConfig) -> usize {
    match cfg.backbone {
        Backbone::Compound => (cfg.blocks_per_stage as f64 * cfg.depth_coefficient).ceil() as usize,
        _ => cfg.blocks_per_stage,
    }
}

impl BackboneNet {
    pub fn new(init: &mut Initializer, cfg: &ModelConfig) -> Self {
        let widths = stage_widths(cfg);
        let depth = stage_depth(cfg);
        let cin = cfg.input_channels();
        let stem = Conv::new(init, "backbone.stem", cin, widths[0], 3, 1, false);
        let stem_bn = (cfg.backbone != Backbone::Residual).then(|| BatchNorm::new(init, "backbone.stem_bn", widths[0]));
        let mut blocks = Vec::new();
        let mut prev = widths[0];
        for (s, &w) in widths.iter().enumerate() {
            for b in 0..depth {
                let name = format!("backbone.stage{s}.block{b}");
                let (stride, cin) = if b == 0 { (2, prev) } else { (1, w) };
                blocks.push(match cfg.backbone {
                    Backbone::Residual => Block::Residual(ResidualBlock::new(init, &name, cin, w, stride)),
                    Backbone::Compound => Block::Plain(
                        Conv::new(init, &format!("{name}.conv"), cin, w, 3, stride, false),
                        BatchNorm::new(init, &format!("{name}.bn"), w),
                    ),
                    Backbone::Depthwise => Block::Separable(
                        SeparableConv::new(init, &format!("{name}.sep"), cin, w, stride),
                        BatchNorm::new(init, &format!("{name}.bn"), w),
                    ),
                });
            }
            prev = w;
        }
        let final_bn = (cfg.backbone == Backbone::Residual).then(|| BatchNorm::new(init, "backbone.final_bn", prev));
        let proj = Conv::new(init, "backbone.proj", prev, cfg.embed_dim, 1, 1, true);
        Self {
            stem,
            stem_bn,
            blocks,
            final_bn,
            proj,
        }
    }

    /// `[N, C, H, W]` → `[N, d, Hf, Wf]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(ctx, x)?;
        if let Some(bn) = &self.stem_bn {
            h = bn.forward(ctx, h)?;
            h = ctx.tape.relu(h);
        }
        for block in &self.blocks {
            h = block.forward(ctx, h)?;
        }
        if let Some(bn) = &self.final_bn {
            h = bn.forward(ctx, h)?;
            h = ctx.tape.relu(h);
        }
        self.proj.forward(ctx, h)
    }
}
