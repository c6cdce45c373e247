use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SimicError};

/// Backbone family. The variants are micro-scale stand-ins that keep each
/// family's defining mechanism: identity skips (residual), jointly scaled
/// depth and width (compound), and depthwise-separable factorization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backbone {
    Residual,
    Compound,
    Depthwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    None,
    Additive,
    MultiHead,
}

/// `Full` predicts width, height and radius from the image; `Half` takes
/// width and height as inputs and predicts the radius only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredictionMode {
    Full,
    Half,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Residual, Backbone::Compound, Backbone::Depthwise];

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Residual => "residual",
            Backbone::Compound => "compound",
            Backbone::Depthwise => "depthwise",
        }
    }
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::None, AttentionKind::Additive, AttentionKind::MultiHead];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Additive => "additive",
            AttentionKind::MultiHead => "mha",
        }
    }
}

impl PredictionMode {
    pub const ALL: [PredictionMode; 2] = [PredictionMode::Full, PredictionMode::Half];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictionMode::Full => "full",
            PredictionMode::Half => "half",
        }
    }

    /// Number of regression outputs.
    pub fn outputs(self) -> usize {
        match self {
            PredictionMode::Full => 3,
            PredictionMode::Half => 1,
        }
    }

    /// Indices into `[width, height, radius]` that this mode predicts.
    pub fn targets(self) -> &'static [usize] {
        match self {
            PredictionMode::Full => &[0, 1, 2],
            PredictionMode::Half => &[2],
        }
    }
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, { $($name:literal => $val:expr),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = SimicError;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($name => Ok($val),)+
                    other => Err(SimicError::config($what, format!("unknown value {other:?}"))),
                }
            }
        }
    };
}

text_enum!(Backbone, "backbone", {
    "residual" => Backbone::Residual,
    "resnet" => Backbone::Residual,
    "compound" => Backbone::Compound,
    "effnet" => Backbone::Compound,
    "depthwise" => Backbone::Depthwise,
    "mobile" => Backbone::Depthwise,
});

text_enum!(AttentionKind, "attention", {
    "none" => AttentionKind::None,
    "additive" => AttentionKind::Additive,
    "mha" => AttentionKind::MultiHead,
});

text_enum!(PredictionMode, "mode", {
    "full" => PredictionMode::Full,
    "half" => PredictionMode::Half,
});

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub attention: AttentionKind,
    pub mode: PredictionMode,
    pub embed_dim: usize,
    pub heads: usize,
    pub coord_channels: bool,
    /// Output channels of each stride-2 stage.
    pub widths: Vec<usize>,
    /// Blocks per stage before compound depth scaling.
    pub blocks_per_stage: usize,
    pub depth_coefficient: f64,
    pub width_coefficient: f64,
    pub input_height: usize,
    pub input_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Residual,
            attention: AttentionKind::None,
            mode: PredictionMode::Full,
            embed_dim: 64,
            heads: 4,
            coord_channels: true,
            widths: vec![16, 32, 64],
            blocks_per_stage: 1,
            depth_coefficient: 1.2,
            width_coefficient: 1.1,
            input_height: 64,
            input_width: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(SimicError::config("embed_dim", "must be positive"));
        }
        if self.attention == AttentionKind::MultiHead && (self.heads == 0 || self.embed_dim % self.heads != 0) {
            return Err(SimicError::config(
                "heads",
                format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads),
            ));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(SimicError::config("widths", "need at least one positive stage width"));
        }
        if self.blocks_per_stage == 0 {
            return Err(SimicError::config("blocks_per_stage", "must be at least 1"));
        }
        if !(self.depth_coefficient >= 1.0 && self.width_coefficient >= 1.0) {
            return Err(SimicError::config("compound coefficients", "must be at least 1"));
        }
        let factor = self.downsampling();
        if self.input_height < factor || self.input_width < factor {
            return Err(SimicError::config(
                "input size",
                format!(
                    "{}x{} input is smaller than the total downsampling factor {}",
                    self.input_height, self.input_width, factor
                ),
            ));
        }
        Ok(())
    }

    pub fn downsampling(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn input_channels(&self) -> usize {
        if self.coord_channels {
            3
        } else {
            1
        }
    }

    /// Spatial size of the backbone feature map.
    pub fn feature_grid(&self) -> (usize, usize) {
        let shrink = |mut s: usize| {
            for _ in 0..self.widths.len() {
                s = (s - 1) / 2 + 1;
            }
            s
        };
        (shrink(self.input_height), shrink(self.input_width))
    }

    pub fn needs_structure(&self) -> bool {
        self.mode == PredictionMode::Half
    }

    /// `(key, value)` pairs echoed into checkpoints, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let widths = self.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("backbone", self.backbone.to_string()),
            ("attention", self.attention.to_string()),
            ("mode", self.mode.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("coord_channels", self.coord_channels.to_string()),
            ("widths", widths),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("depth_coefficient", format!("{:?}", self.depth_coefficient)),
            ("width_coefficient", format!("{:?}", self.width_coefficient)),
            ("input_height", self.input_height.to_string()),
            ("input_width", self.input_width.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (k, v) in pairs {
            let bad = |m: &str| SimicError::config(k, format!("{m}: {v:?}"));
            let int = || v.parse::<usize>().map_err(|_| bad("not an integer"));
            let float = || v.parse::<f64>().map_err(|_| bad("not a number"));
            match k {
                "backbone" => cfg.backbone = v.parse()?,
                "attention" => cfg.attention = v.parse()?,
                "mode" => cfg.mode = v.parse()?,
                "embed_dim" => cfg.embed_dim = int()?,
                "heads" => cfg.heads = int()?,
                "coord_channels" => cfg.coord_channels = v.parse().map_err(|_| bad("not a bool"))?,
                "widths" => {
                    cfg.widths = v
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("not a width list"))?
                }
                "blocks_per_stage" => cfg.blocks_per_stage = int()?,
                "depth_coefficient" => cfg.depth_coefficient = float()?,
                "width_coefficient" => cfg.width_coefficient = float()?,
                "input_height" => cfg.input_height = int()?,
                "input_width" => cfg.input_width = int()?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("not a seed"))?,
                _ => return Err(SimicError::config(k, "unknown model config key")),
            }
            seen.insert(k.to_string());
        }
        for (k, _) in ModelConfig::default().to_pairs() {
            if !seen.contains(k) {
                return Err(SimicError::config(k, "missing from config echo"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// First field (in echo order) whose value differs.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .find(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
    }
}
