//! The regression network: backbone, optional coordinate channels and
//! structure embedding, optional attention, and an MLP head.

mod attention;
mod attmap;
mod backbone;
mod checkpoint;
mod config;
mod layers;
mod params;

pub use attention::{additive_attention, additive_scores, multihead_attention, positions, scaled_dot_product_attention};
pub use attmap::{export_attention_map, rescale_to_gray, upsample_nearest};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{AttentionKind, Backbone, ModelConfig, PredictionMode};
pub use layers::{BnUpdate, BN_EPS, BN_MOMENTUM};
pub use params::{Param, ParamId, ParamStore};

use crate::dataio::{GrayImage, TipLabels};
use crate::error::{shape_err, Result, SimicError};
use crate::tensor::{Tape, Tensor, Var};
use attention::AttentionModule;
use backbone::BackboneNet;
use layers::{Ctx, Dense};
use params::Initializer;

/// Appends x and y coordinate channels spanning `[-1, 1]` to a
/// single-channel batch `[N, 1, H, W]`. A length-1 axis gets coordinate 0.
pub fn add_coord_channels(images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(shape_err!("coordinate channels need [N, 1, H, W], got {:?}", s));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let coord = |i: usize, len: usize| {
        if len == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (len - 1) as f64
        }
    };
    let plane = h * w;
    let mut data = Vec::with_capacity(n * 3 * plane);
    for img in images.data().chunks(plane) {
        data.extend_from_slice(img);
        for _y in 0..h {
            data.extend((0..w).map(|x| coord(x, w)));
        }
        for y in 0..h {
            data.extend(std::iter::repeat_n(coord(y, h), w));
        }
    }
    Tensor::new(&[n, 3, h, w], data)
}

/// Stacks 8-bit images into an `[N, 1, H, W]` batch scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| SimicError::InvalidArgument("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(shape_err!(
                "mixed image sizes in batch: {}x{} vs {}x{}",
                img.width(),
                img.height(),
                w,
                h
            ));
        }
        data.extend(img.pixels().iter().map(|&p| p as f64 / 255.0));
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// Per-target z-score statistics over (width, height, radius), fitted on the
/// training split. Structure inputs reuse the width and height entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Normalization {
    /// Population statistics; a constant target keeps unit scale.
    pub fn fit(labels: &[TipLabels]) -> Result<Self> {
        if labels.is_empty() {
            return Err(SimicError::InvalidArgument("cannot fit normalization on no labels".into()));
        }
        let n = labels.len() as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for l in labels {
            for (m, v) in mean.iter_mut().zip(l.as_array()) {
                *m += v / n;
            }
        }
        for l in labels {
            for ((s, m), v) in std.iter_mut().zip(&mean).zip(l.as_array()) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    /// Normalized targets `[N, outputs]` for the given mode.
    pub fn targets(&self, labels: &[TipLabels], mode: PredictionMode) -> Result<Tensor> {
        let idx = mode.targets();
        let data = labels
            .iter()
            .flat_map(|l| {
                let a = l.as_array();
                idx.iter().map(move |&i| (a[i] - self.mean[i]) / self.std[i])
            })
            .collect();
        Tensor::new(&[labels.len(), idx.len()], data)
    }

    /// Normalized structure vectors `[N, 2]` from (width, height) in µm.
    pub fn structure(&self, wh: &[[f64; 2]]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(wh.len() * 2);
        for s in wh {
            if !(s[0].is_finite() && s[1].is_finite()) {
                return Err(SimicError::InvalidArgument(format!("non-finite structure input {s:?}")));
            }
            data.push((s[0] - self.mean[0]) / self.std[0]);
            data.push((s[1] - self.mean[1]) / self.std[1]);
        }
        Tensor::new(&[wh.len(), 2], data)
    }

    /// Maps normalized model outputs back to micrometres.
    pub fn denormalize(&self, outputs: &[f64], mode: PredictionMode) -> Vec<f64> {
        let idx = mode.targets();
        outputs
            .chunks(idx.len())
            .flat_map(|row| row.iter().zip(idx).map(|(v, &i)| v * self.std[i] + self.mean[i]))
            .collect()
    }
}

/// Attention weights of one sample, one `grid_h × grid_w` map per head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub sample_id: String,
    pub heads: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Head-major, row-major weights.
    pub weights: Vec<f64>,
}

impl AttentionMaps {
    pub fn head(&self, h: usize) -> &[f64] {
        let p = self.grid_h * self.grid_w;
        &self.weights[h * p..(h + 1) * p]
    }

    /// Splits `[N, h, P]` weights into per-sample maps.
    pub fn from_batch(weights: &Tensor, grid: (usize, usize), ids: &[String]) -> Result<Vec<Self>> {
        let s = weights.shape();
        if s.len() != 3 || s[2] != grid.0 * grid.1 || s[0] != ids.len() {
            return Err(shape_err!("attention weights {:?} for grid {:?} and {} ids", s, grid, ids.len()));
        }
        let per = s[1] * s[2];
        Ok(ids
            .iter()
            .zip(weights.data().chunks(per))
            .map(|(id, w)| AttentionMaps {
                sample_id: id.clone(),
                heads: s[1],
                grid_h: grid.0,
                grid_w: grid.1,
                weights: w.to_vec(),
            })
            .collect())
    }
}

/// Tape outputs of one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Normalized predictions `[N, outputs]`.
    pub predictions: Var,
    /// `[N, heads, P]` when attention is enabled.
    pub attention: Option<Var>,
    /// Batch statistics from train-mode normalization layers.
    pub bn_updates: Vec<BnUpdate>,
}

/// De-normalized predictions in micrometres, one row per sample.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub values: Vec<Vec<f64>>,
    pub attention: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct SimicModel {
    config: ModelConfig,
    params: ParamStore,
    pub normalization: Normalization,
    backbone: BackboneNet,
    attention: Option<AttentionModule>,
    free_query: Option<ParamId>,
    embed_wh: Option<Dense>,
    hidden: Dense,
    output: Dense,
}

impl SimicModel {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut params = ParamStore::default();
        let mut init = Initializer::new(&mut params, config.seed);
        let backbone = BackboneNet::new(&mut init, config);
        let embed_wh = config
            .needs_structure()
            .then(|| Dense::new(&mut init, "structure.embed", 2, d, true));
        let attention = match config.attention {
            AttentionKind::None => None,
            AttentionKind::Additive => Some(AttentionModule::additive(&mut init, d)),
            AttentionKind::MultiHead => Some(AttentionModule::multihead(&mut init, d, config.heads)),
        };
        let free_query = (attention.is_some() && embed_wh.is_none())
            .then(|| init.he_uniform("attention.query", &[d], d));
        // Without attention the structure embedding reaches the head by
        // concatenation; with attention it acts only through the query.
        let concat_structure = embed_wh.is_some() && attention.is_none();
        let head_in = if concat_structure { 2 * d } else { d };
        let hidden = Dense::new(&mut init, "head.hidden", head_in, d, true);
        let output = Dense::new(&mut init, "head.output", d, config.mode.outputs(), true);
        Ok(Self {
            config: config.clone(),
            params,
            normalization: Normalization::default(),
            backbone,
            attention,
            free_query,
            embed_wh,
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn outputs(&self) -> usize {
        self.config.mode.outputs()
    }

    /// Registers all parameters on the tape, in store order.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Vec<Var> {
        self.params.bind(tape, with_grad)
    }

    /// Runs the network on `images [N, 1, H, W]` with normalized structure
    /// `[N, 2]` (required in half mode, rejected otherwise).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        images: &Tensor,
        structure: Option<&Tensor>,
        train: bool,
    ) -> Result<ForwardOutput> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(shape_err!("model input must be [N, 1, H, W], got {:?}", s));
        }
        if (s[2], s[3]) != (self.config.input_height, self.config.input_width) {
            return Err(shape_err!(
                "input {}x{} does not match configured {}x{}",
                s[3],
                s[2],
                self.config.input_width,
                self.config.input_height
            ));
        }
        let n = s[0];
        let structure = match (self.embed_wh.is_some(), structure) {
            (true, Some(t)) if t.shape() == [n, 2] => Some(t),
            (true, Some(t)) => return Err(shape_err!("structure input {:?}, expected [{}, 2]", t.shape(), n)),
            (true, None) => {
                return Err(SimicError::InvalidArgument(
                    "half-prediction mode requires width/height structure input".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(SimicError::InvalidArgument(
                    "structure input supplied to a model without a structure path".into(),
                ))
            }
            (false, None) => None,
        };
        let input = if self.config.coord_channels {
            add_coord_channels(images)?
        } else {
            images.clone()
        };
        let mut ctx = Ctx {
            tape,
            vars,
            params: &self.params,
            train,
            bn_updates: Vec::new(),
        };
        let x = ctx.tape.constant(input);
        let features = self.backbone.forward(&mut ctx, x)?;
        let embedded = match (&self.embed_wh, structure) {
            (Some(e), Some(t)) => {
                let sv = ctx.tape.constant(t.clone());
                Some(e.forward(&mut ctx, sv)?)
            }
            _ => None,
        };
        let (summary, attention) = match &self.attention {
            None => (ctx.tape.global_avg_pool(features)?, None),
            Some(att) => {
                let query = match (embedded, self.free_query) {
                    (Some(q), _) => q,
                    (None, Some(id)) => {
                        let q = ctx.var(id);
                        ctx.tape.expand(q, 0, n)?
                    }
                    (None, None) => unreachable!("attention without a query source"),
                };
                let (z, w) = att.forward(&mut ctx, features, query)?;
                // Residual around the attention block keeps the query in z.
                let z = ctx.tape.add(z, query)?;
                (z, Some(w))
            }
        };
        let head_in = match embedded {
            Some(q) if self.attention.is_none() => ctx.tape.concat(&[summary, q], 1)?,
            _ => summary,
        };
        let h = self.hidden.forward(&mut ctx, head_in)?;
        let h = ctx.tape.relu(h);
        let predictions = self.output.forward(&mut ctx, h)?;
        Ok(ForwardOutput {
            predictions,
            attention,
            bn_updates: ctx.bn_updates,
        })
    }

    /// Inference on 8-bit images; `structure` holds (width, height) in µm.
    pub fn predict(&self, images: &[&GrayImage], structure: Option<&[[f64; 2]]>) -> Result<Prediction> {
        let x = images_to_tensor(images)?;
        let s = structure.map(|wh| self.normalization.structure(wh)).transpose()?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, &x, s.as_ref(), false)?;
        let raw = tape.value(out.predictions).data();
        let values = self
            .normalization
            .denormalize(raw, self.config.mode)
            .chunks(self.outputs())
            .map(<[f64]>::to_vec)
            .collect();
        Ok(Prediction {
            values,
            attention: out.attention.map(|a| tape.value(a).clone()),
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn commit_running_stats(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let mut mean = self.params.get(u.mean).value.data().to_vec();
            let mut var = self.params.get(u.var).value.data().to_vec();
            u.stats.update_running(&mut mean, &mut var, BN_MOMENTUM);
            self.params.get_mut(u.mean).value.data_mut().copy_from_slice(&mean);
            self.params.get_mut(u.var).value.data_mut().copy_from_slice(&var);
        }
    }

    /// Feature grid `(Hf, Wf)` the attention maps live on.
    pub fn feature_grid(&self) -> (usize, usize) {
        self.config.feature_grid()
    }

    /// Structure embedding `q = Linear(S)` for normalized `S [N, 2]`.
    pub fn embed_structure(&self, structure: &Tensor) -> Result<Tensor> {
        let e = self
            .embed_wh
            .as_ref()
            .ok_or_else(|| SimicError::InvalidArgument("model has no structure path".into()))?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            params: &self.params,
            train: false,
            bn_updates: Vec::new(),
        };
        let s = ctx.tape.constant(structure.clone());
        let q = e.forward(&mut ctx, s)?;
        Ok(tape.value(q).clone())
    }
}

#[cfg(test)]
mod tests;
