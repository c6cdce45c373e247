//! Adam optimization with early stopping on the validation Huber loss.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{DatasetManifest, Sample, Split, TipLabels};
use crate::error::{Result, SimicError};
use crate::model::{images_to_tensor, Normalization, SimicModel};
use crate::objective::DEFAULT_DELTA;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is folded into the gradient
/// as an L2 term.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, hp: &AdamHyper) {
    assert_eq!(param.len(), grad.len(), "parameter/gradient length");
    assert_eq!(param.len(), state.m.len(), "parameter/state length");
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        let g = g + hp.weight_decay * *p;
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        *p -= hp.lr * (*m / c1) / ((*v / c2).sqrt() + hp.eps);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub patience: usize,
    pub min_delta: f64,
    /// Huber threshold on normalized targets.
    pub delta: f64,
    /// Average the loss over the batch instead of summing.
    pub mean_loss: bool,
    pub seed: u64,
    /// Record wall-clock seconds in the log (otherwise 0, keeping logs
    /// reproducible byte for byte).
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 500,
            weight_decay: 1e-5,
            patience: 20,
            min_delta: 1e-6,
            delta: DEFAULT_DELTA,
            mean_loss: false,
            seed: 0,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(SimicError::config(field, "must be positive"))
            }
        };
        positive("lr", self.lr > 0.0 && self.lr.is_finite())?;
        positive("batch_size", self.batch_size > 0)?;
        positive("max_epochs", self.max_epochs > 0)?;
        positive("delta", self.delta > 0.0 && self.delta.is_finite())?;
        positive("patience", self.patience > 0)?;
        if !(self.weight_decay >= 0.0 && self.min_delta >= 0.0) {
            return Err(SimicError::config("weight_decay", "weight decay and min delta must be non-negative"));
        }
        if self.patience >= self.max_epochs {
            return Err(SimicError::config(
                "patience",
                format!("patience {} must be below max_epochs {}", self.patience, self.max_epochs),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    /// Mean per-sample validation loss; absent without a validation split.
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

impl TrainLog {
    /// Loss used for model selection at `epoch` (validation, else training).
    pub fn monitored(&self, epoch: usize) -> f64 {
        let r = &self.epochs[epoch - 1];
        r.val_loss.unwrap_or(r.train_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.epochs {
            let val = r.val_loss.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:?},{},{:?}", r.epoch, r.train_loss, val, r.seconds);
        }
        out
    }
}

/// Partitions `order` into minibatches. A trailing batch of one sample is
/// merged into its predecessor because batch statistics need two samples.
pub fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
        let start = order.len() - 1 - batches.last().map_or(0, |b| b.len());
        *batches.last_mut().expect("at least one batch") = &order[start..];
    }
    batches
}

struct Batch {
    images: Tensor,
    structure: Option<Tensor>,
    targets: Tensor,
}

fn assemble(model: &SimicModel, samples: &[Sample], idx: &[usize]) -> Result<Batch> {
    let images: Vec<_> = idx.iter().map(|&i| &samples[i].image).collect();
    let labels: Vec<TipLabels> = idx.iter().map(|&i| samples[i].labels).collect();
    let norm = &model.normalization;
    let structure = if model.config().needs_structure() {
        let wh: Vec<[f64; 2]> = labels.iter().map(|l| [l.width_um, l.height_um]).collect();
        Some(norm.structure(&wh)?)
    } else {
        None
    };
    Ok(Batch {
        images: images_to_tensor(&images)?,
        structure,
        targets: norm.targets(&labels, model.config().mode)?,
    })
}

/// Mean per-sample Huber loss in eval mode.
fn evaluate_loss(model: &SimicModel, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    for idx in order.chunks(64) {
        let b = assemble(model, samples, idx)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &vars, &b.images, b.structure.as_ref(), false)?;
        let t = tape.constant(b.targets);
        let loss = tape.huber(out.predictions, t, cfg.delta, false)?;
        total += tape.value(loss).item()?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains in place on in-memory samples. Normalization statistics are fitted
/// on `train`; the weights of the best monitored epoch are restored on exit.
/// `observer` sees each epoch as it completes.
pub fn fit(
    model: &mut SimicModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SimicError::InvalidArgument("training split is empty".into()));
    }
    if train.len() < 2 {
        return Err(SimicError::InvalidArgument("training needs at least two samples".into()));
    }
    let labels: Vec<TipLabels> = train.iter().map(|s| s.labels).collect();
    model.normalization = Normalization::fit(&labels)?;

    let hp = AdamHyper::new(cfg.lr, cfg.weight_decay);
    let trainable: Vec<usize> = model
        .params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id.index())
        .collect();
    let mut states: Vec<AdamState> = trainable
        .iter()
        .map(|&i| AdamState::new(model.params().iter().nth(i).expect("param").1.value.len()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let mut best_params = model.params().clone();
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in minibatches(&order, cfg.batch_size).into_iter().enumerate() {
            let batch = assemble(model, train, idx)?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let out = model.forward(&mut tape, &vars, &batch.images, batch.structure.as_ref(), true)?;
            let t = tape.constant(batch.targets);
            let loss = tape.huber(out.predictions, t, cfg.delta, cfg.mean_loss)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(SimicError::Numeric(format!(
                    "non-finite training loss {value} at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            total += if cfg.mean_loss { value * idx.len() as f64 } else { value };
            tape.backward(loss)?;
            let store = model.params_mut();
            for (&i, state) in trainable.iter().zip(&mut states) {
                let grad = tape.grad(vars[i]).expect("trainable parameter has a gradient");
                let param = store.iter_mut().nth(i).expect("param");
                adam_step(param.value.data_mut(), grad.data(), state, &hp);
            }
            model.commit_running_stats(&out.bn_updates);
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, val, cfg)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: if cfg.timing { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        observer(&record);
        let monitored = val_loss.unwrap_or(train_loss);
        log.epochs.push(record);
        if !monitored.is_finite() {
            return Err(SimicError::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        if monitored < best - cfg.min_delta {
            best = monitored;
            log.best_epoch = epoch;
            best_params = model.params().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    *model.params_mut() = best_params;
    Ok(log)
}

/// Loads the train and val splits of `manifest` and runs [`fit`].
pub fn train(
    model: &mut SimicModel,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    let load = |split| {
        manifest
            .split_records(split)
            .map(|r| {
                Ok(Sample {
                    id: r.id.clone(),
                    image: manifest.load_image(r)?,
                    labels: r.labels,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    let train_set = load(Split::Train)?;
    let val_set = load(Split::Val)?;
    fit(model, &train_set, &val_set, cfg, observer)
}
