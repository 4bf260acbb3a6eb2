//! Combined-loss training under the three-stage schedule, with plateau LR
//! decay, early stopping and image augmentation.

mod augment;

pub use augment::{augment_image, flip_vertical, rotate_image, shift_image, zoom_image, AugmentPlan};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::models::{Block, MultimodalModel, Want};
use crate::numeric::{AdamState, Scalar, Tape, Var};

/// Weights of the tabular reconstruction, image reconstruction and
/// classification terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    pub gamma_t: f64,
    pub gamma_i: f64,
    pub gamma_c: f64,
}

impl StageWeights {
    pub const TABULAR: Self = Self {
        gamma_t: 1.0,
        gamma_i: 0.0,
        gamma_c: 0.0,
    };
    pub const IMAGE: Self = Self {
        gamma_t: 0.0,
        gamma_i: 1.0,
        gamma_c: 0.0,
    };
    pub const JOINT: Self = Self {
        gamma_t: 1.0,
        gamma_i: 1.0,
        gamma_c: 1.0,
    };

    pub fn new(gamma_t: f64, gamma_i: f64, gamma_c: f64) -> Result<Self> {
        let w = Self {
            gamma_t,
            gamma_i,
            gamma_c,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let g = [self.gamma_t, self.gamma_i, self.gamma_c];
        if g.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("stage weights", format!("weights must be finite and non-negative, got {g:?}")));
        }
        if g.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid("stage weights", "at least one weight must be positive"));
        }
        Ok(())
    }
}

/// `γ_T·l_T + γ_I·l_I + γ_C·l_C`.
pub fn combined_loss(l_t: f64, l_i: f64, l_c: f64, w: StageWeights) -> Result<f64> {
    w.validate()?;
    for (name, l) in [("l_T", l_t), ("l_I", l_i), ("l_C", l_c)] {
        if !l.is_finite() || l < 0.0 {
            return Err(Error::invalid("combined_loss", format!("{name} = {l} must be finite and non-negative")));
        }
    }
    Ok(w.gamma_t * l_t + w.gamma_i * l_i + w.gamma_c * l_c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs without a new validation minimum before the LR is decayed.
    pub plateau_patience: usize,
    pub lr_decay: f64,
    pub max_epochs: usize,
    /// Epochs without a new validation minimum before a stage stops.
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// Smallest drop that counts as a new validation minimum.
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            plateau_patience: 10,
            lr_decay: 0.1,
            max_epochs: 300,
            early_stop_patience: 25,
            batch_size: 16,
            seed: 0,
            augment: true,
            min_delta: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("train: {msg}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Loss components; `None` where the term was not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub l_t: Option<f64>,
    pub l_i: Option<f64>,
    pub l_c: Option<f64>,
}

impl Losses {
    /// Weighted sum over the components that are present.
    pub fn total(&self, w: StageWeights) -> f64 {
        let term = |l: Option<f64>, g: f64| if g > 0.0 { l.map_or(0.0, |v| g * v) } else { 0.0 };
        term(self.l_t, w.gamma_t) + term(self.l_i, w.gamma_i) + term(self.l_c, w.gamma_c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub split: Split,
    pub losses: Losses,
    /// Combined loss under the stage weights.
    pub total: f64,
}

/// Per-epoch losses of one stage. Epoch 0 holds the losses before any update;
/// train rows of later epochs average the mini-batch losses seen during the
/// epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub weights: StageWeights,
    pub records: Vec<EpochRecord>,
    /// Last epoch that ran.
    pub stopping_epoch: usize,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Learning rate of every epoch, starting at epoch 0.
    pub fn lr_trace(&self) -> Vec<f64> {
        self.split(Split::Train).map(|r| r.lr).collect()
    }

    pub fn best_val(&self) -> Option<f64> {
        self.split(Split::Val).find(|r| r.epoch == self.best_epoch).map(|r| r.total)
    }

    /// CSV with columns `epoch,lr,l_T,l_I,l_C,L,split`; absent terms are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let wrap = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["epoch", "lr", "l_T", "l_I", "l_C", "L", "split"]).map_err(wrap)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let split = match r.split {
                Split::Train => "train",
                Split::Val => "val",
            };
            out.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                opt(r.losses.l_t),
                opt(r.losses.l_i),
                opt(r.losses.l_c),
                r.total.to_string(),
                split.to_string(),
            ])
            .map_err(wrap)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Flattened, validated copy of a preprocessed split.
struct Prepared {
    x_t: Vec<f64>,
    x_i: Vec<f64>,
    labels: Vec<usize>,
    d: usize,
    px: usize,
    side: usize,
}

impl Prepared {
    fn new<S: Scalar>(model: &MultimodalModel<S>, samples: &[MultimodalSample]) -> Result<Self> {
        let dims = model.dims();
        let (d, side) = (dims.tabular_dim, dims.image_side);
        let px = side * side;
        let mut p = Self {
            x_t: Vec::with_capacity(samples.len() * d),
            x_i: Vec::with_capacity(samples.len() * px),
            labels: Vec::with_capacity(samples.len()),
            d,
            px,
            side,
        };
        for s in samples {
            let t = s.tabular_values()?;
            if t.len() != d || s.image.len() != px {
                return Err(Error::invalid(
                    "train",
                    format!("sample {} has {} features and {} pixels, model expects {d} and {px}", s.id, t.len(), s.image.len()),
                ));
            }
            if s.label >= dims.classes {
                return Err(Error::invalid("train", format!("sample {} label {} out of range", s.id, s.label)));
            }
            p.x_t.extend(t);
            p.x_i.extend_from_slice(&s.image);
            p.labels.push(s.label);
        }
        Ok(p)
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

/// Which terms a stage computes on a given model.
#[derive(Clone, Copy, Debug)]
struct Active {
    t: bool,
    i: bool,
    c: bool,
}

impl Active {
    fn of<S: Scalar>(model: &MultimodalModel<S>, w: StageWeights) -> Self {
        Self {
            t: w.gamma_t > 0.0 && model.tabular_ae().is_some(),
            i: w.gamma_i > 0.0 && model.conv_ae().is_some(),
            c: w.gamma_c > 0.0,
        }
    }

    fn all<S: Scalar>(model: &MultimodalModel<S>) -> Self {
        Self {
            t: model.tabular_ae().is_some(),
            i: model.conv_ae().is_some(),
            c: true,
        }
    }

    fn any(self) -> bool {
        self.t || self.i || self.c
    }

    /// Blocks that receive a gradient.
    fn blocks<S: Scalar>(self, model: &MultimodalModel<S>) -> Vec<Block> {
        let mut out = Vec::new();
        if (self.t || self.c) && model.tabular_ae().is_some() {
            out.push(Block::TabularAe);
        }
        if (self.i || self.c) && model.conv_ae().is_some() {
            out.push(Block::ConvAe);
        }
        if self.c {
            out.push(Block::Classifier);
        }
        out
    }
}

/// Loss terms of one mini-batch, recorded on `tape`.
struct BatchTerms {
    l_t: Option<Var>,
    l_i: Option<Var>,
    l_c: Option<Var>,
}

fn batch_terms<S: Scalar>(
    model: &MultimodalModel<S>,
    tape: &mut Tape<S>,
    bound: &crate::models::BoundModel,
    x_t: Vec<S>,
    x_i: Vec<S>,
    labels: &[usize],
    active: Active,
) -> Result<BatchTerms> {
    let b = labels.len();
    let need_t = model.tabular_ae().is_some() && (active.t || active.c);
    let need_i = model.conv_ae().is_some() && (active.i || active.c);
    let xt = if need_t {
        let d = x_t.len() / b;
        Some(tape.input(vec![b, d], x_t, false)?)
    } else {
        None
    };
    let xi = if need_i {
        let px = x_i.len() / b;
        Some(tape.input(vec![b, px], x_i, false)?)
    } else {
        None
    };
    let want = Want {
        recon_t: active.t,
        recon_i: active.i,
        classify: active.c,
    };
    let out = model.forward_batch(tape, bound, xt, xi, want)?;
    let l_t = match (out.recon_t, xt) {
        (Some(r), Some(x)) => Some(tape.mse(r, x)?),
        _ => None,
    };
    let l_i = match (out.recon_i, xi) {
        (Some(r), Some(x)) => Some(tape.mse(r, x)?),
        _ => None,
    };
    let l_c = match out.probs {
        Some(p) => Some(tape.cross_entropy(p, labels)?),
        None => None,
    };
    Ok(BatchTerms { l_t, l_i, l_c })
}

fn to_scalars<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::of(x)).collect()
}

/// Loss components over a whole split without gradients, in chunks.
fn evaluate_prepared<S: Scalar>(model: &MultimodalModel<S>, data: &Prepared, active: Active) -> Result<Losses> {
    const CHUNK: usize = 256;
    let n = data.len();
    let mut sums = [0.0f64; 3];
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &[]);
        let terms = batch_terms(
            model,
            &mut tape,
            &bound,
            to_scalars(&data.x_t[start * data.d..end * data.d]),
            to_scalars(&data.x_i[start * data.px..end * data.px]),
            &data.labels[start..end],
            active,
        )?;
        let rows = (end - start) as f64;
        for (k, v) in [terms.l_t, terms.l_i, terms.l_c].into_iter().enumerate() {
            if let Some(v) = v {
                sums[k] += tape.value(v)[0].as_f64() * rows;
            }
        }
        start = end;
    }
    let mean = |k: usize, on: bool| (on && n > 0).then(|| sums[k] / n as f64);
    Ok(Losses {
        l_t: mean(0, active.t),
        l_i: mean(1, active.i),
        l_c: mean(2, active.c),
    })
}

/// Every loss term the model supports, averaged over `samples`.
pub fn evaluate_losses<S: Scalar>(model: &MultimodalModel<S>, samples: &[MultimodalSample]) -> Result<Losses> {
    evaluate_prepared(model, &Prepared::new(model, samples)?, Active::all(model))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stage randomness depends only on the run seed and the stage weights, so
/// independent stages give the same result in either order.
fn stage_seed(seed: u64, w: StageWeights) -> u64 {
    [w.gamma_t, w.gamma_i, w.gamma_c]
        .iter()
        .fold(splitmix(seed), |acc, g| splitmix(acc ^ g.to_bits()))
}

/// Trains the blocks that `w` reaches until early stopping or `max_epochs`,
/// then restores the parameters with the lowest validation loss.
pub fn train_stage<S: Scalar>(
    model: &mut MultimodalModel<S>,
    train: &[MultimodalSample],
    val: &[MultimodalSample],
    w: StageWeights,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    w.validate()?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train_stage", "train and validation splits must be non-empty"));
    }
    let active = Active::of(model, w);
    if !active.any() {
        return Err(Error::invalid("train_stage", format!("weights {w:?} reach no block of this model")));
    }
    let blocks = active.blocks(model);
    let train_data = Prepared::new(model, train)?;
    let val_data = Prepared::new(model, val)?;
    let augment = cfg.augment && w.gamma_i > 0.0 && model.conv_ae().is_some();

    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, w));
    let mut adam = AdamState::new(S::of(cfg.learning_rate))?;
    let mut lr = cfg.learning_rate;
    let mut history = TrainHistory {
        weights: w,
        records: Vec::new(),
        stopping_epoch: 0,
        best_epoch: 0,
    };
    let record = |history: &mut TrainHistory, epoch, lr, split, losses: Losses| {
        history.records.push(EpochRecord {
            epoch,
            lr,
            split,
            total: losses.total(w),
            losses,
        })
    };

    let initial_train = evaluate_prepared(model, &train_data, active)?;
    let initial_val = evaluate_prepared(model, &val_data, Active::all(model))?;
    record(&mut history, 0, lr, Split::Train, initial_train);
    record(&mut history, 0, lr, Split::Val, initial_val);
    let mut best_loss = initial_val.total(w);
    let mut best_counted = best_loss;
    let mut best_model = model.clone();
    let (mut since_best, mut since_decay) = (0usize, 0usize);

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (d, px) = (train_data.d, train_data.px);
            let mut x_t = Vec::with_capacity(idx.len() * d);
            let mut x_i = Vec::with_capacity(idx.len() * px);
            let mut labels = Vec::with_capacity(idx.len());
            for &k in idx {
                x_t.extend(train_data.x_t[k * d..(k + 1) * d].iter().map(|&v| S::of(v)));
                let img = &train_data.x_i[k * px..(k + 1) * px];
                if augment {
                    x_i.extend(augment_image(img, train_data.side, &mut rng).into_iter().map(S::of));
                } else {
                    x_i.extend(img.iter().map(|&v| S::of(v)));
                }
                labels.push(train_data.labels[k]);
            }

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &blocks);
            let terms = batch_terms(model, &mut tape, &bound, x_t, x_i, &labels, active)?;
            let mut loss: Option<Var> = None;
            for (k, (term, g)) in [(terms.l_t, w.gamma_t), (terms.l_i, w.gamma_i), (terms.l_c, w.gamma_c)]
                .into_iter()
                .enumerate()
            {
                let Some(term) = term else { continue };
                sums[k] += tape.value(term)[0].as_f64() * idx.len() as f64;
                let scaled = tape.scale(term, S::of(g))?;
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, scaled)?,
                    None => scaled,
                });
            }
            let loss = loss.ok_or_else(|| Error::invalid("train_stage", "no loss term"))?;
            if !tape.value(loss)[0].is_finite() {
                return Err(Error::NanLoss { epoch, batch });
            }
            tape.backward(loss)?;
            model.collect_grads(&tape, &bound, &blocks)?;
            adam.step(&mut model.params_mut_of(&blocks))
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NanLoss { epoch, batch },
                    other => other,
                })?;
        }
        let n = train_data.len() as f64;
        let mean = |k: usize, on: bool| on.then(|| sums[k] / n);
        let train_losses = Losses {
            l_t: mean(0, active.t),
            l_i: mean(1, active.i),
            l_c: mean(2, active.c),
        };
        let val_losses = evaluate_prepared(model, &val_data, Active::all(model))?;
        record(&mut history, epoch, lr, Split::Train, train_losses);
        record(&mut history, epoch, lr, Split::Val, val_losses);
        history.stopping_epoch = epoch;

        let val_loss = val_losses.total(w);
        if !val_loss.is_finite() {
            return Err(Error::NanLoss { epoch, batch: 0 });
        }
        if val_loss < best_loss {
            best_loss = val_loss;
            best_model = model.clone();
            history.best_epoch = epoch;
        }
        if val_loss < best_counted - cfg.min_delta {
            best_counted = val_loss;
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
        }
        if since_best >= cfg.early_stop_patience {
            break;
        }
        if since_decay >= cfg.plateau_patience {
            lr *= cfg.lr_decay;
            adam.set_learning_rate(S::of(lr))?;
            since_decay = 0;
        }
    }
    *model = best_model;
    model.zero_grads();
    Ok(history)
}

/// Runs `stages` in order, each with fresh optimizer state. Stages that reach
/// no block of the model (for example image reconstruction on a tabular-only
/// model) are skipped.
pub fn staged_train<S: Scalar>(
    model: &mut MultimodalModel<S>,
    train: &[MultimodalSample],
    val: &[MultimodalSample],
    stages: &[StageWeights],
    cfg: &TrainConfig,
) -> Result<Vec<TrainHistory>> {
    let mut out = Vec::new();
    for &w in stages {
        if Active::of(model, w).any() {
            out.push(train_stage(model, train, val, w, cfg)?);
        }
    }
    Ok(out)
}

/// Tabular autoencoder, then image autoencoder, then everything jointly.
pub fn three_stage_train<S: Scalar>(
    model: &mut MultimodalModel<S>,
    train: &[MultimodalSample],
    val: &[MultimodalSample],
    cfg: &TrainConfig,
) -> Result<Vec<TrainHistory>> {
    staged_train(model, train, val, &[StageWeights::TABULAR, StageWeights::IMAGE, StageWeights::JOINT], cfg)
}

/// Joint training from scratch with no pretraining stages.
pub fn one_stage_train<S: Scalar>(
    model: &mut MultimodalModel<S>,
    train: &[MultimodalSample],
    val: &[MultimodalSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_stage(model, train, val, StageWeights::JOINT, cfg)
}
