//! Focal-loss training with warmup plus cosine decay, batched scoring and
//! evaluation.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{center_crop_resize, load_image, to_tensor, ImageU8, Manifest, Split};
use crate::metrics::{average_precision, calibrate_threshold, Confusion};
use crate::model::{Detector, Mode};
use crate::rng;
use crate::semantic::EmbeddingFile;
use crate::tensor::{Tape, Tensor};
use crate::weights::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalLossConfig {
    pub gamma: f64,
    /// Positive-class weight; `None` derives it from the training split.
    pub alpha: Option<f64>,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig { gamma: 2.0, alpha: None }
    }
}

impl FocalLossConfig {
    /// `α = N_fake / (N_real + N_fake)` unless overridden.
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_some_and(|a| !(a > 0.0 && a < 1.0)) || !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("focal alpha={:?} gamma={}", self.alpha, self.gamma)));
        }
        Ok(())
    }

    pub fn resolve_alpha(&self, n_real: usize, n_fake: usize) -> Result<f64> {
        let a = match self.alpha {
            Some(a) => a,
            None if n_real + n_fake > 0 => n_fake as f64 / (n_real + n_fake) as f64,
            None => return Err(Error::Empty("no training samples".into())),
        };
        if !(a > 0.0 && a < 1.0) || !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("focal alpha={a} gamma={}", self.gamma)));
        }
        Ok(a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    Adam,
    /// SGD with heavy-ball momentum and L2 added to the gradient.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 32,
            epochs: 20,
            warmup_iters: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn iters_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch)
    }

    /// Checks that do not depend on the training set size.
    pub fn validate_params(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0) || self.batch == 0 || self.epochs == 0 {
            return bad("lr, batch and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad(format!("betas ({}, {}) must lie in [0, 1) and eps be positive", self.beta1, self.beta2));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be nonnegative and momentum in [0, 1)".into());
        }
        Ok(())
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        self.validate_params()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let total = self.epochs * self.iters_per_epoch(n_train);
        if self.warmup_iters > total {
            return bad(format!("warmup_iters {} exceeds the {total} total iterations", self.warmup_iters));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay toward 0.
pub fn lr_at(iter: usize, total_iters: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_iters;
    if iter < w {
        return cfg.lr * iter as f64 / w as f64;
    }
    let span = total_iters.saturating_sub(w).max(1) as f64;
    cfg.lr * 0.5 * (1.0 + (PI * (iter - w) as f64 / span).cos())
}

/// First and second moment (Adam) or velocity (SGD) per store entry.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(store: &ParamStore, kind: OptimizerKind) -> Self {
        let zeros: Vec<Vec<f64>> = (0..store.len()).map(|i| vec![0.0; store.tensor(i).numel()]).collect();
        Optimizer { kind, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Update every trainable entry with a gradient; entries without one
    /// are left untouched, weight decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&Tensor>], lr: f64, cfg: &TrainConfig) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!("{} gradients for {} tensors", grads.len(), store.len())));
        }
        self.t += 1;
        let (b1, b2, wd) = (cfg.beta1, cfg.beta2, cfg.weight_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.is_trainable(i) {
                continue;
            }
            let p = store.tensor_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match self.kind {
                OptimizerKind::Adam => {
                    for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *p -= lr * wd * *p;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for ((p, &g), m) in p.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *m = cfg.momentum * *m + g + wd * *p;
                        *p -= lr * *m;
                    }
                }
            }
        }
        Ok(())
    }
}

/// One image reduced to what the network consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: u8,
    /// `[1, C_local, S, S]`
    pub feats: Tensor,
    /// `[D]` when the semantic branch is on.
    pub phi: Option<Tensor>,
}

/// Crop/resize to the configured size, then extract local features and the
/// embedding.
pub fn prepare_image(
    det: &Detector,
    img: &ImageU8,
    id: &str,
    label: u8,
    embeddings: Option<&EmbeddingFile>,
) -> Result<Sample> {
    img.require_min_side()?;
    let s = det.config().image_size;
    let img = if img.width() == s && img.height() == s { img.clone() } else { center_crop_resize(img, s)? };
    Ok(Sample {
        id: id.to_string(),
        label,
        feats: det.local_features(&to_tensor(&img))?,
        phi: det.embedding(&img, id, embeddings)?,
    })
}

/// Load and prepare every image of one split, in manifest order.
pub fn prepare_split(
    det: &Detector,
    manifest: &Manifest,
    split: Split,
    embeddings: Option<&EmbeddingFile>,
) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .into_iter()
        .map(|e| prepare_image(det, &load_image(manifest.resolve(e))?, &e.path, e.label, embeddings))
        .collect()
}

struct Batch {
    feats: Tensor,
    phi: Option<Tensor>,
    labels: Vec<f64>,
}

fn batch(samples: &[&Sample]) -> Result<Batch> {
    let feats = Tensor::stack_batch(&samples.iter().map(|s| s.feats.clone()).collect::<Vec<_>>())?;
    let phi = match samples[0].phi {
        Some(ref p) => {
            let d = p.numel();
            let mut data = Vec::with_capacity(samples.len() * d);
            for s in samples {
                let p = s.phi.as_ref().ok_or_else(|| Error::MissingEmbedding(s.id.clone()))?;
                data.extend_from_slice(p.data());
            }
            Some(Tensor::new([samples.len(), d], data)?)
        }
        None => None,
    };
    Ok(Batch { feats, phi, labels: samples.iter().map(|s| f64::from(s.label)).collect() })
}

fn counts(samples: &[Sample]) -> (usize, usize) {
    let fake = samples.iter().filter(|s| s.label == 1).count();
    (samples.len() - fake, fake)
}

fn require_both(samples: &[Sample], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty(format!("{what} split is empty")));
    }
    match counts(samples) {
        (0, _) | (_, 0) => Err(Error::InvalidArgument(format!("{what} split needs both classes"))),
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean focal loss over the epoch's batches.
    pub loss: f64,
    /// Training accuracy of the epoch's train-mode logits at threshold 0.
    pub acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["epoch", "loss", "acc"])?;
        for r in &self.epochs {
            w.write_record([r.epoch.to_string(), r.loss.to_string(), r.acc.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Train in place, then calibrate the decision threshold on `val`.
///
/// Each epoch visits the training set in an order drawn from
/// `(cfg.seed, epoch)`; the last batch may be short.
pub fn train(
    det: &mut Detector,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    focal: &FocalLossConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    require_both(train, "train")?;
    require_both(val, "val")?;
    cfg.validate(train.len())?;
    let (n_real, n_fake) = counts(train);
    let alpha = focal.resolve_alpha(n_real, n_fake)?;
    let per_epoch = cfg.iters_per_epoch(train.len());
    let total = cfg.epochs * per_epoch;
    let mut opt = Optimizer::new(det.store(), cfg.optimizer);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::substream(cfg.seed, &format!("shuffle.{epoch}")));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let items: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let b = batch(&items)?;
            let mut t = Tape::new();
            let mode = Mode::Train { seed: cfg.seed, step: iter as u64 };
            let f = det.forward(&mut t, &b.feats, b.phi.as_ref(), mode, true)?;
            correct += t
                .value(f.logits)
                .data()
                .iter()
                .zip(&b.labels)
                .filter(|(&z, &y)| (z > 0.0) == (y == 1.0))
                .count();
            let loss = t.focal_loss(f.logits, &b.labels, alpha, focal.gamma)?;
            let lv = t.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Diverged { iter, loss: lv });
            }
            loss_sum += lv;
            let grads = t.backward(loss)?;
            let g: Vec<Option<&Tensor>> = f.bound.iter().map(|&v| grads.get(v)).collect();
            opt.step(det.store_mut(), &g, lr_at(iter, total, cfg), cfg)?;
            det.update_running_stats(&f.bn_stats);
            iter += 1;
        }
        let rec = EpochRecord { epoch, loss: loss_sum / per_epoch as f64, acc: correct as f64 / train.len() as f64 };
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    let scores = score(det, val, cfg.batch)?;
    let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    det.set_threshold(calibrate_threshold(&scores, &labels)?);
    Ok(history)
}

/// Evaluation-mode logits in sample order.
pub fn score(det: &Detector, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let items: Vec<&Sample> = chunk.iter().collect();
        let b = batch(&items)?;
        out.extend(det.logits(&b.feats, b.phi.as_ref())?);
    }
    Ok(out)
}

/// ACC at a fixed threshold, AP and per-class counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub acc: f64,
    pub ap: f64,
    pub threshold: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let ap = average_precision(scores, labels)?;
        let confusion = Confusion::at(scores, labels, threshold);
        let n_fake = labels.iter().filter(|&&l| l == 1).count();
        Ok(EvalReport {
            acc: confusion.accuracy(),
            ap,
            threshold,
            n_real: labels.len() - n_fake,
            n_fake,
            confusion,
        })
    }

    pub fn rows(&self) -> Vec<(&'static str, String)> {
        let c = &self.confusion;
        vec![
            ("acc", self.acc.to_string()),
            ("ap", self.ap.to_string()),
            ("threshold", self.threshold.to_string()),
            ("n_real", self.n_real.to_string()),
            ("n_fake", self.n_fake.to_string()),
            ("tp", c.tp.to_string()),
            ("fp", c.fp.to_string()),
            ("tn", c.tn.to_string()),
            ("fn", c.fn_.to_string()),
        ]
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["metric", "value"])?;
        for (k, v) in self.rows() {
            w.write_record([k, v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Score `samples` and report at the detector's calibrated threshold.
pub fn evaluate(det: &Detector, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    let scores = score(det, samples, batch_size)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    EvalReport::from_scores(&scores, &labels, det.threshold())
}
