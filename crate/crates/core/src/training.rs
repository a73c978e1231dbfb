//! PK sampling, augmentation, Adam, learning-rate schedules and the
//! training loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_images, Dataset, Rgb8, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::model::{Batch, Model};
use crate::nn::{apply_bn_updates, Graph};
use crate::ops::{Mode, BN_MOMENTUM};
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    Cosine,
    WarmupMultistep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    /// Parameters are rounded to `f32` after every update and stored as `f32`.
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EraseFill {
    /// Independent `U(0, 1)` per erased value.
    Uniform,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub flip_p: f64,
    pub crop: bool,
    pub crop_pad: usize,
    pub erase: bool,
    pub erase_p: f64,
    /// Fraction of the image area, `[min, max]`.
    pub erase_area: [f64; 2],
    /// Height over width, `[min, max]`.
    pub erase_aspect: [f64; 2],
    pub erase_fill: EraseFill,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            flip_p: 0.5,
            crop: true,
            crop_pad: 10,
            erase: true,
            erase_p: 0.5,
            erase_area: [0.02, 0.4],
            erase_aspect: [0.3, 3.33],
            erase_fill: EraseFill::Uniform,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            crop: false,
            erase: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub p: usize,
    pub k: usize,
    pub epochs: usize,
    /// Base learning rate; `None` picks 5e-4 for cosine and 3.5e-4 for
    /// warmup-multistep.
    pub lr: Option<f64>,
    pub lr_min: f64,
    pub scheduler: Scheduler,
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub precision: Precision,
    pub grad_clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 16,
            k: 8,
            epochs: 24,
            lr: None,
            lr_min: 1e-7,
            scheduler: Scheduler::Cosine,
            warmup_epochs: 10,
            warmup_factor: 0.01,
            milestones: vec![40, 70],
            gamma: 0.1,
            seed: 3407,
            augment: AugmentConfig::default(),
            precision: Precision::F64,
            grad_clip: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.scheduler {
            Scheduler::Cosine => 5e-4,
            Scheduler::WarmupMultistep => 3.5e-4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.p < 1 {
            return err(format!("train.p must be >= 1, got {}", self.p));
        }
        if self.k < 2 {
            return err(format!("train.k must be >= 2 so every sample has a positive, got {}", self.k));
        }
        if !(self.base_lr() > 0.0) {
            return err(format!("train.lr must be > 0, got {}", self.base_lr()));
        }
        if !(self.lr_min >= 0.0) {
            return err(format!("train.lr_min must be >= 0, got {}", self.lr_min));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("train.beta1 and train.beta2 must be in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return err("train.adam_eps must be > 0".into());
        }
        if !(self.gamma > 0.0) || !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return err("train.gamma must be > 0 and train.warmup_factor in (0, 1]".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("train.milestones must be increasing, got {:?}", self.milestones));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return err(format!("train.grad_clip must be > 0, got {c}"));
            }
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_p) || !(0.0..=1.0).contains(&a.erase_p) {
            return err("train.augment probabilities must be in [0, 1]".into());
        }
        if !(a.erase_area[0] > 0.0 && a.erase_area[0] <= a.erase_area[1] && a.erase_area[1] < 1.0) {
            return err(format!("train.augment.erase_area must satisfy 0 < min <= max < 1, got {:?}", a.erase_area));
        }
        if !(a.erase_aspect[0] > 0.0 && a.erase_aspect[0] <= a.erase_aspect[1]) {
            return err(format!("train.augment.erase_aspect must satisfy 0 < min <= max, got {:?}", a.erase_aspect));
        }
        Ok(())
    }
}

/// Learning rate for epoch `t` (0-based).
pub fn lr_at(t: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.base_lr();
    match cfg.scheduler {
        Scheduler::Cosine => {
            let horizon = cfg.epochs.max(1) as f64;
            let frac = (t as f64 / horizon).min(1.0);
            cfg.lr_min + 0.5 * (base - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
        Scheduler::WarmupMultistep => {
            let warm = if t < cfg.warmup_epochs {
                let alpha = t as f64 / cfg.warmup_epochs as f64;
                cfg.warmup_factor * (1.0 - alpha) + alpha
            } else {
                1.0
            };
            let passed = cfg.milestones.iter().filter(|&&m| m <= t).count();
            base * warm * cfg.gamma.powi(passed as i32)
        }
    }
}

/// Batches of `p` distinct identities × `k` sample indices.
///
/// Identities are visited in an `rng` permutation and the incomplete last
/// group is dropped. Identities with fewer than `k` samples are drawn with
/// replacement.
pub fn pk_sample<R: Rng>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::invalid(format!(
            "PK sampling needs at least {p} identities, dataset has {}",
            by_id.len()
        )));
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    ids.shuffle(rng);
    let mut batches = Vec::with_capacity(ids.len() / p);
    for group in ids.chunks_exact(p) {
        let mut batch = Vec::with_capacity(p * k);
        for id in group {
            let pool = &by_id[id];
            if pool.len() >= k {
                let mut pick = pool.clone();
                pick.shuffle(rng);
                batch.extend_from_slice(&pick[..k]);
            } else {
                batch.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Augments a `3×H×W` image in place.
pub fn augment<R: Rng>(img: &mut [f64], h: usize, w: usize, rng: &mut R, cfg: &AugmentConfig) {
    debug_assert_eq!(img.len(), 3 * h * w);
    if cfg.flip && rng.random::<f64>() < cfg.flip_p {
        hflip(img, h, w);
    }
    if cfg.crop && cfg.crop_pad > 0 {
        let pad = cfg.crop_pad;
        let oy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let ox = rng.random_range(0..=2 * pad) as isize - pad as isize;
        // Crop of the zero-padded image at offset (oy, ox) from the original origin.
        let src = img.to_vec();
        for c in 0..3 {
            let plane = &src[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + oy;
                    let sx = x as isize + ox;
                    img[(c * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        plane[sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    if cfg.erase && rng.random::<f64>() < cfg.erase_p {
        if let Some((y0, x0, eh, ew)) = erase_box(h, w, rng, cfg) {
            for c in 0..3 {
                for y in y0..y0 + eh {
                    for x in x0..x0 + ew {
                        img[(c * h + y) * w + x] = match cfg.erase_fill {
                            EraseFill::Uniform => rng.random::<f64>(),
                            EraseFill::Zero => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Rejection-samples an erase rectangle `(y, x, height, width)`; gives up
/// after 100 attempts like the usual formulation.
pub fn erase_box<R: Rng>(h: usize, w: usize, rng: &mut R, cfg: &AugmentConfig) -> Option<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = area * rng.random_range(cfg.erase_area[0]..=cfg.erase_area[1]);
        let aspect = rng.random_range(cfg.erase_aspect[0]..=cfg.erase_aspect[1]);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            let y0 = rng.random_range(0..=h - eh);
            let x0 = rng.random_range(0..=w - ew);
            return Some((y0, x0, eh, ew));
        }
    }
    None
}

pub fn hflip(img: &mut [f64], h: usize, w: usize) {
    for row in img.chunks_exact_mut(w).take(3 * h) {
        row.reverse();
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// One update of every learnable tensor; missing gradients count as zero.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if g.len() != p.numel() {
                return Err(Error::shape("adam_step", &[g.len()], p.shape()));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}` at index {i}; step aborted")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let n = p.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Decoded images with contiguous class labels.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Vec<Rgb8>,
    pub keys: Vec<String>,
    /// Class index in `0..num_classes`.
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    pub viewpoints: Vec<usize>,
}

impl ImageSet {
    /// Decodes `samples` and maps their identities to contiguous labels in
    /// ascending id order. Returns the set and the id of each label.
    pub fn from_samples(dataset: &Dataset, samples: &[Sample]) -> Result<(Self, Vec<usize>)> {
        let ids: Vec<usize> = samples.iter().map(|s| s.id).collect::<BTreeSet<_>>().into_iter().collect();
        let index: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let set = Self {
            images: read_images(dataset, samples)?,
            keys: samples.iter().map(|s| s.key.clone()).collect(),
            labels: samples.iter().map(|s| index[&s.id]).collect(),
            cameras: samples.iter().map(|s| s.camera).collect(),
            viewpoints: samples.iter().map(|s| s.viewpoint).collect(),
        };
        Ok((set, ids))
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Batch of the given indices, optionally augmented with `rng`.
    pub fn batch(&self, idx: &[usize], aug: Option<(&AugmentConfig, &mut ChaCha8Rng)>) -> Result<Batch> {
        let (h, w) = (self.images[idx[0]].height, self.images[idx[0]].width);
        let mut data = Vec::with_capacity(idx.len() * 3 * h * w);
        let mut aug = aug;
        for &i in idx {
            let img = &self.images[i];
            if (img.height, img.width) != (h, w) {
                return Err(Error::shape("batch images", &[img.height, img.width], &[h, w]));
            }
            let mut t = img.to_tensor().into_data();
            if let Some((cfg, rng)) = aug.as_mut() {
                augment(&mut t, h, w, *rng, cfg);
            }
            data.extend_from_slice(&t);
        }
        Ok(Batch {
            images: Tensor::new(vec![idx.len(), 3, h, w], data)?,
            keys: idx.iter().map(|&i| self.keys[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            cameras: idx.iter().map(|&i| self.cameras[i]).collect(),
            viewpoints: idx.iter().map(|&i| self.viewpoints[i]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: History,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        Self {
            model,
            adam: Adam::from_config(cfg),
            epoch: 0,
            history: History::default(),
        }
    }
}

/// RNG for epoch `epoch`, independent of how earlier epochs consumed theirs.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub fn round_to_f32(params: &mut ParamSet) {
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }
}

fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// One optimisation step on `batch`; returns the step record values.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<(f64, f64, Option<f64>)> {
    let model = &state.model;
    let mut g = Graph::new(&model.params, &model.buffers, Mode::Train);
    let out = model.forward(&mut g, batch)?;
    let terms = losses::total_loss(&mut g.tape, out.logits, out.features.t, &batch.labels, loss_cfg)?;
    let ce = g.tape.scalar(terms.ce);
    let metric = terms.metric.map(|m| g.tape.scalar(m));
    let total = g.tape.scalar(terms.total);
    let metric_name = match loss_cfg.metric {
        losses::MetricLoss::Supcon => "supcon",
        losses::MetricLoss::Triplet => "triplet",
        losses::MetricLoss::None => "none",
    };
    for (name, v) in [("smooth_ce", Some(ce)), (metric_name, metric)] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss term `{name}` at epoch {} step {}",
                    state.epoch,
                    state.adam.step + 1
                )));
            }
        }
    }
    let mut grads = g.tape.backward(terms.total)?.into_params();
    let updates = std::mem::take(&mut g.bn_updates);
    drop(g);
    if let Some(clip) = cfg.grad_clip {
        let norm = global_norm(&grads);
        if norm > clip {
            let s = clip / norm;
            grads.values_mut().flatten().for_each(|v| *v *= s);
        }
    }
    state.adam.step(&mut state.model.params, &grads, lr)?;
    apply_bn_updates(&mut state.model.buffers, &updates, BN_MOMENTUM)?;
    if cfg.precision == Precision::F32 {
        round_to_f32(&mut state.model.params);
        round_to_f32(&mut state.model.buffers);
    }
    Ok((total, ce, metric))
}

/// Runs epochs `state.epoch..cfg.epochs`, calling `on_epoch` after each.
pub fn fit(
    state: &mut TrainState,
    data: &ImageSet,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() && state.epoch < cfg.epochs {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.precision == Precision::F32 {
        round_to_f32(&mut state.model.params);
        round_to_f32(&mut state.model.buffers);
    }
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_at(epoch, cfg);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let batches = pk_sample(&data.labels, cfg.p, cfg.k, &mut rng)?;
        for idx in &batches {
            let batch = data.batch(idx, Some((&cfg.augment, &mut rng)))?;
            let (loss, ce, metric) = train_step(state, &batch, cfg, loss_cfg, lr)?;
            state.history.steps.push(StepRecord {
                epoch,
                step: state.adam.step as usize,
                lr,
                loss,
                ce,
                metric,
            });
        }
        state.epoch += 1;
        on_epoch(state)?;
    }
    Ok(())
}
