//! Multi-label loss, Adam, cosine learning-rate schedule and the training
//! loop.
//!
//! Training is fully deterministic given the run seed: data shuffling,
//! augmentation draws and weight init all come from derived counter-RNG
//! streams, and execution is single-threaded.

use crate::acam::{self, AcamVariant};
use crate::backbone::{self, ModelConfig, ModelParams};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{self, Scoring};
use crate::synthdata::{AugmentConfig, SyntheticDataset};
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Mean binary cross-entropy of multi-hot labels on raw logits (stable
/// log-sum-exp form). Convenience wrapper over the tape op for callers that
/// only need the value.
pub fn bce_loss(logits: &Tensor, labels: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone(), false);
    let y = tape.leaf(labels.clone(), false);
    let loss = tape.bce_with_logits(z, y)?;
    Ok(tape.value(loss).data()[0])
}

/// Cosine schedule from `lr_max` at step 0 to `lr_min` at `total_steps`;
/// steps past the end clamp to `lr_min`. Endpoints are exact.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> f64 {
    if step == 0 {
        return lr_max;
    }
    if step >= total_steps {
        return lr_min;
    }
    let progress = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<(String, Tensor)>,
    v: Vec<(String, Tensor)>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let m = params.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec()))).collect();
        let v = params.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec()))).collect();
        AdamState { step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[(String, Tensor)], &[(String, Tensor)]) {
        (&self.m, &self.v)
    }

    pub fn from_parts(
        params: &ModelParams,
        step: u64,
        m: Vec<(String, Tensor)>,
        v: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        for moments in [&m, &v] {
            if moments.len() != params.iter().count() {
                return Err(Error::Config("optimizer state does not cover every parameter".into()));
            }
            for ((pn, pt), (mn, mt)) in params.iter().zip(moments.iter()) {
                if pn != mn || pt.shape() != mt.shape() {
                    return Err(Error::Config(format!(
                        "optimizer moment '{mn}' does not mirror parameter '{pn}'"
                    )));
                }
            }
        }
        Ok(AdamState { step, m, v })
    }
}

/// One bias-corrected Adam update over every parameter, consuming the
/// gradients attached to the parameter tensors. Rejects non-finite
/// gradients before touching any state.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step", detail: format!("gradient of '{name}'") });
            }
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (idx, (name, p)) in params.iter_mut().enumerate() {
        let Some(grad) = p.grad().map(<[f32]>::to_vec) else { continue };
        debug_assert_eq!(state.m[idx].0, name);
        let m = state.m[idx].1.data_mut();
        let v = state.v[idx].1.data_mut();
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            data[i] = (data[i] as f64 - update) as f32;
        }
        p.clear_grad();
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: AcamVariant,
    pub augment: bool,
    /// Evaluate validation mAP every this many epochs (0 = never).
    #[serde(default)]
    pub val_every: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Toy defaults; the full-scale schedule (0.02 to 0.0001) stays
    /// configurable but is far too hot for a from-scratch toy model.
    pub fn toy(variant: AcamVariant, total_steps: u64, seed: u64) -> Self {
        TrainConfig {
            lr_max: 3e-3,
            lr_min: 1e-5,
            total_steps,
            batch_size: 8,
            seed,
            variant,
            augment: true,
            val_every: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= self.lr_min && self.lr_min > 0.0) {
            return Err(Error::Config(format!(
                "training: need lr_max >= lr_min > 0, got max {} min {}",
                self.lr_max, self.lr_min
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("training: total_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training: batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn steps_for_epochs(epochs: usize, dataset_len: usize, batch_size: usize) -> u64 {
    (epochs * dataset_len.div_ceil(batch_size)) as u64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_map: Option<f64>,
    pub lr: f64,
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub opt: AdamState,
    pub history: Vec<EpochStats>,
    pub steps_run: u64,
}

/// Compute the batch loss and attach accumulated gradients (mean over the
/// batch) to the parameter tensors.
fn train_batch(
    cfg: &ModelConfig,
    params: &mut ModelParams,
    variant: AcamVariant,
    batch: &[(Tensor, Vec<crate::acam::ActorBox>, Tensor)],
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f32;
    let mut total_loss = 0.0f64;
    let mut acc: Vec<Option<Vec<f32>>> = vec![None; params.iter().count()];
    for (video, boxes, labels) in batch {
        let mut tape = Tape::new();
        let vars = backbone::push_params(&mut tape, params, true);
        let ordered: Vec<_> = params.names().map(|n| vars[n]).collect();
        let video_var = tape.leaf(video.clone(), false);
        let labels_var = tape.leaf(labels.clone(), false);
        let feature_map = backbone::head_forward_vars(&mut tape, cfg, &vars, video_var)?;
        let logits = acam::forward_variant_vars(&mut tape, cfg, &vars, variant, feature_map, boxes)?;
        let loss = tape.bce_with_logits(logits, labels_var)?;
        let loss_val = tape.value(loss).data()[0] as f64;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite { op: "train", detail: format!("loss {loss_val}") });
        }
        total_loss += loss_val;
        tape.backward(loss)?;
        for (slot, var) in acc.iter_mut().zip(&ordered) {
            if let Some(g) = tape.take_grad(*var) {
                match slot {
                    Some(buf) => {
                        for (b, gi) in buf.iter_mut().zip(&g) {
                            *b += gi * scale;
                        }
                    }
                    None => {
                        let mut g = g;
                        g.iter_mut().for_each(|v| *v *= scale);
                        *slot = Some(g);
                    }
                }
            }
        }
    }
    for ((_, p), slot) in params.iter_mut().zip(acc) {
        if let Some(g) = slot {
            p.set_grad(g)?;
        }
    }
    Ok(total_loss / batch.len() as f64)
}

/// Train one variant on an in-memory dataset.
///
/// When `ckpt_dir` is given, a checkpoint is written after init and after
/// every epoch, so a non-finite loss aborts with the last good checkpoint
/// still on disk.
pub fn train(
    model_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &SyntheticDataset,
    val: Option<&SyntheticDataset>,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutput> {
    model_cfg.validate()?;
    tcfg.validate()?;
    if data.segments.is_empty() {
        return Err(Error::Data("train: dataset is empty".into()));
    }
    if data.catalog.len() != model_cfg.num_classes {
        return Err(Error::Config(format!(
            "train: dataset has {} classes but model expects {}",
            data.catalog.len(),
            model_cfg.num_classes
        )));
    }

    let mut params = ModelParams::init(model_cfg, tcfg.variant, crate::rng::derive(tcfg.seed, 0x706172616d73));
    let mut opt = AdamState::new(&params);
    let aug_cfg = AugmentConfig::default();

    if let Some(dir) = ckpt_dir {
        checkpoint::save(dir, &params, Some(&opt), 0)?;
    }

    let steps_per_epoch = data.segments.len().div_ceil(tcfg.batch_size);
    let mut history = Vec::new();
    let mut step: u64 = 0;
    let mut epoch = 0usize;

    'outer: while step < tcfg.total_steps {
        epoch += 1;
        let mut order: Vec<usize> = (0..data.segments.len()).collect();
        let mut shuffle_rng =
            crate::rng::Rng::from_seed_and_tag(crate::rng::derive(tcfg.seed, 0x73687566666c65), epoch as u64);
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0f64;
        let mut epoch_steps = 0usize;
        let mut last_lr = cosine_lr(step, tcfg.total_steps, tcfg.lr_max, tcfg.lr_min);
        for chunk in order.chunks(tcfg.batch_size) {
            if step >= tcfg.total_steps {
                break;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let seg = &data.segments[idx];
                let seg = if tcfg.augment {
                    let aug_seed = crate::rng::derive(
                        crate::rng::derive(tcfg.seed, 0x6167),
                        ((epoch as u64) << 32) | idx as u64,
                    );
                    crate::synthdata::augment(seg, &aug_cfg, aug_seed)?
                } else {
                    seg.clone()
                };
                let boxes: Vec<_> = seg.actors.iter().map(|a| a.bbox).collect();
                let labels = crate::synthdata::label_matrix(&seg);
                batch.push((seg.video, boxes, labels));
            }
            let lr = cosine_lr(step, tcfg.total_steps, tcfg.lr_max, tcfg.lr_min);
            last_lr = lr;
            let loss = match train_batch(model_cfg, &mut params, tcfg.variant, &batch) {
                Ok(l) => l,
                Err(Error::NonFinite { detail, .. }) => {
                    let retained = ckpt_dir
                        .map(|d| format!("; last good checkpoint retained at {}", d.display()))
                        .unwrap_or_default();
                    return Err(Error::NonFinite {
                        op: "train",
                        detail: format!("{detail} at step {step}{retained}"),
                    });
                }
                Err(e) => return Err(e),
            };
            adam_step(&mut params, &mut opt, &tcfg.adam, lr)?;
            epoch_loss += loss;
            epoch_steps += 1;
            step += 1;
        }

        let val_map = match (val, tcfg.val_every) {
            (Some(vset), every) if every > 0 && epoch % every == 0 => {
                let report = evaluation::map_eval(vset, &Scoring::model(model_cfg, &params))?;
                Some(report.map)
            }
            _ => None,
        };
        history.push(EpochStats {
            epoch,
            mean_loss: epoch_loss / epoch_steps.max(1) as f64,
            val_map,
            lr: last_lr,
        });
        if let Some(dir) = ckpt_dir {
            checkpoint::save(dir, &params, Some(&opt), step)?;
        }
        if epoch_steps < steps_per_epoch {
            break 'outer;
        }
    }

    Ok(TrainOutput { params, opt, history, steps_run: step })
}

/// Serialize per-epoch history as the `history.json` document.
pub fn history_json(history: &[EpochStats]) -> Result<String> {
    Ok(serde_json::to_string_pretty(history)?)
}
