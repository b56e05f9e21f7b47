//! Alternating training step and optimizer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{joint_loss, scene_loss, LossConfig};
use super::{forward, Detector, DetectorParams};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::matching::{detr_match, MatchWeights};
use crate::objectness::{DEFAULT_MOMENTUM, DEFAULT_TAU};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// EMA momentum of the objectness Gaussian.
    pub momentum: f64,
    pub variance_floor: f64,
    /// Inference temperature; training never reads it.
    pub tau: f64,
    /// Weight of the objectness loss.
    pub alpha: f64,
    pub epochs: usize,
    /// Learning rate is divided by 10 from this epoch on.
    pub lr_drop_epoch: usize,
    pub finetune_epochs: usize,
    pub loss: LossConfig,
    pub matching: MatchWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            batch_size: 5,
            momentum: DEFAULT_MOMENTUM,
            variance_floor: 1e-6,
            tau: DEFAULT_TAU,
            alpha: 0.003,
            epochs: 100,
            lr_drop_epoch: 80,
            finetune_epochs: 80,
            loss: LossConfig::default(),
            matching: MatchWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::config("momentum must lie in (0, 1]"));
        }
        if self.variance_floor.is_nan() || self.variance_floor <= 0.0 {
            return Err(Error::config("variance_floor must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha must be non-negative"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &DetectorParams, cfg: &TrainConfig) -> Self {
        let zeros = |p: &DetectorParams| p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut DetectorParams, grads: &DetectorParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= self.lr * (update + self.weight_decay * p[i]);
            }
        }
    }
}

/// Batch-mean loss components reported by a training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub boxes: f64,
    pub objectness: f64,
    pub total: f64,
}

/// One alternating step on a batch of labeled scenes:
///
/// 1. forward every scene;
/// 2. update the Gaussian by EMA on all query embeddings of the batch;
/// 3. match each scene's slots to its targets;
/// 4. evaluate the losses against the updated, now frozen, Gaussian;
/// 5. backpropagate into the network (the Gaussian gets no gradient);
/// 6. apply one Adam update.
pub fn train_step(
    detector: &mut Detector,
    optimizer: &mut Adam,
    batch: &[&Scene],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::domain("training step needs a non-empty batch"));
    }
    let passes = batch
        .iter()
        .map(|s| forward(&detector.params, detector.anchor_boxes, s))
        .collect::<Result<Vec<_>>>()?;

    let all_queries: Vec<&[f64]> = passes
        .iter()
        .flat_map(|p| p.queries.iter().map(Vec::as_slice))
        .collect();
    detector.gaussian.ema_update_in_place(&all_queries)?;

    let scale = 1.0 / batch.len() as f64;
    let mut grads = detector.params.zeros_like();
    let mut out = LossBreakdown::default();
    for (scene, pass) in batch.iter().zip(&passes) {
        let targets = detector.targets(scene)?;
        let matching = detr_match(&pass.class_probs, &pass.boxes, &targets, cfg.matching)?;
        let features: Vec<&[f64]> = scene.candidates.iter().map(|c| c.feature.as_slice()).collect();
        let l = scene_loss(
            &detector.params,
            &detector.gaussian,
            &features,
            pass,
            &targets,
            &matching,
            &cfg.loss,
            cfg.alpha,
            scale,
            Some(&mut grads),
        )?;
        out.classification += scale * l.classification;
        out.boxes += scale * l.boxes;
        out.objectness += scale * l.objectness;
    }
    out.total = joint_loss(out.classification, out.boxes, out.objectness, cfg.alpha);

    optimizer.apply(&mut detector.params, &grads);
    if !detector.params.is_finite() {
        return Err(Error::domain("parameters diverged to non-finite values"));
    }
    Ok(out)
}

/// Mean loss per epoch.
pub type LossCurve = Vec<LossBreakdown>;

/// Runs `epochs` passes over `scenes` in seeded shuffled order. The learning
/// rate is `lr` until `lr_drop_epoch` and `lr / 10` afterwards.
pub fn train_epochs(
    detector: &mut Detector,
    scenes: &[&Scene],
    epochs: usize,
    lr: f64,
    lr_drop_epoch: usize,
    stream: u64,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    let mut optimizer = Adam::new(&detector.params, cfg);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        optimizer.lr = if epoch >= lr_drop_epoch { lr / 10.0 } else { lr };
        let mut shuffle = rng::stream(rng::mix(cfg.seed, stream), epoch as u64);
        order.shuffle(&mut shuffle);
        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| scenes[i]).collect();
            let l = train_step(detector, &mut optimizer, &batch, cfg)?;
            sum.classification += l.classification;
            sum.boxes += l.boxes;
            sum.objectness += l.objectness;
            sum.total += l.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        curve.push(LossBreakdown {
            classification: sum.classification / n,
            boxes: sum.boxes / n,
            objectness: sum.objectness / n,
            total: sum.total / n,
        });
    }
    Ok(curve)
}
