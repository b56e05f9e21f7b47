//! Finite-difference validation of the analytic gradients.
//!
//! The matching and the Gaussian are frozen at the unperturbed parameters,
//! so the checked function is the joint loss as a smooth function of the
//! network parameters.

use rand::Rng;

use super::loss::{joint_loss, scene_loss};
use super::{forward, Affine, Detector, DetectorParams, ModelConfig, TrainConfig};
use crate::data::{Annotation, Candidate, Label, Scene, Split};
use crate::error::Result;
use crate::geometry::BBox;
use crate::matching::{detr_match, MatchResult};
use crate::objectness::GaussianState;
use crate::rng;

pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    pub max_rel_error: f64,
    /// `(tensor, entry)` of the worst parameter.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub parameters: usize,
}

fn frozen_loss(
    detector: &Detector,
    params: &DetectorParams,
    batch: &[&Scene],
    matches: &[MatchResult],
    cfg: &TrainConfig,
    grads: Option<&mut DetectorParams>,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut grads = grads;
    let (mut lc, mut lb, mut lo) = (0.0, 0.0, 0.0);
    for (scene, matching) in batch.iter().zip(matches) {
        let pass = forward(params, detector.anchor_boxes, scene)?;
        let targets = detector.targets(scene)?;
        let features: Vec<&[f64]> = scene.candidates.iter().map(|c| c.feature.as_slice()).collect();
        let l = scene_loss(
            params,
            &detector.gaussian,
            &features,
            &pass,
            &targets,
            matching,
            &cfg.loss,
            cfg.alpha,
            scale,
            grads.as_deref_mut(),
        )?;
        lc += scale * l.classification;
        lb += scale * l.boxes;
        lo += scale * l.objectness;
    }
    Ok(joint_loss(lc, lb, lo, cfg.alpha))
}

/// Matching of every scene at the detector's current parameters.
pub fn current_matches(detector: &Detector, batch: &[&Scene], cfg: &TrainConfig) -> Result<Vec<MatchResult>> {
    batch
        .iter()
        .map(|s| {
            let pass = forward(&detector.params, detector.anchor_boxes, s)?;
            detr_match(&pass.class_probs, &pass.boxes, &detector.targets(s)?, cfg.matching)
        })
        .collect()
}

/// Joint loss and its analytic gradient for a fixed matching.
pub fn analytic_gradient(
    detector: &Detector,
    batch: &[&Scene],
    matches: &[MatchResult],
    cfg: &TrainConfig,
) -> Result<(f64, DetectorParams)> {
    let mut grads = detector.params.zeros_like();
    let loss = frozen_loss(detector, &detector.params, batch, matches, cfg, Some(&mut grads))?;
    Ok((loss, grads))
}

/// Central differences of the joint loss for every parameter.
pub fn numeric_gradient(
    detector: &Detector,
    batch: &[&Scene],
    matches: &[MatchResult],
    cfg: &TrainConfig,
    step: f64,
) -> Result<DetectorParams> {
    let mut numeric = detector.params.zeros_like();
    let mut probe = detector.params.clone();
    let shapes: Vec<usize> = detector.params.tensors().iter().map(|t| t.len()).collect();
    for (t, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + step;
            let plus = frozen_loss(detector, &probe, batch, matches, cfg, None)?;
            probe.tensors_mut()[t][i] = orig - step;
            let minus = frozen_loss(detector, &probe, batch, matches, cfg, None)?;
            probe.tensors_mut()[t][i] = orig;
            numeric.tensors_mut()[t][i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(numeric)
}

/// Max relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn compare(analytic: &DetectorParams, numeric: &DetectorParams) -> GradientReport {
    let mut report = GradientReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        parameters: analytic.num_parameters(),
    };
    for (t, (a, n)) in analytic.tensors().iter().zip(numeric.tensors()).enumerate() {
        for (i, (&x, &y)) in a.iter().zip(n.iter()).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-8);
            let err = (x - y).abs() / denom;
            if err > report.max_rel_error || err.is_nan() {
                report = GradientReport {
                    max_rel_error: err,
                    worst: (t, i),
                    analytic: x,
                    numeric: y,
                    ..report
                };
            }
        }
    }
    report
}

/// Compares every analytic gradient of the joint loss with central finite
/// differences.
pub fn gradient_check(detector: &Detector, batch: &[&Scene], cfg: &TrainConfig) -> Result<GradientReport> {
    let matches = current_matches(detector, batch, cfg)?;
    let (_, analytic) = analytic_gradient(detector, batch, &matches, cfg)?;
    let numeric = numeric_gradient(detector, batch, &matches, cfg, FD_STEP)?;
    Ok(compare(&analytic, &numeric))
}

/// A small random detector and batch for gradient checks and smoke training.
pub struct ToyProblem {
    pub detector: Detector,
    pub scenes: Vec<Scene>,
}

impl ToyProblem {
    pub fn batch(&self) -> Vec<&Scene> {
        self.scenes.iter().collect()
    }
}

/// Builds a toy problem with `F, H, D <= 8` and at most 6 slots per scene.
/// Every parameter is random (including the box head) so all gradient paths
/// are exercised.
pub fn toy_problem(seed: u64, num_scenes: usize, slots: usize) -> ToyProblem {
    let mut rng = rng::stream(seed, 0);
    let feature_dim = rng.random_range(3..=8);
    let cfg = ModelConfig {
        hidden_dim: rng.random_range(3..=8),
        embed_dim: rng.random_range(2..=8),
        anchor_boxes: rng.random_bool(0.5),
    };
    let classes = rng.random_range(1..=3);
    let mut params = DetectorParams::init(feature_dim, classes, &cfg, &mut rng);
    params.box_head = Affine::glorot(cfg.embed_dim, 4, &mut rng);
    for b in params.tensors_mut().into_iter().skip(1).step_by(2) {
        b.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    let gaussian = GaussianState {
        mu: (0..cfg.embed_dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
        sigma: (0..cfg.embed_dim).map(|_| rng.random_range(0.3..2.0)).collect(),
        momentum: 0.1,
        eps: 1e-6,
    };
    let random_box = |rng: &mut rng::Rng| BBox {
        cx: rng.random_range(0.2..0.8),
        cy: rng.random_range(0.2..0.8),
        w: rng.random_range(0.1..0.4),
        h: rng.random_range(0.1..0.4),
    };
    let scenes = (0..num_scenes)
        .map(|i| {
            let candidates = (0..slots)
                .map(|_| Candidate {
                    feature: (0..feature_dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
                    bbox: random_box(&mut rng),
                })
                .collect();
            let n_targets = rng.random_range(1..=slots.min(3));
            let annotations = (0..n_targets)
                .map(|_| Annotation {
                    label: Label::Class(rng.random_range(0..classes)),
                    bbox: random_box(&mut rng),
                })
                .collect();
            Scene {
                scene_id: i as u64,
                task: 0,
                split: Split::Train,
                candidates,
                annotations,
            }
        })
        .collect();
    ToyProblem {
        detector: Detector {
            params,
            gaussian,
            known_classes: (0..classes).collect(),
            anchor_boxes: cfg.anchor_boxes,
        },
        scenes,
    }
}
