//! Detection losses and their analytic gradients.

use serde::{Deserialize, Serialize};

use super::{DetectorParams, ForwardPass};
use crate::error::{Error, Result};
use crate::geometry::{giou, giou_with_grad, BBox};
use crate::matching::{MatchResult, MatchTarget};
use crate::objectness::GaussianState;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
        }
    }
}

/// Sigmoid focal loss of one probability against a binary target, with its
/// derivative with respect to `p` (zero where the clamp is active).
fn focal_with_grad(p: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let active = pc == p;
    if positive {
        let one_m = 1.0 - pc;
        let loss = -alpha * one_m.powf(gamma) * pc.ln();
        let d = alpha * (gamma * one_m.powf(gamma - 1.0) * pc.ln() - one_m.powf(gamma) / pc);
        (loss, if active { d } else { 0.0 })
    } else {
        let one_m = 1.0 - pc;
        let loss = -(1.0 - alpha) * pc.powf(gamma) * one_m.ln();
        let d = -(1.0 - alpha) * (gamma * pc.powf(gamma - 1.0) * one_m.ln() - pc.powf(gamma) / one_m);
        (loss, if active { d } else { 0.0 })
    }
}

/// `-a (1-p)^g ln p` for a positive target, `-(1-a) p^g ln(1-p)` for a
/// negative one.
pub fn sigmoid_focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(focal_with_grad(p, positive, alpha, gamma).0)
}

/// `w_l1 |pred - target|_1 + w_giou (1 - giou(pred, target))`.
pub fn box_regression_loss(pred: &BBox, target: &BBox, l1_weight: f64, giou_weight: f64) -> Result<f64> {
    pred.validate()?;
    target.validate()?;
    Ok(l1_weight * pred.l1_distance(target) + giou_weight * (1.0 - giou(pred, target)?))
}

/// `Lc + Lb + alpha Lo`.
pub fn joint_loss(classification: f64, boxes: f64, objectness: f64, alpha: f64) -> f64 {
    classification + boxes + alpha * objectness
}

/// Per-scene loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SceneLoss {
    pub classification: f64,
    pub boxes: f64,
    pub objectness: f64,
}

/// Loss of one scene for a fixed matching and a frozen Gaussian.
///
/// When `grads` is given, `scale * dL/dθ` of the joint loss is accumulated
/// into it. Unmatched slots only contribute background classification terms.
#[allow(clippy::too_many_arguments)]
pub fn scene_loss(
    params: &DetectorParams,
    gaussian: &GaussianState,
    features: &[&[f64]],
    pass: &ForwardPass,
    targets: &[MatchTarget],
    matching: &MatchResult,
    cfg: &LossConfig,
    alpha: f64,
    scale: f64,
    grads: Option<&mut DetectorParams>,
) -> Result<SceneLoss> {
    let slots = pass.queries.len();
    let mut matched_target = vec![None; slots];
    for &(p, t) in &matching.pairs {
        matched_target[p] = Some(&targets[t]);
    }

    let mut out = SceneLoss::default();
    let mut grads = grads;
    for slot in 0..slots {
        let probs = &pass.class_probs[slot];
        let q = &pass.queries[slot];
        let target = matched_target[slot];

        let mut dz = vec![0.0; probs.len()];
        for (k, &p) in probs.iter().enumerate() {
            let positive = target.is_some_and(|t| t.class == k);
            let (l, dp) = focal_with_grad(p, positive, cfg.focal_alpha, cfg.focal_gamma);
            out.classification += l;
            dz[k] = dp * p * (1.0 - p);
        }

        let mut ds = [0.0; 4];
        let mut dq_obj = None;
        if let Some(t) = target {
            let b = pass.boxes[slot];
            let (g, dg) = giou_with_grad(&b, &t.bbox)?;
            out.boxes += cfg.l1_weight * b.l1_distance(&t.bbox) + cfg.giou_weight * (1.0 - g);
            let (pb, tb) = (b.as_array(), t.bbox.as_array());
            for k in 0..4 {
                let diff = pb[k] - tb[k];
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let db = cfg.l1_weight * sign - cfg.giou_weight * dg[k];
                ds[k] = db * pb[k] * (1.0 - pb[k]);
            }
            out.objectness += gaussian.mahalanobis_sq_unchecked(q);
            if alpha != 0.0 {
                dq_obj = Some(
                    q.iter()
                        .zip(&gaussian.mu)
                        .zip(&gaussian.sigma)
                        .map(|((x, m), s)| alpha * 2.0 * (x - m) / s)
                        .collect::<Vec<f64>>(),
                );
            }
        }

        let Some(grads) = grads.as_deref_mut() else {
            continue;
        };
        dz.iter_mut().for_each(|v| *v *= scale);
        ds.iter_mut().for_each(|v| *v *= scale);
        let mut dq = params.cls_head.backward(q, &dz, &mut grads.cls_head);
        if target.is_some() {
            let dq_box = params.box_head.backward(q, &ds, &mut grads.box_head);
            dq.iter_mut().zip(dq_box).for_each(|(a, b)| *a += b);
        }
        if let Some(obj) = dq_obj {
            dq.iter_mut().zip(obj).for_each(|(a, b)| *a += scale * b);
        }
        let h = &pass.hidden[slot];
        let dh = params.encoder_out.backward(h, &dq, &mut grads.encoder_out);
        let da: Vec<f64> = dh.iter().zip(h).map(|(g, hv)| g * (1.0 - hv * hv)).collect();
        params
            .encoder_hidden
            .backward(features[slot], &da, &mut grads.encoder_hidden);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_examples() {
        assert!(sigmoid_focal_loss(1.0, true, 0.25, 2.0).unwrap() < 1e-20);
        let l = sigmoid_focal_loss(0.5, true, 0.25, 2.0).unwrap();
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.043322).abs() < 5e-7);
        let l = sigmoid_focal_loss(0.5, false, 0.25, 2.0).unwrap();
        assert!((l - 0.75 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.129966).abs() < 1e-6);
        assert!(matches!(
            sigmoid_focal_loss(1.5, true, 0.25, 2.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn focal_derivative_matches_central_differences() {
        let h = 1e-6;
        for &p in &[0.03, 0.2, 0.5, 0.77, 0.96] {
            for positive in [true, false] {
                let (_, d) = focal_with_grad(p, positive, 0.25, 2.0);
                let fd = (focal_with_grad(p + h, positive, 0.25, 2.0).0
                    - focal_with_grad(p - h, positive, 0.25, 2.0).0)
                    / (2.0 * h);
                assert!((fd - d).abs() <= 1e-6 * d.abs().max(1.0), "p={p} {fd} {d}");
            }
        }
    }

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        crate::geometry::Corners::new(x1, y1, x2, y2).unwrap().to_center()
    }

    #[test]
    fn box_loss_examples() {
        let a = corners(0.0, 0.0, 1.0, 1.0);
        assert_eq!(box_regression_loss(&a, &a, 5.0, 2.0).unwrap(), 0.0);
        let b = corners(2.0, 0.0, 3.0, 1.0);
        let l = box_regression_loss(&a, &b, 0.0, 1.0).unwrap();
        assert!((l - 4.0 / 3.0).abs() < 1e-15);
        let one = box_regression_loss(&a, &b, 1.0, 0.0).unwrap();
        let two = box_regression_loss(&a, &b, 2.0, 0.0).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(0.0, 0.0, 0.0, 0.7), 0.0);
        assert!((joint_loss(1.0, 2.0, 3.0, 0.1) - 3.3).abs() < 1e-15);
        assert_eq!(joint_loss(1.0, 2.0, 3.0, 0.0), 3.0);
    }
}
