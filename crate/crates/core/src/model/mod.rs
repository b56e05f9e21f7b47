//! Toy set-prediction detector.
//!
//! Every candidate slot of a scene goes through the same encoder
//! (`tanh(W1 x + b1)` followed by an affine map to the embedding width), giving
//! one query embedding per slot. Three consumers read the embedding: a sigmoid
//! classification head over the currently known classes, a box head, and the
//! Gaussian objectness density.
//!
//! The box head predicts in logit space. With `anchor_boxes` enabled the
//! logit of the candidate's proposal box is added before the sigmoid, so the
//! head learns a refinement of the proposal; otherwise it regresses absolute
//! coordinates.

pub mod gradcheck;
pub mod loss;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, Scene};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matching::MatchTarget;
use crate::objectness::{check_tau, GaussianState, DEFAULT_TAU};

pub use loss::{box_regression_loss, joint_loss, sigmoid_focal_loss, LossConfig};
pub use train::{train_step, Adam, LossBreakdown, TrainConfig};

/// Architecture sizes. The class count comes from the task schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub anchor_boxes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 16,
            embed_dim: 8,
            anchor_boxes: true,
        }
    }
}

/// Dense layer `y = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Affine {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Affine {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| rng.random_range(-a..a)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Affine) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = o * self.inputs;
            for i in 0..self.inputs {
                grad.weight[row + i] += g * x[i];
                dx[i] += g * self.weight[row + i];
            }
        }
        dx
    }

    /// Weight rows as nested vectors.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.weight
            .chunks_exact(self.inputs.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineRepr {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Serialize for Affine {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        AffineRepr {
            weight: self.rows(),
            bias: self.bias.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Affine {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = AffineRepr::deserialize(d)?;
        let outputs = repr.weight.len();
        let inputs = repr.weight.first().map_or(0, Vec::len);
        if repr.weight.iter().any(|r| r.len() != inputs) || repr.bias.len() != outputs {
            return Err(D::Error::custom("inconsistent affine layer shape"));
        }
        Ok(Affine {
            inputs,
            outputs,
            weight: repr.weight.concat(),
            bias: repr.bias,
        })
    }
}

/// Learnable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    pub encoder_hidden: Affine,
    pub encoder_out: Affine,
    pub cls_head: Affine,
    pub box_head: Affine,
}

/// Prior probability of the classification head at initialization.
const CLASS_PRIOR: f64 = 0.01;

impl DetectorParams {
    pub fn init(feature_dim: usize, num_classes: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut cls_head = Affine::glorot(cfg.embed_dim, num_classes, rng);
        cls_head.bias.fill(-((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln());
        DetectorParams {
            encoder_hidden: Affine::glorot(feature_dim, cfg.hidden_dim, rng),
            encoder_out: Affine::glorot(cfg.hidden_dim, cfg.embed_dim, rng),
            cls_head,
            box_head: Affine::zeros(cfg.embed_dim, 4),
        }
    }

    /// Same shapes, all zero.
    pub fn zeros_like(&self) -> Self {
        let z = |a: &Affine| Affine::zeros(a.inputs, a.outputs);
        DetectorParams {
            encoder_hidden: z(&self.encoder_hidden),
            encoder_out: z(&self.encoder_out),
            cls_head: z(&self.cls_head),
            box_head: z(&self.box_head),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder_hidden.inputs
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder_out.outputs
    }

    pub fn num_classes(&self) -> usize {
        self.cls_head.outputs
    }

    pub fn tensors(&self) -> [&Vec<f64>; 8] {
        [
            &self.encoder_hidden.weight,
            &self.encoder_hidden.bias,
            &self.encoder_out.weight,
            &self.encoder_out.bias,
            &self.cls_head.weight,
            &self.cls_head.bias,
            &self.box_head.weight,
            &self.box_head.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.encoder_hidden.weight,
            &mut self.encoder_hidden.bias,
            &mut self.encoder_out.weight,
            &mut self.encoder_out.bias,
            &mut self.cls_head.weight,
            &mut self.cls_head.bias,
            &mut self.box_head.weight,
            &mut self.box_head.bias,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Appends freshly initialized classification rows for newly introduced
    /// classes; existing rows are kept.
    pub fn grow_classes(&mut self, num_classes: usize, rng: &mut impl Rng) {
        let old = self.cls_head.outputs;
        if num_classes <= old {
            return;
        }
        let fresh = Affine::glorot(self.cls_head.inputs, num_classes - old, rng);
        self.cls_head.weight.extend(fresh.weight);
        self.cls_head.bias.extend(std::iter::repeat_n(
            -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln(),
            num_classes - old,
        ));
        self.cls_head.outputs = num_classes;
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Parameters, objectness density, and the class list the head is indexed by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detector {
    pub params: DetectorParams,
    pub gaussian: GaussianState,
    /// `known_classes[k]` is the dataset class behind head output `k`.
    pub known_classes: Vec<usize>,
    pub anchor_boxes: bool,
}

impl Detector {
    /// Fresh detector for `known_classes` with a unit Gaussian.
    pub fn init(
        feature_dim: usize,
        known_classes: Vec<usize>,
        model: &ModelConfig,
        momentum: f64,
        variance_floor: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if model.hidden_dim == 0 || model.embed_dim == 0 {
            return Err(Error::config("hidden_dim and embed_dim must be positive"));
        }
        Ok(Detector {
            params: DetectorParams::init(feature_dim, known_classes.len(), model, rng),
            gaussian: GaussianState::new(model.embed_dim, momentum, variance_floor)?,
            known_classes,
            anchor_boxes: model.anchor_boxes,
        })
    }

    /// Adds head outputs for classes not yet known, in the given order.
    pub fn introduce_classes(&mut self, classes: &[usize], rng: &mut impl Rng) {
        for &c in classes {
            if self.head_index(c).is_none() {
                self.known_classes.push(c);
            }
        }
        self.params.grow_classes(self.known_classes.len(), rng);
    }

    pub fn head_index(&self, class: usize) -> Option<usize> {
        self.known_classes.iter().position(|&c| c == class)
    }

    /// Converts a scene's annotations into matcher targets. Every label must
    /// be a currently known class.
    pub fn targets(&self, scene: &Scene) -> Result<Vec<MatchTarget>> {
        scene
            .annotations
            .iter()
            .map(|a| match a.label {
                Label::Class(c) => self
                    .head_index(c)
                    .map(|class| MatchTarget { class, bbox: a.bbox })
                    .ok_or_else(|| Error::domain(format!("training label {c} is not a known class"))),
                Label::Unknown => Err(Error::domain("unknown-marked object used as training target")),
            })
            .collect()
    }
}

/// Intermediate values of one scene's forward pass, kept for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub hidden: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
    pub class_probs: Vec<Vec<f64>>,
    pub boxes: Vec<BBox>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

/// Runs the encoder and both heads on every candidate slot of `scene`.
pub fn forward(params: &DetectorParams, anchor_boxes: bool, scene: &Scene) -> Result<ForwardPass> {
    let n = scene.candidates.len();
    let mut pass = ForwardPass {
        hidden: Vec::with_capacity(n),
        queries: Vec::with_capacity(n),
        class_probs: Vec::with_capacity(n),
        boxes: Vec::with_capacity(n),
    };
    for cand in &scene.candidates {
        if cand.feature.len() != params.feature_dim() {
            return Err(Error::domain(format!(
                "candidate feature has {} dimensions, encoder expects {}",
                cand.feature.len(),
                params.feature_dim()
            )));
        }
        let hidden: Vec<f64> = params
            .encoder_hidden
            .forward(&cand.feature)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let q = params.encoder_out.forward(&hidden);
        let probs = params.cls_head.forward(&q).into_iter().map(sigmoid).collect();
        let mut s = params.box_head.forward(&q);
        if anchor_boxes {
            for (v, p) in s.iter_mut().zip(cand.bbox.as_array()) {
                *v += logit(p);
            }
        }
        pass.boxes.push(BBox {
            cx: sigmoid(s[0]),
            cy: sigmoid(s[1]),
            w: sigmoid(s[2]),
            h: sigmoid(s[3]),
        });
        pass.hidden.push(hidden);
        pass.queries.push(q);
        pass.class_probs.push(probs);
    }
    Ok(pass)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub tau: f64,
    /// Detections scoring below this are dropped before `top_k`.
    pub conf_threshold: f64,
    /// Detections kept per scene.
    pub top_k: usize,
    /// When false, objectness is taken as 1 for every slot.
    pub use_objectness: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            tau: DEFAULT_TAU,
            conf_threshold: 0.0,
            top_k: 10,
            use_objectness: true,
        }
    }
}

/// One scored slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub slot: usize,
    /// `f_cls,k * f_obj` for each known head output.
    pub class_scores: Vec<f64>,
    /// `f_obj * (1 - max_k f_cls,k)`.
    pub unknown_score: f64,
    pub objectness: f64,
    pub bbox: BBox,
    /// Best label for the slot and its score.
    pub label: Label,
    pub score: f64,
}

/// Scores every slot, keeps each slot's best label (known class or unknown),
/// sorts by score, filters by the confidence threshold and keeps `top_k`.
pub fn predict(detector: &Detector, scene: &Scene, cfg: &InferenceConfig) -> Result<Vec<Prediction>> {
    check_tau(cfg.tau)?;
    let pass = forward(&detector.params, detector.anchor_boxes, scene)?;
    let mut preds = score_slots(detector, &pass, cfg)?;
    preds.retain(|p| p.score >= cfg.conf_threshold);
    preds.truncate(cfg.top_k);
    Ok(preds)
}

/// Unfiltered, sorted per-slot predictions for an existing forward pass.
pub fn score_slots(detector: &Detector, pass: &ForwardPass, cfg: &InferenceConfig) -> Result<Vec<Prediction>> {
    check_tau(cfg.tau)?;
    let mut preds = Vec::with_capacity(pass.queries.len());
    for (slot, ((q, probs), bbox)) in pass.queries.iter().zip(&pass.class_probs).zip(&pass.boxes).enumerate() {
        let objectness = if cfg.use_objectness {
            detector.gaussian.objectness_prob(q, cfg.tau)?
        } else {
            1.0
        };
        preds.push(slot_prediction(slot, probs, objectness, *bbox, &detector.known_classes));
    }
    preds.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.slot.cmp(&b.slot)));
    Ok(preds)
}

/// Combines class probabilities with objectness for one slot.
pub fn slot_prediction(
    slot: usize,
    class_probs: &[f64],
    objectness: f64,
    bbox: BBox,
    known_classes: &[usize],
) -> Prediction {
    let class_scores: Vec<f64> = class_probs.iter().map(|p| p * objectness).collect();
    let max_prob = class_probs.iter().copied().fold(0.0, f64::max);
    let unknown_score = objectness * (1.0 - max_prob);
    let best = class_scores
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (k, &s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((k, s)),
        });
    let (label, score) = match best {
        Some((k, s)) if s >= unknown_score => (Label::Class(known_classes[k]), s),
        _ => (Label::Unknown, unknown_score),
    };
    Prediction {
        slot,
        class_scores,
        unknown_score,
        objectness,
        bbox,
        label,
        score,
    }
}
