//! Open-world evaluation: per-class AP, partitioned mAP, unknown recall,
//! absolute open-set error and wilderness impact.
//!
//! All matching is greedy in descending score order. Equal scores keep the
//! order of `scene_id` and then input position, so every metric is a pure
//! function of its inputs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{Label, Scene};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub scene_id: u64,
    pub label: Label,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl Detection {
    pub fn new(scene_id: u64, label: Label, score: f64, bbox: BBox) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::domain(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Detection {
            scene_id,
            label,
            score,
            bbox,
        })
    }
}

/// A labeled ground-truth object of one scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub label: Label,
    pub bbox: BBox,
}

/// Ground truths of a set of scenes, in scene order.
pub fn ground_truths<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Vec<GroundTruth> {
    scenes
        .into_iter()
        .flat_map(|s| {
            s.annotations.iter().map(|a| GroundTruth {
                scene_id: s.scene_id,
                label: a.label,
                bbox: a.bbox,
            })
        })
        .collect()
}

/// Indices of `dets` in evaluation order.
fn score_order<'a>(dets: impl Iterator<Item = &'a Detection>) -> Vec<&'a Detection> {
    let mut v: Vec<&Detection> = dets.collect();
    // Stable sort keeps input order among equal (score, scene) keys.
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.scene_id.cmp(&b.scene_id)));
    v
}

/// Greedy matcher: each query takes the unmatched box of its scene with the
/// highest IoU, provided that IoU reaches the threshold.
struct Greedy<'a> {
    by_scene: HashMap<u64, Vec<(&'a BBox, bool)>>,
    threshold: f64,
}

impl<'a> Greedy<'a> {
    fn new(gts: impl Iterator<Item = (u64, &'a BBox)>, threshold: f64) -> Self {
        let mut by_scene: HashMap<u64, Vec<(&BBox, bool)>> = HashMap::new();
        for (scene, b) in gts {
            by_scene.entry(scene).or_default().push((b, false));
        }
        Greedy { by_scene, threshold }
    }

    fn take(&mut self, scene_id: u64, b: &BBox) -> bool {
        let Some(boxes) = self.by_scene.get_mut(&scene_id) else {
            return false;
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, (g, used)) in boxes.iter().enumerate() {
            if *used {
                continue;
            }
            let o = iou(b, g);
            if o >= self.threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((i, o));
            }
        }
        match best {
            Some((i, _)) => {
                boxes[i].1 = true;
                true
            }
            None => false,
        }
    }

    /// Whether `b` overlaps any box of the scene, used or not.
    fn overlaps(&self, scene_id: u64, b: &BBox) -> bool {
        self.by_scene
            .get(&scene_id)
            .is_some_and(|boxes| boxes.iter().any(|(g, _)| iou(b, g) >= self.threshold))
    }
}

/// A point of the interpolated precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// AP together with the precision envelope it integrates.
#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub curve: Vec<PrPoint>,
}

/// All-point interpolated AP of one class. `dets` and `gts` must already be
/// restricted to that class. `None` when there is no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Option<f64> {
    average_precision_curve(dets, gts, iou_thresh).map(|r| r.ap)
}

pub fn average_precision_curve(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Option<ApResult> {
    if gts.is_empty() {
        return None;
    }
    let total = gts.len() as f64;
    let mut greedy = Greedy::new(gts.iter().map(|g| (g.scene_id, &g.bbox)), iou_thresh);
    let mut tp = 0usize;
    let mut raw = Vec::with_capacity(dets.len());
    for (i, d) in score_order(dets.iter()).into_iter().enumerate() {
        if greedy.take(d.scene_id, &d.bbox) {
            tp += 1;
        }
        raw.push(PrPoint {
            recall: tp as f64 / total,
            precision: tp as f64 / (i + 1) as f64,
        });
    }
    // Precision envelope: running maximum from the right.
    let mut best = 0.0f64;
    for p in raw.iter_mut().rev() {
        best = best.max(p.precision);
        p.precision = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut curve = Vec::new();
    for p in &raw {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * p.precision;
            prev_recall = p.recall;
            curve.push(*p);
        }
    }
    Some(ApResult { ap, curve })
}

/// Per-class AP and its three partition means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MapBreakdown {
    pub map_prev: Option<f64>,
    pub map_current: Option<f64>,
    pub map_both: Option<f64>,
    pub per_class_ap: BTreeMap<usize, Option<f64>>,
    pub pr_curves: BTreeMap<usize, Vec<PrPoint>>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// AP of every class in `prev` and `current`, and the unweighted mean of
/// the non-null APs of each partition and of their union.
pub fn owod_map(
    dets: &[Detection],
    gts: &[GroundTruth],
    prev: &[usize],
    current: &[usize],
    iou_thresh: f64,
) -> MapBreakdown {
    let mut out = MapBreakdown::default();
    for &c in prev.iter().chain(current) {
        let d: Vec<Detection> = dets.iter().filter(|d| d.label == Label::Class(c)).cloned().collect();
        let g: Vec<GroundTruth> = gts.iter().filter(|g| g.label == Label::Class(c)).copied().collect();
        let r = average_precision_curve(&d, &g, iou_thresh);
        out.per_class_ap.insert(c, r.as_ref().map(|r| r.ap));
        if let Some(r) = r {
            out.pr_curves.insert(c, r.curve);
        }
    }
    let part = |classes: &[usize]| mean(classes.iter().filter_map(|c| out.per_class_ap[c]));
    out.map_prev = part(prev);
    out.map_current = part(current);
    let both: Vec<usize> = prev.iter().chain(current).copied().collect();
    out.map_both = part(&both);
    out
}

/// Fraction of unknown ground truths covered by unknown-labeled detections.
/// `None` when there is no unknown ground truth.
pub fn u_recall(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Option<f64> {
    let unknown: Vec<&GroundTruth> = gts.iter().filter(|g| g.label == Label::Unknown).collect();
    if unknown.is_empty() {
        return None;
    }
    let mut greedy = Greedy::new(unknown.iter().map(|g| (g.scene_id, &g.bbox)), iou_thresh);
    let hits = score_order(dets.iter().filter(|d| d.label == Label::Unknown))
        .into_iter()
        .filter(|d| greedy.take(d.scene_id, &d.bbox))
        .count();
    Some(hits as f64 / unknown.len() as f64)
}

/// Number of known-labeled detections scoring at least `conf_threshold`
/// that land on an unknown ground truth. Each unknown object counts once.
pub fn a_ose(dets: &[Detection], gts: &[GroundTruth], conf_threshold: f64, iou_thresh: f64) -> u64 {
    let mut greedy = Greedy::new(
        gts.iter()
            .filter(|g| g.label == Label::Unknown)
            .map(|g| (g.scene_id, &g.bbox)),
        iou_thresh,
    );
    score_order(
        dets.iter()
            .filter(|d| matches!(d.label, Label::Class(_)) && d.score >= conf_threshold),
    )
    .into_iter()
    .filter(|d| greedy.take(d.scene_id, &d.bbox))
    .count() as u64
}

/// Confusion counts of known-labeled detections at a score cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WiCounts {
    pub tp: u64,
    /// False positives that do not overlap an unknown object.
    pub fp_pure: u64,
    /// False positives on unknown objects.
    pub fp_unk: u64,
}

/// `P_K / P_open - 1 = fp_unk / (tp + fp_pure)`. `None` when the denominator
/// is zero.
pub fn wi_from_counts(c: WiCounts) -> Option<f64> {
    let denom = c.tp + c.fp_pure;
    (denom > 0).then(|| c.fp_unk as f64 / denom as f64)
}

/// Counts at the first cutoff (in pooled score order over all known classes)
/// where known recall reaches `recall_level`, or `None` if it never does.
pub fn wi_counts(dets: &[Detection], gts: &[GroundTruth], recall_level: f64, iou_thresh: f64) -> Option<WiCounts> {
    let known_total = gts.iter().filter(|g| matches!(g.label, Label::Class(_))).count();
    if known_total == 0 {
        return None;
    }
    let mut per_class: BTreeMap<usize, Greedy> = BTreeMap::new();
    for g in gts {
        if let Label::Class(c) = g.label {
            per_class
                .entry(c)
                .or_insert_with(|| Greedy::new(std::iter::empty(), iou_thresh))
                .by_scene
                .entry(g.scene_id)
                .or_default()
                .push((&g.bbox, false));
        }
    }
    let unknown = Greedy::new(
        gts.iter()
            .filter(|g| g.label == Label::Unknown)
            .map(|g| (g.scene_id, &g.bbox)),
        iou_thresh,
    );
    let mut c = WiCounts::default();
    for d in score_order(dets.iter().filter(|d| matches!(d.label, Label::Class(_)))) {
        let Label::Class(k) = d.label else { unreachable!() };
        let hit = per_class.get_mut(&k).is_some_and(|g| g.take(d.scene_id, &d.bbox));
        if hit {
            c.tp += 1;
        } else if unknown.overlaps(d.scene_id, &d.bbox) {
            c.fp_unk += 1;
        } else {
            c.fp_pure += 1;
        }
        if c.tp as f64 / known_total as f64 >= recall_level {
            return Some(c);
        }
    }
    None
}

pub fn wilderness_impact(dets: &[Detection], gts: &[GroundTruth], recall_level: f64, iou_thresh: f64) -> Option<f64> {
    wi_counts(dets, gts, recall_level, iou_thresh).and_then(wi_from_counts)
}

/// Thresholds and partitions used to turn detections into a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub iou_threshold: f64,
    pub a_ose_threshold: f64,
    pub wi_recall_level: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            iou_threshold: IOU_THRESHOLD,
            a_ose_threshold: 0.5,
            wi_recall_level: 0.8,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iou_threshold", self.iou_threshold),
            ("a_ose_threshold", self.a_ose_threshold),
            ("wi_recall_level", self.wi_recall_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Every metric of one evaluation, before provenance is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub map: MapBreakdown,
    pub u_recall: Option<f64>,
    pub a_ose: u64,
    pub wi: Option<f64>,
    pub wi_counts: Option<WiCounts>,
    pub known_gts: usize,
    pub unknown_gts: usize,
    pub detections: usize,
}

pub fn compute_metrics(
    dets: &[Detection],
    gts: &[GroundTruth],
    prev: &[usize],
    current: &[usize],
    cfg: &MetricConfig,
) -> Metrics {
    let wi_counts = wi_counts(dets, gts, cfg.wi_recall_level, cfg.iou_threshold);
    Metrics {
        map: owod_map(dets, gts, prev, current, cfg.iou_threshold),
        u_recall: u_recall(dets, gts, cfg.iou_threshold),
        a_ose: a_ose(dets, gts, cfg.a_ose_threshold, cfg.iou_threshold),
        wi: wi_counts.and_then(wi_from_counts),
        wi_counts,
        known_gts: gts.iter().filter(|g| matches!(g.label, Label::Class(_))).count(),
        unknown_gts: gts.iter().filter(|g| g.label == Label::Unknown).count(),
        detections: dets.len(),
    }
}
