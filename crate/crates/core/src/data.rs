//! Synthetic open-world scenes.
//!
//! Each class owns a unit-length prototype direction in feature space. Object
//! candidates are noisy copies of their class prototype, so every class
//! (known, introduced later, or never introduced) lives on a shared shell
//! around the unit sphere. Background candidates are drawn from a shell of
//! radius at least `background_radius`. A scene has exactly `num_queries`
//! candidates, each with a proposal box; annotated objects have a proposal
//! that overlaps them with IoU >= 0.5.
//!
//! Scenes are generated from independent per-scene streams, so the dataset is
//! identical for any number of worker threads.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::rng;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts { train: 500, test: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    /// Classes introduced at each task, in order.
    pub task_schedule: Vec<Vec<usize>>,
    /// Classes that are never introduced.
    pub forever_unknown: Vec<usize>,
    pub scenes_per_split: SplitCounts,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub background_radius: f64,
    /// Candidate slots per scene.
    pub num_queries: usize,
    /// Annotated objects per scene are drawn uniformly from `1..=max_objects`.
    pub max_objects: usize,
    /// Prototypes are resampled until every pair is at least this far apart.
    pub min_prototype_angle_deg: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            task_schedule: vec![vec![0, 1, 2, 3], vec![4, 5]],
            forever_unknown: vec![6, 7],
            scenes_per_split: SplitCounts::default(),
            feature_dim: 12,
            noise_sigma: 0.1,
            background_radius: 2.0,
            num_queries: 16,
            max_objects: 4,
            min_prototype_angle_deg: 60.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task_schedule.is_empty() {
            return Err(Error::config("task schedule is empty"));
        }
        let mut seen = BTreeSet::new();
        for (t, group) in self.task_schedule.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::config(format!("task {t} introduces no classes")));
            }
            for &c in group {
                if c >= self.num_classes {
                    return Err(Error::config(format!("class {c} >= num_classes")));
                }
                if !seen.insert(c) {
                    return Err(Error::config(format!("class {c} scheduled twice")));
                }
            }
        }
        for &c in &self.forever_unknown {
            if c >= self.num_classes {
                return Err(Error::config(format!("class {c} >= num_classes")));
            }
            if !seen.insert(c) {
                return Err(Error::config(format!(
                    "class {c} is both scheduled and forever unknown"
                )));
            }
        }
        if seen.len() != self.num_classes {
            return Err(Error::config("every class must be scheduled or forever unknown"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        if self.background_radius.is_nan() || self.background_radius <= 1.0 + 3.0 * self.noise_sigma {
            return Err(Error::config("background_radius must exceed 1 + 3 noise_sigma"));
        }
        if self.max_objects == 0 || self.max_objects > self.num_queries {
            return Err(Error::config("max_objects must be in 1..=num_queries"));
        }
        if !(0.0..90.0).contains(&self.min_prototype_angle_deg) {
            return Err(Error::config("min_prototype_angle_deg must be in [0, 90)"));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.task_schedule.len()
    }

    /// Task that introduces class `c`, or `None` for forever-unknown classes.
    pub fn task_of_class(&self, c: usize) -> Option<usize> {
        self.task_schedule.iter().position(|g| g.contains(&c))
    }

    /// Classes known after task `t`, in head order.
    pub fn known_classes(&self, t: usize) -> Vec<usize> {
        self.task_schedule.iter().take(t + 1).flatten().copied().collect()
    }

    pub fn check_task(&self, t: usize) -> Result<()> {
        if t >= self.num_tasks() {
            return Err(Error::domain(format!(
                "task {t} outside schedule of {} tasks",
                self.num_tasks()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Object label. Serialized as the class index, or the string `"unknown"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Class(usize),
    Unknown,
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Class(c) => s.serialize_u64(*c as u64),
            Label::Unknown => s.serialize_str("unknown"),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Class(usize),
            Marker(String),
        }
        match Raw::deserialize(d)? {
            Raw::Class(c) => Ok(Label::Class(c)),
            Raw::Marker(m) if m == "unknown" => Ok(Label::Unknown),
            Raw::Marker(m) => Err(serde::de::Error::custom(format!("invalid label {m:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub feature: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    #[serde(rename = "class")]
    pub label: Label,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub scene_id: u64,
    pub task: usize,
    pub split: Split,
    pub candidates: Vec<Candidate>,
    pub annotations: Vec<Annotation>,
}

impl Scene {
    /// Whether annotation `i` carries a class label at task `t` under the
    /// given split's visibility rule.
    pub fn is_visible_at_task(&self, spec: &DatasetSpec, i: usize, t: usize) -> bool {
        match self.annotations.get(i).map(|a| a.label) {
            Some(Label::Class(c)) => match self.split {
                Split::Train => spec.task_of_class(c) == Some(t),
                Split::Test => spec.task_of_class(c).is_some_and(|ct| ct <= t),
            },
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn scenes_of(&self, t: usize, split: Split) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(move |s| s.task == t && s.split == split)
    }

    /// Labeled view of task `t`.
    ///
    /// Train: only annotations of classes introduced at `t` are kept.
    /// Test: classes introduced at or before `t` keep their label, every other
    /// annotated object is relabeled [`Label::Unknown`].
    pub fn task_view(&self, t: usize, split: Split) -> Result<Dataset> {
        self.spec.check_task(t)?;
        let spec = &self.spec;
        let scenes = self
            .scenes_of(t, split)
            .map(|s| {
                let annotations = s
                    .annotations
                    .iter()
                    .filter_map(|a| {
                        let introduced = match a.label {
                            Label::Class(c) => spec.task_of_class(c),
                            Label::Unknown => None,
                        };
                        match split {
                            Split::Train => (introduced == Some(t)).then(|| a.clone()),
                            Split::Test => Some(match introduced {
                                Some(ct) if ct <= t => a.clone(),
                                _ => Annotation {
                                    label: Label::Unknown,
                                    bbox: a.bbox,
                                },
                            }),
                        }
                    })
                    .collect();
                Scene {
                    annotations,
                    ..s.clone()
                }
            })
            .collect();
        Ok(Dataset {
            spec: self.spec.clone(),
            scenes,
        })
    }

    /// Scene labeled with every class known after task `t`, other objects
    /// left unannotated. Used for the exemplar finetuning set.
    pub fn labeled_through(&self, scene: &Scene, t: usize) -> Scene {
        let annotations = scene
            .annotations
            .iter()
            .filter(|a| match a.label {
                Label::Class(c) => self.spec.task_of_class(c).is_some_and(|ct| ct <= t),
                Label::Unknown => false,
            })
            .cloned()
            .collect();
        Scene {
            annotations,
            ..scene.clone()
        }
    }

    pub fn scene(&self, scene_id: u64) -> Option<&Scene> {
        self.scenes
            .binary_search_by_key(&scene_id, |s| s.scene_id)
            .ok()
            .map(|i| &self.scenes[i])
            .or_else(|| self.scenes.iter().find(|s| s.scene_id == scene_id))
    }
}

fn unit_vector(rng: &mut rng::Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Class prototype directions, resampled until pairwise angles clear the floor.
pub fn prototypes(spec: &DatasetSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::stream(spec.seed, rng::PROTOTYPES);
    let max_cos = spec.min_prototype_angle_deg.to_radians().cos();
    for _ in 0..10_000 {
        let protos: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| unit_vector(&mut rng, spec.feature_dim))
            .collect();
        let separated = protos.iter().enumerate().all(|(i, a)| {
            protos[i + 1..]
                .iter()
                .all(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() <= max_cos)
        });
        if separated {
            return Ok(protos);
        }
    }
    Err(Error::config(format!(
        "cannot place {} prototypes {} degrees apart in {} dimensions",
        spec.num_classes, spec.min_prototype_angle_deg, spec.feature_dim
    )))
}

fn random_box(rng: &mut rng::Rng) -> BBox {
    BBox {
        cx: rng.random_range(0.1..0.9),
        cy: rng.random_range(0.1..0.9),
        w: rng.random_range(0.1..0.4),
        h: rng.random_range(0.1..0.4),
    }
}

const MAX_OBJECT_OVERLAP: f64 = 0.2;
const PROPOSAL_JITTER: f64 = 0.03;

struct SceneRequest {
    scene_id: u64,
    task: usize,
    split: Split,
}

fn generate_scene(spec: &DatasetSpec, protos: &[Vec<f64>], req: &SceneRequest) -> Scene {
    let mut rng = rng::stream(spec.seed, req.scene_id);
    let n_obj = rng.random_range(1..=spec.max_objects);

    // Training scenes of task t always show at least one class of task t.
    let mut classes: Vec<usize> = (0..n_obj).map(|_| rng.random_range(0..spec.num_classes)).collect();
    if req.split == Split::Train {
        let group = &spec.task_schedule[req.task];
        classes[0] = group[rng.random_range(0..group.len())];
    }

    let mut objects: Vec<BBox> = Vec::with_capacity(n_obj);
    while objects.len() < n_obj {
        let b = random_box(&mut rng);
        if objects.iter().all(|o| iou(o, &b) <= MAX_OBJECT_OVERLAP) {
            objects.push(b);
        }
    }

    let mut candidates = Vec::with_capacity(spec.num_queries);
    let radius_cap = 1.0 + 3.0 * spec.noise_sigma;
    for (k, (&c, obj)) in classes.iter().zip(&objects).enumerate() {
        let feature = loop {
            let f: Vec<f64> = protos[c]
                .iter()
                .map(|p| p + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if f.iter().map(|x| x * x).sum::<f64>().sqrt() <= radius_cap {
                break f;
            }
        };
        let proposal = loop {
            let mut j = || rng.random_range(-PROPOSAL_JITTER..=PROPOSAL_JITTER);
            let p = BBox {
                cx: obj.cx + j(),
                cy: obj.cy + j(),
                w: obj.w + j(),
                h: obj.h + j(),
            };
            let own = iou(&p, obj) >= 0.5;
            let others = objects.iter().enumerate().all(|(o, b)| o == k || iou(&p, b) < 0.5);
            if own && others {
                break p;
            }
        };
        candidates.push(Candidate {
            feature,
            bbox: proposal,
        });
    }
    while candidates.len() < spec.num_queries {
        let dir = unit_vector(&mut rng, spec.feature_dim);
        let r = rng.random_range(spec.background_radius..spec.background_radius + 1.0);
        let bbox = loop {
            let b = random_box(&mut rng);
            if objects.iter().all(|o| iou(o, &b) < 0.5) {
                break b;
            }
        };
        candidates.push(Candidate {
            feature: dir.into_iter().map(|x| x * r).collect(),
            bbox,
        });
    }
    candidates.shuffle(&mut rng);

    let annotations = classes
        .iter()
        .zip(&objects)
        .map(|(&c, &bbox)| Annotation {
            label: Label::Class(c),
            bbox,
        })
        .collect();
    Scene {
        scene_id: req.scene_id,
        task: req.task,
        split: req.split,
        candidates,
        annotations,
    }
}

/// Generates the full dataset using all available cores.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    generate_dataset_with_workers(spec, workers)
}

pub fn generate_dataset_with_workers(spec: &DatasetSpec, workers: usize) -> Result<Dataset> {
    spec.validate()?;
    let protos = prototypes(spec)?;

    let mut requests = Vec::new();
    for task in 0..spec.num_tasks() {
        for (split, count) in [
            (Split::Train, spec.scenes_per_split.train),
            (Split::Test, spec.scenes_per_split.test),
        ] {
            for _ in 0..count {
                requests.push(SceneRequest {
                    scene_id: requests.len() as u64,
                    task,
                    split,
                });
            }
        }
    }

    let workers = workers.max(1);
    let chunk = requests.len().div_ceil(workers).max(1);
    let scenes = std::thread::scope(|scope| {
        let handles: Vec<_> = requests
            .chunks(chunk)
            .map(|reqs| {
                let protos = &protos;
                scope.spawn(move || reqs.iter().map(|r| generate_scene(spec, protos, r)).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scene generation worker panicked"))
            .collect()
    });
    Ok(Dataset {
        spec: spec.clone(),
        scenes,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    schema_version: u32,
    spec: DatasetSpec,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    schema_version: u32,
    #[serde(flatten)]
    scene: Scene,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

/// Writes the dataset as JSON lines: a header line with the `DatasetSpec`, then one
/// scene per line.
pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let io = |e| Error::io("<dataset>", e);
    serde_json::to_writer(
        &mut out,
        &HeaderRecord {
            schema_version: DATASET_SCHEMA_VERSION,
            spec: dataset.spec.clone(),
        },
    )?;
    out.write_all(b"\n").map_err(io)?;
    for scene in &dataset.scenes {
        serde_json::to_writer(
            &mut out,
            &SceneRecord {
                schema_version: DATASET_SCHEMA_VERSION,
                scene: scene.clone(),
            },
        )?;
        out.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, number: usize) -> Result<T> {
    let probe: VersionProbe = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: number,
        message: e.to_string(),
    })?;
    if probe.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Version {
            what: "dataset schema",
            found: probe.schema_version,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: number,
        message: e.to_string(),
    })
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines().enumerate();
    let header: HeaderRecord = match lines.next() {
        Some((_, line)) => parse_line(&line.map_err(|e| Error::io("<dataset>", e))?, 1)?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty dataset file".into(),
            })
        }
    };
    header.spec.validate()?;
    let mut scenes = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = parse_line(&line, i + 1)?;
        scenes.push(record.scene);
    }
    Ok(Dataset {
        spec: header.spec,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            scenes_per_split: SplitCounts { train: 20, test: 5 },
            ..DatasetSpec::default()
        }
    }

    fn bytes(d: &Dataset) -> Vec<u8> {
        let mut out = Vec::new();
        write_dataset(d, &mut out).unwrap();
        out
    }

    #[test]
    fn generation_is_deterministic_across_workers() {
        let spec = small_spec();
        let a = generate_dataset_with_workers(&spec, 1).unwrap();
        let b = generate_dataset_with_workers(&spec, 4).unwrap();
        let c = generate_dataset_with_workers(&spec, 7).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a, c);
    }

    #[test]
    fn split_counts_per_task() {
        let d = generate_dataset(&small_spec()).unwrap();
        for t in 0..2 {
            assert_eq!(d.scenes_of(t, Split::Train).count(), 20);
            assert_eq!(d.scenes_of(t, Split::Test).count(), 5);
        }
    }

    #[test]
    fn every_annotation_has_exactly_one_proposal() {
        let d = generate_dataset(&small_spec()).unwrap();
        for s in &d.scenes {
            assert_eq!(s.candidates.len(), d.spec.num_queries);
            assert!(s.annotations.len() <= d.spec.num_queries);
            for a in &s.annotations {
                let hits = s.candidates.iter().filter(|c| iou(&c.bbox, &a.bbox) >= 0.5).count();
                assert_eq!(hits, 1, "scene {}", s.scene_id);
            }
        }
    }

    #[test]
    fn objects_and_background_are_radially_separated() {
        let spec = small_spec();
        let d = generate_dataset(&spec).unwrap();
        let cap = 1.0 + 3.0 * spec.noise_sigma;
        for s in &d.scenes {
            let mut objects = 0;
            for c in &s.candidates {
                let r = c.feature.iter().map(|x| x * x).sum::<f64>().sqrt();
                if r <= cap {
                    objects += 1;
                } else {
                    assert!(r >= spec.background_radius);
                }
            }
            assert_eq!(objects, s.annotations.len());
        }
    }

    #[test]
    fn prototypes_respect_angle_floor() {
        let spec = small_spec();
        let p = prototypes(&spec).unwrap();
        let floor = spec.min_prototype_angle_deg.to_radians();
        for i in 0..p.len() {
            assert!((p[i].iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            for j in i + 1..p.len() {
                let cos: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                assert!(cos.clamp(-1.0, 1.0).acos() >= floor - 1e-12);
            }
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        let overlapping = DatasetSpec {
            task_schedule: vec![vec![0, 1, 2, 3], vec![3, 4, 5]],
            ..DatasetSpec::default()
        };
        assert!(matches!(overlapping.validate(), Err(Error::Config(_))));
        let missing = DatasetSpec {
            forever_unknown: vec![6],
            ..DatasetSpec::default()
        };
        assert!(missing.validate().is_err());
        let forever_scheduled = DatasetSpec {
            forever_unknown: vec![5, 6, 7],
            ..DatasetSpec::default()
        };
        assert!(forever_scheduled.validate().is_err());
    }

    #[test]
    fn train_view_only_shows_current_classes() {
        let d = generate_dataset(&small_spec()).unwrap();
        let v = d.task_view(0, Split::Train).unwrap();
        assert_eq!(v.scenes.len(), 20);
        for s in &v.scenes {
            assert!(!s.annotations.is_empty());
            for a in &s.annotations {
                assert!(matches!(a.label, Label::Class(c) if c < 4));
            }
        }
    }

    #[test]
    fn final_test_view_marks_forever_unknowns() {
        let d = generate_dataset(&small_spec()).unwrap();
        let raw: Vec<&Scene> = d.scenes_of(1, Split::Test).collect();
        let v = d.task_view(1, Split::Test).unwrap();
        for (s, r) in v.scenes.iter().zip(raw) {
            assert_eq!(s.annotations.len(), r.annotations.len());
            for (a, ra) in s.annotations.iter().zip(&r.annotations) {
                match ra.label {
                    Label::Class(c) if c >= 6 => assert_eq!(a.label, Label::Unknown),
                    other => assert_eq!(a.label, other),
                }
            }
        }
    }

    #[test]
    fn task_view_is_idempotent() {
        let d = generate_dataset(&small_spec()).unwrap();
        for split in [Split::Train, Split::Test] {
            for t in 0..2 {
                let once = d.task_view(t, split).unwrap();
                assert_eq!(once.task_view(t, split).unwrap(), once);
            }
        }
        assert!(matches!(d.task_view(2, Split::Train), Err(Error::Domain(_))));
    }

    #[test]
    fn visibility_matches_views() {
        let d = generate_dataset(&small_spec()).unwrap();
        for s in d.scenes_of(0, Split::Test) {
            for (i, a) in s.annotations.iter().enumerate() {
                let expect = matches!(a.label, Label::Class(c) if c < 4);
                assert_eq!(s.is_visible_at_task(&d.spec, i, 0), expect);
            }
        }
    }

    #[test]
    fn io_roundtrip() {
        let spec = DatasetSpec {
            scenes_per_split: SplitCounts { train: 20, test: 5 },
            ..DatasetSpec::default()
        };
        let d = generate_dataset(&spec).unwrap();
        assert_eq!(d.scenes.len(), 50);
        let buf = bytes(&d);
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, d);
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn unknown_schema_version_rejected() {
        let d = generate_dataset(&small_spec()).unwrap();
        let text = String::from_utf8(bytes(&d)).unwrap();
        let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":999", 1);
        let err = read_dataset(bumped.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 999, .. }), "{err}");
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let d = generate_dataset(&small_spec()).unwrap();
        let text = String::from_utf8(bytes(&d)).unwrap();
        let cut = &text[..text.len() - 40];
        let lines = cut.lines().count();
        match read_dataset(cut.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, lines),
            other => panic!("unexpected {other}"),
        }
    }
}
