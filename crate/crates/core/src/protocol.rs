//! Open-world lifecycle: train a task, replay exemplars, evaluate, repeat.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, Dataset, DatasetSpec, Label, Scene, Split};
use crate::error::{Error, Result};
use crate::matching::detr_match;
use crate::metrics::{compute_metrics, ground_truths, Detection, MetricConfig};
use crate::model::train::{train_epochs, LossCurve};
use crate::model::{forward, predict, Detector, InferenceConfig, ModelConfig, TrainConfig};
use crate::objectness::check_tau;
use crate::report::{EvalReport, ReportConfig, ReportCounts, REPORT_SCHEMA_VERSION};
use crate::rng;

pub const DEFAULT_TAU_LIST: [f64; 6] = [0.5, 0.8, 1.0, 1.3, 1.6, 2.0];

/// Lifecycle switches and exemplar memory settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Train with `alpha = 0`: the Gaussian is still estimated, never maximized.
    pub disable_objectness_loss: bool,
    /// Pick exemplars uniformly at random instead of by objectness.
    pub random_exemplars: bool,
    /// Finetune on stored exemplars after every task but the first.
    pub replay: bool,
    /// Highest- and lowest-objectness instances kept per class.
    pub exemplars_per_class: usize,
    /// Maximum number of distinct scenes selected per task.
    pub exemplar_budget: usize,
    pub tau_list: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            disable_objectness_loss: false,
            random_exemplars: false,
            replay: true,
            exemplars_per_class: 5,
            exemplar_budget: 40,
            tau_list: DEFAULT_TAU_LIST.to_vec(),
            seeds: vec![0],
        }
    }
}

/// Everything a benchmark run depends on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub metrics: MetricConfig,
    pub protocol: ProtocolConfig,
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        check_tau(self.inference.tau)?;
        if self.model.hidden_dim == 0 || self.model.embed_dim == 0 {
            return Err(Error::config("hidden_dim and embed_dim must be positive"));
        }
        if self.protocol.exemplars_per_class == 0 {
            return Err(Error::config("exemplars_per_class must be at least 1"));
        }
        if self.protocol.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        for &tau in &self.protocol.tau_list {
            check_tau(tau)?;
        }
        Ok(())
    }

    /// Copy with the dataset and training seeds set to `seed`.
    pub fn with_seed(&self, seed: u64) -> BenchmarkConfig {
        let mut cfg = self.clone();
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
        cfg.protocol.seeds = vec![seed];
        cfg
    }

    /// Training settings with the ablation switch applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.protocol.disable_objectness_loss {
            t.alpha = 0.0;
        }
        t
    }

    fn report_config(&self, inference: &InferenceConfig) -> ReportConfig {
        ReportConfig {
            tau: inference.tau,
            conf_threshold: inference.conf_threshold,
            top_k: inference.top_k,
            use_objectness: inference.use_objectness,
            iou_threshold: self.metrics.iou_threshold,
            a_ose_threshold: self.metrics.a_ose_threshold,
            wi_recall_level: self.metrics.wi_recall_level,
            alpha: self.effective_train().alpha,
            disable_objectness_loss: self.protocol.disable_objectness_loss,
            random_exemplars: self.protocol.random_exemplars,
            replay: self.protocol.replay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExemplarEntry {
    pub scene_id: u64,
    pub annotation: usize,
    /// Objectness at selection time (`exp(-tau d_M^2)`).
    pub objectness: f64,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExemplarSet {
    pub entries: Vec<ExemplarEntry>,
    pub budget: usize,
    /// Classes that had no matched instance to select from.
    pub skipped_classes: Vec<usize>,
}

impl ExemplarSet {
    /// Distinct scenes, ascending.
    pub fn scene_ids(&self) -> Vec<u64> {
        self.entries
            .iter()
            .map(|e| e.scene_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.class).or_insert(0) += 1;
        }
        m
    }

    /// Union with `other`; entries already present are not duplicated.
    pub fn merge(&self, other: &ExemplarSet) -> ExemplarSet {
        let mut entries = self.entries.clone();
        for e in &other.entries {
            if !entries
                .iter()
                .any(|x| x.scene_id == e.scene_id && x.annotation == e.annotation)
            {
                entries.push(e.clone());
            }
        }
        ExemplarSet {
            entries,
            budget: self.budget.max(other.budget),
            skipped_classes: other.skipped_classes.clone(),
        }
    }
}

struct Instance {
    scene_id: u64,
    annotation: usize,
    class: usize,
    d2: f64,
}

/// Scores every labeled instance of `classes` in `scenes` by the objectness
/// of the slot it is matched to and keeps, per class, the
/// `exemplars_per_class` most and least object-like instances. If the selection spans more than `budget` scenes,
/// `budget` scenes are kept uniformly at random.
pub fn select_exemplars(
    detector: &Detector,
    scenes: &[&Scene],
    classes: &[usize],
    cfg: &BenchmarkConfig,
    rng: &mut rng::Rng,
) -> Result<ExemplarSet> {
    let per_class = cfg.protocol.exemplars_per_class;
    let tau = cfg.inference.tau;
    let mut by_class: BTreeMap<usize, Vec<Instance>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for scene in scenes {
        let pass = forward(&detector.params, detector.anchor_boxes, scene)?;
        let targets = detector.targets(scene)?;
        let m = detr_match(&pass.class_probs, &pass.boxes, &targets, cfg.train.matching)?;
        for &(slot, t) in &m.pairs {
            let Label::Class(class) = scene.annotations[t].label else {
                continue;
            };
            let Some(items) = by_class.get_mut(&class) else {
                continue;
            };
            items.push(Instance {
                scene_id: scene.scene_id,
                annotation: t,
                class,
                d2: detector.gaussian.mahalanobis_sq(&pass.queries[slot])?,
            });
        }
    }

    let mut out = ExemplarSet {
        budget: cfg.protocol.exemplar_budget,
        ..ExemplarSet::default()
    };
    for (class, mut items) in by_class {
        if items.is_empty() {
            out.skipped_classes.push(class);
            continue;
        }
        let chosen: Vec<Instance> = if cfg.protocol.random_exemplars {
            items.shuffle(rng);
            items.truncate(2 * per_class);
            items
        } else {
            // exp is monotone, so ranking by distance equals ranking by
            // objectness at any temperature.
            items.sort_by(|a, b| {
                a.d2.total_cmp(&b.d2)
                    .then(a.scene_id.cmp(&b.scene_id))
                    .then(a.annotation.cmp(&b.annotation))
            });
            if items.len() > 2 * per_class {
                items.drain(per_class..items.len() - per_class);
            }
            items
        };
        out.entries.extend(chosen.into_iter().map(|i| ExemplarEntry {
            scene_id: i.scene_id,
            annotation: i.annotation,
            objectness: (-tau * i.d2).exp(),
            class: i.class,
        }));
    }

    let scenes = out.scene_ids();
    if scenes.len() > out.budget {
        let keep: BTreeSet<u64> = index::sample(rng, scenes.len(), out.budget)
            .into_iter()
            .map(|i| scenes[i])
            .collect();
        out.entries.retain(|e| keep.contains(&e.scene_id));
    }
    Ok(out)
}

/// Runs inference on every scene of a test view and scores it.
pub fn evaluate(
    detector: &Detector,
    view: &Dataset,
    t: usize,
    cfg: &BenchmarkConfig,
    inference: &InferenceConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut dets = Vec::new();
    for scene in &view.scenes {
        for p in predict(detector, scene, inference)? {
            dets.push(Detection::new(scene.scene_id, p.label, p.score, p.bbox)?);
        }
    }
    let gts = ground_truths(&view.scenes);
    let prev: Vec<usize> = view.spec.task_schedule[..t].concat();
    let current = view.spec.task_schedule[t].clone();
    let m = compute_metrics(&dets, &gts, &prev, &current, &cfg.metrics);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        task: t,
        seed,
        map_prev: m.map.map_prev,
        map_current: m.map.map_current,
        map_both: m.map.map_both,
        u_recall: m.u_recall,
        a_ose: m.a_ose,
        wi: m.wi,
        per_class_ap: m.map.per_class_ap,
        pr_curves: m.map.pr_curves,
        counts: ReportCounts {
            known_gts: m.known_gts,
            unknown_gts: m.unknown_gts,
            detections: m.detections,
            exemplar_scenes: 0,
            wi: m.wi_counts,
        },
        config: cfg.report_config(inference),
    })
}

/// Detector and exemplar memory carried from one task to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskState {
    pub detector: Detector,
    pub exemplars: ExemplarSet,
    /// Optimizer steps taken since initialization, over all tasks.
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub state: TaskState,
    pub report: EvalReport,
    pub train_curve: LossCurve,
    pub finetune_curve: LossCurve,
}

// Stream indices below the namespace constants, one pair per task.
fn shuffle_stream(t: usize, finetune: bool) -> u64 {
    rng::SHUFFLE - 2 * t as u64 - finetune as u64
}

/// Trains task `t` on its train view, finetunes on exemplars (for `t > 0`
/// with replay on), evaluates on the test view and returns the updated
/// exemplar memory. The seed is `cfg.train.seed`.
pub fn run_task(prev: Option<&TaskState>, dataset: &Dataset, t: usize, cfg: &BenchmarkConfig) -> Result<TaskOutcome> {
    dataset.spec.check_task(t)?;
    let seed = cfg.train.seed;
    let train = cfg.effective_train();
    let group = &dataset.spec.task_schedule[t];
    let batches = |n: usize, epochs: usize| (epochs * n.div_ceil(train.batch_size)) as u64;
    let mut steps = prev.map_or(0, |p| p.steps);
    let (mut detector, old_exemplars) = match (t, prev) {
        (0, _) => {
            let mut init = rng::stream(seed, rng::MODEL_INIT);
            let d = Detector::init(
                dataset.spec.feature_dim,
                group.clone(),
                &cfg.model,
                train.momentum,
                train.variance_floor,
                &mut init,
            )?;
            (d, ExemplarSet::default())
        }
        (_, Some(p)) => {
            let mut d = p.detector.clone();
            d.introduce_classes(group, &mut rng::stream(rng::mix(seed, rng::HEAD_GROWTH), t as u64));
            (d, p.exemplars.clone())
        }
        (_, None) => {
            return Err(Error::Protocol(format!("task {t} needs the state of task {}", t - 1)));
        }
    };

    let train_view = dataset.task_view(t, Split::Train)?;
    let scenes: Vec<&Scene> = train_view.scenes.iter().collect();
    let train_curve = train_epochs(
        &mut detector,
        &scenes,
        train.epochs,
        train.lr,
        train.lr_drop_epoch,
        shuffle_stream(t, false),
        &train,
    )?;
    steps += batches(scenes.len(), train.epochs);

    let mut select_rng = rng::stream(rng::mix(seed, rng::EXEMPLARS), t as u64);
    let fresh = select_exemplars(&detector, &scenes, group, cfg, &mut select_rng)?;
    let exemplars = old_exemplars.merge(&fresh);

    let mut finetune_curve = Vec::new();
    if t > 0 && cfg.protocol.replay && train.finetune_epochs > 0 {
        let replay: Vec<Scene> = exemplars
            .scene_ids()
            .into_iter()
            .filter_map(|id| dataset.scene(id))
            .map(|s| dataset.labeled_through(s, t))
            .collect();
        let replay: Vec<&Scene> = replay.iter().collect();
        if !replay.is_empty() {
            finetune_curve = train_epochs(
                &mut detector,
                &replay,
                train.finetune_epochs,
                train.lr / 10.0,
                usize::MAX,
                shuffle_stream(t, true),
                &train,
            )?;
            steps += batches(replay.len(), train.finetune_epochs);
        }
    }

    let test_view = dataset.task_view(t, Split::Test)?;
    let mut report = evaluate(&detector, &test_view, t, cfg, &cfg.inference, seed)?;
    report.counts.exemplar_scenes = exemplars.scene_ids().len();
    Ok(TaskOutcome {
        state: TaskState {
            detector,
            exemplars,
            steps,
        },
        report,
        train_curve,
        finetune_curve,
    })
}

/// Reports and final state of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub seed: u64,
    pub dataset: Dataset,
    pub outcomes: Vec<TaskOutcome>,
}

impl BenchmarkRun {
    pub fn reports(&self) -> Vec<EvalReport> {
        self.outcomes.iter().map(|o| o.report.clone()).collect()
    }

    pub fn final_state(&self) -> &TaskState {
        &self.outcomes.last().expect("a run has at least one task").state
    }
}

/// Every scheduled task in order for one seed (dataset and training both
/// seeded by it).
pub fn run_seed(cfg: &BenchmarkConfig, seed: u64) -> Result<BenchmarkRun> {
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.dataset)?;
    let mut outcomes: Vec<TaskOutcome> = Vec::new();
    for t in 0..dataset.spec.num_tasks() {
        let prev = outcomes.last().map(|o| &o.state);
        let outcome = run_task(prev, &dataset, t, &cfg).map_err(|e| Error::Task {
            task: t,
            source: Box::new(e),
        })?;
        outcomes.push(outcome);
    }
    Ok(BenchmarkRun {
        seed,
        dataset,
        outcomes,
    })
}

/// Runs every seed of `cfg.protocol.seeds`, one worker thread per seed, and
/// returns the runs in seed-list order.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<BenchmarkRun>> {
    cfg.validate()?;
    let seeds = &cfg.protocol.seeds;
    if seeds.len() == 1 {
        return Ok(vec![run_seed(cfg, seeds[0])?]);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || run_seed(cfg, seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("benchmark worker panicked"))
            .collect()
    })
}

/// Re-scores a trained detector at each temperature. Training is untouched.
pub fn temperature_sweep(
    detector: &Detector,
    test_view: &Dataset,
    t: usize,
    cfg: &BenchmarkConfig,
    tau_list: &[f64],
) -> Result<Vec<EvalReport>> {
    for &tau in tau_list {
        check_tau(tau)?;
    }
    tau_list
        .iter()
        .map(|&tau| {
            let inference = InferenceConfig { tau, ..cfg.inference };
            evaluate(detector, test_view, t, cfg, &inference, cfg.train.seed)
        })
        .collect()
}
