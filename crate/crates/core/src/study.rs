//! Seeded experiment studies on synthetic worlds.
//!
//! A study expands into settings (method variants, batch shapes or sub-clip
//! windows). Every (setting, seed) pair trains on a freshly generated
//! training world and is evaluated on a held-out world from the same
//! generator. Results are written as one JSON record per run, a CSV table of
//! medians over seeds and the resolved spec.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{frame_ap, video_ap, EvalConfig, EvalResult, FrameDetection, Keyframe, VideoTubes};
use crate::linking::{tubes_from_predictions, LinkConfig};
use crate::mil::PoolingConfig;
use crate::model::{predict_tubelets, train, Bag, Model, TrainConfig, TrainMode};
use crate::synthgen::{
    build_all_tubelets, build_bags, generate, ground_truth_tubes, keyframe_ground_truth, materialize_bags,
    sampled_violation_rate, tubelet_lookup, violation_rate, SyntheticConfig, TubeletConfig, TubeletRecord, Window,
    World,
};

/// Training variants compared by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "mil-lse")]
    MilLse,
    #[serde(rename = "mil-mean")]
    MilMean,
    #[serde(rename = "mil-max")]
    MilMax,
    #[serde(rename = "mil-max+uncertainty")]
    MilMaxUncertainty,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Naive,
        Method::MilLse,
        Method::MilMean,
        Method::MilMax,
        Method::MilMaxUncertainty,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::MilLse => "mil-lse",
            Method::MilMean => "mil-mean",
            Method::MilMax => "mil-max",
            Method::MilMaxUncertainty => "mil-max+uncertainty",
        }
    }

    /// Applies the variant to a base config; `r` is the sharpness used by
    /// the generalised mean and log-sum-exp.
    pub fn apply(&self, base: &TrainConfig, r: f64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.mode = TrainMode::Mil;
        cfg.use_uncertainty = false;
        match self {
            Method::Naive => cfg.mode = TrainMode::Naive,
            Method::MilLse => cfg.pooling = PoolingConfig::lse(r),
            Method::MilMean => cfg.pooling = PoolingConfig::mean(r),
            Method::MilMax => cfg.pooling = PoolingConfig::max(),
            Method::MilMaxUncertainty => {
                cfg.pooling = PoolingConfig::max();
                cfg.use_uncertainty = true;
            }
        }
        cfg
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// One run per seed with the train config as given.
    Single,
    Ablation,
    BagBatchSweep,
    SubclipSweep,
}

impl std::str::FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Study::Single),
            "ablation" => Ok(Study::Ablation),
            "bag_batch_sweep" | "bag-batch-sweep" => Ok(Study::BagBatchSweep),
            "subclip_sweep" | "subclip-sweep" => Ok(Study::SubclipSweep),
            _ => Err(Error::Config(format!("unknown study `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub frame_iou: Vec<f64>,
    pub video_iou: Vec<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            frame_iou: vec![0.5],
            video_iou: vec![0.2, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub study: Study,
    pub seeds: Vec<u64>,
    /// Training world; its seeds are replaced per run. Run seed `s` uses
    /// clip seeds `2s` (train) and `2s + 1` (test) and feature seed `s`.
    pub data: SyntheticConfig,
    /// Clips in the held-out world; 0 uses `data.num_clips`.
    pub test_clips: usize,
    pub tubelets: TubeletConfig,
    /// Bag window for every study except the sub-clip sweep.
    pub window: Window,
    pub train: TrainConfig,
    pub link: LinkConfig,
    pub eval: EvalSpec,
    /// Sharpness for the mean and log-sum-exp ablation variants.
    pub pooling_r: f64,
    pub methods: Vec<Method>,
    /// `(bags_per_batch, tubelets_per_bag)` pairs.
    pub bag_batch: Vec<(usize, usize)>,
    pub windows: Vec<Window>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            study: Study::Single,
            seeds: vec![0, 1, 2, 3, 4],
            data: SyntheticConfig::default(),
            test_clips: 0,
            tubelets: TubeletConfig::default(),
            window: Window::WholeClip,
            train: TrainConfig::default(),
            link: LinkConfig::default(),
            eval: EvalSpec::default(),
            pooling_r: 1.0,
            methods: Method::ALL.to_vec(),
            bag_batch: vec![(4, 4), (3, 5), (2, 8), (1, 16)],
            windows: [1, 5, 10, 30, 60]
                .into_iter()
                .map(Window::Keyframes)
                .chain([Window::WholeClip])
                .collect(),
            out_dir: PathBuf::from("results"),
        }
    }
}

/// One point of a study: a named train config and bag window.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub name: String,
    pub train: TrainConfig,
    pub window: Window,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if !self
            .name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.name.is_empty()
        {
            return bad(format!("name `{}` must be non-empty and use [A-Za-z0-9._-]", self.name));
        }
        self.data.validate()?;
        self.train.validate()?;
        self.link.validate()?;
        EvalConfig {
            iou_thresholds: self.eval.frame_iou.clone(),
            num_classes: self.data.num_classes,
        }
        .validate()?;
        EvalConfig {
            iou_thresholds: self.eval.video_iou.clone(),
            num_classes: self.data.num_classes,
        }
        .validate()?;
        if let Window::Keyframes(0) = self.window {
            return bad("window must span at least one keyframe".into());
        }
        match self.study {
            Study::Single => {}
            Study::Ablation => {
                if self.methods.is_empty() {
                    return bad("ablation needs at least one method".into());
                }
                PoolingConfig::lse(self.pooling_r).validate()?;
            }
            Study::BagBatchSweep => {
                if self.bag_batch.is_empty() || self.bag_batch.iter().any(|&(b, t)| b == 0 || t == 0) {
                    return bad("bag_batch pairs must be non-empty and positive".into());
                }
            }
            Study::SubclipSweep => {
                if self.windows.is_empty() || self.windows.contains(&Window::Keyframes(0)) {
                    return bad("windows must be non-empty and span at least one keyframe".into());
                }
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> Vec<Setting> {
        let base = |name: String, train: TrainConfig, window: Window| Setting { name, train, window };
        match self.study {
            Study::Single => vec![base("single".into(), self.train.clone(), self.window)],
            Study::Ablation => self
                .methods
                .iter()
                .map(|m| base(m.name().into(), m.apply(&self.train, self.pooling_r), self.window))
                .collect(),
            Study::BagBatchSweep => self
                .bag_batch
                .iter()
                .map(|&(b, t)| {
                    let mut train = self.train.clone();
                    train.bags_per_batch = b;
                    train.tubelets_per_bag = t;
                    base(format!("bags{b}x{t}"), train, self.window)
                })
                .collect(),
            Study::SubclipSweep => self
                .windows
                .iter()
                .map(|&w| base(format!("window-{w}"), self.train.clone(), w))
                .collect(),
        }
    }

    /// Generator configs of the training and held-out worlds for a seed.
    pub fn worlds_for_seed(&self, seed: u64) -> (SyntheticConfig, SyntheticConfig) {
        let mut train = self.data.clone();
        train.seed = seed.wrapping_mul(2);
        train.feature_seed = seed;
        let mut test = train.clone();
        test.seed = seed.wrapping_mul(2).wrapping_add(1);
        if self.test_clips > 0 {
            test.num_clips = self.test_clips;
        }
        (train, test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frame_ap: EvalResult,
    pub video_ap: EvalResult,
    /// Fraction of training bags violating the MIL assumption.
    pub violation_rate: f64,
    /// Same, after down-sampling bags to the tubelet cap.
    pub sampled_violation_rate: f64,
    pub train_bags: usize,
    pub final_loss: f64,
}

/// Self-describing record of one (setting, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub study: Study,
    pub setting: String,
    pub seed: u64,
    pub train_data: SyntheticConfig,
    pub test_data: SyntheticConfig,
    pub tubelets: TubeletConfig,
    pub window: Window,
    pub train: TrainConfig,
    pub link: LinkConfig,
    pub eval: EvalSpec,
    pub metrics: Metrics,
}

impl RunRecord {
    /// Whether this record was produced by exactly this run configuration.
    fn produced_by(
        &self,
        spec: &ExperimentSpec,
        setting: &Setting,
        seed: u64,
        train_data: &SyntheticConfig,
        test_data: &SyntheticConfig,
    ) -> bool {
        let mut train = setting.train.clone();
        train.seed = seed;
        self.experiment == spec.name
            && self.study == spec.study
            && self.setting == setting.name
            && self.seed == seed
            && &self.train_data == train_data
            && &self.test_data == test_data
            && self.tubelets == spec.tubelets
            && self.window == setting.window
            && self.train == train
            && self.link == spec.link
            && self.eval == spec.eval
    }
}

/// A world with its tubelets.
pub struct Prepared {
    pub world: World,
    pub tubelets: Vec<Vec<TubeletRecord>>,
}

impl Prepared {
    pub fn new(cfg: &SyntheticConfig, tubelet_cfg: &TubeletConfig) -> Result<Self> {
        let world = generate(cfg)?;
        let tubelets = build_all_tubelets(&world, tubelet_cfg);
        Ok(Self { world, tubelets })
    }

    pub fn bags(&self, window: Window) -> Result<Vec<Bag>> {
        materialize_bags(&build_bags(&self.world, &self.tubelets, window)?, &self.tubelets)
    }
}

/// Frame AP over all keyframes and Video AP over all clips of a world.
pub fn evaluate_model(
    model: &Model,
    test: &Prepared,
    link: &LinkConfig,
    eval: &EvalSpec,
) -> Result<(EvalResult, EvalResult)> {
    let cfg = &test.world.config;
    let classes = cfg.num_classes;
    let mut keyframes = Vec::new();
    let mut gt_boxes = Vec::new();
    let mut predictions = Vec::new();
    let mut pred_tubes = Vec::new();
    let mut gt_tubes = Vec::new();
    for (clip, records) in test.world.clips.iter().zip(&test.tubelets) {
        for g in 0..cfg.num_keyframes() {
            let keyframe = Keyframe {
                video: clip.id,
                frame: cfg.keyframe_frame(g),
            };
            keyframes.push(keyframe);
            for (class, bbox) in keyframe_ground_truth(cfg, clip, g) {
                gt_boxes.push(FrameDetection {
                    keyframe,
                    class,
                    bbox,
                    score: 1.0,
                });
            }
        }
        let tubelets: Vec<_> = records.iter().map(|r| r.tubelet.clone()).collect();
        let preds = predict_tubelets(&model.params, &tubelets, model.mil.log_var)?;
        for (t, p) in tubelets.iter().zip(&preds) {
            let frame = t.center_frame();
            let keyframe = Keyframe { video: clip.id, frame };
            let bbox = t.boxes[frame - t.start_frame];
            for (class, &score) in p.probs.iter().enumerate() {
                predictions.push(FrameDetection {
                    keyframe,
                    class,
                    bbox,
                    score,
                });
            }
        }
        let linked = tubes_from_predictions(&model.params, &tubelets, model.mil.log_var, link)?;
        pred_tubes.push(VideoTubes {
            video: clip.id,
            tubes: linked.into_iter().flat_map(|o| o.tubes).collect(),
        });
        gt_tubes.push(VideoTubes {
            video: clip.id,
            tubes: ground_truth_tubes(clip),
        });
    }
    let frame = frame_ap(
        &keyframes,
        &predictions,
        &gt_boxes,
        &EvalConfig {
            iou_thresholds: eval.frame_iou.clone(),
            num_classes: classes,
        },
    )?;
    let video = video_ap(
        &pred_tubes,
        &gt_tubes,
        &EvalConfig {
            iou_thresholds: eval.video_iou.clone(),
            num_classes: classes,
        },
    )?;
    Ok((frame, video))
}

fn run_one(
    spec: &ExperimentSpec,
    setting: &Setting,
    seed: u64,
    train_world: &Prepared,
    test_world: &Prepared,
) -> Result<RunRecord> {
    let bags = train_world.bags(setting.window)?;
    if bags.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lookup = tubelet_lookup(&train_world.tubelets);
    let mut train_cfg = setting.train.clone();
    train_cfg.seed = seed;
    let (model, log) = train(&bags, &train_cfg)?;
    let (frame, video) = evaluate_model(&model, test_world, &spec.link, &spec.eval)?;
    Ok(RunRecord {
        experiment: spec.name.clone(),
        study: spec.study,
        setting: setting.name.clone(),
        seed,
        train_data: train_world.world.config.clone(),
        test_data: test_world.world.config.clone(),
        tubelets: spec.tubelets.clone(),
        window: setting.window,
        train: train_cfg.clone(),
        link: spec.link.clone(),
        eval: spec.eval.clone(),
        metrics: Metrics {
            frame_ap: frame,
            video_ap: video,
            violation_rate: violation_rate(&bags, &lookup),
            sampled_violation_rate: sampled_violation_rate(&bags, &lookup, train_cfg.tubelets_per_bag, 8, seed)?,
            train_bags: bags.len(),
            final_loss: log.epoch_loss.last().copied().unwrap_or(f64::NAN),
        },
    })
}

/// Writes `bytes` to `path` through a temporary file and a rename, so a crash
/// never leaves a partially written file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn run_path(out_dir: &Path, setting: &str, seed: u64) -> PathBuf {
    out_dir.join("runs").join(format!("{setting}__seed{seed}.json"))
}

fn record_bytes(record: &RunRecord) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(record)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Median of the values; the mean of the two central values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Named scalar metrics of a run, in table column order.
pub fn scalar_metrics(m: &Metrics) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for t in &m.frame_ap.thresholds {
        out.push((format!("frame_ap@{}", t.iou), t.mean_ap));
    }
    for t in &m.video_ap.thresholds {
        out.push((format!("video_ap@{}", t.iou), t.mean_ap));
    }
    out.push(("violation_rate".into(), m.violation_rate));
    out.push(("sampled_violation_rate".into(), m.sampled_violation_rate));
    out.push(("final_loss".into(), m.final_loss));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub setting: String,
    pub metric: String,
    pub median: f64,
    /// Per-seed values in seed order.
    pub values: Vec<f64>,
}

pub fn aggregate(spec: &ExperimentSpec, records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for setting in spec.settings() {
        let runs: Vec<&RunRecord> = spec
            .seeds
            .iter()
            .filter_map(|&s| records.iter().find(|r| r.setting == setting.name && r.seed == s))
            .collect();
        let Some(first) = runs.first() else { continue };
        for (i, (metric, _)) in scalar_metrics(&first.metrics).into_iter().enumerate() {
            let values: Vec<f64> = runs.iter().map(|r| scalar_metrics(&r.metrics)[i].1).collect();
            rows.push(AggregateRow {
                setting: setting.name.clone(),
                metric,
                median: median(&values),
                values,
            });
        }
    }
    rows
}

pub fn aggregate_csv(spec: &ExperimentSpec, rows: &[AggregateRow]) -> String {
    let mut s = String::from("setting,metric,median");
    for seed in &spec.seeds {
        s.push_str(&format!(",seed{seed}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{}", r.setting, r.metric, r.median));
        for v in &r.values {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub records: Vec<RunRecord>,
    pub rows: Vec<AggregateRow>,
}

impl StudyOutput {
    pub fn median(&self, setting: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.metric == metric)
            .map(|r| r.median)
    }
}

/// Runs every (setting, seed) pair, reusing completed run records whose
/// configuration matches, and writes `runs/*.json`, `aggregate.csv` and
/// `config.json` under `spec.out_dir`.
pub fn run(spec: &ExperimentSpec) -> Result<StudyOutput> {
    spec.validate()?;
    let settings = spec.settings();
    let per_seed: Vec<Vec<RunRecord>> = spec
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<RunRecord>> {
            let (train_cfg, test_cfg) = spec.worlds_for_seed(seed);
            let mut worlds: Option<(Prepared, Prepared)> = None;
            let mut out = Vec::with_capacity(settings.len());
            for setting in &settings {
                let path = run_path(&spec.out_dir, &setting.name, seed);
                let existing = fs::read(&path)
                    .ok()
                    .and_then(|text| serde_json::from_slice::<RunRecord>(&text).ok())
                    .filter(|r| r.produced_by(spec, setting, seed, &train_cfg, &test_cfg));
                if let Some(existing) = existing {
                    out.push(existing);
                    continue;
                }
                if worlds.is_none() {
                    worlds = Some((
                        Prepared::new(&train_cfg, &spec.tubelets)?,
                        Prepared::new(&test_cfg, &spec.tubelets)?,
                    ));
                }
                let (train_world, test_world) = worlds.as_ref().unwrap();
                let record = run_one(spec, setting, seed, train_world, test_world)?;
                write_atomic(&path, &record_bytes(&record)?)?;
                out.push(record);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let records: Vec<RunRecord> = per_seed.into_iter().flatten().collect();
    let rows = aggregate(spec, &records);
    write_atomic(
        &spec.out_dir.join("aggregate.csv"),
        aggregate_csv(spec, &rows).as_bytes(),
    )?;
    let mut config = serde_json::to_vec_pretty(spec)?;
    config.push(b'\n');
    write_atomic(&spec.out_dir.join("config.json"), &config)?;
    Ok(StudyOutput { records, rows })
}
