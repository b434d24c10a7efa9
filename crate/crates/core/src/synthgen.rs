//! Synthetic weakly labelled video worlds.
//!
//! A world is a set of clips. Each clip holds actors that move on
//! piecewise-linear paths and perform actions in disjoint intervals, plus
//! unlabelled bystanders. A simulated person detector observes every frame:
//! each actor box is emitted with probability `1 - fn_rate` with corner
//! jitter, and every bystander box is always emitted as a spurious detection.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`). Each clip draws from its
//! own stream (`set_stream(clip + 1)`) of the generator seeded with `seed`.
//! The class means come from a generator seeded with `feature_seed`, and
//! tubelet noise from one seeded with `seed ^ FEATURE_SALT`, one stream per
//! clip.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{tubelet_st_iou, BoundingBox, Tube, Tubelet, DEFAULT_TUBELET_LEN};
use crate::mil::BagLabel;
use crate::model::{sample_bag, Bag};

pub const DATASET_FORMAT: &str = "tubemil-dataset";
pub const DATASET_VERSION: u32 = 1;
const FEATURE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_clips: usize,
    /// Frames per clip (T).
    pub frames_per_clip: usize,
    pub num_classes: usize,
    /// Inclusive range of labelled actors per clip.
    pub actors_per_clip: (usize, usize),
    pub feature_dim: usize,
    /// Probability that the detector misses an actor in a frame.
    pub fn_rate: f64,
    /// Mean number of spurious (bystander) detections per frame.
    pub fp_rate: f64,
    /// Standard deviation of the per-corner box noise, in pixels.
    pub jitter_std: f64,
    pub feature_noise_std: f64,
    /// Euclidean norm of every class-mean feature vector.
    pub class_signal: f64,
    /// Euclidean norm of every class scene-context vector. Every tubelet of
    /// a clip carries the clip's context: the mean context of the classes
    /// performed in the clip scaled by a per-clip weight in `[0, 2)`. Zero
    /// disables scene context.
    pub context_signal: f64,
    /// Inclusive range of action lengths in frames.
    pub action_duration: (usize, usize),
    /// Inclusive range of actions per actor.
    pub actions_per_actor: (usize, usize),
    /// All actors of a clip share one action class.
    pub single_class_clips: bool,
    /// Maximum speed per axis, in pixels per frame.
    pub actor_speed: f64,
    pub frame_width: f64,
    pub frame_height: f64,
    /// Tubelet length K; also the keyframe spacing.
    pub tubelet_len: usize,
    /// Seed of the clips and the detector.
    pub seed: u64,
    /// Seed of the class-mean feature vectors; worlds that share it share a
    /// feature space, so models transfer between them.
    pub feature_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_clips: 40,
            frames_per_clip: 256,
            num_classes: 6,
            actors_per_clip: (1, 3),
            feature_dim: 64,
            fn_rate: 0.2,
            fp_rate: 1.0,
            jitter_std: 1.5,
            feature_noise_std: 1.0,
            class_signal: 3.0,
            context_signal: 0.0,
            action_duration: (48, 128),
            actions_per_actor: (1, 3),
            single_class_clips: false,
            actor_speed: 1.5,
            frame_width: 320.0,
            frame_height: 240.0,
            tubelet_len: DEFAULT_TUBELET_LEN,
            seed: 0,
            feature_seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.tubelet_len == 0 {
            return bad("tubelet length must be >= 1".into());
        }
        if self.frames_per_clip < self.tubelet_len {
            return bad(format!(
                "clips of {} frames are shorter than the tubelet length {}",
                self.frames_per_clip, self.tubelet_len
            ));
        }
        if self.num_classes == 0 || self.feature_dim == 0 {
            return bad("num_classes and feature_dim must be >= 1".into());
        }
        let (lo, hi) = self.actors_per_clip;
        if lo > hi {
            return bad(format!("actors_per_clip range ({lo}, {hi})"));
        }
        let (lo, hi) = self.action_duration;
        if lo == 0 || lo > hi || hi > self.frames_per_clip {
            return bad(format!(
                "action_duration ({lo}, {hi}) does not fit in {} frames",
                self.frames_per_clip
            ));
        }
        let (lo, hi) = self.actions_per_actor;
        if lo == 0 || lo > hi {
            return bad(format!("actions_per_actor range ({lo}, {hi})"));
        }
        if !(0.0..1.0).contains(&self.fn_rate) {
            return bad(format!("fn_rate {} outside [0, 1)", self.fn_rate));
        }
        if !(self.fp_rate.is_finite() && self.fp_rate >= 0.0) {
            return bad(format!("fp_rate {}", self.fp_rate));
        }
        for (name, v) in [
            ("jitter_std", self.jitter_std),
            ("feature_noise_std", self.feature_noise_std),
            ("class_signal", self.class_signal),
            ("context_signal", self.context_signal),
            ("actor_speed", self.actor_speed),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v}"));
            }
        }
        if !(self.frame_width >= 100.0 && self.frame_height >= 100.0) {
            return bad("frames must be at least 100x100".into());
        }
        Ok(())
    }

    /// Keyframe indices `g` of a clip; keyframe `g` sits at frame `g*K + K/2`.
    pub fn num_keyframes(&self) -> usize {
        self.frames_per_clip / self.tubelet_len
    }

    pub fn keyframe_frame(&self, g: usize) -> usize {
        g * self.tubelet_len + self.tubelet_len / 2
    }
}

/// An action performed over frames `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionInterval {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl ActionInterval {
    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorTrack {
    pub id: usize,
    /// One box per frame of the clip.
    pub boxes: Vec<BoundingBox>,
    pub actions: Vec<ActionInterval>,
}

impl ActorTrack {
    pub fn active_classes(&self, frame: usize) -> Vec<usize> {
        let mut classes: Vec<usize> = self
            .actions
            .iter()
            .filter(|a| a.contains(frame))
            .map(|a| a.class)
            .collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub actors: Vec<ActorTrack>,
    /// Unlabelled people; every one of their boxes reaches the detector.
    pub bystanders: Vec<Vec<BoundingBox>>,
}

impl GroundTruth {
    /// Union of the action classes active at a frame.
    pub fn labels_at(&self, frame: usize) -> BTreeSet<usize> {
        self.actors.iter().flat_map(|a| a.active_classes(frame)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    Actor(usize),
    Bystander(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub source: DetectionSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub id: usize,
    pub truth: GroundTruth,
    /// Scene-context offset shared by every tubelet of the clip.
    pub context: Vec<f64>,
    /// Detections per frame.
    pub detections: Vec<Vec<Detection>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: SyntheticConfig,
    pub class_means: Vec<Vec<f64>>,
    pub class_contexts: Vec<Vec<f64>>,
    pub clips: Vec<Clip>,
}

fn uniform_usize(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated standard deviation")
}

/// A box moving on a piecewise-linear path that reflects off the frame edges.
fn moving_track(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<BoundingBox> {
    let w = rng.random_range(24.0..48.0);
    let h = w * rng.random_range(1.8..2.4);
    let (max_x, max_y) = (cfg.frame_width - w, cfg.frame_height - h);
    let mut x: f64 = rng.random_range(0.0..max_x);
    let mut y: f64 = rng.random_range(0.0..max_y);
    let speed = cfg.actor_speed;
    let mut velocity = (0.0, 0.0);
    let mut until = 0;
    let mut boxes = Vec::with_capacity(cfg.frames_per_clip);
    for frame in 0..cfg.frames_per_clip {
        if frame == until {
            velocity = if speed > 0.0 {
                (rng.random_range(-speed..=speed), rng.random_range(-speed..=speed))
            } else {
                (0.0, 0.0)
            };
            until = frame + rng.random_range(16..=48);
        }
        boxes.push(BoundingBox::new(x, y, x + w, y + h).expect("positive size"));
        x += velocity.0;
        y += velocity.1;
        if x < 0.0 || x > max_x {
            velocity.0 = -velocity.0;
            x = x.clamp(0.0, max_x);
        }
        if y < 0.0 || y > max_y {
            velocity.1 = -velocity.1;
            y = y.clamp(0.0, max_y);
        }
    }
    boxes
}

/// Disjoint action intervals; the timeline is split into equal segments and
/// one interval is placed inside each.
fn action_intervals(cfg: &SyntheticConfig, clip_class: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<ActionInterval> {
    let t = cfg.frames_per_clip;
    let (dmin, dmax) = cfg.action_duration;
    let mut count = uniform_usize(rng, cfg.actions_per_actor);
    while count > 1 && dmin > t / count {
        count -= 1;
    }
    let seg = t / count;
    (0..count)
        .map(|i| {
            let seg_start = i * seg;
            let seg_len = if i + 1 == count { t - seg_start } else { seg };
            let duration = rng.random_range(dmin..=dmax.min(seg_len));
            let start = seg_start + rng.random_range(0..=seg_len - duration);
            let class = clip_class.unwrap_or_else(|| rng.random_range(0..cfg.num_classes));
            ActionInterval {
                class,
                start,
                end: start + duration,
            }
        })
        .collect()
}

fn jitter(b: &BoundingBox, std: f64, score: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
    if std == 0.0 {
        return b.rescored(score).expect("valid score");
    }
    let n = normal(std);
    let x0 = b.x_min() + n.sample(rng);
    let y0 = b.y_min() + n.sample(rng);
    let x1 = (b.x_max() + n.sample(rng)).max(x0 + 1.0);
    let y1 = (b.y_max() + n.sample(rng)).max(y0 + 1.0);
    BoundingBox::with_score(x0, y0, x1, y1, score).expect("jittered box keeps positive size")
}

fn generate_clip(cfg: &SyntheticConfig, contexts: &[Vec<f64>], id: usize) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id as u64 + 1);

    let clip_class = cfg.single_class_clips.then(|| rng.random_range(0..cfg.num_classes));
    let num_actors = uniform_usize(&mut rng, cfg.actors_per_clip);
    let actors: Vec<ActorTrack> = (0..num_actors)
        .map(|a| {
            let boxes = moving_track(cfg, &mut rng);
            let actions = action_intervals(cfg, clip_class, &mut rng);
            ActorTrack { id: a, boxes, actions }
        })
        .collect();
    let num_bystanders = if cfg.fp_rate > 0.0 {
        Poisson::new(cfg.fp_rate).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    let bystanders: Vec<Vec<BoundingBox>> = (0..num_bystanders).map(|_| moving_track(cfg, &mut rng)).collect();

    let detections = (0..cfg.frames_per_clip)
        .map(|f| {
            let mut frame = Vec::new();
            for actor in &actors {
                if rng.random::<f64>() >= cfg.fn_rate {
                    let score = rng.random_range(0.5..1.0);
                    frame.push(Detection {
                        bbox: jitter(&actor.boxes[f], cfg.jitter_std, score, &mut rng),
                        source: DetectionSource::Actor(actor.id),
                    });
                }
            }
            for (i, track) in bystanders.iter().enumerate() {
                let score = rng.random_range(0.5..1.0);
                frame.push(Detection {
                    bbox: jitter(&track[f], cfg.jitter_std, score, &mut rng),
                    source: DetectionSource::Bystander(i),
                });
            }
            frame
        })
        .collect();

    let classes: BTreeSet<usize> = actors.iter().flat_map(|a| a.actions.iter().map(|x| x.class)).collect();
    let weight = rng.random_range(0.0..2.0) / classes.len().max(1) as f64;
    let mut context = vec![0.0; cfg.feature_dim];
    for &c in &classes {
        context.iter_mut().zip(&contexts[c]).for_each(|(x, v)| *x += weight * v);
    }

    Clip {
        id,
        truth: GroundTruth { actors, bystanders },
        context,
        detections,
    }
}

/// Class means followed by class contexts, both drawn from `feature_seed`.
fn class_vectors(cfg: &SyntheticConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.feature_seed);
    let n = normal(1.0);
    let mut draw = |norm_target: f64| -> Vec<Vec<f64>> {
        (0..cfg.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..cfg.feature_dim).map(|_| n.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * norm_target / norm).collect()
            })
            .collect()
    };
    let means = draw(cfg.class_signal);
    let contexts = draw(cfg.context_signal);
    (means, contexts)
}

/// Generates a world; identical configs give identical worlds.
pub fn generate(cfg: &SyntheticConfig) -> Result<World> {
    cfg.validate()?;
    let (class_means, class_contexts) = class_vectors(cfg);
    let clips = (0..cfg.num_clips)
        .map(|i| generate_clip(cfg, &class_contexts, i))
        .collect();
    Ok(World {
        config: cfg.clone(),
        class_means,
        class_contexts,
        clips,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TubeletConfig {
    /// Minimum IoU between a track's last box and a detection to extend it.
    pub link_iou: f64,
    /// Frames a track may go undetected before it is closed; missing boxes
    /// are interpolated.
    pub max_miss: usize,
    /// Same-window tubelets at or above this spatio-temporal IoU are merged,
    /// keeping the higher-scoring one.
    pub dedup_iou: f64,
    /// Minimum centre-frame IoU for attributing a tubelet to an actor.
    pub attribution_iou: f64,
}

impl Default for TubeletConfig {
    fn default() -> Self {
        Self {
            link_iou: 0.3,
            max_miss: 6,
            dedup_iou: 0.5,
            attribution_iou: 0.5,
        }
    }
}

/// What the generator knows about a tubelet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TubeletTruth {
    pub clip: usize,
    /// Actor best overlapping the centre frame, if any.
    pub actor: Option<usize>,
    /// Classes that actor performs at the centre frame.
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeletRecord {
    pub tubelet: Tubelet,
    pub truth: TubeletTruth,
}

struct Track {
    start: usize,
    boxes: Vec<Option<BoundingBox>>,
    last: BoundingBox,
    misses: usize,
}

impl Track {
    /// Boxes of matched frames with the gaps interpolated.
    fn filled(&self) -> Vec<BoundingBox> {
        let mut out: Vec<BoundingBox> = Vec::with_capacity(self.boxes.len());
        let mut i = 0;
        while i < self.boxes.len() {
            match self.boxes[i] {
                Some(b) => {
                    out.push(b);
                    i += 1;
                }
                None => {
                    let prev = *out.last().expect("tracks start with a detection");
                    let next_idx = (i..self.boxes.len()).find(|&k| self.boxes[k].is_some()).unwrap();
                    let next = self.boxes[next_idx].unwrap();
                    let span = (next_idx - i + 1) as f64;
                    for k in i..next_idx {
                        out.push(prev.lerp(&next, (k - i + 1) as f64 / span));
                    }
                    i = next_idx;
                }
            }
        }
        out
    }
}

/// Greedy frame-to-frame association of detections into tracks.
fn associate(detections: &[Vec<Detection>], cfg: &TubeletConfig) -> Vec<(usize, Vec<BoundingBox>)> {
    let mut active: Vec<Track> = Vec::new();
    let mut finished: Vec<Track> = Vec::new();
    for (frame, dets) in detections.iter().enumerate() {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, track) in active.iter().enumerate() {
            for (di, det) in dets.iter().enumerate() {
                let v = track.last.iou(&det.bbox);
                if v >= cfg.link_iou && v > 0.0 {
                    pairs.push((v, ti, di));
                }
            }
        }
        // highest IoU first; ties broken by track then detection order
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_taken = vec![false; active.len()];
        let mut det_taken = vec![false; dets.len()];
        for (_, ti, di) in pairs {
            if track_taken[ti] || det_taken[di] {
                continue;
            }
            track_taken[ti] = true;
            det_taken[di] = true;
            let track = &mut active[ti];
            track.boxes.resize(frame - track.start, None);
            track.boxes.push(Some(dets[di].bbox));
            track.last = dets[di].bbox;
            track.misses = 0;
        }
        let mut still = Vec::with_capacity(active.len());
        for (ti, mut track) in active.into_iter().enumerate() {
            if !track_taken[ti] {
                track.misses += 1;
            }
            if track.misses > cfg.max_miss {
                finished.push(track);
            } else {
                still.push(track);
            }
        }
        active = still;
        for (di, det) in dets.iter().enumerate() {
            if !det_taken[di] {
                active.push(Track {
                    start: frame,
                    boxes: vec![Some(det.bbox)],
                    last: det.bbox,
                    misses: 0,
                });
            }
        }
    }
    finished.extend(active);
    finished.sort_by_key(|t| t.start);
    finished.into_iter().map(|t| (t.start, t.filled())).collect()
}

fn attribute(truth: &GroundTruth, frame: usize, b: &BoundingBox, min_iou: f64) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for actor in &truth.actors {
        let v = actor.boxes[frame].iou(b);
        if v >= min_iou && best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, actor.id));
        }
    }
    best.map(|(_, id)| id)
}

/// Tubelet id: clip index in the high 32 bits, running index in the low bits.
pub fn tubelet_id(clip: usize, index: usize) -> u64 {
    ((clip as u64) << 32) | index as u64
}

/// Cuts detection tracks of one clip into K-frame tubelets aligned to the
/// keyframe grid (`[gK, gK + K)`) and attaches features.
pub fn build_tubelets(world: &World, clip: &Clip, cfg: &TubeletConfig) -> Vec<TubeletRecord> {
    let k = world.config.tubelet_len;
    let tracks = associate(&clip.detections, cfg);

    let mut rng = ChaCha8Rng::seed_from_u64(world.config.seed ^ FEATURE_SALT);
    rng.set_stream(clip.id as u64 + 1);
    let noise = normal(world.config.feature_noise_std);

    let mut records = Vec::new();
    for (start, boxes) in tracks {
        let end = start + boxes.len();
        let first_cell = start.div_ceil(k);
        let mut cell = first_cell;
        while (cell + 1) * k <= end {
            let s = cell * k;
            let cell_boxes = boxes[s - start..s + k - start].to_vec();
            let centre = s + k / 2;
            let actor = attribute(&clip.truth, centre, &cell_boxes[k / 2], cfg.attribution_iou);
            let active = actor
                .map(|a| clip.truth.actors[a].active_classes(centre))
                .unwrap_or_default();
            let mut feature: Vec<f64> = clip.context.iter().map(|c| c + noise.sample(&mut rng)).collect();
            for &c in &active {
                feature.iter_mut().zip(&world.class_means[c]).for_each(|(f, m)| *f += m);
            }
            let id = tubelet_id(clip.id, records.len());
            records.push(TubeletRecord {
                tubelet: Tubelet::new(id, s, cell_boxes, feature).expect("non-empty"),
                truth: TubeletTruth {
                    clip: clip.id,
                    actor,
                    active,
                },
            });
            cell += 1;
        }
    }
    dedup(records, cfg.dedup_iou)
}

fn dedup(records: Vec<TubeletRecord>, threshold: f64) -> Vec<TubeletRecord> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .tubelet
            .score()
            .total_cmp(&records[a].tubelet.score())
            .then(records[a].tubelet.id.cmp(&records[b].tubelet.id))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let t = &records[i].tubelet;
        if kept.iter().all(|&j| tubelet_st_iou(t, &records[j].tubelet) < threshold) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let mut keep = vec![false; records.len()];
    kept.into_iter().for_each(|i| keep[i] = true);
    records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect()
}

/// Tubelets of every clip, one list per clip.
pub fn build_all_tubelets(world: &World, cfg: &TubeletConfig) -> Vec<Vec<TubeletRecord>> {
    use rayon::prelude::*;
    world
        .clips
        .par_iter()
        .map(|clip| build_tubelets(world, clip, cfg))
        .collect()
}

/// Sub-clip length used to turn keyframe labels into bag labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// `N` consecutive keyframes.
    Keyframes(usize),
    WholeClip,
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Window::Keyframes(n) => write!(f, "{n}"),
            Window::WholeClip => f.write_str("whole"),
        }
    }
}

impl std::str::FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "whole" {
            return Ok(Window::WholeClip);
        }
        s.parse()
            .map(Window::Keyframes)
            .map_err(|_| Error::Config(format!("window `{s}` is neither a keyframe count nor `whole`")))
    }
}

/// Bag membership and label as stored in a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagIndex {
    pub source: String,
    pub clip: usize,
    /// Frame range `[start, end)` of the window.
    pub frames: (usize, usize),
    pub label: BagLabel,
    pub members: Vec<u64>,
}

/// Partitions every clip into windows and builds one bag per window that
/// contains at least one tubelet centre.
pub fn build_bags(world: &World, tubelets: &[Vec<TubeletRecord>], window: Window) -> Result<Vec<BagIndex>> {
    let cfg = &world.config;
    let k = cfg.tubelet_len;
    let keyframes = cfg.num_keyframes();
    let per_window = match window {
        Window::Keyframes(0) => {
            return Err(Error::Config("window must span at least one keyframe".into()));
        }
        Window::Keyframes(n) => n.min(keyframes.max(1)),
        Window::WholeClip => keyframes.max(1),
    };
    let mut bags = Vec::new();
    for (clip, records) in world.clips.iter().zip(tubelets) {
        let windows = keyframes.max(1).div_ceil(per_window);
        for w in 0..windows {
            let start = w * per_window * k;
            let end = if w + 1 == windows {
                cfg.frames_per_clip
            } else {
                (w + 1) * per_window * k
            };
            let members: Vec<u64> = records
                .iter()
                .filter(|r| (start..end).contains(&r.tubelet.center_frame()))
                .map(|r| r.tubelet.id)
                .collect();
            if members.is_empty() {
                continue;
            }
            let classes: BTreeSet<usize> = (w * per_window..((w + 1) * per_window).min(keyframes))
                .flat_map(|g| clip.truth.labels_at(cfg.keyframe_frame(g)))
                .collect();
            let classes: Vec<usize> = classes.into_iter().collect();
            bags.push(BagIndex {
                source: format!("clip{:04}/w{w:03}", clip.id),
                clip: clip.id,
                frames: (start, end),
                label: BagLabel::from_classes(cfg.num_classes, &classes),
                members,
            });
        }
    }
    Ok(bags)
}

/// Tubelet records by id.
pub fn tubelet_lookup(tubelets: &[Vec<TubeletRecord>]) -> HashMap<u64, &TubeletRecord> {
    tubelets.iter().flatten().map(|r| (r.tubelet.id, r)).collect()
}

/// Materialises training bags from an index.
pub fn materialize_bags(index: &[BagIndex], tubelets: &[Vec<TubeletRecord>]) -> Result<Vec<Bag>> {
    let lookup = tubelet_lookup(tubelets);
    index
        .iter()
        .map(|b| {
            let instances = b
                .members
                .iter()
                .map(|id| {
                    lookup
                        .get(id)
                        .map(|r| r.tubelet.clone())
                        .ok_or_else(|| Error::Format(format!("bag {} references unknown tubelet {id}", b.source)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Bag {
                instances,
                label: b.label.clone(),
                source_clip: b.source.clone(),
            })
        })
        .collect()
}

/// A labelled bag violates the MIL assumption when some positive class has
/// no instance of an actor performing it at the tubelet centre.
pub fn violates_mil(bag: &Bag, lookup: &HashMap<u64, &TubeletRecord>) -> bool {
    bag.label.positives().any(|class| {
        !bag.instances
            .iter()
            .any(|t| lookup.get(&t.id).is_some_and(|r| r.truth.active.contains(&class)))
    })
}

/// Fraction of bags violating the MIL assumption, before sampling.
pub fn violation_rate(bags: &[Bag], lookup: &HashMap<u64, &TubeletRecord>) -> f64 {
    if bags.is_empty() {
        return 0.0;
    }
    bags.iter().filter(|b| violates_mil(b, lookup)).count() as f64 / bags.len() as f64
}

/// Expected violation fraction of bags after down-sampling to `cap`
/// tubelets, averaged over `draws` seeded draws per bag.
pub fn sampled_violation_rate(
    bags: &[Bag],
    lookup: &HashMap<u64, &TubeletRecord>,
    cap: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if bags.is_empty() || draws == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violated = 0usize;
    for bag in bags {
        for _ in 0..draws {
            if violates_mil(&sample_bag(bag, cap, &mut rng)?, lookup) {
                violated += 1;
            }
        }
    }
    Ok(violated as f64 / (bags.len() * draws) as f64)
}

/// Ground-truth action tubes of a clip: one tube per actor action interval.
pub fn ground_truth_tubes(clip: &Clip) -> Vec<Tube> {
    let mut tubes = Vec::new();
    for actor in &clip.truth.actors {
        for a in &actor.actions {
            let segments = (a.start..a.end).map(|f| (f, actor.boxes[f])).collect();
            let mut tube = Tube::new(a.class, 1.0, segments).expect("intervals are non-empty");
            tube.members = vec![actor.id as u64];
            tubes.push(tube);
        }
    }
    tubes
}

/// Ground-truth boxes at keyframe `g`: `(class, box)` for every active label.
pub fn keyframe_ground_truth(config: &SyntheticConfig, clip: &Clip, g: usize) -> Vec<(usize, BoundingBox)> {
    let frame = config.keyframe_frame(g);
    clip.truth
        .actors
        .iter()
        .flat_map(|a| a.active_classes(frame).into_iter().map(move |c| (c, a.boxes[frame])))
        .collect()
}

/// A complete dataset file: world, tubelets and bag index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: World,
    pub tubelet_config: TubeletConfig,
    pub window: Window,
    pub tubelets: Vec<Vec<TubeletRecord>>,
    pub bags: Vec<BagIndex>,
}

impl Dataset {
    pub fn build(config: &SyntheticConfig, tubelet_config: &TubeletConfig, window: Window) -> Result<Self> {
        let world = generate(config)?;
        let tubelets = build_all_tubelets(&world, tubelet_config);
        let bags = build_bags(&world, &tubelets, window)?;
        Ok(Self {
            world,
            tubelet_config: tubelet_config.clone(),
            window,
            tubelets,
            bags,
        })
    }

    pub fn training_bags(&self) -> Result<Vec<Bag>> {
        materialize_bags(&self.bags, &self.tubelets)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        format: String,
        version: u32,
    },
    Config {
        synthetic: SyntheticConfig,
        tubelets: TubeletConfig,
        window: Window,
    },
    ClassMeans {
        means: Vec<Vec<f64>>,
        contexts: Vec<Vec<f64>>,
    },
    Clip {
        id: usize,
        truth: GroundTruth,
        context: Vec<f64>,
    },
    Detections {
        clip: usize,
        frame: usize,
        detections: Vec<Detection>,
    },
    Tubelet(TubeletRecord),
    Bag(BagIndex),
    End {
        clips: usize,
        tubelets: usize,
        bags: usize,
    },
}

impl Dataset {
    /// Line-delimited JSON, one record per line, in a fixed order:
    /// `header`, `config`, `class_means`, per clip one `clip` record followed
    /// by one `detections` record per frame, then all `tubelet` records,
    /// all `bag` records and a closing `end` record with counts.
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        let mut emit = |r: &Record| -> Result<()> {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        emit(&Record::Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
        })?;
        emit(&Record::Config {
            synthetic: self.world.config.clone(),
            tubelets: self.tubelet_config.clone(),
            window: self.window,
        })?;
        emit(&Record::ClassMeans {
            means: self.world.class_means.clone(),
            contexts: self.world.class_contexts.clone(),
        })?;
        for clip in &self.world.clips {
            emit(&Record::Clip {
                id: clip.id,
                truth: clip.truth.clone(),
                context: clip.context.clone(),
            })?;
            for (frame, dets) in clip.detections.iter().enumerate() {
                emit(&Record::Detections {
                    clip: clip.id,
                    frame,
                    detections: dets.clone(),
                })?;
            }
        }
        let mut count = 0;
        for r in self.tubelets.iter().flatten() {
            emit(&Record::Tubelet(r.clone()))?;
            count += 1;
        }
        for b in &self.bags {
            emit(&Record::Bag(b.clone()))?;
        }
        emit(&Record::End {
            clips: self.world.clips.len(),
            tubelets: count,
            bags: self.bags.len(),
        })?;
        out.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let mut next = || -> Result<Option<(usize, Record)>> {
            match lines.next() {
                None => Ok(None),
                Some((i, line)) => {
                    let line = line?;
                    let rec = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
                    Ok(Some((i + 1, rec)))
                }
            }
        };
        let unexpected = |line: usize, what: &str| Error::Format(format!("line {line}: expected {what}"));

        match next()? {
            Some((_, Record::Header { format, version })) => {
                if format != DATASET_FORMAT {
                    return Err(Error::Format(format!("not a dataset file: {format}")));
                }
                if version != DATASET_VERSION {
                    return Err(Error::Format(format!("unsupported dataset version {version}")));
                }
            }
            Some((l, _)) => return Err(unexpected(l, "header")),
            None => return Err(Error::Format("empty file".into())),
        }
        let (config, tubelet_config, window) = match next()? {
            Some((
                _,
                Record::Config {
                    synthetic,
                    tubelets,
                    window,
                },
            )) => (synthetic, tubelets, window),
            Some((l, _)) => return Err(unexpected(l, "config")),
            None => return Err(Error::Format("truncated file".into())),
        };
        config.validate()?;
        let (class_means, class_contexts) = match next()? {
            Some((_, Record::ClassMeans { means, contexts })) => (means, contexts),
            Some((l, _)) => return Err(unexpected(l, "class_means")),
            None => return Err(Error::Format("truncated file".into())),
        };

        let mut clips: Vec<Clip> = Vec::new();
        let mut tubelets: Vec<Vec<TubeletRecord>> = Vec::new();
        let mut bags = Vec::new();
        loop {
            let Some((line, rec)) = next()? else {
                return Err(Error::Format("missing end record".into()));
            };
            match rec {
                Record::Clip { id, truth, context } => {
                    if id != clips.len() {
                        return Err(unexpected(line, &format!("clip {}", clips.len())));
                    }
                    clips.push(Clip {
                        id,
                        truth,
                        context,
                        detections: Vec::new(),
                    });
                    tubelets.push(Vec::new());
                }
                Record::Detections {
                    clip,
                    frame,
                    detections,
                } => {
                    let c = clips
                        .last_mut()
                        .filter(|c| c.id == clip && c.detections.len() == frame)
                        .ok_or_else(|| unexpected(line, "detections of the current clip in frame order"))?;
                    c.detections.push(detections);
                }
                Record::Tubelet(r) => {
                    let slot = tubelets
                        .get_mut(r.truth.clip)
                        .ok_or_else(|| unexpected(line, "tubelet of a known clip"))?;
                    slot.push(r);
                }
                Record::Bag(b) => bags.push(b),
                Record::End {
                    clips: n_clips,
                    tubelets: n_tubelets,
                    bags: n_bags,
                } => {
                    let total: usize = tubelets.iter().map(Vec::len).sum();
                    if n_clips != clips.len() || n_tubelets != total || n_bags != bags.len() {
                        return Err(Error::Format("record counts do not match the end record".into()));
                    }
                    break;
                }
                _ => return Err(unexpected(line, "clip, detections, tubelet, bag or end")),
            }
        }
        Ok(Self {
            world: World {
                config,
                class_means,
                class_contexts,
                clips,
            },
            tubelet_config,
            window,
            tubelets,
            bags,
        })
    }
}
