#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tubemil::eval::{video_ap, EvalConfig, FrameDetection, Keyframe, VideoTubes};
use tubemil::geometry::{iou, tube_iou, BoundingBox, Tube};
use tubemil::linking::{link_all, LinkConfig, ScoredTubelet};
use tubemil::mil::{LogVarTransform, MilConfig, PoolingConfig, PoolingKind};
use tubemil::model::{bag_gradient, bag_loss, Bag, ModelParams, TrainMode};
use tubemil::study::{ExperimentSpec, Study};
use tubemil::synthgen::{
    build_tubelets, generate, ground_truth_tubes, Clip, SyntheticConfig, TubeletConfig, TubeletRecord, Window,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// finite differences

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub struct GradCase {
    pub params: ModelParams,
    pub bag: Bag,
    pub mil: MilConfig,
    pub mode: TrainMode,
}

fn unit_box() -> BoundingBox {
    BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()
}

pub fn random_bag(rng: &mut ChaCha8Rng, n: usize, classes: usize, dim: usize) -> Bag {
    let instances = (0..n)
        .map(|j| {
            let feature = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            tubemil::geometry::Tubelet::new(j as u64, 0, vec![unit_box()], feature).unwrap()
        })
        .collect();
    let y = (0..classes).map(|_| rng.random_bool(0.5)).collect();
    Bag {
        instances,
        label: tubemil::mil::BagLabel::new(y),
        source_clip: "random".into(),
    }
}

fn random_params(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> ModelParams {
    let mut p = ModelParams::zeros(classes, dim);
    for block in [&mut p.w_cls, &mut p.b_cls, &mut p.w_unc, &mut p.b_unc] {
        block.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    }
    p
}

/// Smallest gap between the best and second best logit of any class. Max
/// pooling is not differentiable at ties, so cases close to one are redrawn.
fn min_top_gap(params: &ModelParams, bag: &Bag) -> f64 {
    let logits: Vec<Vec<f64>> = bag
        .instances
        .iter()
        .map(|t| params.logits(&t.feature).unwrap())
        .collect();
    (0..params.num_classes)
        .map(|l| {
            let mut col: Vec<f64> = logits.iter().map(|r| r[l]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            if col.len() > 1 {
                col[0] - col[1]
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// A random bag, parameter point and loss configuration covering every
/// pooling kind, both losses, both log-variance transforms and the naive path.
pub fn grad_case(seed: u64) -> GradCase {
    let mut rng = rng(seed);
    loop {
        let classes = rng.random_range(1..=3);
        let dim = rng.random_range(1..=5);
        let n = rng.random_range(1..=6);
        let bag = random_bag(&mut rng, n, classes, dim);
        let params = random_params(&mut rng, classes, dim);
        let kind = [PoolingKind::Max, PoolingKind::Mean, PoolingKind::Lse][rng.random_range(0..3)];
        let r = if kind == PoolingKind::Max {
            1.0
        } else {
            rng.random_range(0.5..8.0)
        };
        let mil = MilConfig {
            pooling: PoolingConfig { kind, r },
            uncertainty: rng.random_bool(0.7),
            log_var: if rng.random_bool(0.5) {
                LogVarTransform::Softplus
            } else {
                LogVarTransform::Identity
            },
        };
        let mode = if rng.random_bool(0.2) {
            TrainMode::Naive
        } else {
            TrainMode::Mil
        };
        if mode == TrainMode::Mil && kind == PoolingKind::Max && min_top_gap(&params, &bag) < 1e-3 {
            continue;
        }
        return GradCase { params, bag, mil, mode };
    }
}

/// Relative error between the analytic parameter gradient and central
/// differences of the forward loss.
pub fn grad_case_error(case: &GradCase) -> f64 {
    let (_, analytic) = bag_gradient(&case.params, &case.bag, &case.mil, case.mode).unwrap();
    let (c, d) = (case.params.num_classes, case.params.feature_dim);
    let numeric = central_diff(&case.params.to_flat(), |x| {
        let p = ModelParams::from_flat(c, d, x).unwrap();
        bag_loss(&p, &case.bag, &case.mil, case.mode).unwrap()
    });
    relative_error(&analytic.to_flat(), &numeric)
}

// ---------------------------------------------------------------------------
// brute-force AP oracle

/// Exact non-negative rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio(pub u128, pub u128);

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    fn reduced(self) -> Self {
        let g = gcd(self.0, self.1).max(1);
        Ratio(self.0 / g, self.1 / g)
    }

    fn add(self, o: Ratio) -> Ratio {
        Ratio(self.0 * o.1 + o.0 * self.1, self.1 * o.1).reduced()
    }

    fn max(self, o: Ratio) -> Ratio {
        if self.0 * o.1 >= o.0 * self.1 {
            self
        } else {
            o
        }
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// One prediction for the oracle: group (keyframe or video), class, score
/// and its overlaps with each ground truth of the same group and class.
pub struct OraclePred {
    pub group: u64,
    pub class: usize,
    pub score: f64,
    pub overlaps: Vec<f64>,
}

/// Best assignment under the lexicographic order of the per-rank choices,
/// where taking ground truth `g` ranks as `(1, overlap, -g)` and taking
/// nothing as `(0)`. Found by enumerating every injective assignment.
fn best_assignment(overlaps: &[&[f64]], threshold: f64, num_gt: usize) -> Vec<Option<usize>> {
    fn key(choice: Option<usize>, ov: &[f64]) -> (u8, f64, i64) {
        match choice {
            Some(g) => (1, ov[g], -(g as i64)),
            None => (0, 0.0, 0),
        }
    }
    fn better(a: &[Option<usize>], b: &[Option<usize>], overlaps: &[&[f64]]) -> bool {
        for (k, ov) in overlaps.iter().enumerate() {
            let (ka, kb) = (key(a[k], ov), key(b[k], ov));
            match ka.partial_cmp(&kb).unwrap() {
                std::cmp::Ordering::Greater => return true,
                std::cmp::Ordering::Less => return false,
                std::cmp::Ordering::Equal => {}
            }
        }
        false
    }
    fn search(
        k: usize,
        overlaps: &[&[f64]],
        threshold: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        best: &mut Option<Vec<Option<usize>>>,
    ) {
        if k == overlaps.len() {
            if best.as_ref().is_none_or(|b| better(current, b, overlaps)) {
                *best = Some(current.clone());
            }
            return;
        }
        current.push(None);
        search(k + 1, overlaps, threshold, used, current, best);
        current.pop();
        for g in 0..used.len() {
            if !used[g] && overlaps[k][g] >= threshold {
                used[g] = true;
                current.push(Some(g));
                search(k + 1, overlaps, threshold, used, current, best);
                current.pop();
                used[g] = false;
            }
        }
    }
    let mut best = None;
    search(
        0,
        overlaps,
        threshold,
        &mut vec![false; num_gt],
        &mut Vec::new(),
        &mut best,
    );
    best.unwrap()
}

/// Oracle AP of one class: enumerate matchings per group, then integrate the
/// interpolated precision in exact arithmetic.
pub fn oracle_class_ap(
    preds: &[OraclePred],
    gt_per_group: &[(u64, usize)],
    class: usize,
    threshold: f64,
) -> Option<f64> {
    let num_gt: usize = gt_per_group.iter().map(|&(_, n)| n).sum();
    if num_gt == 0 {
        return None;
    }
    // stable: equal scores keep their input order
    let mut ranked: Vec<&OraclePred> = preds.iter().filter(|p| p.class == class).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut tp = vec![false; ranked.len()];
    for &(group, n) in gt_per_group {
        let members: Vec<usize> = (0..ranked.len()).filter(|&i| ranked[i].group == group).collect();
        let ovs: Vec<&[f64]> = members.iter().map(|&i| ranked[i].overlaps.as_slice()).collect();
        for (&i, m) in members.iter().zip(best_assignment(&ovs, threshold, n)) {
            tp[i] = m.is_some();
        }
    }
    let mut hits = 0u128;
    let precision: Vec<Ratio> = tp
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            hits += t as u128;
            Ratio(hits, k as u128 + 1).reduced()
        })
        .collect();
    let mut area = Ratio(0, 1);
    for k in 0..ranked.len() {
        if tp[k] {
            let interp = precision[k..].iter().fold(Ratio(0, 1), |m, &p| m.max(p));
            area = area.add(interp);
        }
    }
    Some(Ratio(area.0, area.1 * num_gt as u128).reduced().to_f64())
}

/// A small random frame-level instance on an integer grid, with ties in
/// score and in overlap.
pub struct FrameInstance {
    pub keyframes: Vec<Keyframe>,
    pub preds: Vec<FrameDetection>,
    pub gts: Vec<FrameDetection>,
    pub num_classes: usize,
}

fn grid_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let x = rng.random_range(0..6) as f64;
    let y = rng.random_range(0..3) as f64;
    let w = rng.random_range(1..=4) as f64;
    let h = rng.random_range(1..=3) as f64;
    BoundingBox::new(x, y, x + w, y + h).unwrap()
}

fn small_score(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..6) as f64 / 5.0
}

pub fn frame_instance(seed: u64) -> FrameInstance {
    let mut rng = rng(seed);
    let num_classes = rng.random_range(1..=2);
    let keyframes: Vec<Keyframe> = (0..rng.random_range(1..=2))
        .map(|i| Keyframe {
            video: i % 2,
            frame: 8 + 16 * (i / 2),
        })
        .collect();
    let pick = |rng: &mut ChaCha8Rng| keyframes[rng.random_range(0..keyframes.len())];
    let gts = (0..rng.random_range(0..=4))
        .map(|_| FrameDetection {
            keyframe: pick(&mut rng),
            class: rng.random_range(0..num_classes),
            bbox: grid_box(&mut rng),
            score: 1.0,
        })
        .collect::<Vec<_>>();
    let preds = (0..rng.random_range(0..=6))
        .map(|_| {
            let class = rng.random_range(0..num_classes);
            // half of the predictions copy a ground-truth box and group
            if !gts.is_empty() && rng.random_bool(0.5) {
                let g: &FrameDetection = &gts[rng.random_range(0..gts.len())];
                FrameDetection {
                    score: small_score(&mut rng),
                    class,
                    ..*g
                }
            } else {
                FrameDetection {
                    keyframe: pick(&mut rng),
                    class,
                    bbox: grid_box(&mut rng),
                    score: small_score(&mut rng),
                }
            }
        })
        .collect();
    FrameInstance {
        keyframes,
        preds,
        gts,
        num_classes,
    }
}

fn key(k: &Keyframe) -> u64 {
    ((k.video as u64) << 32) | k.frame as u64
}

/// Oracle per-class AP for a frame instance.
pub fn frame_oracle(inst: &FrameInstance, threshold: f64) -> Vec<Option<f64>> {
    (0..inst.num_classes)
        .map(|c| {
            let gt_of = |g: u64| -> Vec<&FrameDetection> {
                inst.gts
                    .iter()
                    .filter(|d| d.class == c && key(&d.keyframe) == g)
                    .collect()
            };
            let preds: Vec<OraclePred> = inst
                .preds
                .iter()
                .map(|p| OraclePred {
                    group: key(&p.keyframe),
                    class: p.class,
                    score: p.score,
                    overlaps: gt_of(key(&p.keyframe)).iter().map(|g| iou(&p.bbox, &g.bbox)).collect(),
                })
                .collect();
            let groups: Vec<(u64, usize)> = inst.keyframes.iter().map(|k| (key(k), gt_of(key(k)).len())).collect();
            oracle_class_ap(&preds, &groups, c, threshold)
        })
        .collect()
}

pub struct VideoInstance {
    pub preds: Vec<VideoTubes>,
    pub gts: Vec<VideoTubes>,
    pub num_classes: usize,
}

fn random_tube(rng: &mut ChaCha8Rng, label: usize, score: f64) -> Tube {
    let start = rng.random_range(0..6);
    let len = rng.random_range(1..=6);
    let b = grid_box(rng);
    let segments = (start..start + len)
        .map(|f| {
            let dx = if rng.random_bool(0.3) { 1.0 } else { 0.0 };
            (f, b.translated(dx, 0.0).unwrap())
        })
        .collect();
    Tube::new(label, score, segments).unwrap()
}

pub fn video_instance(seed: u64) -> VideoInstance {
    let mut rng = rng(seed);
    let num_classes = rng.random_range(1..=2);
    let videos = rng.random_range(1..=2);
    let mut gts: Vec<VideoTubes> = (0..videos)
        .map(|v| VideoTubes {
            video: v,
            tubes: vec![],
        })
        .collect();
    let mut preds: Vec<VideoTubes> = (0..videos)
        .map(|v| VideoTubes {
            video: v,
            tubes: vec![],
        })
        .collect();
    for _ in 0..rng.random_range(0..=4) {
        let v = rng.random_range(0..videos);
        let c = rng.random_range(0..num_classes);
        gts[v].tubes.push(random_tube(&mut rng, c, 1.0));
    }
    for _ in 0..rng.random_range(0..=6) {
        let v = rng.random_range(0..videos);
        let c = rng.random_range(0..num_classes);
        let score = small_score(&mut rng);
        let tube = if !gts[v].tubes.is_empty() && rng.random_bool(0.5) {
            let g = &gts[v].tubes[rng.random_range(0..gts[v].tubes.len())];
            Tube::new(c, score, g.segments.clone()).unwrap()
        } else {
            random_tube(&mut rng, c, score)
        };
        preds[v].tubes.push(tube);
    }
    VideoInstance {
        preds,
        gts,
        num_classes,
    }
}

pub fn video_oracle(inst: &VideoInstance, threshold: f64) -> Vec<Option<f64>> {
    (0..inst.num_classes)
        .map(|c| {
            let gt_of = |v: usize| -> Vec<&Tube> {
                inst.gts
                    .iter()
                    .filter(|g| g.video == v)
                    .flat_map(|g| &g.tubes)
                    .filter(|t| t.label == c)
                    .collect()
            };
            let preds: Vec<OraclePred> = inst
                .preds
                .iter()
                .flat_map(|v| v.tubes.iter().map(move |t| (v.video, t)))
                .map(|(v, t)| OraclePred {
                    group: v as u64,
                    class: t.label,
                    score: t.score,
                    overlaps: gt_of(v).iter().map(|g| tube_iou(t, g)).collect(),
                })
                .collect();
            let groups: Vec<(u64, usize)> = inst
                .gts
                .iter()
                .map(|g| (g.video as u64, gt_of(g.video).len()))
                .collect();
            oracle_class_ap(&preds, &groups, c, threshold)
        })
        .collect()
}

/// Per-class AP agreement; both sides are exact rationals rounded once, so
/// the only slack is the rounding of the evaluator's running sum.
pub fn same_ap(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (None, None) => true,
            (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
            _ => false,
        })
}

// ---------------------------------------------------------------------------
// benchmark presets

/// The standard synthetic benchmark: whole-clip bags, fn_rate 0.2 and about
/// 30% of sampled training bags without a positive instance.
pub fn standard_benchmark(out_dir: &std::path::Path) -> ExperimentSpec {
    ExperimentSpec {
        name: "standard-benchmark".into(),
        study: Study::Ablation,
        seeds: (0..5).collect(),
        data: SyntheticConfig {
            actors_per_clip: (1, 3),
            actions_per_actor: (1, 1),
            action_duration: (96, 224),
            class_signal: 3.0,
            feature_noise_std: 0.3,
            context_signal: 3.0,
            fn_rate: 0.2,
            fp_rate: 0.2,
            ..SyntheticConfig::default()
        },
        window: Window::WholeClip,
        out_dir: out_dir.to_path_buf(),
        ..ExperimentSpec::default()
    }
}

/// Long clips so that a 60-keyframe window is still shorter than a clip.
pub fn subclip_benchmark(out_dir: &std::path::Path) -> ExperimentSpec {
    ExperimentSpec {
        name: "subclip-benchmark".into(),
        study: Study::SubclipSweep,
        seeds: (0..5).collect(),
        data: SyntheticConfig {
            num_clips: 10,
            frames_per_clip: 1440,
            actors_per_clip: (1, 3),
            actions_per_actor: (1, 3),
            action_duration: (96, 224),
            class_signal: 3.0,
            feature_noise_std: 0.3,
            context_signal: 3.0,
            fp_rate: 0.3,
            ..SyntheticConfig::default()
        },
        out_dir: out_dir.to_path_buf(),
        ..ExperimentSpec::default()
    }
}

// ---------------------------------------------------------------------------
// linking on noise-free worlds

fn noise_free(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_clips: 30,
        actions_per_actor: (1, 1),
        fn_rate: 0.0,
        fp_rate: 0.0,
        jitter_std: 0.0,
        seed,
        feature_seed: seed,
        ..SyntheticConfig::default()
    }
}

fn spatially_disjoint(clip: &Clip) -> bool {
    let actors = &clip.truth.actors;
    (0..actors.len()).all(|i| {
        (i + 1..actors.len()).all(|j| {
            actors[i]
                .boxes
                .iter()
                .zip(&actors[j].boxes)
                .all(|(a, b)| a.intersection_area(b) == 0.0)
        })
    })
}

/// Score 1 for the classes the tubelet's actor performs at its centre frame.
fn oracle_scores(records: &[TubeletRecord], classes: usize) -> Vec<ScoredTubelet> {
    records
        .iter()
        .map(|r| {
            let scores = (0..classes).map(|c| r.truth.active.contains(&c) as u8 as f64).collect();
            ScoredTubelet::new(r.tubelet.clone(), scores).unwrap()
        })
        .collect()
}

pub struct LinkingRecovery {
    pub actors: usize,
    pub mismatches: Vec<String>,
    /// Mean Video AP at 0.2 and 0.5.
    pub video_ap: Vec<f64>,
}

/// Links ground-truth-scored tubelets of every clip whose actors never
/// overlap and compares tube membership with the actor tracks.
pub fn linking_recovery(seeds: std::ops::Range<u64>) -> LinkingRecovery {
    let mut rec = LinkingRecovery {
        actors: 0,
        mismatches: Vec::new(),
        video_ap: Vec::new(),
    };
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for seed in seeds {
        let cfg = noise_free(seed);
        let world = generate(&cfg).unwrap();
        for clip in world.clips.iter().filter(|c| spatially_disjoint(c)) {
            let records = build_tubelets(&world, clip, &TubeletConfig::default());
            let tubes: Vec<_> = link_all(
                &oracle_scores(&records, cfg.num_classes),
                cfg.num_classes,
                &LinkConfig::default(),
            )
            .into_iter()
            .flat_map(|o| o.tubes)
            .collect();

            let mut want: BTreeSet<(usize, Vec<u64>)> = BTreeSet::new();
            for actor in &clip.truth.actors {
                for a in &actor.actions {
                    let ids: Vec<u64> = records
                        .iter()
                        .filter(|r| r.truth.actor == Some(actor.id) && r.truth.active.contains(&a.class))
                        .map(|r| r.tubelet.id)
                        .collect();
                    if !ids.is_empty() {
                        want.insert((a.class, ids));
                    }
                }
            }
            let got: BTreeSet<(usize, Vec<u64>)> = tubes
                .iter()
                .map(|t| {
                    let mut m = t.members.clone();
                    m.sort_unstable();
                    (t.label, m)
                })
                .collect();
            if got.len() != tubes.len() || got != want {
                rec.mismatches.push(format!("seed {seed} clip {}", clip.id));
            }
            rec.actors += clip.truth.actors.len();

            let video = clip.id + 1000 * seed as usize;
            preds.push(VideoTubes { video, tubes });
            gts.push(VideoTubes {
                video,
                tubes: ground_truth_tubes(clip),
            });
        }
    }
    let res = video_ap(&preds, &gts, &EvalConfig::video(noise_free(0).num_classes)).unwrap();
    rec.video_ap = res.thresholds.iter().map(|t| t.mean_ap).collect();
    rec
}
