//! Frame AP and Video AP.
//!
//! Both metrics use the same protocol: per class, predictions are ranked by
//! descending score (ties keep input order) and matched greedily; each
//! prediction takes the unmatched ground truth of its group with the highest
//! overlap (lowest index on ties) and is a true positive when that overlap
//! reaches the threshold. AP is the area under the all-points interpolated
//! precision-recall curve. Video AP ranks predictions pooled across videos
//! and matches them within their own video.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{tube_iou, BoundingBox, Tube};

/// All-points interpolated average precision of a ranked list of
/// `(score, is_tp)` pairs. `None` when there is no ground truth.
pub fn average_precision(scored_matches: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored_matches.len()).collect();
    order.sort_by(|&a, &b| scored_matches[b].0.total_cmp(&scored_matches[a].0));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut is_tp = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        if scored_matches[i].1 {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        is_tp.push(scored_matches[i].1);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let area: f64 = precision
        .iter()
        .zip(&is_tp)
        .filter(|(_, &t)| t)
        .map(|(p, _)| p)
        .fold(0.0, |a, b| a + b);
    Some((area / num_gt as f64).clamp(0.0, 1.0))
}

/// Greedy matching of ranked predictions against ground truth given their
/// overlap matrix (`overlaps[pred][gt]`). Returns the matched ground-truth
/// index per prediction, in the input order of predictions.
pub fn greedy_match(scores: &[f64], overlaps: &[Vec<f64>], threshold: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let num_gt = overlaps.first().map_or(0, Vec::len);
    let mut taken = vec![false; num_gt];
    let mut out = vec![None; scores.len()];
    for p in order {
        let mut best: Option<usize> = None;
        for (g, &v) in overlaps[p].iter().enumerate() {
            if !taken[g] && best.is_none_or(|b| v > overlaps[p][b]) {
                best = Some(g);
            }
        }
        if let Some(g) = best.filter(|&g| overlaps[p][g] >= threshold) {
            taken[g] = true;
            out[p] = Some(g);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub num_classes: usize,
}

impl EvalConfig {
    pub fn frame(num_classes: usize) -> Self {
        Self {
            iou_thresholds: vec![0.5],
            num_classes,
        }
    }

    pub fn video(num_classes: usize) -> Self {
        Self {
            iou_thresholds: vec![0.2, 0.5],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("no IoU thresholds".into()));
        }
        if let Some(t) = self.iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("no classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub iou: f64,
    /// `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Unweighted mean over classes with ground truth; 0 when none has any.
    pub mean_ap: f64,
    pub counts: Vec<MatchCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: Vec<ThresholdResult>,
}

impl EvalResult {
    pub fn mean_ap_at(&self, iou: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.iou - iou).abs() < 1e-12)
            .map(|t| t.mean_ap)
    }

    /// Plain-text table: one row per class, one AP column per threshold.
    pub fn table(&self) -> String {
        let mut s = String::from("class");
        for t in &self.thresholds {
            write!(s, "\tAP@{}", t.iou).unwrap();
        }
        s.push('\n');
        let classes = self.thresholds.first().map_or(0, |t| t.per_class_ap.len());
        for c in 0..classes {
            write!(s, "{c}").unwrap();
            for t in &self.thresholds {
                match t.per_class_ap[c] {
                    Some(ap) => write!(s, "\t{:.4}", ap).unwrap(),
                    None => s.push_str("\t-"),
                }
            }
            s.push('\n');
        }
        s.push_str("mean");
        for t in &self.thresholds {
            write!(s, "\t{:.4}", t.mean_ap).unwrap();
        }
        s.push('\n');
        s
    }
}

fn mean_of_present(aps: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().fold(0.0, |a, b| a + b) / present.len() as f64
    }
}

/// Shared evaluation loop; `group` keys restrict matching (keyframe or
/// video), `overlap` scores a prediction against a ground truth.
fn evaluate<P, G>(
    preds: &[(u64, usize, f64, P)],
    gts: &[(u64, usize, G)],
    cfg: &EvalConfig,
    overlap: impl Fn(&P, &G) -> f64,
) -> Result<EvalResult> {
    cfg.validate()?;
    for &(_, c, s, _) in preds {
        if c >= cfg.num_classes {
            return Err(Error::Eval(format!("prediction class {c} out of range")));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("prediction score {s}")));
        }
    }
    if let Some(&(_, c, _)) = gts.iter().find(|g| g.1 >= cfg.num_classes) {
        return Err(Error::Eval(format!("ground-truth class {c} out of range")));
    }

    let mut thresholds = Vec::with_capacity(cfg.iou_thresholds.len());
    for &iou in &cfg.iou_thresholds {
        let mut per_class_ap = Vec::with_capacity(cfg.num_classes);
        let mut counts = Vec::with_capacity(cfg.num_classes);
        for class in 0..cfg.num_classes {
            let cp: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].1 == class).collect();
            let cg: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].1 == class).collect();
            let mut groups: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
            for (k, &i) in cp.iter().enumerate() {
                groups.entry(preds[i].0).or_default().0.push(k);
            }
            for &i in &cg {
                if let Some(g) = groups.get_mut(&gts[i].0) {
                    g.1.push(i);
                }
            }
            let mut is_tp = vec![false; cp.len()];
            for (gp, gg) in groups.values() {
                let scores: Vec<f64> = gp.iter().map(|&k| preds[cp[k]].2).collect();
                let overlaps: Vec<Vec<f64>> = gp
                    .iter()
                    .map(|&k| gg.iter().map(|&g| overlap(&preds[cp[k]].3, &gts[g].2)).collect())
                    .collect();
                for (k, m) in gp.iter().zip(greedy_match(&scores, &overlaps, iou)) {
                    is_tp[*k] = m.is_some();
                }
            }
            let ranked: Vec<(f64, bool)> = cp.iter().zip(&is_tp).map(|(&i, &t)| (preds[i].2, t)).collect();
            let tp = is_tp.iter().filter(|&&t| t).count();
            counts.push(MatchCounts {
                tp,
                fp: cp.len() - tp,
                fn_: cg.len() - tp,
            });
            per_class_ap.push(average_precision(&ranked, cg.len()));
        }
        thresholds.push(ThresholdResult {
            iou,
            mean_ap: mean_of_present(&per_class_ap),
            per_class_ap,
            counts,
        });
    }
    Ok(EvalResult { thresholds })
}

/// A keyframe: frame `frame` of video `video`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Keyframe {
    pub video: usize,
    pub frame: usize,
}

impl Keyframe {
    fn key(&self) -> u64 {
        ((self.video as u64) << 32) | self.frame as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub keyframe: Keyframe,
    pub class: usize,
    pub bbox: BoundingBox,
    /// Ignored for ground truth.
    pub score: f64,
}

/// Frame AP over the given evaluation keyframes. Every prediction and
/// ground-truth box must lie on one of them.
pub fn frame_ap(
    keyframes: &[Keyframe],
    predictions: &[FrameDetection],
    ground_truth: &[FrameDetection],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    let known: BTreeSet<Keyframe> = keyframes.iter().copied().collect();
    for (what, d) in predictions
        .iter()
        .map(|d| ("prediction", d))
        .chain(ground_truth.iter().map(|d| ("ground truth", d)))
    {
        if !known.contains(&d.keyframe) {
            return Err(Error::Eval(format!(
                "{what} on unknown keyframe (video {}, frame {})",
                d.keyframe.video, d.keyframe.frame
            )));
        }
    }
    let preds: Vec<_> = predictions
        .iter()
        .map(|d| (d.keyframe.key(), d.class, d.score, d.bbox))
        .collect();
    let gts: Vec<_> = ground_truth
        .iter()
        .map(|d| (d.keyframe.key(), d.class, d.bbox))
        .collect();
    evaluate(&preds, &gts, cfg, |p, g| p.iou(g))
}

/// Tubes of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTubes {
    pub video: usize,
    pub tubes: Vec<Tube>,
}

/// Video AP; the class of a tube is its label.
pub fn video_ap(predictions: &[VideoTubes], ground_truth: &[VideoTubes], cfg: &EvalConfig) -> Result<EvalResult> {
    let mut preds = Vec::new();
    for v in predictions {
        for t in &v.tubes {
            t.validate()?;
            preds.push((v.video as u64, t.label, t.score, t));
        }
    }
    let mut gts = Vec::new();
    for v in ground_truth {
        for t in &v.tubes {
            t.validate()?;
            gts.push((v.video as u64, t.label, t));
        }
    }
    evaluate(&preds, &gts, cfg, |p, g| tube_iou(p, g))
}
