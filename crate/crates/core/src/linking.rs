//! Greedy online linking of scored tubelets into class-labelled tubes.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{tubelet_spatial_overlap, BoundingBox, Tube, Tubelet};
use crate::mil::LogVarTransform;
use crate::model::{predict_tubelets, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTubelet {
    pub tubelet: Tubelet,
    pub class_scores: Vec<f64>,
}

impl ScoredTubelet {
    pub fn new(tubelet: Tubelet, class_scores: Vec<f64>) -> Result<Self> {
        if let Some(s) = class_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!("class score {s} outside [0, 1]")));
        }
        Ok(Self { tubelet, class_scores })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub link_iou_threshold: f64,
    /// Tubelet steps a tube may go without extension before it ends.
    pub max_gap: usize,
    /// Link each class separately; otherwise link once on the best class
    /// score and give every tube one copy per class.
    pub per_class: bool,
    /// Tubelets scoring below this for a class are not linked for it.
    pub min_score: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            link_iou_threshold: 0.5,
            max_gap: 1,
            per_class: true,
            min_score: 0.4,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.link_iou_threshold) {
            return Err(Error::Config(format!(
                "link threshold {} outside [0, 1]",
                self.link_iou_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::Config(format!("min_score {} outside [0, 1]", self.min_score)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguityKind {
    /// A tube had several candidates above the threshold.
    SeveralCandidates,
    /// A candidate was above the threshold for several tubes, so identities
    /// may have been swapped.
    ContestedCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDiagnostic {
    pub class: usize,
    pub frame: usize,
    pub kind: AmbiguityKind,
    /// Ids of the first member of each tube involved.
    pub tubes: Vec<u64>,
    pub candidates: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkOutput {
    pub tubes: Vec<Tube>,
    pub diagnostics: Vec<LinkDiagnostic>,
}

struct Growing<'a> {
    members: Vec<&'a ScoredTubelet>,
    score_sum: f64,
}

impl Growing<'_> {
    fn last(&self) -> &Tubelet {
        &self.members[self.members.len() - 1].tubelet
    }

    fn score(&self) -> f64 {
        self.score_sum / self.members.len() as f64
    }
}

/// Overlap between a tube's last tubelet and a later candidate: mean IoU on
/// shared frames, or the IoU of the facing boxes when they only abut.
fn similarity(last: &Tubelet, cand: &Tubelet) -> f64 {
    match tubelet_spatial_overlap(last, cand) {
        Ok(v) => v,
        Err(_) => last.last_box().iou(cand.first_box()),
    }
}

fn build_tube(class: usize, g: &Growing<'_>) -> Tube {
    let mut segments: Vec<(usize, BoundingBox)> = Vec::new();
    for m in &g.members {
        let t = &m.tubelet;
        for (i, b) in t.boxes.iter().enumerate() {
            let f = t.start_frame + i;
            match segments.last() {
                Some(&(last_f, _)) if f <= last_f => {}
                Some(&(last_f, last_b)) if f > last_f + 1 => {
                    let span = (f - last_f) as f64;
                    for k in last_f + 1..f {
                        segments.push((k, last_b.lerp(b, (k - last_f) as f64 / span)));
                    }
                    segments.push((f, *b));
                }
                _ => segments.push((f, *b)),
            }
        }
    }
    Tube {
        label: class,
        score: g.score(),
        segments,
        members: g.members.iter().map(|m| m.tubelet.id).collect(),
    }
}

/// Links the tubelets of one video for one class.
pub fn link(tubelets: &[ScoredTubelet], class: usize, cfg: &LinkConfig) -> Vec<Tube> {
    link_with_diagnostics(tubelets, class, cfg).tubes
}

fn link_by<'a>(
    tubelets: &'a [ScoredTubelet],
    class: usize,
    cfg: &LinkConfig,
    score_of: impl Fn(&ScoredTubelet) -> f64,
) -> (Vec<Growing<'a>>, Vec<LinkDiagnostic>) {
    let mut cands: Vec<&ScoredTubelet> = tubelets.iter().filter(|t| score_of(t) >= cfg.min_score).collect();
    cands.sort_by_key(|t| (t.tubelet.start_frame, t.tubelet.id));

    let mut active: Vec<Growing<'a>> = Vec::new();
    let mut done: Vec<Growing<'a>> = Vec::new();
    let mut diagnostics = Vec::new();
    let mut i = 0;
    while i < cands.len() {
        let frame = cands[i].tubelet.start_frame;
        let mut j = i;
        while j < cands.len() && cands[j].tubelet.start_frame == frame {
            j += 1;
        }
        let step = &cands[i..j];
        i = j;

        // retire tubes that have gone more than max_gap steps without extension
        let (alive, dead): (Vec<_>, Vec<_>) = active.into_iter().partition(|g| {
            let last = g.last();
            frame <= last.end_frame() + 1 + cfg.max_gap * last.len()
        });
        done.extend(dead);
        active = alive;

        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|&a, &b| {
            active[b]
                .score()
                .total_cmp(&active[a].score())
                .then(active[a].members[0].tubelet.id.cmp(&active[b].members[0].tubelet.id))
        });

        let sims: Vec<Vec<f64>> = active
            .iter()
            .map(|g| step.iter().map(|c| similarity(g.last(), &c.tubelet)).collect())
            .collect();
        let eligible = |v: f64| v >= cfg.link_iou_threshold && v > 0.0;

        for (ti, row) in sims.iter().enumerate() {
            let over: Vec<u64> = row
                .iter()
                .zip(step)
                .filter(|(v, _)| eligible(**v))
                .map(|(_, c)| c.tubelet.id)
                .collect();
            if over.len() > 1 {
                diagnostics.push(LinkDiagnostic {
                    class,
                    frame,
                    kind: AmbiguityKind::SeveralCandidates,
                    tubes: vec![active[ti].members[0].tubelet.id],
                    candidates: over,
                });
            }
        }
        for (ci, c) in step.iter().enumerate() {
            let mut tubes: Vec<u64> = (0..active.len())
                .filter(|&ti| eligible(sims[ti][ci]))
                .map(|ti| active[ti].members[0].tubelet.id)
                .collect();
            if tubes.len() > 1 {
                tubes.sort_unstable();
                diagnostics.push(LinkDiagnostic {
                    class,
                    frame,
                    kind: AmbiguityKind::ContestedCandidate,
                    tubes,
                    candidates: vec![c.tubelet.id],
                });
            }
        }

        let mut claimed = vec![false; step.len()];
        for ti in order {
            let mut best: Option<usize> = None;
            for ci in 0..step.len() {
                let v = sims[ti][ci];
                if claimed[ci] || !eligible(v) {
                    continue;
                }
                // step is ordered by id, so strict improvement keeps the lower id on ties
                if best.is_none_or(|b| v > sims[ti][b]) {
                    best = Some(ci);
                }
            }
            if let Some(ci) = best {
                claimed[ci] = true;
                active[ti].members.push(step[ci]);
                active[ti].score_sum += score_of(step[ci]);
            }
        }
        for (ci, c) in step.iter().enumerate() {
            if !claimed[ci] {
                active.push(Growing {
                    members: vec![c],
                    score_sum: score_of(c),
                });
            }
        }
    }
    done.extend(active);
    done.sort_by_key(|g| g.members[0].tubelet.id);
    (done, diagnostics)
}

/// [`link`] plus the ambiguous decisions made along the way.
pub fn link_with_diagnostics(tubelets: &[ScoredTubelet], class: usize, cfg: &LinkConfig) -> LinkOutput {
    let (groups, diagnostics) = link_by(tubelets, class, cfg, |t| {
        t.class_scores.get(class).copied().unwrap_or(0.0)
    });
    LinkOutput {
        tubes: groups.iter().map(|g| build_tube(class, g)).collect(),
        diagnostics,
    }
}

/// Links every class of one video; the result is indexed by class.
pub fn link_all(tubelets: &[ScoredTubelet], num_classes: usize, cfg: &LinkConfig) -> Vec<LinkOutput> {
    if cfg.per_class {
        return (0..num_classes)
            .into_par_iter()
            .map(|c| link_with_diagnostics(tubelets, c, cfg))
            .collect();
    }
    let best = |t: &ScoredTubelet| t.class_scores.iter().copied().fold(0.0, f64::max);
    let (groups, diagnostics) = link_by(tubelets, usize::MAX, cfg, best);
    (0..num_classes)
        .map(|c| {
            let tubes = groups
                .iter()
                .map(|g| {
                    let mut tube = build_tube(c, g);
                    tube.score = g.members.iter().map(|m| m.class_scores[c]).sum::<f64>() / g.members.len() as f64;
                    tube
                })
                .collect();
            let diagnostics = diagnostics
                .iter()
                .cloned()
                .map(|mut d| {
                    d.class = c;
                    d
                })
                .collect();
            LinkOutput { tubes, diagnostics }
        })
        .collect()
}

/// Scores the tubelets of one video with the model and links them per class.
pub fn tubes_from_predictions(
    params: &ModelParams,
    tubelets: &[Tubelet],
    log_var: LogVarTransform,
    cfg: &LinkConfig,
) -> Result<Vec<LinkOutput>> {
    cfg.validate()?;
    let preds = predict_tubelets(params, tubelets, log_var)?;
    let scored: Vec<ScoredTubelet> = tubelets
        .iter()
        .zip(preds)
        .map(|(t, p)| ScoredTubelet {
            tubelet: t.clone(),
            class_scores: p.probs,
        })
        .collect();
    Ok(link_all(&scored, params.num_classes, cfg))
}

/// Writes tubes as text: a `tube` header line per tube followed by one
/// indented `frame x_min y_min x_max y_max` line per frame.
pub fn write_tubes<W: Write>(mut out: W, tubes: &[Tube]) -> Result<()> {
    let mut text = String::new();
    for t in tubes {
        let members: Vec<String> = t.members.iter().map(u64::to_string).collect();
        writeln!(
            text,
            "tube class={} score={} frames={}-{} members={}",
            t.label,
            t.score,
            t.start_frame(),
            t.end_frame(),
            members.join(",")
        )
        .unwrap();
        for (f, b) in &t.segments {
            writeln!(text, "  {f} {} {} {} {}", b.x_min(), b.y_min(), b.x_max(), b.y_max()).unwrap();
        }
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

/// Parses the output of [`write_tubes`].
pub fn read_tubes<R: BufRead>(input: R) -> Result<Vec<Tube>> {
    let bad = |n: usize, what: &str| Error::Format(format!("tube dump line {n}: {what}"));
    let mut tubes: Vec<Tube> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let n = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tube ") {
            let mut tube = Tube {
                label: 0,
                score: 0.0,
                segments: Vec::new(),
                members: Vec::new(),
            };
            for field in rest.split_whitespace() {
                let (key, value) = field.split_once('=').ok_or_else(|| bad(n, "expected key=value"))?;
                match key {
                    "class" => tube.label = value.parse().map_err(|_| bad(n, "class"))?,
                    "score" => tube.score = value.parse().map_err(|_| bad(n, "score"))?,
                    "frames" => {}
                    "members" if value.is_empty() => {}
                    "members" => {
                        tube.members = value
                            .split(',')
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad(n, "members"))?
                    }
                    _ => return Err(bad(n, "unknown field")),
                }
            }
            if let Some(prev) = tubes.last() {
                prev.validate()?;
            }
            tubes.push(tube);
        } else {
            let tube = tubes.last_mut().ok_or_else(|| bad(n, "box before tube header"))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(n, "expected numbers"))?;
            if v.len() != 5 || v[0].fract() != 0.0 || v[0] < 0.0 {
                return Err(bad(n, "expected `frame x_min y_min x_max y_max`"));
            }
            tube.segments
                .push((v[0] as usize, BoundingBox::new(v[1], v[2], v[3], v[4])?));
        }
    }
    if let Some(last) = tubes.last() {
        last.validate()?;
    }
    Ok(tubes)
}
