//! Axis-aligned boxes, tubelets and tubes.
//!
//! Boxes are corner-encoded in continuous image coordinates. Area is
//! `(x_max - x_min) * (y_max - y_min)`; there is no `+1` pixel convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tubelet length in frames.
pub const DEFAULT_TUBELET_LEN: usize = 16;

#[derive(Debug, Clone, Copy, Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    score: f64,
}

/// A detection box with a confidence score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    score: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        BoundingBox::with_score(raw.x_min, raw.y_min, raw.x_max, raw.y_max, raw.score)
    }
}

impl BoundingBox {
    /// Box with score 1.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        Self::with_score(x_min, y_min, x_max, y_max, 1.0)
    }

    pub fn with_score(x_min: f64, y_min: f64, x_max: f64, y_max: f64, score: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinates {coords:?}")));
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(Error::InvalidBox(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidBox(format!("score {score} outside [0, 1]")));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            score,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    /// Same box with a different score.
    pub fn rescored(&self, score: f64) -> Result<Self> {
        Self::with_score(self.x_min, self.y_min, self.x_max, self.y_max, score)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::with_score(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
            self.score,
        )
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Linear blend of corners, `t = 0` gives `self`, `t = 1` gives `other`.
    pub fn lerp(&self, other: &BoundingBox, t: f64) -> BoundingBox {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        BoundingBox {
            x_min: mix(self.x_min, other.x_min),
            y_min: mix(self.y_min, other.y_min),
            x_max: mix(self.x_max, other.x_max),
            y_max: mix(self.y_max, other.y_max),
            score: mix(self.score, other.score),
        }
    }
}

/// Spatial IoU of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// A person detection tracked over consecutive frames, plus its feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tubelet {
    pub id: u64,
    pub start_frame: usize,
    pub boxes: Vec<BoundingBox>,
    pub feature: Vec<f64>,
}

impl Tubelet {
    pub fn new(id: u64, start_frame: usize, boxes: Vec<BoundingBox>, feature: Vec<f64>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::InvalidTubelet(format!("tubelet {id} has no boxes")));
        }
        Ok(Self {
            id,
            start_frame,
            boxes,
            feature,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Last covered frame (inclusive).
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.boxes.len() - 1
    }

    pub fn center_frame(&self) -> usize {
        self.start_frame + self.boxes.len() / 2
    }

    pub fn box_at(&self, frame: usize) -> Option<&BoundingBox> {
        frame.checked_sub(self.start_frame).and_then(|i| self.boxes.get(i))
    }

    /// Mean detector confidence over the boxes.
    pub fn score(&self) -> f64 {
        self.boxes.iter().map(BoundingBox::score).sum::<f64>() / self.boxes.len() as f64
    }

    pub fn first_box(&self) -> &BoundingBox {
        &self.boxes[0]
    }

    pub fn last_box(&self) -> &BoundingBox {
        &self.boxes[self.boxes.len() - 1]
    }
}

/// Mean per-frame IoU over the frames both tubelets cover.
///
/// Returns [`Error::NoTemporalOverlap`] when the frame ranges are disjoint so
/// that callers can distinguish "not comparable" from "zero overlap".
pub fn tubelet_spatial_overlap(a: &Tubelet, b: &Tubelet) -> Result<f64> {
    let start = a.start_frame.max(b.start_frame);
    let end = a.end_frame().min(b.end_frame());
    if start > end {
        return Err(Error::NoTemporalOverlap);
    }
    let total: f64 = (start..=end)
        .map(|f| a.box_at(f).unwrap().iou(b.box_at(f).unwrap()))
        .sum();
    Ok(total / (end - start + 1) as f64)
}

/// Spatio-temporal IoU of two tubelets: temporal IoU times mean spatial IoU
/// over shared frames, zero when disjoint in time.
pub fn tubelet_st_iou(a: &Tubelet, b: &Tubelet) -> f64 {
    match tubelet_spatial_overlap(a, b) {
        Ok(spatial) => {
            let inter = (a.end_frame().min(b.end_frame()) + 1 - a.start_frame.max(b.start_frame)) as f64;
            let union = (a.len() + b.len()) as f64 - inter;
            inter / union * spatial
        }
        Err(_) => 0.0,
    }
}

/// A class-labelled chain of per-frame boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub label: usize,
    pub score: f64,
    /// `(frame, box)` pairs, frames strictly increasing and contiguous.
    pub segments: Vec<(usize, BoundingBox)>,
    /// Ids of the tubelets the tube was linked from (empty for ground truth).
    #[serde(default)]
    pub members: Vec<u64>,
}

impl Tube {
    pub fn new(label: usize, score: f64, segments: Vec<(usize, BoundingBox)>) -> Result<Self> {
        let tube = Self {
            label,
            score,
            segments,
            members: Vec::new(),
        };
        tube.validate()?;
        Ok(tube)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidTube("empty tube".into()));
        }
        for w in self.segments.windows(2) {
            if w[1].0 != w[0].0 + 1 {
                return Err(Error::InvalidTube(format!(
                    "frames {} and {} are not contiguous",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(())
    }

    pub fn start_frame(&self) -> usize {
        self.segments[0].0
    }

    /// Last frame (inclusive).
    pub fn end_frame(&self) -> usize {
        self.segments[self.segments.len() - 1].0
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn box_at(&self, frame: usize) -> Option<&BoundingBox> {
        frame
            .checked_sub(self.start_frame())
            .and_then(|i| self.segments.get(i))
            .map(|(_, b)| b)
    }
}

/// Temporal IoU of the frame ranges times the mean spatial IoU over the
/// temporally shared frames.
pub fn tube_iou(a: &Tube, b: &Tube) -> f64 {
    let start = a.start_frame().max(b.start_frame());
    let end = a.end_frame().min(b.end_frame());
    if start > end {
        return 0.0;
    }
    let inter = end - start + 1;
    let union = a.len() + b.len() - inter;
    let spatial: f64 = (start..=end)
        .map(|f| a.box_at(f).unwrap().iou(b.box_at(f).unwrap()))
        .sum::<f64>()
        / inter as f64;
    (inter as f64 / union as f64 * spatial).clamp(0.0, 1.0)
}
