//! Axis-aligned box arithmetic: IoU, intersection tests, weighted coordinate
//! averaging and per-class greedy non-maximum suppression.
//!
//! Coordinates are continuous; area is `(x2 - x1) * (y2 - y1)` with no
//! `+1` pixel convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned rectangle `[x1, y1, x2, y2]` with `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Box {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let all_finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !all_finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// Box from center/size parameterization.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Area of the overlap with `other`, zero when disjoint or touching.
    pub fn intersection_area(&self, other: &Box) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clamp to `[0, width] x [0, height]`. Returns `None` if nothing
    /// of positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<Box> {
        Box::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
        .ok()
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

impl TryFrom<[f64; 4]> for Box {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        Box::from_array(c)
    }
}

impl From<Box> for [f64; 4] {
    fn from(b: Box) -> Self {
        b.to_array()
    }
}

/// A box with a confidence score in `[0, 1]` and a class index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: Box,
    pub score: f64,
    pub class_id: usize,
}

impl ScoredBox {
    pub fn new(bbox: Box, score: f64, class_id: usize) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidScore(score));
        }
        Ok(Self {
            bbox,
            score,
            class_id,
        })
    }
}

/// Intersection over union. Always in `[0, 1]`; symmetric.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// True iff the two boxes share strictly positive area. Touching edges do
/// not count.
pub fn intersects(a: &Box, b: &Box) -> bool {
    a.intersection_area(b) > 0.0
}

/// Weight-normalized mean of box coordinates.
pub fn weighted_average_box(boxes: &[Box], weights: &[f64]) -> Result<Box> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("weighted_average_box: no boxes"));
    }
    if boxes.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: "weighted_average_box weights",
            expected: boxes.len(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument(
            "weighted_average_box: weights must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "weighted_average_box: weights sum to zero".into(),
        ));
    }
    let mut acc = [0.0; 4];
    for (b, &w) in boxes.iter().zip(weights) {
        for (a, c) in acc.iter_mut().zip(b.to_array()) {
            *a += w * c;
        }
    }
    let mut out = acc.map(|a| a / total);
    // Rounding can push the mean a hair outside the input envelope.
    for (k, v) in out.iter_mut().enumerate() {
        let (lo, hi) = boxes
            .iter()
            .map(|b| b.to_array()[k])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c), hi.max(c))
            });
        *v = v.clamp(lo, hi);
    }
    Box::from_array(out)
}

/// Uniform coordinate average.
pub fn average_box(boxes: &[Box]) -> Result<Box> {
    weighted_average_box(boxes, &vec![1.0; boxes.len()])
}

/// Greedy per-class NMS. Candidates are visited in descending score order
/// (ties by lower input index); a candidate is dropped when its IoU with an
/// already kept box of the same class is strictly greater than
/// `iou_threshold`. Output is sorted by descending score.
pub fn nms(dets: &[ScoredBox], iou_threshold: f64) -> Result<Vec<ScoredBox>> {
    Ok(nms_indices(dets, iou_threshold)?
        .into_iter()
        .map(|i| dets[i])
        .collect())
}

/// Like [`nms`] but returns indices into `dets` of the survivors.
pub fn nms_indices(dets: &[ScoredBox], iou_threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::InvalidArgument(format!(
            "nms threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let order = descending_order(dets.iter().map(|d| d.score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Indices sorted by descending value, ties broken by lower index.
pub(crate) fn descending_order(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let values: Vec<f64> = values.collect();
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}
