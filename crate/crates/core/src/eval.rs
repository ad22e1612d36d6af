//! PASCAL VOC style metrics: per-class average precision and CorLoc.
//!
//! A detection is positive when its IoU with a ground-truth box of its class
//! exceeds the threshold strictly. Difficult boxes are neither required nor
//! penalized: a detection whose best match is difficult is dropped, and
//! difficult boxes do not count toward recall.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_io::{Detection, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::iou;

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[default]
    Voc07ElevenPoint,
    /// Area under the monotone precision envelope.
    Area,
}

/// Cumulative precision/recall after each ranked detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

fn image_positions(gt: &GroundTruth) -> HashMap<&str, usize> {
    gt.images.iter().enumerate().map(|(i, im)| (im.id.as_str(), i)).collect()
}

fn check_images<'a>(dets: &[Detection], gt: &'a GroundTruth) -> Result<HashMap<&'a str, usize>> {
    let index = image_positions(gt);
    if let Some(d) = dets.iter().find(|d| !index.contains_key(d.image.as_str())) {
        return Err(Error::UnknownImage(d.image.clone()));
    }
    Ok(index)
}

/// Ranked precision/recall for `class`; `None` when it has no
/// non-difficult ground truth.
pub fn pr_curve(dets: &[Detection], gt: &GroundTruth, class: usize, iou_pos: f64) -> Result<Option<PrCurve>> {
    let index = check_images(dets, gt)?;
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::InvalidScore(d.score));
    }
    let npos = gt
        .images
        .iter()
        .flat_map(|im| &im.objects)
        .filter(|o| o.class == class && !o.difficult)
        .count();
    if npos == 0 {
        return Ok(None);
    }
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used: HashMap<(usize, usize), bool> = HashMap::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = PrCurve {
        recall: Vec::with_capacity(ranked.len()),
        precision: Vec::with_capacity(ranked.len()),
    };
    for d in ranked {
        let img = index[d.image.as_str()];
        let best = gt.images[img]
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.class == class)
            .map(|(j, o)| (j, iou(&d.bbox, &o.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v > iou_pos => {
                if gt.images[img].objects[j].difficult {
                    continue;
                }
                let slot = used.entry((img, j)).or_insert(false);
                if *slot {
                    fp += 1;
                } else {
                    *slot = true;
                    tp += 1;
                }
            }
            _ => fp += 1,
        }
        curve.recall.push(tp as f64 / npos as f64);
        curve.precision.push(tp as f64 / (tp + fp) as f64);
    }
    Ok(Some(curve))
}

pub fn ap_from_curve(curve: &PrCurve, mode: ApMode) -> f64 {
    match mode {
        ApMode::Voc07ElevenPoint => {
            (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    curve
                        .recall
                        .iter()
                        .zip(&curve.precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApMode::Area => {
            let mut rec = vec![0.0];
            rec.extend(&curve.recall);
            rec.push(1.0);
            let mut pre = vec![0.0];
            pre.extend(&curve.precision);
            pre.push(0.0);
            for i in (0..pre.len() - 1).rev() {
                pre[i] = pre[i].max(pre[i + 1]);
            }
            (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * pre[i]).sum()
        }
    }
}

pub fn average_precision(
    dets: &[Detection],
    gt: &GroundTruth,
    class: usize,
    iou_pos: f64,
    mode: ApMode,
) -> Result<Option<f64>> {
    Ok(pr_curve(dets, gt, class, iou_pos)?.map(|c| ap_from_curve(&c, mode)))
}

/// Highest scoring detection per `(image, class)`; ties keep the earlier one.
pub fn top_detections(dets: &[Detection]) -> BTreeMap<(String, usize), Detection> {
    let mut top: BTreeMap<(String, usize), Detection> = BTreeMap::new();
    for d in dets {
        let key = (d.image.clone(), d.class);
        match top.get(&key) {
            Some(t) if t.score >= d.score => {}
            _ => {
                top.insert(key, d.clone());
            }
        }
    }
    top
}

/// Per-class fraction of images containing the class whose top detection
/// overlaps one of its boxes with IoU > `iou_pos`. `None` for classes
/// absent from every image.
pub fn corloc(
    top: &BTreeMap<(String, usize), Detection>,
    gt: &GroundTruth,
    num_classes: usize,
    iou_pos: f64,
) -> Result<Vec<Option<f64>>> {
    let index = image_positions(gt);
    if let Some((img, _)) = top.keys().find(|(img, _)| !index.contains_key(img.as_str())) {
        return Err(Error::UnknownImage(img.clone()));
    }
    let mut hits = vec![0usize; num_classes];
    let mut positives = vec![0usize; num_classes];
    for im in &gt.images {
        for c in 0..num_classes {
            if !im.has_class(c) {
                continue;
            }
            positives[c] += 1;
            if let Some(d) = top.get(&(im.id.clone(), c)) {
                if im
                    .objects
                    .iter()
                    .any(|o| o.class == c && iou(&d.bbox, &o.bbox) > iou_pos)
                {
                    hits[c] += 1;
                }
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&positives)
        .map(|(&h, &p)| (p > 0).then(|| h as f64 / p as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub ap: Option<f64>,
    pub corloc: Option<f64>,
    pub num_gt: usize,
    pub num_positive_images: usize,
    pub pr_curve: Option<PrCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ApMode,
    pub iou_threshold: f64,
    pub classes: Vec<ClassReport>,
    /// Mean over classes with a defined AP.
    pub map: Option<f64>,
    pub mean_corloc: Option<f64>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn evaluate(
    dets: &[Detection],
    gt: &GroundTruth,
    num_classes: usize,
    iou_pos: f64,
    mode: ApMode,
) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&iou_pos) {
        return Err(Error::InvalidArgument(format!("iou threshold {iou_pos} outside [0, 1]")));
    }
    if let Some(d) = dets.iter().find(|d| d.class >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "detection class {} out of range for {num_classes} classes",
            d.class
        )));
    }
    let cl = corloc(&top_detections(dets), gt, num_classes, iou_pos)?;
    let mut classes = Vec::with_capacity(num_classes);
    for (c, corloc) in cl.into_iter().enumerate() {
        let curve = pr_curve(dets, gt, c, iou_pos)?;
        classes.push(ClassReport {
            class: c,
            ap: curve.as_ref().map(|cv| ap_from_curve(cv, mode)),
            corloc,
            num_gt: gt
                .images
                .iter()
                .flat_map(|im| &im.objects)
                .filter(|o| o.class == c && !o.difficult)
                .count(),
            num_positive_images: gt.images.iter().filter(|im| im.has_class(c)).count(),
            pr_curve: curve,
        });
    }
    Ok(EvalReport {
        mode,
        iou_threshold: iou_pos,
        map: mean_defined(classes.iter().map(|c| c.ap)),
        mean_corloc: mean_defined(classes.iter().map(|c| c.corloc)),
        classes,
    })
}

impl EvalReport {
    /// Aligned text table; undefined values print as `-`.
    pub fn to_table(&self, class_names: Option<&[String]>) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.4}", x));
        let name = |c: usize| {
            class_names
                .and_then(|n| n.get(c).cloned())
                .unwrap_or_else(|| format!("class{c}"))
        };
        let mut rows: Vec<[String; 5]> = vec![[
            "class".into(),
            "AP".into(),
            "CorLoc".into(),
            "GT".into(),
            "images".into(),
        ]];
        for c in &self.classes {
            rows.push([
                name(c.class),
                fmt(c.ap),
                fmt(c.corloc),
                c.num_gt.to_string(),
                c.num_positive_images.to_string(),
            ]);
        }
        rows.push(["mean".into(), fmt(self.map), fmt(self.mean_corloc), String::new(), String::new()]);
        let widths: Vec<usize> = (0..5).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let mut line = format!("{:<w$}", r[0], w = widths[0]);
            for i in 1..5 {
                let _ = write!(line, "  {:>w$}", r[i], w = widths[i]);
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{GtObject, ImageGt};
    use crate::geometry::Box;

    fn b(c: [f64; 4]) -> Box {
        Box::from_array(c).unwrap()
    }

    fn det(image: &str, class: usize, c: [f64; 4], score: f64) -> Detection {
        Detection {
            image: image.into(),
            class,
            bbox: b(c),
            score,
        }
    }

    fn gt_of(images: Vec<(&str, Vec<(usize, [f64; 4], bool)>)>) -> GroundTruth {
        GroundTruth {
            images: images
                .into_iter()
                .map(|(id, objs)| ImageGt {
                    id: id.into(),
                    width: 100.0,
                    height: 100.0,
                    objects: objs
                        .into_iter()
                        .map(|(class, c, difficult)| GtObject {
                            class,
                            bbox: b(c),
                            difficult,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    const G1: [f64; 4] = [0.0, 0.0, 10.0, 10.0];
    const G2: [f64; 4] = [50.0, 50.0, 70.0, 70.0];
    const FAR: [f64; 4] = [80.0, 0.0, 90.0, 10.0];

    #[test]
    fn single_match_is_perfect() {
        let gt = gt_of(vec![("a", vec![(0, G1, false)])]);
        let ap = average_precision(&[det("a", 0, G1, 0.9)], &gt, 0, 0.5, ApMode::default()).unwrap();
        assert_eq!(ap, Some(1.0));
    }

    #[test]
    fn only_false_positive_is_zero() {
        let gt = gt_of(vec![("a", vec![(0, G1, false)])]);
        for mode in [ApMode::Voc07ElevenPoint, ApMode::Area] {
            let ap = average_precision(&[det("a", 0, FAR, 0.9)], &gt, 0, 0.5, mode).unwrap();
            assert_eq!(ap, Some(0.0));
        }
    }

    #[test]
    fn tp_fp_tp_by_hand() {
        // Recall/precision: (0.5, 1), (0.5, 0.5), (1, 2/3).
        let gt = gt_of(vec![("a", vec![(0, G1, false), (0, G2, false)])]);
        let dets = [det("a", 0, G1, 0.9), det("a", 0, FAR, 0.8), det("a", 0, G2, 0.7)];
        let ap = average_precision(&dets, &gt, 0, 0.5, ApMode::Voc07ElevenPoint).unwrap().unwrap();
        assert!((ap - (6.0 * 1.0 + 5.0 * (2.0 / 3.0)) / 11.0).abs() < 1e-12);
        let area = average_precision(&dets, &gt, 0, 0.5, ApMode::Area).unwrap().unwrap();
        assert!((area - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gt = gt_of(vec![("a", vec![(0, G1, false)])]);
        let c = pr_curve(&[det("a", 0, G1, 0.9), det("a", 0, G1, 0.8)], &gt, 0, 0.5)
            .unwrap()
            .unwrap();
        assert_eq!(c.precision, vec![1.0, 0.5]);
    }

    #[test]
    fn difficult_boxes_are_ignored() {
        let gt = gt_of(vec![("a", vec![(0, G1, false), (0, G2, true)])]);
        let c = pr_curve(&[det("a", 0, G2, 0.9), det("a", 0, G1, 0.8)], &gt, 0, 0.5)
            .unwrap()
            .unwrap();
        assert_eq!(c.recall, vec![1.0]);
        assert_eq!(c.precision, vec![1.0]);
        let only_difficult = gt_of(vec![("a", vec![(0, G2, true)])]);
        assert_eq!(average_precision(&[], &only_difficult, 0, 0.5, ApMode::Area).unwrap(), None);
    }

    #[test]
    fn unknown_image_rejected() {
        let gt = gt_of(vec![("a", vec![(0, G1, false)])]);
        assert!(matches!(
            pr_curve(&[det("zz", 0, G1, 0.5)], &gt, 0, 0.5),
            Err(Error::UnknownImage(_))
        ));
    }

    #[test]
    fn corloc_mixed_three_images() {
        let gt = gt_of(vec![
            ("a", vec![(0, G1, false)]),
            ("b", vec![(0, G2, false), (1, G1, false)]),
            ("c", vec![(1, G2, false)]),
        ]);
        let dets = [
            det("a", 0, G1, 0.9),
            det("a", 0, FAR, 0.1),
            det("b", 0, FAR, 0.9),
            det("b", 0, G2, 0.5),
            det("b", 1, G1, 0.4),
        ];
        let cl = corloc(&top_detections(&dets), &gt, 3, 0.5).unwrap();
        // Class 0: a hit, b miss. Class 1: b hit, c has no detection.
        assert_eq!(cl, vec![Some(0.5), Some(0.5), None]);
    }

    #[test]
    fn report_and_table() {
        let gt = gt_of(vec![("a", vec![(0, G1, false)])]);
        let r = evaluate(&[det("a", 0, G1, 0.9)], &gt, 2, 0.5, ApMode::default()).unwrap();
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.classes[1].ap, None);
        let t = r.to_table(None);
        assert!(t.contains("class0") && t.contains("1.0000"), "{t}");
        assert!(t.lines().all(|l| !l.ends_with(' ')));
    }
}
