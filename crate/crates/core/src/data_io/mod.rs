//! File formats. Every file is a single JSON document.
//!
//! Proposal bags:
//!
//! ```json
//! {"images": [{"id": "img0", "width": 200, "height": 200, "labels": [0, 1],
//!              "proposals": [[x1, y1, x2, y2], ...],
//!              "features": [[f0, f1, ...], ...]}]}
//! ```
//!
//! `labels` is a 0/1 vector with one entry per class; `features` is optional
//! and, when present, has one row per proposal.
//!
//! Ground truth:
//!
//! ```json
//! {"images": [{"id": "img0", "width": 200, "height": 200,
//!              "objects": [{"class": 1, "box": [x1, y1, x2, y2], "difficult": false}]}]}
//! ```
//!
//! Score matrices are `{"images": [{"id", "scores": [[row per class]...]}]}`
//! and detections are `{"detections": [{"image", "class", "box", "score"}]}`.

mod synth;
mod voc;

pub use synth::{
    class_activation, generate_dataset, generate_scene, generate_scene_at, ProposalKind, Scene, SceneObject,
    SyntheticSceneConfig,
};
pub use voc::{voc_xml_to_image, voc_xml_to_image_with_id};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::mil_head::BagLabel;
use crate::mtr::ScoreMatrix;

/// One image's proposals: the MIL bag.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBag {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<Box>,
    pub features: Option<Array2<f64>>,
    pub labels: BagLabel,
}

impl ProposalBag {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn features(&self) -> Result<&Array2<f64>> {
        self.features.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("image {:?} has no proposal features", self.image_id))
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBag {
    id: String,
    width: f64,
    height: f64,
    labels: Vec<u8>,
    proposals: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBagFile {
    images: Vec<RawBag>,
}

fn check_image_size(path: &str, width: f64, height: f64) -> Result<()> {
    if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
        return Err(Error::schema(
            path,
            format!("image size {width} x {height} must be positive"),
        ));
    }
    Ok(())
}

fn check_box(path: String, c: [f64; 4], width: f64, height: f64) -> Result<Box> {
    let b = Box::from_array(c).map_err(|e| Error::schema(&path, e.to_string()))?;
    if !b.within(width, height) {
        return Err(Error::schema(
            path,
            format!("box {c:?} outside image bounds {width} x {height}"),
        ));
    }
    Ok(b)
}

impl RawBag {
    fn validate(self, idx: usize) -> Result<ProposalBag> {
        let at = |field: &str| format!("images[{idx}].{field}");
        check_image_size(&at("width"), self.width, self.height)?;
        let labels = BagLabel::try_from(self.labels).map_err(|e| match e {
            Error::Schema { path, message } => Error::schema(format!("images[{idx}].{path}"), message),
            other => other,
        })?;
        let boxes = self
            .proposals
            .iter()
            .enumerate()
            .map(|(j, &c)| check_box(at(&format!("proposals[{j}]")), c, self.width, self.height))
            .collect::<Result<Vec<_>>>()?;
        let features = match self.features {
            None => None,
            Some(rows) => {
                if rows.len() != boxes.len() {
                    return Err(Error::schema(
                        at("features"),
                        format!("{} rows for {} proposals", rows.len(), boxes.len()),
                    ));
                }
                let dim = rows.first().map_or(0, Vec::len);
                for (j, r) in rows.iter().enumerate() {
                    if r.len() != dim {
                        return Err(Error::schema(
                            at(&format!("features[{j}]")),
                            format!("row has {} values, expected {dim}", r.len()),
                        ));
                    }
                    if r.iter().any(|v| !v.is_finite()) {
                        return Err(Error::schema(at(&format!("features[{j}]")), "non-finite value"));
                    }
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                Some(Array2::from_shape_vec((boxes.len(), dim), flat).expect("checked shape"))
            }
        };
        Ok(ProposalBag {
            image_id: self.id,
            width: self.width,
            height: self.height,
            boxes,
            features,
            labels,
        })
    }

    fn from_bag(b: &ProposalBag) -> Self {
        Self {
            id: b.image_id.clone(),
            width: b.width,
            height: b.height,
            labels: b.labels.clone().into(),
            proposals: b.boxes.iter().map(Box::to_array).collect(),
            features: b
                .features
                .as_ref()
                .map(|f| f.rows().into_iter().map(|r| r.to_vec()).collect()),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::schema(
            format!("{}:{}:{}", path.display(), e.line(), e.column()),
            e.to_string(),
        )
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn parse_bags(text: &str) -> Result<Vec<ProposalBag>> {
    let raw: RawBagFile = serde_json::from_str(text)
        .map_err(|e| Error::schema(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    raw.images
        .into_iter()
        .enumerate()
        .map(|(i, b)| b.validate(i))
        .collect()
}

pub fn load_bags(path: &Path) -> Result<Vec<ProposalBag>> {
    let raw: RawBagFile = read_json(path)?;
    raw.images
        .into_iter()
        .enumerate()
        .map(|(i, b)| b.validate(i))
        .collect()
}

pub fn save_bags(path: &Path, bags: &[ProposalBag]) -> Result<()> {
    write_json(
        path,
        &RawBagFile {
            images: bags.iter().map(RawBag::from_bag).collect(),
        },
    )
}

/// One annotated object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtObject {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: Box,
    #[serde(default)]
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGt {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<GtObject>,
}

impl ImageGt {
    pub fn has_class(&self, class: usize) -> bool {
        self.objects.iter().any(|o| o.class == class)
    }
}

/// Per-image object annotations, kept in file order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub images: Vec<ImageGt>,
}

impl GroundTruth {
    pub fn get(&self, id: &str) -> Option<&ImageGt> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, &ImageGt> {
        self.images.iter().map(|i| (i.id.as_str(), i)).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.images
            .iter()
            .flat_map(|i| i.objects.iter().map(|o| o.class + 1))
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, img) in self.images.iter().enumerate() {
            if !seen.insert(img.id.as_str()) {
                return Err(Error::schema(format!("images[{i}].id"), format!("duplicate id {:?}", img.id)));
            }
            check_image_size(&format!("images[{i}].width"), img.width, img.height)?;
            for (j, o) in img.objects.iter().enumerate() {
                check_box(format!("images[{i}].objects[{j}].box"), o.bbox.to_array(), img.width, img.height)?;
            }
        }
        Ok(())
    }
}

pub fn parse_gt(text: &str) -> Result<GroundTruth> {
    let gt: GroundTruth = serde_json::from_str(text)
        .map_err(|e| Error::schema(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    gt.validate()?;
    Ok(gt)
}

pub fn load_gt(path: &Path) -> Result<GroundTruth> {
    let gt: GroundTruth = read_json(path)?;
    gt.validate()?;
    Ok(gt)
}

pub fn save_gt(path: &Path, gt: &GroundTruth) -> Result<()> {
    write_json(path, gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageScores {
    pub id: String,
    pub scores: ScoreMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoresFile {
    images: Vec<ImageScores>,
}

pub fn save_scores(path: &Path, matrices: &[ImageScores]) -> Result<()> {
    write_json(
        path,
        &ScoresFile {
            images: matrices.to_vec(),
        },
    )
}

pub fn load_scores(path: &Path) -> Result<Vec<ImageScores>> {
    Ok(read_json::<ScoresFile>(path)?.images)
}

/// A scored box tied to an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image: String,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: Box,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionsFile {
    detections: Vec<Detection>,
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_json(
        path,
        &DetectionsFile {
            detections: dets.to_vec(),
        },
    )
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let dets = read_json::<DetectionsFile>(path)?.detections;
    for (i, d) in dets.iter().enumerate() {
        if !d.score.is_finite() {
            return Err(Error::schema(format!("detections[{i}].score"), "non-finite score"));
        }
    }
    Ok(dets)
}

/// Serialize any value as pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_BAG: &str = r#"{"images": [{"id": "a", "width": 50, "height": 40, "labels": [0, 1],
        "proposals": [[0, 0, 10, 10], [5, 5, 20, 30]], "features": [[1.5, 2], [0.25, -1]]}]}"#;

    #[test]
    fn parse_and_round_trip() {
        let bags = parse_bags(ONE_BAG).unwrap();
        assert_eq!(bags.len(), 1);
        assert_eq!(bags[0].labels.positive_classes(), vec![1]);
        assert_eq!(bags[0].features.as_ref().unwrap()[[1, 1]], -1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bags.json");
        save_bags(&p, &bags).unwrap();
        assert_eq!(load_bags(&p).unwrap(), bags);
    }

    #[test]
    fn inverted_box_reports_field_path() {
        let text = ONE_BAG.replace("[5, 5, 20, 30]", "[25, 5, 20, 30]");
        let err = parse_bags(&text).unwrap_err().to_string();
        assert!(err.contains("images[0].proposals[1]"), "{err}");
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let text = ONE_BAG.replace("[5, 5, 20, 30]", "[5, 5, 20, 45]");
        let err = parse_bags(&text).unwrap_err().to_string();
        assert!(err.contains("outside image bounds"), "{err}");
    }

    #[test]
    fn feature_row_mismatch_rejected() {
        let text = ONE_BAG.replace("[[1.5, 2], [0.25, -1]]", "[[1.5, 2]]");
        let err = parse_bags(&text).unwrap_err().to_string();
        assert!(err.contains("images[0].features"), "{err}");
        let text = ONE_BAG.replace("\"labels\": [0, 1]", "\"labels\": [0, 3]");
        let err = parse_bags(&text).unwrap_err().to_string();
        assert!(err.contains("images[0].labels[1]"), "{err}");
    }

    #[test]
    fn gt_parse_and_validate() {
        let gt = parse_gt(
            r#"{"images": [{"id": "a", "width": 50, "height": 40,
                "objects": [{"class": 2, "box": [1, 1, 9, 9], "difficult": true}, {"class": 0, "box": [1, 1, 9, 9]}]}]}"#,
        )
        .unwrap();
        assert_eq!(gt.num_classes(), 3);
        assert!(gt.images[0].objects[0].difficult);
        assert!(!gt.images[0].objects[1].difficult);
        assert!(parse_gt(r#"{"images": [{"id": "a", "width": 5, "height": 4, "objects": [{"class": 0, "box": [1, 1, 9, 9]}]}]}"#).is_err());
        assert!(parse_gt(r#"{"images": [{"id": "a", "width": 50, "height": 40, "objects": [{"class": 0, "box": [3, 1, 2, 9]}]}]}"#).is_err());
    }

    #[test]
    fn scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        let m = vec![ImageScores {
            id: "x".into(),
            scores: ScoreMatrix::from_rows(vec![vec![0.1, 0.7], vec![1.0 / 3.0, 0.0]]).unwrap(),
        }];
        save_scores(&p, &m).unwrap();
        assert_eq!(load_scores(&p).unwrap(), m);
    }
}
