//! Synthetic scenes with a dominant salient part per object.
//!
//! Every object gets a top-left corner sub-rectangle covering a fraction `s`
//! of its area. Proposal features along the class direction are
//! `boost * IoU(p, salient) + IoU(p, object)`, so with `boost > 1` the most
//! activated proposal is a part crop rather than the object.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GroundTruth, GtObject, ImageGt, ProposalBag};
use crate::error::{Error, Result};
use crate::geometry::{iou, Box};
use crate::mil_head::BagLabel;

const PLACEMENT_TRIES: usize = 200;
const LAYOUT_RESTARTS: usize = 20;
const MIN_SIDE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub width: f64,
    pub height: f64,
    pub num_classes: usize,
    /// Each present class gets between 1 and this many instances.
    pub max_objects_per_class: usize,
    /// Probability that a class is present; at least one class always is.
    pub class_probability: f64,
    /// Object side lengths are drawn as fractions of the image side.
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub salient_fraction: f64,
    pub salience_boost: f64,
    pub num_proposals: usize,
    pub background_fraction: f64,
    /// Coordinate jitter std as a fraction of the jittered box's side.
    pub jitter: f64,
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            width: 200.0,
            height: 200.0,
            num_classes: 2,
            max_objects_per_class: 2,
            class_probability: 0.5,
            min_object_size: 0.2,
            max_object_size: 0.4,
            salient_fraction: 0.3,
            salience_boost: 3.0,
            num_proposals: 48,
            background_fraction: 0.2,
            jitter: 0.06,
            feature_dim: 32,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.width.is_finite() && self.height.is_finite() && self.width > 0.0 && self.height > 0.0) {
            return bad(format!("image size {} x {} must be positive", self.width, self.height));
        }
        if self.num_classes == 0 || self.max_objects_per_class == 0 {
            return bad("need at least one class and one object per class".into());
        }
        if !(self.salient_fraction > 0.0 && self.salient_fraction < 1.0) {
            return bad(format!("salient_fraction {} must be in (0, 1)", self.salient_fraction));
        }
        if !(self.salience_boost.is_finite() && self.salience_boost >= 0.0) {
            return bad(format!("salience_boost {} must be >= 0", self.salience_boost));
        }
        if !(0.0..=1.0).contains(&self.class_probability) {
            return bad(format!("class_probability {} must be in [0, 1]", self.class_probability));
        }
        if !(self.min_object_size > 0.0
            && self.min_object_size <= self.max_object_size
            && self.max_object_size <= 1.0)
        {
            return bad(format!(
                "object size range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.min_object_size, self.max_object_size
            ));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return bad(format!("background_fraction {} must be in [0, 1)", self.background_fraction));
        }
        if !(self.jitter.is_finite() && (0.0..0.5).contains(&self.jitter)) {
            return bad(format!("jitter {} must be in [0, 0.5)", self.jitter));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        if self.feature_dim < self.num_classes {
            return bad(format!(
                "feature_dim {} must be at least num_classes {}",
                self.feature_dim, self.num_classes
            ));
        }
        let max_objects = self.num_classes * self.max_objects_per_class;
        if self.num_proposals < max_objects {
            return bad(format!(
                "num_proposals {} is smaller than the maximum object count {max_objects}",
                self.num_proposals
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub bbox: Box,
    pub salient: Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Salient,
    Whole,
    PartUnion,
    Background,
}

/// A generated image with the generator's own bookkeeping kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bag: ProposalBag,
    pub gt: ImageGt,
    pub objects: Vec<SceneObject>,
    pub kinds: Vec<ProposalKind>,
    /// Object each proposal was sampled around; `None` for background.
    pub source: Vec<Option<usize>>,
}

/// Noise-free activation of `p` along each class direction.
pub fn class_activation(p: &Box, objects: &[SceneObject], num_classes: usize, boost: f64) -> Vec<f64> {
    let mut out = vec![0.0; num_classes];
    for o in objects {
        out[o.class] += boost * iou(p, &o.salient) + iou(p, &o.bbox);
    }
    out
}

fn salient_corner(b: &Box, fraction: f64) -> Box {
    let k = fraction.sqrt();
    Box::new(b.x1(), b.y1(), b.x1() + b.width() * k, b.y1() + b.height() * k)
        .expect("shrunk corner of a valid box is valid")
}

fn lerp_box(a: &Box, b: &Box, t: f64) -> Box {
    let (a, b) = (a.to_array(), b.to_array());
    let c: [f64; 4] = std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t);
    Box::from_array(c).expect("interpolation of nested boxes is valid")
}

fn place_objects(cfg: &SyntheticSceneConfig, classes: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Box>> {
    'layout: for _ in 0..LAYOUT_RESTARTS {
        let mut placed: Vec<Box> = Vec::with_capacity(classes.len());
        for _ in classes {
            let mut ok = false;
            for _ in 0..PLACEMENT_TRIES {
                let w = cfg.width * rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
                let h = cfg.height * rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
                let x = rng.gen_range(0.0..=(cfg.width - w));
                let y = rng.gen_range(0.0..=(cfg.height - h));
                let b = Box::new(x, y, x + w, y + h)?;
                if placed.iter().all(|o| o.intersection_area(&b) == 0.0) {
                    placed.push(b);
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'layout;
            }
        }
        return Ok(placed);
    }
    Err(Error::Generation(format!(
        "could not place {} non-overlapping objects in a {} x {} image",
        classes.len(),
        cfg.width,
        cfg.height
    )))
}

fn jittered(b: &Box, cfg: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> Box {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let (w, h) = (b.width(), b.height());
    for _ in 0..PLACEMENT_TRIES {
        let c = [
            b.x1() + n.sample(rng) * cfg.jitter * w,
            b.y1() + n.sample(rng) * cfg.jitter * h,
            b.x2() + n.sample(rng) * cfg.jitter * w,
            b.y2() + n.sample(rng) * cfg.jitter * h,
        ];
        if let Ok(j) = Box::from_array(c) {
            if let Some(j) = j.clip(cfg.width, cfg.height) {
                if j.width() >= MIN_SIDE && j.height() >= MIN_SIDE {
                    return j;
                }
            }
        }
    }
    *b
}

fn background(cfg: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> Box {
    let w = cfg.width * rng.gen_range(0.1..=0.4);
    let h = cfg.height * rng.gen_range(0.1..=0.4);
    let x = rng.gen_range(0.0..=(cfg.width - w));
    let y = rng.gen_range(0.0..=(cfg.height - h));
    Box::new(x, y, x + w, y + h).expect("positive extent")
}

/// Splits `budget` proposals for one object into salient, whole and union crops.
fn object_mix(budget: usize) -> [usize; 3] {
    let salient = budget.div_ceil(4);
    let whole = ((budget as f64) * 0.3).round() as usize;
    let whole = whole.min(budget - salient);
    [salient, whole, budget - salient - whole]
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates the scene for `cfg.seed` with id `scene0000`.
pub fn generate_scene(cfg: &SyntheticSceneConfig) -> Result<Scene> {
    generate_scene_at(cfg, 0)
}

/// Scene `index` of the dataset defined by `cfg`; each index draws from its
/// own random stream so scenes can be produced independently.
pub fn generate_scene_at(cfg: &SyntheticSceneConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index as u64);

    let mut present: Vec<usize> = (0..cfg.num_classes)
        .filter(|_| rng.gen_bool(cfg.class_probability))
        .collect();
    if present.is_empty() {
        present.push(rng.gen_range(0..cfg.num_classes));
    }
    let mut classes = Vec::new();
    for &c in &present {
        let count = rng.gen_range(1..=cfg.max_objects_per_class);
        classes.extend(std::iter::repeat(c).take(count));
    }
    let boxes = place_objects(cfg, &classes, &mut rng)?;
    let objects: Vec<SceneObject> = classes
        .iter()
        .zip(&boxes)
        .map(|(&class, &bbox)| SceneObject {
            class,
            bbox,
            salient: salient_corner(&bbox, cfg.salient_fraction),
        })
        .collect();

    let n = cfg.num_proposals;
    let n_bg = ((n as f64) * cfg.background_fraction).round() as usize;
    let n_obj = n - n_bg;
    let mut proposals: Vec<(Box, ProposalKind, Option<usize>)> = Vec::with_capacity(n);
    for (i, o) in objects.iter().enumerate() {
        let budget = n_obj / objects.len() + usize::from(i < n_obj % objects.len());
        let [ns, nw, nu] = object_mix(budget);
        for _ in 0..ns {
            proposals.push((jittered(&o.salient, cfg, &mut rng), ProposalKind::Salient, Some(i)));
        }
        for _ in 0..nw {
            proposals.push((jittered(&o.bbox, cfg, &mut rng), ProposalKind::Whole, Some(i)));
        }
        for _ in 0..nu {
            let t = rng.gen_range(0.0..=1.0);
            let b = lerp_box(&o.salient, &o.bbox, t);
            proposals.push((jittered(&b, cfg, &mut rng), ProposalKind::PartUnion, Some(i)));
        }
    }
    for _ in 0..n_bg {
        proposals.push((background(cfg, &mut rng), ProposalKind::Background, None));
    }
    proposals.shuffle(&mut rng);

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut features = Array2::<f64>::zeros((n, cfg.feature_dim));
    for (row, (p, _, _)) in proposals.iter().enumerate() {
        let act = class_activation(p, &objects, cfg.num_classes, cfg.salience_boost);
        for (c, a) in act.into_iter().enumerate() {
            features[[row, c]] = a;
        }
        if cfg.noise > 0.0 {
            for v in features.row_mut(row) {
                *v += noise.sample(&mut rng);
            }
        }
    }

    let id = format!("scene{index:04}");
    let labels = BagLabel::from_positive(cfg.num_classes, &present)?;
    let bag = ProposalBag {
        image_id: id.clone(),
        width: cfg.width,
        height: cfg.height,
        boxes: proposals.iter().map(|p| p.0).collect(),
        features: Some(features),
        labels,
    };
    let gt = ImageGt {
        id,
        width: cfg.width,
        height: cfg.height,
        objects: objects
            .iter()
            .map(|o| GtObject {
                class: o.class,
                bbox: o.bbox,
                difficult: false,
            })
            .collect(),
    };
    Ok(Scene {
        bag,
        gt,
        objects,
        kinds: proposals.iter().map(|p| p.1).collect(),
        source: proposals.iter().map(|p| p.2).collect(),
    })
}

/// `count` scenes with ids `scene0000`, `scene0001`, ...
pub fn generate_dataset(cfg: &SyntheticSceneConfig, count: usize) -> Result<(Vec<ProposalBag>, GroundTruth)> {
    let mut bags = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let s = generate_scene_at(cfg, i)?;
        bags.push(s.bag);
        images.push(s.gt);
    }
    Ok((bags, GroundTruth { images }))
}
