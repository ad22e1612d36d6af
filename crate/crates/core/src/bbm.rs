//! Bounding box mining.
//!
//! Step 1 repeatedly takes the highest-scoring remaining proposal, collects
//! every remaining proposal whose IoU with it exceeds `gamma1`, averages the
//! cluster into a created box and removes the cluster. Step 2 drops created
//! boxes that do not overlap the globally top proposal, averages the rest
//! (optionally weighted by area so boxes covering more of the object count
//! more) and takes the midpoint of that average with the top proposal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, average_box, intersects, iou, weighted_average_box, Box};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SizeWeightMode {
    Uniform,
    #[default]
    AreaProportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BbmConfig {
    /// Cluster IoU threshold.
    pub gamma1: f64,
    /// Maximum number of clusters.
    pub q: usize,
    pub size_weight_mode: SizeWeightMode,
}

impl Default for BbmConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.3,
            q: 3,
            size_weight_mode: SizeWeightMode::AreaProportional,
        }
    }
}

impl BbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma1) {
            return Err(Error::InvalidArgument(format!(
                "gamma1 {} outside [0, 1]",
                self.gamma1
            )));
        }
        if self.q == 0 {
            return Err(Error::InvalidArgument("q must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Proposal indices; the seed comes first.
    pub members: Vec<usize>,
    pub created: Box,
}

impl Cluster {
    pub fn seed(&self) -> usize {
        self.members[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BbmTrace {
    pub clusters: Vec<Cluster>,
    /// Indices into `clusters` of created boxes removed by the overlap filter.
    pub eliminated: Vec<usize>,
    /// Index of the globally highest scoring proposal.
    pub top_index: usize,
    pub top_box: Box,
    /// Set when every created box was eliminated and the top box was used.
    pub fell_back: bool,
    pub final_box: Box,
}

fn check_inputs(scores: &[f64], boxes: &[Box]) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("bbm: no proposals"));
    }
    if scores.len() != boxes.len() {
        return Err(Error::LengthMismatch {
            what: "bbm scores",
            expected: boxes.len(),
            got: scores.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("bbm score {s}")));
    }
    Ok(())
}

/// Iterative cluster-and-average. Returns at most `cfg.q` clusters.
pub fn step1(scores: &[f64], boxes: &[Box], cfg: &BbmConfig) -> Result<Vec<Cluster>> {
    check_inputs(scores, boxes)?;
    cfg.validate()?;
    let order = geometry::descending_order(scores.iter().copied());
    let mut remaining = vec![true; boxes.len()];
    let mut clusters = Vec::with_capacity(cfg.q);
    let mut cursor = order.iter();
    while clusters.len() < cfg.q {
        let Some(&seed) = cursor.by_ref().find(|&&i| remaining[i]) else {
            break;
        };
        let mut members = vec![seed];
        remaining[seed] = false;
        for (j, alive) in remaining.iter_mut().enumerate() {
            if *alive && iou(&boxes[j], &boxes[seed]) > cfg.gamma1 {
                members.push(j);
                *alive = false;
            }
        }
        let member_boxes: Vec<Box> = members.iter().map(|&m| boxes[m]).collect();
        clusters.push(Cluster {
            members,
            created: average_box(&member_boxes)?,
        });
    }
    Ok(clusters)
}

/// Result of the filter / re-weight / fuse step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step2Outcome {
    pub eliminated: Vec<usize>,
    pub fell_back: bool,
    pub final_box: Box,
}

/// Multi-instance elimination, size-adaptive averaging and final fusion
/// with the top proposal box.
pub fn step2(created: &[Box], top_box: &Box, cfg: &BbmConfig) -> Result<Step2Outcome> {
    if created.is_empty() {
        return Err(Error::EmptyInput("bbm step 2: no created boxes"));
    }
    let (survivors, eliminated): (Vec<usize>, Vec<usize>) =
        (0..created.len()).partition(|&i| intersects(&created[i], top_box));
    if survivors.is_empty() {
        return Ok(Step2Outcome {
            eliminated,
            fell_back: true,
            final_box: *top_box,
        });
    }
    let kept: Vec<Box> = survivors.iter().map(|&i| created[i]).collect();
    let weights: Vec<f64> = match cfg.size_weight_mode {
        SizeWeightMode::Uniform => vec![1.0; kept.len()],
        SizeWeightMode::AreaProportional => {
            let total: f64 = kept.iter().map(Box::area).sum();
            kept.iter().map(|b| b.area() / total).collect()
        }
    };
    let supervision = weighted_average_box(&kept, &weights)?;
    Ok(Step2Outcome {
        eliminated,
        fell_back: false,
        final_box: average_box(&[supervision, *top_box])?,
    })
}

/// Full mining pass over one score column.
pub fn mine(scores: &[f64], boxes: &[Box], cfg: &BbmConfig) -> Result<BbmTrace> {
    let clusters = step1(scores, boxes, cfg)?;
    let top_index = clusters[0].seed();
    let top_box = boxes[top_index];
    let created: Vec<Box> = clusters.iter().map(|c| c.created).collect();
    let outcome = step2(&created, &top_box, cfg)?;
    Ok(BbmTrace {
        clusters,
        eliminated: outcome.eliminated,
        top_index,
        top_box,
        fell_back: outcome.fell_back,
        final_box: outcome.final_box,
    })
}
