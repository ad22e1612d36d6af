//! End-to-end refinement pipeline: encoder, MIL bag scoring, a block of
//! memory-transfer refinement stages, a block of box-mining refinement
//! stages, a class-specific box regressor, and the training loop.
//!
//! Supervision flows strictly forward and is detached: stage `k` only reads
//! the scores of stages `< k` (or the MIL scores), and no gradient passes
//! through the pseudo-labels.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbm::{self, BbmConfig, BbmTrace};
use crate::data_io::{load_json, save_json, ProposalBag};
use crate::encoder::{backward_cached, forward_cached, softmax_rows, EncoderCache, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::geometry::{descending_order, nms, Box, ScoredBox};
use crate::mil_head::{
    apply_regression, assign_pseudo_labels, mil_backward_cached, mil_forward,
    refinement_loss_from_probs, regression_targets, smooth_l1, smooth_l1_grad, MilCache, MilParams,
    ProposalLabel, PseudoLabelSet,
};
use crate::mtr::{fuse_arrays, MtrConfig, ScoreMatrix};
use crate::params::{Checkpoint, Linear, Parameters};

pub const STATE_FORMAT: &str = "wsod-train-state-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    /// Stages in each refinement block.
    pub k_stages: usize,
    pub bbm: BbmConfig,
    pub gamma2: f64,
    pub mtr_delta: f64,
    pub iou_ign: Option<f64>,
    pub nms_threshold: f64,
    pub use_bbm: bool,
    pub use_mtr: bool,
    pub confidence_weights: bool,
    pub learning_rate: f64,
    /// Fraction of `iterations` after which the rate is multiplied by `lr_decay`.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            encoder: EncoderConfig::default(),
            k_stages: 3,
            bbm: BbmConfig::default(),
            gamma2: 0.5,
            mtr_delta: 0.1,
            iou_ign: None,
            nms_threshold: 0.3,
            use_bbm: true,
            use_mtr: true,
            confidence_weights: false,
            learning_rate: 0.01,
            lr_decay_at: 2.0 / 3.0,
            lr_decay: 0.1,
            momentum: 0.9,
            iterations: 200,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Top-1 supervision only: box mining and memory transfer both off.
    pub fn baseline(self) -> Self {
        Self {
            use_bbm: false,
            use_mtr: false,
            ..self
        }
    }

    pub fn mtr_config(&self) -> MtrConfig {
        MtrConfig {
            delta: self.mtr_delta,
            k_max: self.k_stages.max(2),
        }
    }

    pub fn num_stages(&self) -> usize {
        2 * self.k_stages
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.k_stages == 0 {
            return bad("k_stages must be at least 1".into());
        }
        self.encoder.validate()?;
        self.bbm.validate()?;
        self.mtr_config().validate()?;
        if !(0.0..=1.0).contains(&self.gamma2) {
            return bad(format!("gamma2 {} outside [0, 1]", self.gamma2));
        }
        if let Some(t) = self.iou_ign {
            if !(0.0..=self.gamma2).contains(&t) {
                return bad(format!("iou_ign {t} must lie in [0, gamma2]"));
            }
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return bad(format!("nms_threshold {} outside [0, 1]", self.nms_threshold));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) || !(self.lr_decay.is_finite() && self.lr_decay >= 0.0) {
            return bad("learning rate schedule out of range".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let boundary = (self.iterations as f64 * self.lr_decay_at).floor() as usize;
        if iteration >= boundary && self.iterations > 0 {
            self.learning_rate * self.lr_decay
        } else {
            self.learning_rate
        }
    }
}

/// Every trainable tensor of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub mil: MilParams,
    /// `D -> C + 1` softmax branches of the memory-transfer block.
    pub mtr_branches: Vec<Linear>,
    /// `D -> C + 1` softmax branches of the box-mining block.
    pub bbm_branches: Vec<Linear>,
    /// `D -> 4C` class-specific box offsets.
    pub regression: Linear,
}

impl ModelParams {
    pub fn zeros(cfg: &PipelineConfig) -> Self {
        let d = cfg.encoder.dim;
        let c = cfg.num_classes;
        Self {
            encoder: EncoderParams::zeros(cfg.encoder),
            mil: MilParams::zeros(d, c),
            mtr_branches: (0..cfg.k_stages).map(|_| Linear::zeros(d, c + 1)).collect(),
            bbm_branches: (0..cfg.k_stages).map(|_| Linear::zeros(d, c + 1)).collect(),
            regression: Linear::zeros(d, 4 * c),
        }
    }

    /// Random projections; the regressor starts at the identity transform.
    pub fn init(cfg: &PipelineConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.dim;
        let c = cfg.num_classes;
        Ok(Self {
            encoder: EncoderParams::init(cfg.encoder, rng)?,
            mil: MilParams {
                classification: Linear::init(d, c, rng),
                attention: Linear::init(d, c, rng),
            },
            mtr_branches: (0..cfg.k_stages).map(|_| Linear::init(d, c + 1, rng)).collect(),
            bbm_branches: (0..cfg.k_stages).map(|_| Linear::init(d, c + 1, rng)).collect(),
            regression: Linear::zeros(d, 4 * c),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.mil.num_classes()
    }

    fn branches(&self) -> impl Iterator<Item = &Linear> {
        self.mtr_branches.iter().chain(&self.bbm_branches)
    }

    fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        let mut shapes = Vec::new();
        want.visit(&mut |name, shape, _| shapes.push((name.to_string(), shape.to_vec())));
        let mut i = 0;
        let mut err = None;
        self.visit(&mut |name, shape, _| {
            if err.is_none() && shapes.get(i).map_or(true, |(n, s)| n != name || s != shape) {
                err = Some(Error::ShapeMismatch {
                    what: format!("parameter {name}"),
                    expected: shapes.get(i).map(|s| s.1.clone()).unwrap_or_default(),
                    got: shape.to_vec(),
                });
            }
            i += 1;
        });
        match err {
            Some(e) => Err(e),
            None if i != shapes.len() => Err(Error::InvalidArgument(format!(
                "model has {i} tensors, configuration implies {}",
                shapes.len()
            ))),
            None => Ok(()),
        }
    }
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(f);
        self.mil.visit(f);
        for (k, b) in self.mtr_branches.iter().enumerate() {
            b.visit_named(&format!("refine.mtr{}", k + 1), f);
        }
        for (k, b) in self.bbm_branches.iter().enumerate() {
            b.visit_named(&format!("refine.bbm{}", k + 1), f);
        }
        self.regression.visit_named("refine.regression", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.encoder.visit_mut(f);
        self.mil.visit_mut(f);
        for (k, b) in self.mtr_branches.iter_mut().enumerate() {
            b.visit_named_mut(&format!("refine.mtr{}", k + 1), f);
        }
        for (k, b) in self.bbm_branches.iter_mut().enumerate() {
            b.visit_named_mut(&format!("refine.bbm{}", k + 1), f);
        }
        self.regression.visit_named_mut("refine.regression", f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Mtr,
    Bbm,
}

/// How one positive class was supervised in one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSupervision {
    pub class: usize,
    /// Highest scoring proposal of the supervision scores.
    pub top_index: usize,
    pub top_box: Box,
    /// Present when box mining produced the primary box.
    pub mined: Option<BbmTrace>,
    /// Regression target box for this class (mined box, else top box).
    pub primary_box: Box,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub kind: StageKind,
    /// 1-based position inside its block.
    pub index: usize,
    /// `C x N` scores the supervision was derived from.
    pub supervision_scores: ScoreMatrix,
    pub classes: Vec<ClassSupervision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub class: usize,
    pub offsets: [f64; 4],
}

/// Detached targets for every loss term of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    /// MTR stages first, then BBM stages.
    pub stages: Vec<PseudoLabelSet>,
    pub regression: Vec<Option<RegressionTarget>>,
    /// Divisor of the regression loss: non-ignored proposals of the last stage.
    pub regression_norm: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_mtr: f64,
    /// Classification part of the box-mining block.
    pub l_bbm_cls: f64,
    pub l_reg: f64,
}

impl LossBreakdown {
    /// Box-mining block loss, regression included.
    pub fn l_bbm(&self) -> f64 {
        self.l_bbm_cls + self.l_reg
    }

    pub fn total(&self) -> f64 {
        self.l_ce + self.l_mtr + self.l_bbm()
    }

    fn add_scaled(&mut self, other: &Self, w: f64) {
        self.l_ce += w * other.l_ce;
        self.l_mtr += w * other.l_mtr;
        self.l_bbm_cls += w * other.l_bbm_cls;
        self.l_reg += w * other.l_reg;
    }

    fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

/// Multipliers applied to each loss term when forming gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub mtr: f64,
    pub bbm: f64,
    pub regression: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            mtr: 1.0,
            bbm: 1.0,
            regression: 1.0,
        }
    }
}

impl LossWeights {
    pub fn only_ce() -> Self {
        Self { ce: 1.0, mtr: 0.0, bbm: 0.0, regression: 0.0 }
    }

    pub fn only_mtr() -> Self {
        Self { ce: 0.0, mtr: 1.0, bbm: 0.0, regression: 0.0 }
    }

    pub fn only_bbm() -> Self {
        Self { ce: 0.0, mtr: 0.0, bbm: 1.0, regression: 0.0 }
    }

    pub fn only_regression() -> Self {
        Self { ce: 0.0, mtr: 0.0, bbm: 0.0, regression: 1.0 }
    }
}

/// Everything computed for one image in one forward pass.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub image_scores: Vec<f64>,
    /// MIL proposal scores, `C x N`.
    pub x: ScoreMatrix,
    /// `(C + 1) x N` probabilities of every refinement stage, MTR block first.
    pub stage_scores: Vec<ScoreMatrix>,
    /// `N x 4C` regression outputs.
    pub regression: Array2<f64>,
    pub traces: Vec<StageTrace>,
    pub supervision: Supervision,
    pub losses: LossBreakdown,
}

struct Activations {
    enc: EncoderCache,
    mil: MilCache,
    /// `N x (C + 1)` per stage.
    probs: Vec<Array2<f64>>,
    reg: Array2<f64>,
}

fn activate(bag: &ProposalBag, params: &ModelParams, cfg: &PipelineConfig) -> Result<Activations> {
    if bag.labels.num_classes() != cfg.num_classes {
        return Err(Error::LengthMismatch {
            what: "bag labels",
            expected: cfg.num_classes,
            got: bag.labels.num_classes(),
        });
    }
    if bag.is_empty() {
        return Err(Error::EmptyInput("image has no proposals"));
    }
    let enc = forward_cached(bag.features()?, &params.encoder)?;
    let v = enc.output();
    let mil = mil_forward(v, &params.mil)?;
    let probs: Vec<Array2<f64>> = params.branches().map(|b| softmax_rows(&b.forward(v))).collect();
    let reg = params.regression.forward(v);
    if probs.iter().chain([&reg]).any(|a| a.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!("refinement outputs of image {:?}", bag.image_id)));
    }
    Ok(Activations { enc, mil, probs, reg })
}

fn foreground(probs: &Array2<f64>, c: usize) -> Array2<f64> {
    probs.slice(s![.., ..c]).t().to_owned()
}

fn top_index(row: ndarray::ArrayView1<f64>) -> usize {
    descending_order(row.iter().copied())[0]
}

/// Labels for one stage from `C x N` supervision scores.
fn stage_labels(
    bag: &ProposalBag,
    sup: &Array2<f64>,
    mine: bool,
    cfg: &PipelineConfig,
) -> Result<(PseudoLabelSet, Vec<ClassSupervision>)> {
    let mut classes = Vec::new();
    let mut entries = Vec::new();
    for c in bag.labels.positive_classes() {
        let row = sup.row(c);
        let top = top_index(row);
        let top_box = bag.boxes[top];
        let mined = if mine {
            Some(bbm::mine(row.as_slice().expect("standard layout"), &bag.boxes, &cfg.bbm)?)
        } else {
            None
        };
        let primary_box = mined.as_ref().map_or(top_box, |t| t.final_box);
        entries.push((c, primary_box));
        if mined.is_some() {
            entries.push((c, top_box));
        }
        classes.push(ClassSupervision {
            class: c,
            top_index: top,
            top_box,
            mined,
            primary_box,
        });
    }
    let mut labels = assign_pseudo_labels(&bag.boxes, &entries, cfg.num_classes, cfg.gamma2, cfg.iou_ign)?;
    if cfg.confidence_weights {
        for n in 0..labels.labels.len() {
            if labels.labels[n] == ProposalLabel::Ignored {
                continue;
            }
            if let Some(m) = labels.matched[n] {
                let cs = classes.iter().find(|cs| cs.class == entries[m].0).expect("entry class");
                labels.weights[n] = sup[[cs.class, cs.top_index]];
            }
        }
    }
    Ok((labels, classes))
}

fn build_supervision(
    bag: &ProposalBag,
    act: &Activations,
    cfg: &PipelineConfig,
) -> Result<(Supervision, Vec<StageTrace>)> {
    let c = cfg.num_classes;
    let k = cfg.k_stages;
    let x = act.mil.scores.t().to_owned();
    let mut stages = Vec::with_capacity(2 * k);
    let mut traces = Vec::with_capacity(2 * k);

    let mut history: Vec<Array2<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let sup = if j == 0 {
            x.clone()
        } else if cfg.use_mtr {
            let views: Vec<ArrayView2<f64>> = history.iter().map(|h| h.view()).collect();
            fuse_arrays(&views, cfg.mtr_delta)?
        } else {
            history[j - 1].clone()
        };
        let (labels, classes) = stage_labels(bag, &sup, false, cfg)?;
        stages.push(labels);
        traces.push(StageTrace {
            kind: StageKind::Mtr,
            index: j + 1,
            supervision_scores: ScoreMatrix::new(sup)?,
            classes,
        });
        history.push(foreground(&act.probs[j], c));
    }

    let mut prev = history.pop().expect("k >= 1");
    let mut last_classes = Vec::new();
    for j in 0..k {
        let (labels, classes) = stage_labels(bag, &prev, cfg.use_bbm, cfg)?;
        stages.push(labels);
        last_classes = classes.clone();
        traces.push(StageTrace {
            kind: StageKind::Bbm,
            index: j + 1,
            supervision_scores: ScoreMatrix::new(prev)?,
            classes,
        });
        prev = foreground(&act.probs[k + j], c);
    }

    let last = stages.last().expect("at least one stage");
    let regression = last
        .labels
        .iter()
        .zip(&bag.boxes)
        .map(|(l, b)| match *l {
            ProposalLabel::Class(class) => {
                let primary = last_classes
                    .iter()
                    .find(|cs| cs.class == class)
                    .expect("foreground label has a supervising class")
                    .primary_box;
                Some(RegressionTarget {
                    class,
                    offsets: regression_targets(b, &primary),
                })
            }
            _ => None,
        })
        .collect();
    let regression_norm = last.active_count();
    Ok((
        Supervision {
            stages,
            regression,
            regression_norm,
        },
        traces,
    ))
}

struct LossGrads {
    losses: LossBreakdown,
    /// `dL_CE / dX`, `N x C`.
    d_scores: Array2<f64>,
    d_logits: Vec<Array2<f64>>,
    d_reg: Array2<f64>,
}

fn check_supervision(bag: &ProposalBag, sup: &Supervision, cfg: &PipelineConfig) -> Result<()> {
    if sup.stages.len() != cfg.num_stages() {
        return Err(Error::LengthMismatch {
            what: "supervision stages",
            expected: cfg.num_stages(),
            got: sup.stages.len(),
        });
    }
    for labels in &sup.stages {
        if labels.labels.len() != bag.len() || labels.num_classes != cfg.num_classes {
            return Err(Error::LengthMismatch {
                what: "stage pseudo labels",
                expected: bag.len(),
                got: labels.labels.len(),
            });
        }
    }
    if sup.regression.len() != bag.len() {
        return Err(Error::LengthMismatch {
            what: "regression targets",
            expected: bag.len(),
            got: sup.regression.len(),
        });
    }
    Ok(())
}

fn compute_losses(bag: &ProposalBag, act: &Activations, sup: &Supervision, cfg: &PipelineConfig) -> Result<LossGrads> {
    let k = cfg.k_stages;
    let l_ce = act.mil.bag_loss(&bag.labels)?;
    let dp = act.mil.bag_loss_grad(&bag.labels)?;
    let n = bag.len();
    let mut d_scores = Array2::zeros((n, cfg.num_classes));
    for mut row in d_scores.rows_mut() {
        row.assign(&ndarray::ArrayView1::from(&dp));
    }

    let mut losses = LossBreakdown {
        l_ce,
        ..Default::default()
    };
    let mut d_logits = Vec::with_capacity(2 * k);
    for (j, (probs, labels)) in act.probs.iter().zip(&sup.stages).enumerate() {
        let (l, g) = refinement_loss_from_probs(probs, labels);
        if j < k {
            losses.l_mtr += l;
        } else {
            losses.l_bbm_cls += l;
        }
        d_logits.push(g);
    }

    let mut d_reg = Array2::zeros(act.reg.dim());
    if sup.regression_norm > 0 {
        let norm = 1.0 / sup.regression_norm as f64;
        for (i, t) in sup.regression.iter().enumerate() {
            let Some(t) = t else { continue };
            let cols = 4 * t.class..4 * t.class + 4;
            let pred = act.reg.slice(s![i, cols.clone()]);
            let pred = pred.as_slice().expect("row slice is contiguous");
            losses.l_reg += smooth_l1(pred, &t.offsets)? * norm;
            for (j, col) in cols.enumerate() {
                d_reg[[i, col]] = smooth_l1_grad(pred[j] - t.offsets[j]) * norm;
            }
        }
    }
    Ok(LossGrads {
        losses,
        d_scores,
        d_logits,
        d_reg,
    })
}

fn backward(
    act: &Activations,
    params: &ModelParams,
    g: &LossGrads,
    cfg: &PipelineConfig,
    w: &LossWeights,
) -> ModelParams {
    let mut grad = ModelParams::zeros(cfg);
    let v = act.enc.output();
    let k = cfg.k_stages;
    let mut dv = mil_backward_cached(v, &params.mil, &act.mil, &(&g.d_scores * w.ce), &mut grad.mil);
    for j in 0..2 * k {
        let (branch, gbranch, scale) = if j < k {
            (&params.mtr_branches[j], &mut grad.mtr_branches[j], w.mtr)
        } else {
            (&params.bbm_branches[j - k], &mut grad.bbm_branches[j - k], w.bbm)
        };
        dv += &branch.backward(v, &(&g.d_logits[j] * scale), gbranch);
    }
    dv += &params
        .regression
        .backward(v, &(&g.d_reg * w.regression), &mut grad.regression);
    backward_cached(&act.enc, &params.encoder, &dv, &mut grad.encoder);
    grad
}

fn to_score_matrix(a: &Array2<f64>) -> Result<ScoreMatrix> {
    ScoreMatrix::new(a.t().to_owned())
}

fn assemble(act: Activations, sup: Supervision, traces: Vec<StageTrace>, losses: LossBreakdown) -> Result<ImageForward> {
    Ok(ImageForward {
        image_scores: act.mil.image_scores.to_vec(),
        x: act.mil.score_matrix(),
        stage_scores: act.probs.iter().map(to_score_matrix).collect::<Result<_>>()?,
        regression: act.reg,
        traces,
        supervision: sup,
        losses,
    })
}

/// Scores, supervision and losses of one image.
pub fn forward_image(bag: &ProposalBag, params: &ModelParams, cfg: &PipelineConfig) -> Result<ImageForward> {
    cfg.validate()?;
    params.check(cfg)?;
    let act = activate(bag, params, cfg)?;
    let (sup, traces) = build_supervision(bag, &act, cfg)?;
    let losses = compute_losses(bag, &act, &sup, cfg)?.losses;
    assemble(act, sup, traces, losses)
}

/// Like [`forward_image`], plus the gradient of the weighted loss sum.
pub fn image_gradients(
    bag: &ProposalBag,
    params: &ModelParams,
    cfg: &PipelineConfig,
    weights: &LossWeights,
) -> Result<(ImageForward, ModelParams)> {
    cfg.validate()?;
    params.check(cfg)?;
    let act = activate(bag, params, cfg)?;
    let (sup, traces) = build_supervision(bag, &act, cfg)?;
    let lg = compute_losses(bag, &act, &sup, cfg)?;
    let grad = backward(&act, params, &lg, cfg, weights);
    Ok((assemble(act, sup, traces, lg.losses)?, grad))
}

/// Losses against fixed targets; smooth in the parameters, which makes it
/// the function to differentiate numerically.
pub fn losses_with_supervision(
    bag: &ProposalBag,
    params: &ModelParams,
    cfg: &PipelineConfig,
    sup: &Supervision,
) -> Result<LossBreakdown> {
    check_supervision(bag, sup, cfg)?;
    let act = activate(bag, params, cfg)?;
    Ok(compute_losses(bag, &act, sup, cfg)?.losses)
}

pub fn gradients_with_supervision(
    bag: &ProposalBag,
    params: &ModelParams,
    cfg: &PipelineConfig,
    sup: &Supervision,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ModelParams)> {
    check_supervision(bag, sup, cfg)?;
    params.check(cfg)?;
    let act = activate(bag, params, cfg)?;
    let lg = compute_losses(bag, &act, sup, cfg)?;
    let grad = backward(&act, params, &lg, cfg, weights);
    Ok((lg.losses, grad))
}

/// Detections for every class: refinement probabilities averaged over all
/// stages, background dropped, boxes moved by the class's regression
/// offsets and clipped, then per-class NMS. Each class keeps at most one
/// detection per proposal.
pub fn infer(bag: &ProposalBag, params: &ModelParams, cfg: &PipelineConfig) -> Result<Vec<ScoredBox>> {
    cfg.validate()?;
    params.check(cfg)?;
    if bag.is_empty() {
        return Ok(Vec::new());
    }
    let enc = forward_cached(bag.features()?, &params.encoder)?;
    let v = enc.output();
    let mut mean = Array2::<f64>::zeros((bag.len(), cfg.num_classes + 1));
    for b in params.branches() {
        mean += &softmax_rows(&b.forward(v));
    }
    mean /= cfg.num_stages() as f64;
    let reg = params.regression.forward(v);
    let mut dets = Vec::with_capacity(bag.len() * cfg.num_classes);
    for c in 0..cfg.num_classes {
        for (n, p) in bag.boxes.iter().enumerate() {
            let d: [f64; 4] = std::array::from_fn(|j| reg[[n, 4 * c + j]]);
            let moved = if d.iter().all(|x| x.is_finite()) {
                apply_regression(p, &d)
                    .ok()
                    .and_then(|b| b.clip(bag.width, bag.height))
                    .unwrap_or(*p)
            } else {
                *p
            };
            let score = mean[[n, c]].clamp(0.0, 1.0);
            if !score.is_finite() {
                return Err(Error::NonFinite(format!("detection score of image {:?}", bag.image_id)));
            }
            dets.push(ScoredBox::new(moved, score, c)?);
        }
    }
    nms(&dets, cfg.nms_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_ce: f64,
    pub l_mtr: f64,
    pub l_bbm: f64,
    pub l_total: f64,
}

impl LossRecord {
    fn new(iteration: usize, l: &LossBreakdown) -> Self {
        Self {
            iteration,
            l_ce: l.l_ce,
            l_mtr: l.l_mtr,
            l_bbm: l.l_bbm(),
            l_total: l.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: PipelineConfig,
    pub params: ModelParams,
    pub velocity: ModelParams,
    /// Completed iterations.
    pub iteration: usize,
    pub history: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    format: String,
    config: PipelineConfig,
    iteration: usize,
    history: Vec<LossRecord>,
    params: Checkpoint,
    velocity: Checkpoint,
}

impl TrainState {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            config: cfg.clone(),
            params: ModelParams::init(cfg, &mut rng)?,
            velocity: ModelParams::zeros(cfg),
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(
            path.as_ref(),
            &StateFile {
                format: STATE_FORMAT.into(),
                config: self.config.clone(),
                iteration: self.iteration,
                history: self.history.clone(),
                params: self.params.to_checkpoint(),
                velocity: self.velocity.to_checkpoint(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f: StateFile = load_json(path.as_ref())?;
        if f.format != STATE_FORMAT {
            return Err(Error::schema("format", format!("expected {STATE_FORMAT:?}, got {:?}", f.format)));
        }
        f.config.validate()?;
        let mut params = ModelParams::zeros(&f.config);
        params.load_checkpoint(&f.params)?;
        let mut velocity = ModelParams::zeros(&f.config);
        velocity.load_checkpoint(&f.velocity)?;
        Ok(Self {
            config: f.config,
            params,
            velocity,
            iteration: f.iteration,
            history: f.history,
        })
    }
}

/// Epoch-shuffled image order; the same for every call with the same seed.
fn batch_schedule(len: usize, batch: usize, iterations: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut batches = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut b = Vec::with_capacity(batch);
        for _ in 0..batch {
            if order.is_empty() {
                order = (0..len).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            b.push(order.pop().expect("refilled"));
        }
        batches.push(b);
    }
    batches
}

/// One SGD-with-momentum step on the mean loss of `batch`.
fn sgd_step(state: &mut TrainState, bags: &[&ProposalBag]) -> Result<LossBreakdown> {
    let cfg = state.config.clone();
    let mut grad = ModelParams::zeros(&cfg);
    let mut mean = LossBreakdown::default();
    let w = 1.0 / bags.len() as f64;
    for bag in bags {
        let (fwd, g) = image_gradients(bag, &state.params, &cfg, &LossWeights::default())?;
        if !fwd.losses.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss diverged at iteration {} on image {:?}: {:?}",
                state.iteration, bag.image_id, fwd.losses
            )));
        }
        mean.add_scaled(&fwd.losses, w);
        crate::params::axpy(&mut grad, w, &g);
    }
    let lr = cfg.learning_rate_at(state.iteration);
    let mut g_flat = grad.flatten().into_iter();
    state.velocity.visit_mut(&mut |_, _, v| {
        for x in v.iter_mut() {
            *x = cfg.momentum * *x + g_flat.next().expect("same layout");
        }
    });
    crate::params::axpy(&mut state.params, -lr, &state.velocity);
    if !state.params.is_finite() {
        return Err(Error::NonFinite(format!(
            "parameters diverged at iteration {}",
            state.iteration
        )));
    }
    state.history.push(LossRecord::new(state.iteration, &mean));
    state.iteration += 1;
    Ok(mean)
}

/// Trains from a fresh initialization for `cfg.iterations` steps.
pub fn train(bags: &[ProposalBag], cfg: &PipelineConfig) -> Result<TrainState> {
    let mut state = TrainState::new(cfg)?;
    train_continue(&mut state, bags, |_| {})?;
    Ok(state)
}

/// Runs the remaining iterations of `state.config.iterations`, calling
/// `on_step` after each one.
pub fn train_continue(
    state: &mut TrainState,
    bags: &[ProposalBag],
    mut on_step: impl FnMut(&LossRecord),
) -> Result<()> {
    if bags.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let cfg = state.config.clone();
    cfg.validate()?;
    let schedule = batch_schedule(bags.len(), cfg.batch_size, cfg.iterations, cfg.seed);
    while state.iteration < cfg.iterations {
        let batch: Vec<&ProposalBag> = schedule[state.iteration].iter().map(|&i| &bags[i]).collect();
        sgd_step(state, &batch)?;
        on_step(state.history.last().expect("just pushed"));
    }
    Ok(())
}

/// Mean loss over `bags` (supervision recomputed from `params`).
pub fn dataset_loss(bags: &[ProposalBag], params: &ModelParams, cfg: &PipelineConfig) -> Result<LossBreakdown> {
    if bags.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let mut mean = LossBreakdown::default();
    for bag in bags {
        mean.add_scaled(&forward_image(bag, params, cfg)?.losses, 1.0 / bags.len() as f64);
    }
    Ok(mean)
}

/// Mean foreground scores across refinement stages, `C x N`; used by callers
/// that want the detection scores without NMS.
pub fn refined_scores(bag: &ProposalBag, params: &ModelParams, cfg: &PipelineConfig) -> Result<ScoreMatrix> {
    let fwd = forward_image(bag, params, cfg)?;
    let mut mean = Array2::<f64>::zeros((cfg.num_classes, bag.len()));
    for s in &fwd.stage_scores {
        mean += &s.values().slice(s![..cfg.num_classes, ..]);
    }
    mean /= cfg.num_stages() as f64;
    ScoreMatrix::new(mean)
}
