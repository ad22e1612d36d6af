//! Attention-based MIL scoring and the losses of the detection head.
//!
//! Proposal scores factor as `x_cn = sigmoid(a_cn) * softmax_n(b_cn)` where
//! `a` comes from the classification branch and `b` from the attention
//! branch. Since the attention weights of each class sum to one over the
//! proposals, the image-level score `p_c = sum_n x_cn` stays in `(0, 1)`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Box};
use crate::mtr::ScoreMatrix;
use crate::params::{Linear, Parameters};

/// Clamp applied to every probability before taking a log.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    pub classification: Linear,
    pub attention: Linear,
}

impl MilParams {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            classification: Linear::zeros(dim, classes),
            attention: Linear::zeros(dim, classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classification.output_dim()
    }
}

impl Parameters for MilParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.classification.visit_named("mil.classification", f);
        self.attention.visit_named("mil.attention", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.classification.visit_named_mut("mil.classification", f);
        self.attention.visit_named_mut("mil.attention", f);
    }
}

/// Binary image-level labels, one entry per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BagLabel(Vec<bool>);

impl BagLabel {
    pub fn new(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn from_positive(num_classes: usize, positive: &[usize]) -> Result<Self> {
        let mut flags = vec![false; num_classes];
        for &c in positive {
            *flags.get_mut(c).ok_or_else(|| {
                Error::InvalidArgument(format!("class {c} out of range for {num_classes} classes"))
            })? = true;
        }
        Ok(Self(flags))
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.get(class).copied().unwrap_or(false)
    }

    pub fn positive_classes(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&c| self.0[c]).collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl TryFrom<Vec<u8>> for BagLabel {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        v.iter()
            .enumerate()
            .map(|(i, &x)| match x {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::schema(
                    format!("labels[{i}]"),
                    format!("expected 0 or 1, got {other}"),
                )),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl From<BagLabel> for Vec<u8> {
    fn from(l: BagLabel) -> Self {
        l.0.into_iter().map(u8::from).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward values of the MIL head, proposals along rows.
#[derive(Debug, Clone)]
pub struct MilCache {
    /// Sigmoid of the classification logits, `N x C`.
    pub class_prob: Array2<f64>,
    /// Attention weights, softmax over proposals per class, `N x C`.
    pub attention: Array2<f64>,
    /// Proposal scores `N x C`.
    pub scores: Array2<f64>,
    /// Image-level scores, length `C`.
    pub image_scores: Array1<f64>,
    /// `1 - image_scores`, summed from `sigmoid(-logit)` so it keeps full
    /// precision when a score is close to one.
    pub image_complement: Array1<f64>,
}

impl MilCache {
    /// Scores as a `C x N` matrix.
    pub fn score_matrix(&self) -> ScoreMatrix {
        ScoreMatrix::new(self.scores.t().to_owned()).expect("finite by construction")
    }
}

fn check_features(v: &Array2<f64>, params: &MilParams) -> Result<()> {
    let dim = params.classification.input_dim();
    if v.nrows() == 0 || v.ncols() != dim || params.attention.input_dim() != dim {
        return Err(Error::ShapeMismatch {
            what: "mil head input".into(),
            expected: vec![v.nrows().max(1), dim],
            got: v.shape().to_vec(),
        });
    }
    if params.attention.output_dim() != params.classification.output_dim() {
        return Err(Error::ShapeMismatch {
            what: "mil attention branch".into(),
            expected: vec![dim, params.classification.output_dim()],
            got: params.attention.weight.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mil_forward(v: &Array2<f64>, params: &MilParams) -> Result<MilCache> {
    check_features(v, params)?;
    let logits = params.classification.forward(v);
    let class_prob = logits.mapv(sigmoid);
    let mut attention = params.attention.forward(v);
    for mut col in attention.columns_mut() {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|x| (x - m).exp());
        let s = col.sum();
        col /= s;
    }
    let scores = &class_prob * &attention;
    let image_scores = scores.sum_axis(Axis(0));
    let image_complement = (&logits.mapv(|z| sigmoid(-z)) * &attention).sum_axis(Axis(0));
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("mil proposal scores".into()));
    }
    Ok(MilCache {
        class_prob,
        attention,
        scores,
        image_scores,
        image_complement,
    })
}

/// The `C x N` proposal score matrix.
pub fn score_proposals(v: &Array2<f64>, params: &MilParams) -> Result<ScoreMatrix> {
    Ok(mil_forward(v, params)?.score_matrix())
}

/// Backpropagates `upstream = dL/dX` (`N x C`, proposals along rows),
/// accumulating into `grad`; returns `dL/dV`.
pub fn mil_backward_cached(
    v: &Array2<f64>,
    params: &MilParams,
    cache: &MilCache,
    upstream: &Array2<f64>,
    grad: &mut MilParams,
) -> Array2<f64> {
    let d_prob = upstream * &cache.attention;
    let d_cls_logit = &d_prob * &cache.class_prob.mapv(|u| u * (1.0 - u));
    let d_att = upstream * &cache.class_prob;
    let weighted = (&d_att * &cache.attention).sum_axis(Axis(0));
    let d_att_logit = &cache.attention * &(&d_att - &weighted.insert_axis(Axis(0)));
    params.classification.backward(v, &d_cls_logit, &mut grad.classification)
        + params.attention.backward(v, &d_att_logit, &mut grad.attention)
}

/// Gradients of `sum(X^T * upstream)` for `X` from [`score_proposals`]
/// (`upstream` is `C x N`).
pub fn mil_backward(
    v: &Array2<f64>,
    params: &MilParams,
    upstream: &ScoreMatrix,
) -> Result<(Array2<f64>, MilParams)> {
    let cache = mil_forward(v, params)?;
    let up = upstream.values().t().to_owned();
    if up.dim() != cache.scores.dim() {
        return Err(Error::ShapeMismatch {
            what: "mil upstream gradient".into(),
            expected: vec![cache.scores.ncols(), cache.scores.nrows()],
            got: upstream.values().shape().to_vec(),
        });
    }
    let mut grad = MilParams::zeros(params.classification.input_dim(), params.num_classes());
    let dv = mil_backward_cached(v, params, &cache, &up, &mut grad);
    Ok((dv, grad))
}

/// Multi-label binary cross entropy of image-level scores.
pub fn bag_loss(p: &[f64], y: &BagLabel) -> Result<f64> {
    check_bag(p, y)?;
    let q: Vec<f64> = p.iter().map(|pc| 1.0 - pc).collect();
    Ok(bce(p, &q, y))
}

/// `dL/dp` of [`bag_loss`]; zero where the clamp is active.
pub fn bag_loss_grad(p: &[f64], y: &BagLabel) -> Result<Vec<f64>> {
    check_bag(p, y)?;
    let q: Vec<f64> = p.iter().map(|pc| 1.0 - pc).collect();
    Ok(bce_grad(p, &q, y))
}

impl MilCache {
    /// [`bag_loss`] with `1 - p` taken from [`MilCache::image_complement`].
    pub fn bag_loss(&self, y: &BagLabel) -> Result<f64> {
        let p = self.image_scores.as_slice().expect("contiguous");
        check_bag(p, y)?;
        Ok(bce(p, self.image_complement.as_slice().expect("contiguous"), y))
    }

    /// [`bag_loss_grad`] with `1 - p` taken from [`MilCache::image_complement`].
    pub fn bag_loss_grad(&self, y: &BagLabel) -> Result<Vec<f64>> {
        let p = self.image_scores.as_slice().expect("contiguous");
        check_bag(p, y)?;
        Ok(bce_grad(p, self.image_complement.as_slice().expect("contiguous"), y))
    }
}

fn clamp_prob(x: f64) -> f64 {
    x.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

fn clamped(x: f64) -> bool {
    x <= LOG_EPS || x >= 1.0 - LOG_EPS
}

/// `q[c]` is `1 - p[c]`, supplied separately to avoid cancellation.
fn bce(p: &[f64], q: &[f64], y: &BagLabel) -> f64 {
    p.iter()
        .zip(q)
        .zip(y.as_f64())
        .map(|((&pc, &qc), yc)| -(yc * clamp_prob(pc).ln() + (1.0 - yc) * clamp_prob(qc).ln()))
        .sum()
}

fn bce_grad(p: &[f64], q: &[f64], y: &BagLabel) -> Vec<f64> {
    p.iter()
        .zip(q)
        .zip(y.as_f64())
        .map(|((&pc, &qc), yc)| {
            let pos = if clamped(pc) { 0.0 } else { -yc / pc };
            let neg = if clamped(qc) { 0.0 } else { (1.0 - yc) / qc };
            pos + neg
        })
        .collect()
}

fn check_bag(p: &[f64], y: &BagLabel) -> Result<()> {
    if p.len() != y.num_classes() {
        return Err(Error::LengthMismatch {
            what: "bag label",
            expected: p.len(),
            got: y.num_classes(),
        });
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image-level score".into()));
    }
    Ok(())
}

/// Per-proposal target of a refinement stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalLabel {
    Class(usize),
    Background,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub num_classes: usize,
    pub labels: Vec<ProposalLabel>,
    /// Per-proposal loss weight (all ones unless confidence weighting is on).
    pub weights: Vec<f64>,
    /// Index into `supervision` of the best-overlapping supervision box, if any.
    pub matched: Vec<Option<usize>>,
    /// `(class, box)` supervision entries the labels were derived from.
    pub supervision: Vec<(usize, Box)>,
}

impl PseudoLabelSet {
    /// Label index in a `C + 1` row score matrix (background is row `C`).
    pub fn row(&self, n: usize) -> Option<usize> {
        match self.labels[n] {
            ProposalLabel::Class(c) => Some(c),
            ProposalLabel::Background => Some(self.num_classes),
            ProposalLabel::Ignored => None,
        }
    }

    pub fn active_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| **l != ProposalLabel::Ignored)
            .count()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, ProposalLabel::Class(_)))
            .count()
    }
}

/// Labels each proposal with the class of its best-overlapping supervision
/// box when that IoU exceeds `gamma2`, background otherwise. With
/// `iou_ign = Some(t)`, proposals whose best IoU falls in `(t, gamma2]` are
/// ignored. Several boxes may supervise the same class.
pub fn assign_pseudo_labels(
    boxes: &[Box],
    supervision: &[(usize, Box)],
    num_classes: usize,
    gamma2: f64,
    iou_ign: Option<f64>,
) -> Result<PseudoLabelSet> {
    if !(0.0..=1.0).contains(&gamma2) {
        return Err(Error::InvalidArgument(format!("gamma2 {gamma2} outside [0, 1]")));
    }
    if let Some(t) = iou_ign {
        if !(0.0..=gamma2).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "ignore threshold {t} must lie in [0, gamma2 = {gamma2}]"
            )));
        }
    }
    if let Some((c, _)) = supervision.iter().find(|(c, _)| *c >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "supervision class {c} out of range for {num_classes} classes"
        )));
    }
    let mut labels = Vec::with_capacity(boxes.len());
    let mut matched = Vec::with_capacity(boxes.len());
    for b in boxes {
        let mut best: Option<(usize, f64)> = None;
        for (i, (_, s)) in supervision.iter().enumerate() {
            let v = iou(b, s);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        let label = match best {
            Some((i, v)) if v > gamma2 => ProposalLabel::Class(supervision[i].0),
            Some((_, v)) if iou_ign.is_some_and(|t| v > t) => ProposalLabel::Ignored,
            _ => ProposalLabel::Background,
        };
        labels.push(label);
        matched.push(best.map(|(i, _)| i));
    }
    Ok(PseudoLabelSet {
        num_classes,
        weights: vec![1.0; boxes.len()],
        labels,
        matched,
        supervision: supervision.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementLoss {
    pub value: f64,
    /// Set when every proposal was ignored and the loss is an empty sum.
    pub all_ignored: bool,
}

/// Weighted cross entropy over the `(C + 1)`-way proposal distributions,
/// averaged over the non-ignored proposals.
pub fn refinement_loss(scores: &ScoreMatrix, labels: &PseudoLabelSet) -> Result<RefinementLoss> {
    let probs = scores.values().t();
    check_refinement(probs.nrows(), probs.ncols(), labels)?;
    for (n, row) in probs.rows().into_iter().enumerate() {
        if (row.sum() - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "column {n} of the refinement scores is not a probability vector"
            )));
        }
    }
    let (value, _) = refinement_loss_from_probs(&probs.to_owned(), labels);
    Ok(RefinementLoss {
        value,
        all_ignored: labels.active_count() == 0,
    })
}

fn check_refinement(n: usize, rows: usize, labels: &PseudoLabelSet) -> Result<()> {
    if rows != labels.num_classes + 1 {
        return Err(Error::ShapeMismatch {
            what: "refinement scores".into(),
            expected: vec![labels.num_classes + 1, n],
            got: vec![rows, n],
        });
    }
    if n != labels.labels.len() {
        return Err(Error::LengthMismatch {
            what: "pseudo labels",
            expected: n,
            got: labels.labels.len(),
        });
    }
    Ok(())
}

/// Loss and its gradient with respect to the softmax logits that produced
/// `probs` (`N x (C + 1)`).
pub(crate) fn refinement_loss_from_probs(
    probs: &Array2<f64>,
    labels: &PseudoLabelSet,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(probs.dim());
    let active = labels.active_count();
    if active == 0 {
        return (0.0, grad);
    }
    let norm = 1.0 / active as f64;
    let mut loss = 0.0;
    for n in 0..probs.nrows() {
        let Some(l) = labels.row(n) else { continue };
        let w = labels.weights[n];
        let p = probs[[n, l]];
        loss -= w * p.max(LOG_EPS).ln();
        if p > LOG_EPS {
            let mut g = grad.row_mut(n);
            g.assign(&probs.row(n));
            g[l] -= 1.0;
            g *= w * norm;
        }
    }
    (loss * norm, grad)
}

/// `sum_j f(pred_j - target_j)` with `f(x) = x^2 / 2` for `|x| < 1`,
/// `|x| - 1/2` otherwise.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            what: "smooth l1 target",
            expected: pred.len(),
            got: target.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let x = p - t;
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        })
        .sum())
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Regression target of `proposal` toward `sup`: center offsets relative
/// to the proposal size, then log size ratios.
pub fn regression_targets(proposal: &Box, sup: &Box) -> [f64; 4] {
    let (cx, cy) = proposal.center();
    let (tx, ty) = sup.center();
    let (w, h) = (proposal.width(), proposal.height());
    [
        (tx - cx) / w,
        (ty - cy) / h,
        (sup.width() / w).ln(),
        (sup.height() / h).ln(),
    ]
}

/// Log size ratios beyond this are clamped when decoding.
const MAX_LOG_RATIO: f64 = 4.0;

/// Inverse of [`regression_targets`].
pub fn apply_regression(proposal: &Box, delta: &[f64; 4]) -> Result<Box> {
    let (cx, cy) = proposal.center();
    let (w, h) = (proposal.width(), proposal.height());
    Box::from_center(
        cx + delta[0] * w,
        cy + delta[1] * h,
        w * delta[2].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp(),
        h * delta[3].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(c: [f64; 4]) -> Box {
        Box::from_array(c).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn uniform_scores() {
        let params = MilParams::zeros(3, 2);
        let v = Array2::from_elem((4, 3), 0.7);
        let cache = mil_forward(&v, &params).unwrap();
        assert!(cache.scores.iter().all(|&x| close(x, 0.5 / 4.0, 1e-15)));
        assert!(cache.image_scores.iter().all(|&p| close(p, 0.5, 1e-15)));
    }

    #[test]
    fn single_proposal_image_score_is_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = MilParams::zeros(3, 2);
        params.classification = Linear::init(3, 2, &mut rng);
        params.attention = Linear::init(3, 2, &mut rng);
        let v = array![[0.3, -1.0, 2.0]];
        let cache = mil_forward(&v, &params).unwrap();
        let logits = params.classification.forward(&v);
        for c in 0..2 {
            assert!(close(cache.image_scores[c], sigmoid(logits[[0, c]]), 1e-15));
        }
    }

    #[test]
    fn bag_loss_examples() {
        let y1 = BagLabel::new(vec![true]);
        assert!(close(bag_loss(&[0.5], &y1).unwrap(), std::f64::consts::LN_2, 1e-12));
        let y2 = BagLabel::new(vec![true, false]);
        assert!(close(bag_loss(&[0.5, 0.5], &y2).unwrap(), 2.0 * std::f64::consts::LN_2, 1e-12));
        assert!(bag_loss(&[1.0, 0.0], &y2).unwrap() < 1e-6);
        assert!(bag_loss_grad(&[1.0, 0.0], &y2).unwrap().iter().all(|g| *g == 0.0));
        assert!(bag_loss(&[0.5], &y2).is_err());
    }

    #[test]
    fn complement_keeps_precision_near_one() {
        // one proposal, logit 30: 1 - sigmoid(30) ~ 9.4e-14 is lost to rounding
        // when formed as a difference
        let params = MilParams {
            classification: Linear {
                weight: array![[30.0]],
                bias: array![0.0],
            },
            attention: Linear::zeros(1, 1),
        };
        let cache = mil_forward(&array![[1.0]], &params).unwrap();
        let exact = (-30f64).exp() / (1.0 + (-30f64).exp());
        assert!((cache.image_complement[0] - exact).abs() < 1e-12 * exact);
        assert!((1.0 - cache.image_scores[0] - exact).abs() > 1e-3 * exact);

        // the loss itself still saturates at the log floor
        let y = BagLabel::new(vec![false]);
        assert!(close(cache.bag_loss(&y).unwrap(), -LOG_EPS.ln(), 1e-12));
        assert_eq!(cache.bag_loss_grad(&y).unwrap()[0], 0.0);

        let near = mil_forward(&array![[0.5]], &params).unwrap();
        let q = 1.0 / (1.0 + 15f64.exp());
        assert!(close(near.bag_loss(&y).unwrap(), -q.ln(), 1e-12));
        assert!(close(near.bag_loss_grad(&y).unwrap()[0], 1.0 / q, 1e-9 / q));
        let mild = mil_forward(&array![[0.01]], &params).unwrap();
        let p = mild.image_scores.to_vec();
        assert!(close(mild.bag_loss(&y).unwrap(), bag_loss(&p, &y).unwrap(), 1e-12));
    }

    #[test]
    fn bag_label_json() {
        let l: BagLabel = serde_json::from_str("[0,1,1]").unwrap();
        assert_eq!(l.positive_classes(), vec![1, 2]);
        assert!(serde_json::from_str::<BagLabel>("[0,2]").is_err());
        assert_eq!(serde_json::to_string(&l).unwrap(), "[0,1,1]");
    }

    #[test]
    fn pseudo_label_examples() {
        let sup = b([0., 0., 10., 10.]);
        let boxes = [sup, b([50., 50., 60., 60.]), b([0., 0., 10., 4.])];
        let l = assign_pseudo_labels(&boxes, &[(1, sup)], 2, 0.5, Some(0.3)).unwrap();
        assert_eq!(l.labels[0], ProposalLabel::Class(1));
        assert_eq!(l.labels[1], ProposalLabel::Background);
        // IoU 0.4 sits in the (0.3, 0.5] band.
        assert_eq!(l.labels[2], ProposalLabel::Ignored);
        let l = assign_pseudo_labels(&boxes, &[(1, sup)], 2, 0.5, None).unwrap();
        assert_eq!(l.labels[2], ProposalLabel::Background);
    }

    #[test]
    fn pseudo_label_best_class_wins() {
        let boxes = [b([0., 0., 10., 10.])];
        let sup = [(0, b([0., 0., 10., 8.])), (1, b([0., 0., 10., 9.]))];
        let l = assign_pseudo_labels(&boxes, &sup, 2, 0.5, None).unwrap();
        assert_eq!(l.labels[0], ProposalLabel::Class(1));
        assert_eq!(l.matched[0], Some(1));
        assert!(assign_pseudo_labels(&boxes, &[(2, boxes[0])], 2, 0.5, None).is_err());
        assert!(assign_pseudo_labels(&boxes, &sup, 2, 1.5, None).is_err());
    }

    fn labels_of(v: Vec<ProposalLabel>, c: usize) -> PseudoLabelSet {
        let n = v.len();
        PseudoLabelSet {
            num_classes: c,
            labels: v,
            weights: vec![1.0; n],
            matched: vec![None; n],
            supervision: vec![],
        }
    }

    #[test]
    fn refinement_loss_examples() {
        use ProposalLabel::*;
        let perfect = ScoreMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let l = labels_of(vec![Class(0), Background], 1);
        assert_eq!(refinement_loss(&perfect, &l).unwrap().value, 0.0);

        let half = ScoreMatrix::new(array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let l = labels_of(vec![Class(0), Background], 1);
        assert!(close(refinement_loss(&half, &l).unwrap().value, std::f64::consts::LN_2, 1e-12));

        let l = labels_of(vec![Ignored, Ignored], 1);
        let r = refinement_loss(&half, &l).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.all_ignored);

        let bad = ScoreMatrix::new(array![[0.7, 0.5], [0.5, 0.5]]).unwrap();
        assert!(refinement_loss(&bad, &labels_of(vec![Class(0), Background], 1)).is_err());
        assert!(refinement_loss(&half, &labels_of(vec![Class(0)], 1)).is_err());
    }

    #[test]
    fn ignored_proposals_do_not_count_toward_normalization() {
        use ProposalLabel::*;
        let s = ScoreMatrix::new(array![[0.5, 0.1], [0.5, 0.9]]).unwrap();
        let l = labels_of(vec![Class(0), Ignored], 1);
        assert!(close(refinement_loss(&s, &l).unwrap().value, std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0]).unwrap(), 1.5);
        assert_eq!(smooth_l1(&[0.0, 1.0], &[0.5, 3.0]).unwrap(), 0.125 + 1.5);
        assert!(smooth_l1(&[0.0], &[]).is_err());
    }

    #[test]
    fn regression_examples() {
        let p = b([0., 0., 10., 20.]);
        assert_eq!(regression_targets(&p, &p), [0.0; 4]);
        assert_eq!(regression_targets(&p, &b([10., 0., 20., 20.])), [1.0, 0.0, 0.0, 0.0]);
        let t = regression_targets(&p, &b([-5., -10., 15., 30.]));
        assert!(close(t[0], 0.0, 1e-15) && close(t[1], 0.0, 1e-15));
        assert!(close(t[2], 2f64.ln(), 1e-15) && close(t[3], 2f64.ln(), 1e-15));
        let back = apply_regression(&p, &t).unwrap().to_array();
        for (x, y) in back.iter().zip([-5., -10., 15., 30.]) {
            assert!(close(*x, y, 1e-12));
        }
    }

    #[test]
    fn mil_backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = MilParams {
            classification: Linear::init(4, 3, &mut rng),
            attention: Linear::init(4, 3, &mut rng),
        };
        let v = crate::params::normal_matrix(5, 4, 1.0, &mut rng);
        let up = ScoreMatrix::new(Array2::zeros((3, 5))).unwrap();
        let (dv, g) = mil_backward(&v, &params, &up).unwrap();
        assert!(dv.iter().all(|&x| x == 0.0));
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mil_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = MilParams {
            classification: Linear::init(4, 3, &mut rng),
            attention: Linear::init(4, 3, &mut rng),
        };
        params.classification.bias = array![0.2, -0.4, 0.1];
        params.attention.bias = array![-0.3, 0.5, 0.0];
        let v = crate::params::normal_matrix(5, 4, 1.0, &mut rng);
        let up = crate::params::normal_matrix(3, 5, 1.0, &mut rng);
        let f = |p: &MilParams, v: &Array2<f64>| (mil_forward(v, p).unwrap().scores.t().to_owned() * &up).sum();
        let (dv, g) = mil_backward(&v, &params, &ScoreMatrix::new(up.clone()).unwrap()).unwrap();
        let analytic = g.flatten();
        let h = 1e-5;
        for i in 0..analytic.len() {
            let bump = |p: &mut MilParams, d: f64| {
                let mut off = 0;
                p.visit_mut(&mut |_, _, s| {
                    if i >= off && i < off + s.len() {
                        s[i - off] += d;
                    }
                    off += s.len();
                });
            };
            bump(&mut params, h);
            let plus = f(&params, &v);
            bump(&mut params, -2.0 * h);
            let minus = f(&params, &v);
            bump(&mut params, h);
            let num = (plus - minus) / (2.0 * h);
            let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-5);
            assert!(err < 1e-4, "param {i}: {num} vs {}", analytic[i]);
        }
        for r in 0..5 {
            for c in 0..4 {
                let mut vp = v.clone();
                vp[[r, c]] += h;
                let plus = f(&params, &vp);
                vp[[r, c]] -= 2.0 * h;
                let minus = f(&params, &vp);
                let num = (plus - minus) / (2.0 * h);
                assert!((num - dv[[r, c]]).abs() < 1e-8 * num.abs().max(1.0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn attention_is_distribution_and_image_score_in_unit_interval(
            seed in any::<u64>(),
            n in 1..10usize,
            scale in 0.1..5.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = MilParams {
                classification: Linear::init(4, 3, &mut rng),
                attention: Linear::init(4, 3, &mut rng),
            };
            let v = crate::params::normal_matrix(n, 4, scale, &mut rng);
            let cache = mil_forward(&v, &params).unwrap();
            for col in cache.attention.columns() {
                prop_assert!(col.iter().all(|&a| a >= 0.0));
                prop_assert!((col.sum() - 1.0).abs() < 1e-12);
            }
            for &p in cache.image_scores.iter() {
                prop_assert!(p >= 0.0 && p <= 1.0);
            }
            let y = BagLabel::new(vec![true, false, true]);
            prop_assert!(bag_loss(cache.image_scores.as_slice().unwrap(), &y).unwrap().is_finite());
        }

        #[test]
        fn refinement_loss_nonnegative(
            raw in prop::collection::vec(0.01..1.0f64, 12),
            lab in prop::collection::vec(0..4usize, 4),
        ) {
            // 4 proposals, C = 2 (+ background), label 3 means ignored.
            let mut m = Array2::from_shape_vec((3, 4), raw).unwrap();
            for mut col in m.columns_mut() {
                let s = col.sum();
                col /= s;
            }
            let labels: Vec<ProposalLabel> = lab.iter().map(|&l| match l {
                0 | 1 => ProposalLabel::Class(l),
                2 => ProposalLabel::Background,
                _ => ProposalLabel::Ignored,
            }).collect();
            let set = labels_of(labels, 2);
            let r = refinement_loss(&ScoreMatrix::new(m.clone()).unwrap(), &set).unwrap();
            prop_assert!(r.value >= 0.0);
            // Zero only when every active proposal has unit probability.
            let mut one_hot = Array2::zeros((3, 4));
            for n in 0..4 {
                match set.row(n) {
                    Some(row) => one_hot[[row, n]] = 1.0,
                    None => one_hot[[0, n]] = 1.0,
                }
            }
            prop_assert_eq!(refinement_loss(&ScoreMatrix::new(one_hot).unwrap(), &set).unwrap().value, 0.0);
            if set.active_count() > 0 {
                prop_assert!(r.value > 0.0);
            }
        }

        #[test]
        fn raising_gamma2_never_adds_foreground(
            boxes in prop::collection::vec(crate::geometry::tests::arb_box(), 1..15),
            sup in crate::geometry::tests::arb_box(),
            g_lo in 0.0..1.0f64,
            g_hi in 0.0..1.0f64,
        ) {
            let (lo, hi) = if g_lo <= g_hi { (g_lo, g_hi) } else { (g_hi, g_lo) };
            let a = assign_pseudo_labels(&boxes, &[(0, sup)], 1, lo, None).unwrap();
            let b = assign_pseudo_labels(&boxes, &[(0, sup)], 1, hi, None).unwrap();
            prop_assert!(b.foreground_count() <= a.foreground_count());
        }

        #[test]
        fn smooth_l1_continuous_at_one(eps in 1e-9..1e-6f64) {
            let below = smooth_l1(&[1.0 - eps], &[0.0]).unwrap();
            let above = smooth_l1(&[1.0 + eps], &[0.0]).unwrap();
            prop_assert!((below - 0.5).abs() < 2e-6 && (above - 0.5).abs() < 2e-6);
            prop_assert!((smooth_l1_grad(1.0 - eps) - 1.0).abs() < 1e-6);
            prop_assert_eq!(smooth_l1_grad(1.0 + eps), 1.0);
        }
    }
}
