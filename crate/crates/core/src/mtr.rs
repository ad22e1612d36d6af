//! Memory transfer refinement: the supervision for refinement stage `k` is a
//! recency-weighted convex blend of the score matrices of stages `1..k-1`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class-by-proposal scores (rows = classes, columns = proposals).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ScoreMatrix(Array2<f64>);

impl ScoreMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score matrix entry".into()));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n_cols) {
            return Err(Error::schema(
                format!("scores[{i}]"),
                format!("row has {} entries, expected {n_cols}", r.len()),
            ));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let values = Array2::from_shape_vec((n_rows, n_cols), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_proposals(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, class: usize) -> Vec<f64> {
        self.0.row(class).to_vec()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for ScoreMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<ScoreMatrix> for Vec<Vec<f64>> {
    fn from(m: ScoreMatrix) -> Self {
        m.to_rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtrConfig {
    /// Recency step added to the newest stage and taken from older ones.
    pub delta: f64,
    /// Number of refinement stages the weights must stay valid for.
    pub k_max: usize,
}

impl Default for MtrConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            k_max: 3,
        }
    }
}

impl MtrConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.delta.is_finite() || self.delta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "delta {} must be finite and nonnegative",
                self.delta
            )));
        }
        if self.k_max == 0 {
            return Err(Error::InvalidArgument("k_max must be at least 1".into()));
        }
        if self.k_max >= 2 && 1.0 - (self.k_max as f64 - 2.0) * self.delta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "delta {} too large for {} stages: oldest weight would be negative",
                self.delta, self.k_max
            )));
        }
        Ok(())
    }
}

/// Blend weights for the `k - 1` earlier stages of stage `k`, oldest first.
///
/// `alpha_i = 1 - (k - i - 1) * delta` for `i < k - 1` and
/// `alpha_{k-1} = 1 + (k - 1)(k - 2) delta / 2`; each weight is
/// `alpha_i / (k - 1)`, so the weights sum to one.
pub fn mtr_weights(k: usize, delta: f64) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "memory transfer needs k >= 2, got {k}"
        )));
    }
    if !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("delta {delta} not finite")));
    }
    let kf = k as f64;
    let weights: Vec<f64> = (1..k)
        .map(|i| {
            let alpha = if i == k - 1 {
                1.0 + (kf - 1.0) * (kf - 2.0) * delta / 2.0
            } else {
                1.0 - (kf - i as f64 - 1.0) * delta
            };
            alpha / (kf - 1.0)
        })
        .collect();
    if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| **w < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "delta {delta} gives negative weight {w} for stage {} of k = {k}; need 1 - (k - 2) * delta >= 0",
            i + 1
        )));
    }
    Ok(weights)
}

/// Supervision scores for stage `history.len() + 1`.
pub fn fuse_supervision(history: &[ScoreMatrix], cfg: &MtrConfig) -> Result<ScoreMatrix> {
    fuse_arrays(
        &history.iter().map(|m| m.values().view()).collect::<Vec<_>>(),
        cfg.delta,
    )
    .and_then(ScoreMatrix::new)
}

pub(crate) fn fuse_arrays(
    history: &[ndarray::ArrayView2<f64>],
    delta: f64,
) -> Result<Array2<f64>> {
    let first = history
        .first()
        .ok_or(Error::EmptyInput("memory transfer history"))?;
    for (i, m) in history.iter().enumerate() {
        if m.dim() != first.dim() {
            return Err(Error::ShapeMismatch {
                what: format!("score history entry {i}"),
                expected: first.shape().to_vec(),
                got: m.shape().to_vec(),
            });
        }
    }
    let weights = mtr_weights(history.len() + 1, delta)?;
    let mut out = Array2::zeros(first.dim());
    for (m, w) in history.iter().zip(weights) {
        out.scaled_add(w, m);
    }
    Ok(out)
}
