//! Transformer encoder over proposal feature vectors.
//!
//! A learned position embedding (indexed by proposal order) is added to the
//! features, then each layer applies pre-norm multi-head self-attention and
//! a pre-norm GELU feed-forward block, both with residual connections. There
//! is no class token; the output keeps the `N x D` input shape.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal_matrix, slice1, slice1_mut, slice2, slice2_mut, Parameters};

/// Rows are proposals, columns are feature dimensions.
pub type FeatureMatrix = Array2<f64>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            layers: 2,
            ff_dim: 64,
            max_tokens: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ff_dim == 0 || self.max_tokens == 0 {
            return Err(Error::InvalidArgument(
                "encoder dims must all be positive".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "head count {} does not divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument("need at least one encoder layer".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        }
    }

    fn vectors(&self) -> [(&'static str, &Array1<f64>); 8] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("bq", &self.bq),
            ("bk", &self.bk),
            ("bv", &self.bv),
            ("bo", &self.bo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn zeros(config: EncoderConfig) -> Self {
        let d = config.dim;
        Self {
            config,
            position_embedding: Array2::zeros((config.max_tokens, d)),
            layers: (0..config.layers)
                .map(|_| LayerParams::zeros(d, config.ff_dim))
                .collect(),
        }
    }

    /// Gaussian projections scaled by `1/sqrt(fan_in)`, unit norms, zero
    /// biases, small position embeddings. The output projections of both
    /// residual branches start at zero, so a fresh stack is the identity map.
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let f = config.ff_dim;
        let mut p = Self::zeros(config);
        p.position_embedding = normal_matrix(config.max_tokens, d, 0.02, rng);
        let sd = 1.0 / (d as f64).sqrt();
        for layer in &mut p.layers {
            layer.ln1_gamma.fill(1.0);
            layer.ln2_gamma.fill(1.0);
            layer.wq = normal_matrix(d, d, sd, rng);
            layer.wk = normal_matrix(d, d, sd, rng);
            layer.wv = normal_matrix(d, d, sd, rng);
            layer.w1 = normal_matrix(d, f, sd, rng);
        }
        Ok(p)
    }
}

impl Parameters for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            "encoder.position_embedding",
            self.position_embedding.shape(),
            slice2(&self.position_embedding),
        );
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo), ("w1", &l.w1), ("w2", &l.w2)] {
                f(&format!("encoder.layer{i}.{name}"), m.shape(), slice2(m));
            }
            for (name, v) in l.vectors() {
                f(&format!("encoder.layer{i}.{name}"), v.shape(), slice1(v));
            }
            f(&format!("encoder.layer{i}.b1"), l.b1.shape(), slice1(&l.b1));
            f(&format!("encoder.layer{i}.b2"), l.b2.shape(), slice1(&l.b2));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.position_embedding.shape().to_vec();
        f(
            "encoder.position_embedding",
            &shape,
            slice2_mut(&mut self.position_embedding),
        );
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, m) in [
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("w1", &mut l.w1),
                ("w2", &mut l.w2),
            ] {
                let shape = m.shape().to_vec();
                f(&format!("encoder.layer{i}.{name}"), &shape, slice2_mut(m));
            }
            for (name, v) in [
                ("ln1_gamma", &mut l.ln1_gamma),
                ("ln1_beta", &mut l.ln1_beta),
                ("bq", &mut l.bq),
                ("bk", &mut l.bk),
                ("bv", &mut l.bv),
                ("bo", &mut l.bo),
                ("ln2_gamma", &mut l.ln2_gamma),
                ("ln2_beta", &mut l.ln2_beta),
                ("b1", &mut l.b1),
                ("b2", &mut l.b2),
            ] {
                let shape = v.shape().to_vec();
                f(&format!("encoder.layer{i}.{name}"), &shape, slice1_mut(v));
            }
        }
    }
}

struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gamma + beta;
    (y, LayerNormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let dxhat = dy * gamma;
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat;
    dx -= &mean_dxhat.insert_axis(Axis(1));
    dx -= &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
    dx * &cache.inv_std.view().insert_axis(Axis(1))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

/// Row-wise softmax.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

struct LayerCache {
    input: Array2<f64>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Intermediate values of one forward pass, consumed by the backward pass.
pub struct EncoderCache {
    layers: Vec<LayerCache>,
    output: Array2<f64>,
}

impl EncoderCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Attention weights of layer `layer`, head `head` (rows sum to one).
    pub fn attention(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[layer].attn[head]
    }
}

fn check_shapes(features: &Array2<f64>, params: &EncoderParams) -> Result<()> {
    let cfg = &params.config;
    let (n, d) = features.dim();
    if n == 0 || d != cfg.dim {
        return Err(Error::ShapeMismatch {
            what: "encoder input".into(),
            expected: vec![n.max(1), cfg.dim],
            got: vec![n, d],
        });
    }
    if n > cfg.max_tokens {
        return Err(Error::InvalidArgument(format!(
            "{n} proposals exceed the position embedding capacity {}",
            cfg.max_tokens
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input features".into()));
    }
    Ok(())
}

pub fn forward_cached(features: &Array2<f64>, params: &EncoderParams) -> Result<EncoderCache> {
    check_shapes(features, params)?;
    let cfg = &params.config;
    let n = features.nrows();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut x = features + &params.position_embedding.slice(s![..n, ..]);
    let mut caches = Vec::with_capacity(params.layers.len());
    for (li, lp) in params.layers.iter().enumerate() {
        let (h1, ln1) = layer_norm(&x, &lp.ln1_gamma, &lp.ln1_beta);
        let q = h1.dot(&lp.wq) + &lp.bq;
        let k = h1.dot(&lp.wk) + &lp.bk;
        let v = h1.dot(&lp.wv) + &lp.bv;
        let mut concat = Array2::zeros((n, cfg.dim));
        let mut attn = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let logits = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let a = softmax_rows(&logits);
            concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let mid = &x + &(concat.dot(&lp.wo) + &lp.bo);
        let (h2, ln2) = layer_norm(&mid, &lp.ln2_gamma, &lp.ln2_beta);
        let pre_act = h2.dot(&lp.w1) + &lp.b1;
        let act = pre_act.mapv(gelu);
        let out = &mid + &(act.dot(&lp.w2) + &lp.b2);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("encoder layer {li} output")));
        }
        caches.push(LayerCache {
            input: x,
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            concat,
            ln2,
            h2,
            pre_act,
            act,
        });
        x = out;
    }
    Ok(EncoderCache {
        layers: caches,
        output: x,
    })
}

/// Encoder forward pass. Output has the input's `N x D` shape.
pub fn encode(features: &FeatureMatrix, params: &EncoderParams) -> Result<FeatureMatrix> {
    Ok(forward_cached(features, params)?.output)
}

/// Backpropagates `upstream = dL/d(output)`; accumulates into `grad` and
/// returns `dL/d(features)`.
pub fn backward_cached(
    cache: &EncoderCache,
    params: &EncoderParams,
    upstream: &Array2<f64>,
    grad: &mut EncoderParams,
) -> Array2<f64> {
    let cfg = &params.config;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let n = upstream.nrows();
    let mut dx = upstream.clone();
    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let lg = &mut grad.layers[li];

        // Feed-forward block.
        lg.w2 += &lc.act.t().dot(&dx);
        lg.b2 += &dx.sum_axis(Axis(0));
        let dact = dx.dot(&lp.w2.t());
        let dpre = &dact * &lc.pre_act.mapv(gelu_grad);
        lg.w1 += &lc.h2.t().dot(&dpre);
        lg.b1 += &dpre.sum_axis(Axis(0));
        let dh2 = dpre.dot(&lp.w1.t());
        let dmid = &dx
            + &layer_norm_backward(&dh2, &lc.ln2, &lp.ln2_gamma, &mut lg.ln2_gamma, &mut lg.ln2_beta);

        // Attention block.
        lg.wo += &lc.concat.t().dot(&dmid);
        lg.bo += &dmid.sum_axis(Axis(0));
        let dconcat = dmid.dot(&lp.wo.t());
        let mut dq = Array2::zeros((n, cfg.dim));
        let mut dk = Array2::zeros((n, cfg.dim));
        let mut dv = Array2::zeros((n, cfg.dim));
        for h in 0..cfg.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let a = &lc.attn[h];
            let dout = dconcat.slice(cols);
            let da = dout.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dout));
            let row_dot = (&da * a).sum_axis(Axis(1));
            let dlogits = a * &(&da - &row_dot.insert_axis(Axis(1))) * scale;
            dq.slice_mut(cols).assign(&dlogits.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&dlogits.t().dot(&lc.q.slice(cols)));
        }
        lg.wq += &lc.h1.t().dot(&dq);
        lg.bq += &dq.sum_axis(Axis(0));
        lg.wk += &lc.h1.t().dot(&dk);
        lg.bk += &dk.sum_axis(Axis(0));
        lg.wv += &lc.h1.t().dot(&dv);
        lg.bv += &dv.sum_axis(Axis(0));
        let dh1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        dx = &dmid
            + &layer_norm_backward(&dh1, &lc.ln1, &lp.ln1_gamma, &mut lg.ln1_gamma, &mut lg.ln1_beta);
        debug_assert_eq!(lc.input.dim(), dx.dim());
    }
    let mut pos = grad.position_embedding.slice_mut(s![..n, ..]);
    pos += &dx;
    dx
}

/// Gradients of `sum(encode(features) * upstream)` with respect to the
/// features and every encoder parameter.
pub fn encode_backward(
    features: &FeatureMatrix,
    params: &EncoderParams,
    upstream: &Array2<f64>,
) -> Result<(FeatureMatrix, EncoderParams)> {
    let cache = forward_cached(features, params)?;
    if upstream.dim() != cache.output.dim() {
        return Err(Error::ShapeMismatch {
            what: "encoder upstream gradient".into(),
            expected: cache.output.shape().to_vec(),
            got: upstream.shape().to_vec(),
        });
    }
    let mut grad = EncoderParams::zeros(params.config);
    let dx = backward_cached(&cache, params, upstream, &mut grad);
    Ok((dx, grad))
}
