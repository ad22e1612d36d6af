//! Named parameter tensors: visiting, zeroing, SGD updates and the JSON
//! checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```json
//! {"format": "wsod-checkpoint-v1",
//!  "tensors": [{"name": "encoder.layer0.wq", "shape": [32, 32], "data": [...]}, ...]}
//! ```
//!
//! `data` is row-major and its length is the product of `shape`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "wsod-checkpoint-v1";

/// Anything that owns a fixed, ordered list of named f64 tensors.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, _, d| d.iter_mut().for_each(|v| *v = value));
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        self.visit(&mut |name, shape, data| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            tensors,
        }
    }

    /// Overwrite every tensor from `ckpt`; names, order and shapes must match.
    fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::schema(
                "format",
                format!("expected {CHECKPOINT_FORMAT:?}, got {:?}", ckpt.format),
            ));
        }
        let mut i = 0;
        let mut err = None;
        self.visit_mut(&mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            let Some(t) = ckpt.tensors.get(i) else {
                err = Some(Error::schema(format!("tensors[{i}]"), format!("missing tensor {name}")));
                return;
            };
            if t.name != name {
                err = Some(Error::schema(
                    format!("tensors[{i}].name"),
                    format!("expected {name}, got {}", t.name),
                ));
            } else if t.shape != shape {
                err = Some(Error::schema(
                    format!("tensors[{i}].shape"),
                    format!("expected {shape:?}, got {:?}", t.shape),
                ));
            } else if t.data.len() != data.len() {
                err = Some(Error::schema(
                    format!("tensors[{i}].data"),
                    format!("expected {} values, got {}", data.len(), t.data.len()),
                ));
            } else {
                data.copy_from_slice(&t.data);
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != ckpt.tensors.len() {
            return Err(Error::schema(
                "tensors",
                format!("expected {i} tensors, got {}", ckpt.tensors.len()),
            ));
        }
        Ok(())
    }
}

/// `self += scale * other`, tensor by tensor. Both must share a layout.
pub fn axpy<P: Parameters>(target: &mut P, scale: f64, other: &P) {
    let src = other.flatten();
    let mut off = 0;
    target.visit_mut(&mut |_, _, d| {
        let len = d.len();
        for (t, s) in d.iter_mut().zip(&src[off..off + len]) {
            *t += scale * s;
        }
        off += len;
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub tensors: Vec<NamedTensor>,
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameter vectors are contiguous")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter vectors are contiguous")
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter matrices are row-major")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter matrices are row-major")
}

pub(crate) fn normal_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is positive");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Affine map `x W + b` applied to row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Gaussian weights with std `1/sqrt(input)`, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: normal_matrix(input, output, 1.0 / (input as f64).sqrt(), rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates weight/bias gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(ndarray::Axis(0));
        dy.dot(&self.weight.t())
    }

    pub(crate) fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &format!("{prefix}.weight"),
            self.weight.shape(),
            slice2(&self.weight),
        );
        f(&format!("{prefix}.bias"), self.bias.shape(), slice1(&self.bias));
    }

    pub(crate) fn visit_named_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
    ) {
        let shape = self.weight.shape().to_vec();
        f(&format!("{prefix}.weight"), &shape, slice2_mut(&mut self.weight));
        let shape = self.bias.shape().to_vec();
        f(&format!("{prefix}.bias"), &shape, slice1_mut(&mut self.bias));
    }
}

impl Parameters for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.visit_named("linear", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.visit_named_mut("linear", f);
    }
}
