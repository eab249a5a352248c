//! Per-filter pooled responses and their batch Pearson similarity.
//!
//! For filter `i` and image `n`, the pooled response is the spatial mean of
//! the filter's activation map. Over a batch of `N` images the similarity of
//! filters `i` and `j` is their Pearson correlation shifted into `[0, 2]`:
//!
//! ```text
//! s_ij = cov(z_i, z_j) / max(sigma_i * sigma_j, eps) + 1
//! ```
//!
//! with biased (`1/N`) moments. The `eps` floor only engages for (near)
//! constant columns: their covariance vanishes with `sigma`, so their
//! similarity to everything sits at 1. Non-degenerate pairs get the exact
//! Pearson value, so `s_ii = 2` up to rounding.

use std::fmt::Write as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to `sigma_i * sigma_j`.
pub const SIMILARITY_EPS: f64 = 1e-8;

/// `N x C_l` pooled responses with their batch moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMatrix {
    pub values: Tensor,
    pub batch_means: Vec<f64>,
    pub batch_stddevs: Vec<f64>,
}

impl ResponseMatrix {
    pub fn from_values(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape {
                op: "response_matrix",
                lhs: values.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        require_batch(values.shape()[0])?;
        let mut tape = Tape::new();
        let v = tape.constant(values.clone());
        let mean = tape.mean_axis0(v)?;
        let var = tape.variance_axis0(v)?;
        let std = tape.sqrt(var)?;
        Ok(Self {
            batch_means: tape.value(mean).data().to_vec(),
            batch_stddevs: tape.value(std).data().to_vec(),
            values,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn filters(&self) -> usize {
        self.values.shape()[1]
    }

    /// Responses of filter `i` across the batch.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.batch_size()).map(|n| self.values.at2(n, i)).collect()
    }
}

/// Symmetric `C_l x C_l` matrix of shifted correlations.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Tensor,
    pub epsilon: f64,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s.at2(i, j)
    }

    /// Row-major CSV with 17 significant digits and no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.size() {
            let row: Vec<String> = self.s.row(r).iter().map(|&v| fmt_f64(v)).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn require_batch(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "Pearson similarity needs at least 2 samples per batch, got {n}"
        )));
    }
    Ok(())
}

/// Spatial mean of each filter map: `N x H x W x C` to `N x C`. Requires `N >= 2`.
pub fn pooled_responses(tape: &mut Tape, feature_map: Var) -> Result<Var> {
    let shape = tape.value(feature_map).shape();
    if shape.len() == 4 {
        require_batch(shape[0])?;
    }
    tape.global_avg_pool(feature_map)
}

/// Differentiable similarity matrix of an `N x C` response matrix.
pub fn similarity(tape: &mut Tape, responses: Var, eps: f64) -> Result<Var> {
    let n = tape
        .value(responses)
        .shape()
        .first()
        .copied()
        .unwrap_or(0);
    require_batch(n)?;
    let mean = tape.mean_axis0(responses)?;
    let centered = tape.sub_row(responses, mean)?;
    let var = tape.variance_axis0(responses)?;
    let std = tape.sqrt(var)?;
    let centered_t = tape.transpose(centered)?;
    let gram = tape.matmul(centered_t, centered)?;
    let cov = tape.mul_scalar(gram, 1.0 / n as f64);
    let scale = tape.outer(std, std)?;
    let denom = tape.clamp(scale, eps, f64::INFINITY);
    let rho = tape.div(cov, denom)?;
    Ok(tape.add_scalar(rho, 1.0))
}

/// Pooled responses of a concrete feature-map batch.
pub fn global_average_response(feature_map: &Tensor) -> Result<ResponseMatrix> {
    let mut tape = Tape::new();
    let fm = tape.constant(feature_map.clone());
    let r = pooled_responses(&mut tape, fm)?;
    ResponseMatrix::from_values(tape.value(r).clone())
}

/// Similarity matrix of concrete responses, with the default stabilizer.
pub fn similarity_matrix(r: &ResponseMatrix) -> Result<SimilarityMatrix> {
    let mut tape = Tape::new();
    let v = tape.constant(r.values.clone());
    let s = similarity(&mut tape, v, SIMILARITY_EPS)?;
    Ok(SimilarityMatrix {
        s: tape.value(s).clone(),
        epsilon: SIMILARITY_EPS,
    })
}
