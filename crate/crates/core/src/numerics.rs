//! Dense f64 linear algebra and the differentiable primitives shared by the
//! encoder, the losses and the retrieval code.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; matrices are row-major [`Mat64`].
//! Gradients are derived by hand per operation, there is no autograd graph.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec64 = Vec<f64>;

/// Norms below this are treated as zero by [`l2_normalize`] and the cosine
/// routines.
pub const NORM_FLOOR: f64 = 1e-30;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!(
                "matrix shape {rows}x{cols} has a zero dimension"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "matrix contains non-finite value {bad}"
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    /// `x · M` for a row vector `x` of length `rows`.
    pub fn left_mul(&self, x: &[f64]) -> Vec64 {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (xi, row) in x.iter().zip(self.values.chunks_exact(self.cols)) {
            if *xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    /// `M · y` for a column vector `y` of length `cols`.
    pub fn right_mul(&self, y: &[f64]) -> Vec64 {
        debug_assert_eq!(y.len(), self.cols);
        self.values
            .chunks_exact(self.cols)
            .map(|row| dot(row, y))
            .collect()
    }

    /// `M += a ⊗ b` (outer product, `a` indexes rows).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (ai, row) in a.iter().zip(self.values.chunks_exact_mut(self.cols)) {
            if *ai == 0.0 {
                continue;
            }
            for (m, bj) in row.iter_mut().zip(b) {
                *m += ai * bj;
            }
        }
    }
}

/// Deterministic random stream (ChaCha8, 64-bit seed). Float and index draws
/// are derived from raw `u64` words here rather than through `rand`'s
/// distributions, so streams stay stable across platforms and crate versions.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-scale, scale)`.
    pub fn symmetric(&mut self, scale: f64) -> f64 {
        scale * (2.0 * self.next_f64() - 1.0)
    }

    /// Unbiased uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below called with n = 0");
        let n = n as u64;
        // reject the short tail so every residue is equally likely
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn checked_norm(a: &[f64]) -> Result<f64> {
    let n = norm(a);
    if n < NORM_FLOOR || !n.is_finite() {
        return Err(Error::ZeroNorm {
            norm: n,
            floor: NORM_FLOOR,
        });
    }
    Ok(n)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let na = checked_norm(a)?;
    let nb = checked_norm(b)?;
    Ok(dot(a, b) / (na * nb))
}

/// Partials of [`cosine_similarity`] with respect to both arguments:
/// `∂/∂a = b/(‖a‖‖b‖) − cos·a/‖a‖²` and symmetrically for `b`.
pub fn cosine_similarity_grad(a: &[f64], b: &[f64]) -> Result<(Vec64, Vec64)> {
    check_dims(a, b)?;
    let na = checked_norm(a)?;
    let nb = checked_norm(b)?;
    let inv = 1.0 / (na * nb);
    let cos = dot(a, b) * inv;
    let ca = cos / (na * na);
    let cb = cos / (nb * nb);
    let da = a.iter().zip(b).map(|(x, y)| y * inv - ca * x).collect();
    let db = a.iter().zip(b).map(|(x, y)| x * inv - cb * y).collect();
    Ok((da, db))
}

/// `exp(sᵢ/τ) / Σⱼ exp(sⱼ/τ)`, evaluated after subtracting the max score.
pub fn softmax_temperature(scores: &[f64], tau: f64) -> Result<Vec64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec64 = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log Σⱼ exp(sⱼ/τ)`, max-shifted.
pub fn log_sum_exp_temperature(scores: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.iter().map(|s| ((s - max) / tau).exp()).sum();
    Ok(max / tau + total.ln())
}

/// Scales `v` to unit length. Norms below [`NORM_FLOOR`] are an error.
pub fn l2_normalize(v: &[f64]) -> Result<Vec64> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = checked_norm(v)?;
    Ok(v.iter().map(|x| x / n).collect())
}

/// Matrix with entries uniform in `[-scale, scale)`, drawn row-major from `rng`.
pub fn seeded_init(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Result<Mat64> {
    if rows == 0 || cols == 0 {
        return Err(Error::config(format!(
            "matrix shape {rows}x{cols} has a zero dimension"
        )));
    }
    let values = (0..rows * cols).map(|_| rng.symmetric(scale)).collect();
    Mat64::from_vec(rows, cols, values)
}
