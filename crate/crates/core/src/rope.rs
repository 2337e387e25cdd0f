//! Rotary position embedding math.
//!
//! Rotations at position `p` act block-diagonally on consecutive channel
//! pairs `(2m, 2m+1)` with angle `p * freqs[m]`. Because 2D rotations
//! compose additively, a cached rotated key can be shifted to a new
//! position by one extra rotation instead of re-encoding the raw key.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RopeError {
    #[error("invalid rope config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: vector has {got} channels, rope expects {expected}")]
    ShapeMismatch { got: usize, expected: usize },
}

/// Per-pair angular frequencies for a head of even dimension `dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeFreqs {
    dims: usize,
    freqs: Vec<f64>,
    base: f64,
}

impl RopeFreqs {
    /// Standard schedule `freqs[m] = base^(-2m/d)`, strictly decreasing.
    pub fn new(dims: usize, base: f64) -> Result<Self, RopeError> {
        if dims < 2 || !dims.is_multiple_of(2) {
            return Err(RopeError::InvalidConfig(format!(
                "head dimension must be even and >= 2, got {dims}"
            )));
        }
        // NaN must also be rejected, hence the negated comparison.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(base > 1.0) {
            return Err(RopeError::InvalidConfig(format!(
                "frequency base must be > 1, got {base}"
            )));
        }
        let half = dims / 2;
        let freqs = (0..half)
            .map(|m| base.powf(-2.0 * m as f64 / dims as f64))
            .collect();
        Ok(Self { dims, freqs, base })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Per-pair angles `p * freqs[m]` at position `p`.
    pub fn angles_at(&self, p: f64) -> Vec<f64> {
        self.freqs.iter().map(|w| p * w).collect()
    }

    fn check_len(&self, x: &[f64]) -> Result<(), RopeError> {
        if x.len() != self.dims {
            return Err(RopeError::ShapeMismatch {
                got: x.len(),
                expected: self.dims,
            });
        }
        Ok(())
    }
}

/// Rotate each channel pair `(x[2m], x[2m+1])` by angle `p * freqs[m]`.
pub fn rope_rotate(x: &[f64], p: f64, f: &RopeFreqs) -> Result<Vec<f64>, RopeError> {
    f.check_len(x)?;
    let mut out = vec![0.0; x.len()];
    rope_rotate_into(x, p, f, &mut out);
    Ok(out)
}

/// In-place variant used on hot paths; caller guarantees matching lengths.
pub(crate) fn rope_rotate_into(x: &[f64], p: f64, f: &RopeFreqs, out: &mut [f64]) {
    debug_assert_eq!(x.len(), f.dims);
    debug_assert_eq!(out.len(), f.dims);
    for (m, w) in f.freqs.iter().enumerate() {
        let theta = p * w;
        let (sin, cos) = theta.sin_cos();
        let a = x[2 * m];
        let b = x[2 * m + 1];
        out[2 * m] = a * cos - b * sin;
        out[2 * m + 1] = a * sin + b * cos;
    }
}

/// Shift a rotated key back by `delta` positions: returns `R(-delta) * k`,
/// identical to re-encoding the raw key at position `p - delta`.
pub fn rope_shift(k_rotated: &[f64], delta: f64, f: &RopeFreqs) -> Result<Vec<f64>, RopeError> {
    rope_rotate(k_rotated, -delta, f)
}

pub(crate) fn rope_shift_in_place(k: &mut [f64], delta: f64, f: &RopeFreqs) {
    let tmp = k.to_vec();
    rope_rotate_into(&tmp, -delta, f, k);
}
