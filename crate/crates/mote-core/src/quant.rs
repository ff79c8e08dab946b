//! Weight and activation quantizers.
//!
//! Three weight schemes share one shape: absmean ternary (codes in
//! {-1, 0, 1}), sign binary (codes in {-1, 1}), and round-to-nearest
//! integer grids at 4 or 8 bits with per-output-channel scales. Activations
//! quantize to int8 with a per-token absmax scale. Scales are clamped below
//! by [`EPSILON`] so all-zero inputs stay well defined.
//!
//! Scale statistics accumulate in f64 regardless of the element type; the
//! per-element code math runs in the element type itself.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Lower clamp for every quantizer scale.
pub const EPSILON: f64 = 1e-5;

/// round(x) to the nearest integer, half away from zero, then clamp to
/// [lo, hi].
pub fn round_clip<T: Scalar>(x: T, lo: T, hi: T) -> T {
    lo.max(hi.min(x.round()))
}

/// Ternary or binary codes with a single per-matrix scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights<T> {
    pub codes: Matrix<i8>,
    pub scale: T,
}

/// Int8 codes with one scale per row (token).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivations<T> {
    pub codes: Matrix<i8>,
    pub scales: Vec<T>,
}

/// Integer-grid codes with one scale per output channel (row).
#[derive(Clone, Debug, PartialEq)]
pub struct RtnWeights<T> {
    pub codes: Matrix<i8>,
    pub scales: Vec<T>,
    pub bits: u32,
}

fn check_finite<T: Scalar>(w: &Matrix<T>, what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: empty matrix")));
    }
    if w.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what}: non-finite value")));
    }
    Ok(())
}

fn absmean_scale<T: Scalar>(w: &Matrix<T>) -> T {
    let mut sum = 0.0f64;
    for v in w.data() {
        sum += v.f64().abs();
    }
    let mean = sum / w.data().len() as f64;
    T::c(mean.max(EPSILON))
}

/// Absmean ternary quantizer: scale = mean |w|, codes = round_clip(w / scale)
/// into {-1, 0, 1}.
pub fn quantize_weights_ternary<T: Scalar>(w: &Matrix<T>) -> Result<QuantizedWeights<T>> {
    check_finite(w, "quantize_weights_ternary")?;
    let scale = absmean_scale(w);
    let inv = T::one() / scale;
    let codes = w.map(|v| round_clip(v * inv, T::c(-1.0), T::c(1.0)).f64() as i8);
    Ok(QuantizedWeights { codes, scale })
}

/// Sign quantizer with the same absmean scale; sign(0) = +1.
pub fn quantize_weights_binary<T: Scalar>(w: &Matrix<T>) -> Result<QuantizedWeights<T>> {
    check_finite(w, "quantize_weights_binary")?;
    let scale = absmean_scale(w);
    let codes = w.map(|v| if v < T::zero() { -1i8 } else { 1i8 });
    Ok(QuantizedWeights { codes, scale })
}

pub fn dequantize_weights<T: Scalar>(q: &QuantizedWeights<T>) -> Matrix<T> {
    let s = q.scale;
    q.codes.map(|c| s * T::c(c as f64))
}

/// Per-token absmax int8 quantizer: each row x maps to
/// round_clip(127 x / max|x|) in [-128, 127].
pub fn quantize_activations_int8<T: Scalar>(x: &Matrix<T>) -> Result<QuantizedActivations<T>> {
    check_finite(x, "quantize_activations_int8")?;
    let mut codes = Matrix::zeros(x.rows(), x.cols());
    let mut scales = Vec::with_capacity(x.rows());
    let lo = T::c(-128.0);
    let hi = T::c(127.0);
    let q = T::c(127.0);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut beta = 0.0f64;
        for v in row {
            beta = beta.max(v.f64().abs());
        }
        let beta = T::c(beta.max(EPSILON));
        let inv = q / beta;
        let out = codes.row_mut(r);
        for (o, &v) in out.iter_mut().zip(row) {
            *o = round_clip(v * inv, lo, hi).f64() as i8;
        }
        scales.push(beta);
    }
    Ok(QuantizedActivations { codes, scales })
}

pub fn dequantize_activations<T: Scalar>(q: &QuantizedActivations<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(q.codes.rows(), q.codes.cols());
    let inv127 = T::one() / T::c(127.0);
    for r in 0..q.codes.rows() {
        let s = q.scales[r] * inv127;
        for (o, &c) in out.row_mut(r).iter_mut().zip(q.codes.row(r)) {
            *o = s * T::c(c as f64);
        }
    }
    out
}

/// Round-to-nearest symmetric quantizer with per-row scales. `bits` must be
/// 4 or 8; codes land in [-(qmax + 1), qmax] with qmax = 2^(bits - 1) - 1,
/// though the scale choice keeps them inside [-qmax, qmax].
pub fn rtn_quantize<T: Scalar>(w: &Matrix<T>, bits: u32) -> Result<RtnWeights<T>> {
    if bits != 4 && bits != 8 {
        return Err(Error::UnsupportedBitWidth(bits));
    }
    check_finite(w, "rtn_quantize")?;
    let qmax = ((1i32 << (bits - 1)) - 1) as f64;
    let lo = T::c(-qmax - 1.0);
    let hi = T::c(qmax);
    let mut codes = Matrix::zeros(w.rows(), w.cols());
    let mut scales = Vec::with_capacity(w.rows());
    for r in 0..w.rows() {
        let row = w.row(r);
        let mut maxabs = 0.0f64;
        for v in row {
            maxabs = maxabs.max(v.f64().abs());
        }
        let scale = T::c((maxabs / qmax).max(EPSILON));
        let inv = T::one() / scale;
        for (o, &v) in codes.row_mut(r).iter_mut().zip(row) {
            *o = round_clip(v * inv, lo, hi).f64() as i8;
        }
        scales.push(scale);
    }
    Ok(RtnWeights {
        codes,
        scales,
        bits,
    })
}

pub fn dequantize_rtn<T: Scalar>(q: &RtnWeights<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(q.codes.rows(), q.codes.cols());
    for r in 0..q.codes.rows() {
        let s = q.scales[r];
        for (o, &c) in out.row_mut(r).iter_mut().zip(q.codes.row(r)) {
            *o = s * T::c(c as f64);
        }
    }
    out
}
