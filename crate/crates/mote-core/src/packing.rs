//! 2-bit storage for ternary codes and the integer GEMM that consumes it.
//!
//! Each matrix row packs four codes per byte, little-endian within the byte:
//! element i of a group sits at bits [2i, 2i+1]. Fields are two's complement
//! over two bits, so 0 -> 0b00, +1 -> 0b01, -1 -> 0b11, and 0b10 is invalid
//! everywhere. Rows are padded to a whole byte with 0b00 fields. A row of n
//! codes therefore takes ceil(n / 4) bytes.
//!
//! The GEMM accumulates in i32 and applies the combined scale once per
//! output element. With codes in {-1, 0, 1} and int8 activations the sum of
//! k products stays below k * 128, so k is capped at 2^24 to keep the
//! accumulator safe.

use crate::error::{Error, Result};
use crate::quant::{QuantizedActivations, QuantizedWeights};
use crate::tensor::{Matrix, Scalar};
use crate::parallel;

/// Largest reduction dimension the i32 accumulator supports.
pub const MAX_GEMM_K: usize = 1 << 24;

const FIELD_INVALID: u8 = 0b10;

/// Per-byte decode table: DECODE[b][i] is the code in field i of byte b.
/// The invalid field decodes to 0 here; validation happens at construction,
/// never in the GEMM hot loop.
static DECODE: [[i8; 4]; 256] = build_decode();

const fn build_decode() -> [[i8; 4]; 256] {
    let mut table = [[0i8; 4]; 256];
    let mut b = 0usize;
    while b < 256 {
        let mut i = 0usize;
        while i < 4 {
            let field = ((b >> (2 * i)) & 0b11) as u8;
            table[b][i] = match field {
                0b00 => 0,
                0b01 => 1,
                0b11 => -1,
                _ => 0,
            };
            i += 1;
        }
        b += 1;
    }
    table
}

fn encode_field(code: i8) -> Option<u8> {
    match code {
        0 => Some(0b00),
        1 => Some(0b01),
        -1 => Some(0b11),
        _ => None,
    }
}

/// Packed ternary weight matrix with its absmean scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedTernaryMatrix {
    rows: usize,
    cols: usize,
    scale: f32,
    data: Vec<u8>,
}

impl PackedTernaryMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn bytes_per_row(&self) -> usize {
        bytes_per_row(self.cols)
    }

    /// Decodes the code at (r, c).
    pub fn code(&self, r: usize, c: usize) -> i8 {
        let byte = self.data[r * self.bytes_per_row() + c / 4];
        DECODE[byte as usize][c % 4]
    }

    /// Rebuilds a packed matrix from raw parts, validating length, every
    /// field, and the padding.
    pub fn from_raw(rows: usize, cols: usize, scale: f32, data: Vec<u8>) -> Result<Self> {
        let expect = rows * bytes_per_row(cols);
        if data.len() != expect {
            return Err(Error::CorruptWeights(format!(
                "packed buffer is {} bytes, expected {expect} for {rows}x{cols}",
                data.len()
            )));
        }
        let m = PackedTernaryMatrix {
            rows,
            cols,
            scale,
            data,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let bpr = self.bytes_per_row();
        for r in 0..self.rows {
            let row = &self.data[r * bpr..(r + 1) * bpr];
            for (g, &byte) in row.iter().enumerate() {
                for i in 0..4 {
                    let field = (byte >> (2 * i)) & 0b11;
                    let col = g * 4 + i;
                    if field == FIELD_INVALID {
                        return Err(Error::CorruptWeights(format!(
                            "reserved field 0b10 at row {r} col {col}"
                        )));
                    }
                    if col >= self.cols && field != 0 {
                        return Err(Error::CorruptWeights(format!(
                            "nonzero padding at row {r} byte {g}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn bytes_per_row(cols: usize) -> usize {
    cols.div_ceil(4)
}

/// Packs ternary codes into 2-bit fields. Codes outside {-1, 0, 1} are
/// rejected with their position.
pub fn pack_ternary(q: &QuantizedWeights<f32>) -> Result<PackedTernaryMatrix> {
    let (rows, cols) = q.codes.shape();
    let bpr = bytes_per_row(cols);
    let mut data = vec![0u8; rows * bpr];
    for r in 0..rows {
        let src = q.codes.row(r);
        let dst = &mut data[r * bpr..(r + 1) * bpr];
        for (c, &code) in src.iter().enumerate() {
            let field = encode_field(code).ok_or(Error::InvalidCode {
                code,
                row: r,
                col: c,
            })?;
            dst[c / 4] |= field << (2 * (c % 4));
        }
    }
    Ok(PackedTernaryMatrix {
        rows,
        cols,
        scale: q.scale,
        data,
    })
}

/// Inverse of [`pack_ternary`]; validates every field on the way out.
pub fn unpack_ternary(p: &PackedTernaryMatrix) -> Result<QuantizedWeights<f32>> {
    p.validate()?;
    let mut codes = Matrix::zeros(p.rows, p.cols);
    let bpr = p.bytes_per_row();
    for r in 0..p.rows {
        let src = &p.data[r * bpr..(r + 1) * bpr];
        let dst = codes.row_mut(r);
        for (c, d) in dst.iter_mut().enumerate() {
            *d = DECODE[src[c / 4] as usize][c % 4];
        }
    }
    Ok(QuantizedWeights {
        codes,
        scale: p.scale,
    })
}

/// Integer dot product of packed-weight row `r` with int8 activation codes.
fn gemm_row_dot(p: &PackedTernaryMatrix, r: usize, acodes: &[i8]) -> i32 {
    let bpr = p.bytes_per_row();
    let row = &p.data[r * bpr..(r + 1) * bpr];
    let full = p.cols / 4;
    let mut acc = 0i32;
    for g in 0..full {
        let d = &DECODE[row[g] as usize];
        let base = g * 4;
        acc += d[0] as i32 * acodes[base] as i32
            + d[1] as i32 * acodes[base + 1] as i32
            + d[2] as i32 * acodes[base + 2] as i32
            + d[3] as i32 * acodes[base + 3] as i32;
    }
    let base = full * 4;
    if base < p.cols {
        let d = &DECODE[row[full] as usize];
        for i in 0..p.cols - base {
            acc += d[i] as i32 * acodes[base + i] as i32;
        }
    }
    acc
}

/// Packed ternary GEMM over quantized activation codes with arbitrary
/// scalar type for the scales. Output element (t, r) is
/// scale_w * scale_t / 127 * sum_j w[r][j] * a[t][j], with the sum exact in
/// i32 and the scale applied once in f64.
pub fn ternary_gemm_codes<T: Scalar>(
    w: &PackedTernaryMatrix,
    acodes: &Matrix<i8>,
    ascales: &[T],
) -> Result<Matrix<T>> {
    if acodes.cols() != w.cols {
        return Err(Error::ShapeMismatch(format!(
            "gemm: activations have {} features, weights expect {}",
            acodes.cols(),
            w.cols
        )));
    }
    if acodes.rows() != ascales.len() {
        return Err(Error::ShapeMismatch(format!(
            "gemm: {} activation rows but {} scales",
            acodes.rows(),
            ascales.len()
        )));
    }
    if w.cols > MAX_GEMM_K {
        return Err(Error::AccumulatorOverflow {
            k: w.cols,
            max: MAX_GEMM_K,
        });
    }
    let mut out = Matrix::zeros(acodes.rows(), w.rows);
    let wscale = w.scale as f64;
    parallel::for_each_row(out.data_mut(), w.rows, |t, orow| {
        let arow = acodes.row(t);
        let s = wscale * ascales[t].f64() / 127.0;
        for (r, o) in orow.iter_mut().enumerate() {
            let acc = gemm_row_dot(w, r, arow);
            *o = T::c(s * acc as f64);
        }
    });
    Ok(out)
}

/// f32 convenience wrapper over [`ternary_gemm_codes`].
pub fn ternary_gemm_packed(
    w: &PackedTernaryMatrix,
    a: &QuantizedActivations<f32>,
) -> Result<Matrix<f32>> {
    ternary_gemm_codes(w, &a.codes, &a.scales)
}
