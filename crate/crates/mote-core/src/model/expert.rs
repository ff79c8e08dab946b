//! Gated-linear FFN expert.
//!
//! One code path serves three roles: the full-precision shared expert, the
//! fake-quantized routed expert during training (ternary or binary weights,
//! int8 activations, straight-through gradients), and the packed 2-bit
//! inference expert. The straight-through rule is: every quantizer's
//! backward is the identity, and weight gradients are taken with respect to
//! the quantized values of the other operand.

use super::{Param, Precision};
use crate::error::{Error, Result};
use crate::packing::{self, PackedTernaryMatrix};
use crate::quant;
use crate::tensor::{self, Matrix, Scalar};

#[derive(Clone, Debug)]
pub enum GluWeights<T> {
    /// Full-precision latent masters; quantized on the fly when the expert
    /// precision asks for it.
    Latent {
        up: Param<T>,
        gate: Param<T>,
        down: Param<T>,
    },
    /// Frozen 2-bit inference form.
    Packed {
        up: PackedTernaryMatrix,
        gate: PackedTernaryMatrix,
        down: PackedTernaryMatrix,
    },
}

#[derive(Clone, Debug)]
pub struct GluExpert<T> {
    pub weights: GluWeights<T>,
    pub precision: Precision,
}

/// Forward state needed by the straight-through backward.
#[derive(Clone, Debug)]
pub struct GluCache<T> {
    /// Effective input: quantize-dequantized when quantizers were active.
    a: Matrix<T>,
    /// Effective weights (dequantized codes) when quantizers were active.
    wq_up: Option<Matrix<T>>,
    wq_gate: Option<Matrix<T>>,
    wq_down: Option<Matrix<T>>,
    u: Matrix<T>,
    gpre: Matrix<T>,
    s: Matrix<T>,
    /// Effective input of the down projection.
    hq: Matrix<T>,
    quantized: bool,
}

impl<T: Scalar> GluCache<T> {
    /// Int8 codes of the input activations, when quantizers were active.
    /// Exposed for scale-covariance checks.
    pub fn input_codes(&self) -> Option<Matrix<i8>> {
        if self.quantized {
            Some(
                quant::quantize_activations_int8(&self.a)
                    .expect("cached input is finite")
                    .codes,
            )
        } else {
            None
        }
    }
}

fn fake_quant<T: Scalar>(w: &Matrix<T>, precision: Precision) -> Result<Matrix<T>> {
    let q = match precision {
        Precision::Ternary => quant::quantize_weights_ternary(w)?,
        Precision::Binary => quant::quantize_weights_binary(w)?,
        Precision::Full => unreachable!("fake_quant at full precision"),
    };
    Ok(quant::dequantize_weights(&q))
}

impl<T: Scalar> GluExpert<T> {
    pub fn latent(up: Matrix<T>, gate: Matrix<T>, down: Matrix<T>, precision: Precision) -> Self {
        GluExpert {
            weights: GluWeights::Latent {
                up: Param::new(up),
                gate: Param::new(gate),
                down: Param::new(down),
            },
            precision,
        }
    }

    pub fn is_packed(&self) -> bool {
        matches!(self.weights, GluWeights::Packed { .. })
    }

    pub fn d_model(&self) -> usize {
        match &self.weights {
            GluWeights::Latent { up, .. } => up.w.cols(),
            GluWeights::Packed { up, .. } => up.cols(),
        }
    }

    pub fn d_ffn(&self) -> usize {
        match &self.weights {
            GluWeights::Latent { up, .. } => up.w.rows(),
            GluWeights::Packed { up, .. } => up.rows(),
        }
    }

    /// Forward over n tokens (rows of x). `quantize` gates the fake-quant
    /// path for non-full precisions; packed weights always run quantized.
    pub fn forward(&self, x: Matrix<T>, quantize: bool) -> Result<(Matrix<T>, GluCache<T>)> {
        match &self.weights {
            GluWeights::Packed { up, gate, down } => self.forward_packed(x, up, gate, down),
            GluWeights::Latent {
                up, gate, down, ..
            } => {
                let active = quantize && self.precision != Precision::Full;
                let (a, wq_up, wq_gate, wq_down) = if active {
                    let aq = quant::quantize_activations_int8(&x)?;
                    (
                        quant::dequantize_activations(&aq),
                        Some(fake_quant(&up.w, self.precision)?),
                        Some(fake_quant(&gate.w, self.precision)?),
                        Some(fake_quant(&down.w, self.precision)?),
                    )
                } else {
                    (x, None, None, None)
                };
                let u = tensor::matmul_nt(&a, wq_up.as_ref().unwrap_or(&up.w));
                let gpre = tensor::matmul_nt(&a, wq_gate.as_ref().unwrap_or(&gate.w));
                let s = gpre.map(tensor::silu);
                let mut h = u.clone();
                for (hv, sv) in h.data_mut().iter_mut().zip(s.data()) {
                    *hv = *hv * *sv;
                }
                let hq = if active {
                    quant::dequantize_activations(&quant::quantize_activations_int8(&h)?)
                } else {
                    h
                };
                let y = tensor::matmul_nt(&hq, wq_down.as_ref().unwrap_or(&down.w));
                Ok((
                    y,
                    GluCache {
                        a,
                        wq_up,
                        wq_gate,
                        wq_down,
                        u,
                        gpre,
                        s,
                        hq,
                        quantized: active,
                    },
                ))
            }
        }
    }

    fn forward_packed(
        &self,
        x: Matrix<T>,
        up: &PackedTernaryMatrix,
        gate: &PackedTernaryMatrix,
        down: &PackedTernaryMatrix,
    ) -> Result<(Matrix<T>, GluCache<T>)> {
        let aq = quant::quantize_activations_int8(&x)?;
        let u = packing::ternary_gemm_codes(up, &aq.codes, &aq.scales)?;
        let gpre = packing::ternary_gemm_codes(gate, &aq.codes, &aq.scales)?;
        let s = gpre.map(tensor::silu);
        let mut h = u.clone();
        for (hv, sv) in h.data_mut().iter_mut().zip(s.data()) {
            *hv = *hv * *sv;
        }
        let hqq = quant::quantize_activations_int8(&h)?;
        let y = packing::ternary_gemm_codes(down, &hqq.codes, &hqq.scales)?;
        Ok((
            y,
            GluCache {
                a: quant::dequantize_activations(&aq),
                wq_up: None,
                wq_gate: None,
                wq_down: None,
                u,
                gpre,
                s,
                hq: quant::dequantize_activations(&hqq),
                quantized: true,
            },
        ))
    }

    /// Straight-through backward; accumulates weight grads unless frozen and
    /// returns dx. Packed experts cannot backprop.
    pub fn backward(&mut self, cache: &GluCache<T>, dy: &Matrix<T>) -> Matrix<T> {
        let GluWeights::Latent { up, gate, down } = &mut self.weights else {
            panic!("backward through packed expert");
        };
        let w_down = cache.wq_down.as_ref().unwrap_or(&down.w);
        let w_up = cache.wq_up.as_ref().unwrap_or(&up.w);
        let w_gate = cache.wq_gate.as_ref().unwrap_or(&gate.w);

        if !down.frozen {
            tensor::matmul_tn_acc(dy, &cache.hq, &mut down.g);
        }
        let dh = tensor::matmul_nn(dy, w_down);

        let mut du = dh.clone();
        for (duv, sv) in du.data_mut().iter_mut().zip(cache.s.data()) {
            *duv = *duv * *sv;
        }
        let mut dg = dh;
        for ((dgv, uv), gv) in dg
            .data_mut()
            .iter_mut()
            .zip(cache.u.data())
            .zip(cache.gpre.data())
        {
            *dgv = *dgv * *uv * tensor::silu_grad(*gv);
        }

        if !up.frozen {
            tensor::matmul_tn_acc(&du, &cache.a, &mut up.g);
        }
        if !gate.frozen {
            tensor::matmul_tn_acc(&dg, &cache.a, &mut gate.g);
        }
        let mut dx = tensor::matmul_nn(&du, w_up);
        let dxg = tensor::matmul_nn(&dg, w_gate);
        tensor::add_assign(&mut dx, &dxg);
        dx
    }

    /// Converts latent ternary or binary masters into the packed 2-bit form.
    pub fn pack(&self) -> Result<GluExpert<T>> {
        let GluWeights::Latent { up, gate, down } = &self.weights else {
            return Ok(self.clone());
        };
        let quantizer = |w: &Matrix<T>| -> Result<PackedTernaryMatrix> {
            let w32: Matrix<f32> = w.cast();
            let q = match self.precision {
                Precision::Ternary => quant::quantize_weights_ternary(&w32)?,
                Precision::Binary => quant::quantize_weights_binary(&w32)?,
                Precision::Full => {
                    return Err(Error::Config(
                        "cannot pack a full-precision expert".into(),
                    ))
                }
            };
            packing::pack_ternary(&q)
        };
        Ok(GluExpert {
            weights: GluWeights::Packed {
                up: quantizer(&up.w)?,
                gate: quantizer(&gate.w)?,
                down: quantizer(&down.w)?,
            },
            precision: self.precision,
        })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        if let GluWeights::Latent { up, gate, down } = &mut self.weights {
            up.frozen = frozen;
            gate.frozen = frozen;
            down.frozen = frozen;
        }
    }

    pub fn cast<U: Scalar>(&self) -> GluExpert<U> {
        let weights = match &self.weights {
            GluWeights::Latent { up, gate, down } => GluWeights::Latent {
                up: up.cast(),
                gate: gate.cast(),
                down: down.cast(),
            },
            GluWeights::Packed { up, gate, down } => GluWeights::Packed {
                up: up.clone(),
                gate: gate.clone(),
                down: down.clone(),
            },
        };
        GluExpert {
            weights,
            precision: self.precision,
        }
    }
}
