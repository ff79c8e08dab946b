//! One transformer block: pre-norm attention, then a pre-norm FFN stage
//! where a frozen shared expert and an optional top-1 routed expert layer
//! read the same normed input and both add into the residual stream.

use super::attention::{AttnCache, Attention};
use super::expert::{GluCache, GluExpert};
use super::norm::{Norm, NormCache};
use super::router::{self, Router};
use super::ForwardOpts;
use crate::error::Result;
use crate::parallel;
use crate::tensor::{self, Matrix, Scalar};

#[derive(Clone, Debug)]
pub struct MoeLayer<T> {
    pub router: Router<T>,
    pub experts: Vec<GluExpert<T>>,
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub attn_norm: Norm<T>,
    pub attn: Attention<T>,
    pub ffn_norm: Norm<T>,
    pub shared: GluExpert<T>,
    pub moe: Option<MoeLayer<T>>,
}

pub struct MoeCache<T> {
    /// Normed input seen by router and experts.
    xn: Matrix<T>,
    pub probs: Matrix<T>,
    pub top1: Vec<u32>,
    expert_tokens: Vec<Vec<usize>>,
    expert_caches: Vec<Option<GluCache<T>>>,
    /// Unscaled output of the selected expert per token.
    expert_out: Matrix<T>,
}

pub struct BlockCache<T> {
    attn_norm: NormCache<T>,
    attn: Vec<AttnCache<T>>,
    ffn_norm: NormCache<T>,
    shared: GluCache<T>,
    pub moe: Option<MoeCache<T>>,
}

fn slice_rows<T: Copy + Default>(m: &Matrix<T>, lo: usize, hi: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(hi - lo, m.cols());
    out.data_mut()
        .copy_from_slice(&m.data()[lo * m.cols()..hi * m.cols()]);
    out
}

impl<T: Scalar> Block<T> {
    /// Forward over a ragged batch: x holds all tokens, `offsets` the
    /// per-sequence boundaries.
    pub fn forward(
        &self,
        x: &Matrix<T>,
        offsets: &[usize],
        opts: ForwardOpts,
    ) -> Result<(Matrix<T>, BlockCache<T>)> {
        let (n, d) = x.shape();
        let (xn1, attn_norm_cache) = self.attn_norm.forward(x);
        let n_seqs = offsets.len() - 1;
        let per_seq = parallel::map_range(n_seqs, |e| {
            let sub = slice_rows(&xn1, offsets[e], offsets[e + 1]);
            self.attn.forward(&sub)
        });
        let mut x_a = x.clone();
        let mut attn_caches = Vec::with_capacity(n_seqs);
        for (e, (y, cache)) in per_seq.into_iter().enumerate() {
            for (i, t) in (offsets[e]..offsets[e + 1]).enumerate() {
                tensor::axpy(T::one(), y.row(i), x_a.row_mut(t));
            }
            attn_caches.push(cache);
        }

        let (xn2, ffn_norm_cache) = self.ffn_norm.forward(&x_a);
        let (shared_out, shared_cache) = self.shared.forward(xn2.clone(), true)?;

        let mut out = x_a;
        let moe_cache = match (&self.moe, opts.ablate_moe) {
            (Some(moe), false) => {
                let n_experts = moe.experts.len();
                let (probs, top1) = moe.router.gate(&xn2);
                let mut expert_tokens: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
                for (t, &e) in top1.iter().enumerate() {
                    expert_tokens[e as usize].push(t);
                }
                let runs = parallel::map_range(n_experts, |e| {
                    let idx = &expert_tokens[e];
                    if idx.is_empty() {
                        return Ok(None);
                    }
                    let xe = xn2.gather_rows(idx);
                    moe.experts[e].forward(xe, opts.quantize_routed).map(Some)
                });
                let mut expert_out = Matrix::zeros(n, d);
                let mut expert_caches = Vec::with_capacity(n_experts);
                for (e, run) in runs.into_iter().enumerate() {
                    match run? {
                        None => expert_caches.push(None),
                        Some((y, cache)) => {
                            for (i, &t) in expert_tokens[e].iter().enumerate() {
                                expert_out.row_mut(t).copy_from_slice(y.row(i));
                            }
                            expert_caches.push(Some(cache));
                        }
                    }
                }
                for t in 0..n {
                    let p = probs.get(t, top1[t] as usize);
                    tensor::axpy(p, expert_out.row(t), out.row_mut(t));
                }
                Some(MoeCache {
                    xn: xn2,
                    probs,
                    top1,
                    expert_tokens,
                    expert_caches,
                    expert_out,
                })
            }
            _ => None,
        };
        tensor::add_assign(&mut out, &shared_out);
        Ok((
            out,
            BlockCache {
                attn_norm: attn_norm_cache,
                attn: attn_caches,
                ffn_norm: ffn_norm_cache,
                shared: shared_cache,
                moe: moe_cache,
            },
        ))
    }

    /// Backward through the block. `dprobs_extra` carries gradient terms
    /// that act directly on the gate probabilities (the balance loss);
    /// it must be n x E when present.
    pub fn backward(
        &mut self,
        cache: &BlockCache<T>,
        offsets: &[usize],
        dout: &Matrix<T>,
        dprobs_extra: Option<&Matrix<T>>,
    ) -> Matrix<T> {
        let mut dxn2 = self.shared.backward(&cache.shared, dout);

        if let Some(mc) = &cache.moe {
            let moe = self.moe.as_mut().expect("cache has moe, block does not");
            let n = dout.rows();
            let n_experts = moe.experts.len();
            let mut dp = match dprobs_extra {
                Some(extra) => {
                    assert_eq!(extra.shape(), (n, n_experts), "dprobs_extra shape");
                    extra.clone()
                }
                None => Matrix::zeros(n, n_experts),
            };
            for t in 0..n {
                let e = mc.top1[t] as usize;
                let lm = tensor::dot(dout.row(t), mc.expert_out.row(t));
                dp.set(t, e, dp.get(t, e) + lm);
            }
            for e in 0..n_experts {
                let idx = &mc.expert_tokens[e];
                if idx.is_empty() {
                    continue;
                }
                let ec = mc.expert_caches[e].as_ref().expect("selected expert cache");
                let mut dye = Matrix::zeros(idx.len(), dout.cols());
                for (i, &t) in idx.iter().enumerate() {
                    let p = mc.probs.get(t, e);
                    tensor::axpy(p, dout.row(t), dye.row_mut(i));
                }
                let dxe = moe.experts[e].backward(ec, &dye);
                for (i, &t) in idx.iter().enumerate() {
                    tensor::axpy(T::one(), dxe.row(i), dxn2.row_mut(t));
                }
            }
            let mut dlogits = Matrix::zeros(n, n_experts);
            for t in 0..n {
                router::softmax_backward_row(mc.probs.row(t), dp.row(t), dlogits.row_mut(t));
            }
            let dxr = moe.router.backward(&mc.xn, &dlogits);
            tensor::add_assign(&mut dxn2, &dxr);
        }

        let mut dx_a = self.ffn_norm.backward(&cache.ffn_norm, &dxn2);
        tensor::add_assign(&mut dx_a, dout);

        let n_seqs = offsets.len() - 1;
        let attn = &self.attn;
        let grads = parallel::map_range(n_seqs, |e| {
            let sub = slice_rows(&dx_a, offsets[e], offsets[e + 1]);
            attn.backward(&cache.attn[e], &sub)
        });
        let mut dxn1 = Matrix::zeros(dx_a.rows(), dx_a.cols());
        let accumulate = !self.attn.wq.frozen;
        for (e, g) in grads.into_iter().enumerate() {
            for (i, t) in (offsets[e]..offsets[e + 1]).enumerate() {
                dxn1.row_mut(t).copy_from_slice(g.dx.row(i));
            }
            if accumulate {
                tensor::add_assign(&mut self.attn.wq.g, &g.wq);
                tensor::add_assign(&mut self.attn.wk.g, &g.wk);
                tensor::add_assign(&mut self.attn.wv.g, &g.wv);
                tensor::add_assign(&mut self.attn.wo.g, &g.wo);
            }
        }
        let mut dx = self.attn_norm.backward(&cache.attn_norm, &dxn1);
        tensor::add_assign(&mut dx, &dx_a);
        dx
    }

    pub fn cast<U: Scalar>(&self) -> Block<U> {
        Block {
            attn_norm: self.attn_norm.cast(),
            attn: self.attn.cast(),
            ffn_norm: self.ffn_norm.cast(),
            shared: self.shared.cast(),
            moe: self.moe.as_ref().map(|m| MoeLayer {
                router: m.router.cast(),
                experts: m.experts.iter().map(|e| e.cast()).collect(),
            }),
        }
    }
}
