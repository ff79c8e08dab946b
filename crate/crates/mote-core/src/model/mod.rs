//! The transformer: a pre-norm decoder whose FFN stage is either a single
//! dense GLU (the dense parent) or that same GLU kept frozen as a shared
//! expert next to a top-1 routed layer of quantized experts.

mod attention;
mod block;
mod expert;
mod norm;
mod router;

pub use attention::{Attention, AttnCache};
pub use block::{Block, BlockCache, MoeLayer};
pub use expert::{GluCache, GluExpert, GluWeights};
pub use norm::{Norm, NormCache};
pub use router::{softmax_backward_row, Router};

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Full,
    Ternary,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    RmsNorm,
    LayerNorm,
}

fn default_top_k() -> usize {
    1
}
fn default_routed() -> Precision {
    Precision::Ternary
}
fn default_shared() -> Precision {
    Precision::Full
}
fn default_norm() -> NormKind {
    NormKind::RmsNorm
}
fn default_rope() -> f64 {
    10000.0
}
fn default_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Routed experts per layer; 0 means a dense model.
    #[serde(default)]
    pub n_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_routed")]
    pub routed_precision: Precision,
    #[serde(default = "default_shared")]
    pub shared_precision: Precision,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    #[serde(default = "default_rope")]
    pub rope_base: f64,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 || self.n_layers == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return bad("head dimension must be even for rotary embeddings".into());
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        if self.max_seq == 0 {
            return bad("max_seq must be positive".into());
        }
        if self.n_experts > 0 {
            if self.top_k == 0 || self.top_k > self.n_experts {
                return bad(format!(
                    "top_k {} out of range 1..={}",
                    self.top_k, self.n_experts
                ));
            }
            if self.top_k != 1 {
                return bad("only top-1 routing is implemented".into());
            }
        }
        if self.shared_precision == Precision::Binary {
            return bad("shared expert precision must be full or ternary".into());
        }
        Ok(())
    }

    pub fn is_moe(&self) -> bool {
        self.n_experts > 0
    }
}

/// One learnable tensor: value, gradient of the same shape, freeze flag.
/// Frozen params receive no gradient and no optimizer update.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub w: Matrix<T>,
    pub g: Matrix<T>,
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(w: Matrix<T>) -> Self {
        let g = Matrix::zeros(w.rows(), w.cols());
        Param {
            w,
            g,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            w: self.w.cast(),
            g: Matrix::zeros(self.w.rows(), self.w.cols()),
            frozen: self.frozen,
        }
    }
}

/// Standard normal draw, Box-Muller.
pub(crate) fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

pub(crate) fn fill_gauss<T: Scalar>(m: &mut Matrix<T>, std: f64, rng: &mut ChaCha8Rng) {
    for v in m.data_mut() {
        *v = T::c(gauss(rng) * std);
    }
}

/// A ragged batch flattened to one token axis. `offsets` has one entry per
/// sequence boundary, so sequence e covers tokens offsets[e]..offsets[e+1].
#[derive(Clone, Debug)]
pub struct FlatBatch {
    pub ids: Vec<u32>,
    pub offsets: Vec<usize>,
}

impl FlatBatch {
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let mut ids = Vec::new();
        let mut offsets = vec![0];
        for s in seqs {
            ids.extend_from_slice(s);
            offsets.push(ids.len());
        }
        FlatBatch { ids, offsets }
    }

    pub fn n_tokens(&self) -> usize {
        self.ids.len()
    }

    pub fn n_seqs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn seq_range(&self, e: usize) -> std::ops::Range<usize> {
        self.offsets[e]..self.offsets[e + 1]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    /// Whether the routed-expert quantizers are active (the mix schedule
    /// turns them off early in training).
    pub quantize_routed: bool,
    /// Skip the routed layer entirely, leaving the dense computation.
    pub ablate_moe: bool,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts {
            quantize_routed: true,
            ablate_moe: false,
        }
    }
}

/// Per-layer routing record of one forward pass, always f32 regardless of
/// the model precision.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting {
    pub probs: Matrix<f32>,
    pub top1: Vec<u32>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardState<T> {
    pub blocks: Vec<BlockCache<T>>,
    pub final_norm: norm::NormCache<T>,
    /// Final normed hidden states, n x d_model.
    pub hidden: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub embed: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Norm<T>,
    pub lm_head: Param<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh dense model: normal(0, 0.02) weights, unit norms, zero output
    /// head so an untrained model scores exactly the uniform baseline.
    pub fn init_dense(config: ModelConfig, seed: u64) -> Result<Model<T>> {
        config.validate()?;
        if config.is_moe() {
            return Err(Error::Config(
                "init_dense requires n_experts = 0; up-cycle to get a routed model".into(),
            ));
        }
        let std = 0.02;
        let mut rng = rand::SeedableRng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut matrix = |r: usize, c: usize| {
            let mut m = Matrix::zeros(r, c);
            fill_gauss(&mut m, std, rng);
            m
        };
        let d = config.d_model;
        let embed = Param::new(matrix(config.vocab_size, d));
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut attn = Attention::new(d, config.n_heads, config.rope_base);
            attn.wq.w = matrix(d, d);
            attn.wk.w = matrix(d, d);
            attn.wv.w = matrix(d, d);
            attn.wo.w = matrix(d, d);
            let shared = GluExpert::latent(
                matrix(config.d_ffn, d),
                matrix(config.d_ffn, d),
                matrix(d, config.d_ffn),
                config.shared_precision,
            );
            blocks.push(Block {
                attn_norm: Norm::new(config.norm, d, config.norm_eps),
                attn,
                ffn_norm: Norm::new(config.norm, d, config.norm_eps),
                shared,
                moe: None,
            });
        }
        Ok(Model {
            final_norm: Norm::new(config.norm, d, config.norm_eps),
            lm_head: Param::new(Matrix::zeros(config.vocab_size, d)),
            embed,
            blocks,
            config,
        })
    }

    pub fn validate_batch(&self, batch: &FlatBatch) -> Result<()> {
        if batch.n_seqs() == 0 || batch.n_tokens() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        for e in 0..batch.n_seqs() {
            let r = batch.seq_range(e);
            if r.is_empty() {
                return Err(Error::InvalidInput(format!("empty sequence {e}")));
            }
            if r.len() > self.config.max_seq {
                return Err(Error::InvalidInput(format!(
                    "sequence {e} has {} tokens, max_seq is {}",
                    r.len(),
                    self.config.max_seq
                )));
            }
        }
        for &id in &batch.ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::InvalidToken {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    pub fn forward_hidden(&self, batch: &FlatBatch, opts: ForwardOpts) -> Result<ForwardState<T>> {
        self.validate_batch(batch)?;
        let idx: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let mut x = self.embed.w.gather_rows(&idx);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, &batch.offsets, opts)?;
            caches.push(cache);
            x = y;
        }
        let (hidden, fn_cache) = self.final_norm.forward(&x);
        Ok(ForwardState {
            blocks: caches,
            final_norm: fn_cache,
            hidden,
        })
    }

    /// Full logits (n_tokens x vocab) plus the routing trace. Row i is the
    /// next-token distribution after consuming token i of its sequence.
    pub fn lm_forward(
        &self,
        batch: &FlatBatch,
        opts: ForwardOpts,
    ) -> Result<(Matrix<T>, Vec<LayerRouting>)> {
        let state = self.forward_hidden(batch, opts)?;
        let logits = tensor::matmul_nt(&state.hidden, &self.lm_head.w);
        Ok((logits, extract_routing(&state)))
    }

    /// Backward from d(hidden): walks final norm, blocks in reverse, and
    /// the embedding. `dgate_extra`, when present, holds one n x E matrix
    /// per layer of direct gate-probability gradients (the balance loss).
    pub fn backward_hidden(
        &mut self,
        batch: &FlatBatch,
        state: &ForwardState<T>,
        dhidden: &Matrix<T>,
        dgate_extra: Option<&[Matrix<T>]>,
    ) {
        let mut dx = self.final_norm.backward(&state.final_norm, dhidden);
        for (l, block) in self.blocks.iter_mut().enumerate().rev() {
            let extra = dgate_extra.map(|g| &g[l]);
            dx = block.backward(&state.blocks[l], &batch.offsets, &dx, extra);
        }
        if !self.embed.frozen {
            for (i, &id) in batch.ids.iter().enumerate() {
                tensor::axpy(T::one(), dx.row(i), self.embed.g.row_mut(id as usize));
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn is_moe(&self) -> bool {
        self.blocks.iter().any(|b| b.moe.is_some())
    }

    pub fn has_packed_experts(&self) -> bool {
        self.blocks.iter().any(|b| {
            b.moe
                .as_ref()
                .is_some_and(|m| m.experts.iter().any(|e| e.is_packed()))
        })
    }

    /// Named view of every latent parameter, in a fixed traversal order.
    /// Packed expert weights are not params and do not appear.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out: Vec<(String, &Param<T>)> = Vec::new();
        out.push(("embed".into(), &self.embed));
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.push((p("attn_norm.scale"), &b.attn_norm.scale));
            if let Some(bias) = &b.attn_norm.bias {
                out.push((p("attn_norm.bias"), bias));
            }
            out.push((p("attn.wq"), &b.attn.wq));
            out.push((p("attn.wk"), &b.attn.wk));
            out.push((p("attn.wv"), &b.attn.wv));
            out.push((p("attn.wo"), &b.attn.wo));
            out.push((p("ffn_norm.scale"), &b.ffn_norm.scale));
            if let Some(bias) = &b.ffn_norm.bias {
                out.push((p("ffn_norm.bias"), bias));
            }
            if let GluWeights::Latent { up, gate, down } = &b.shared.weights {
                out.push((p("shared.up"), up));
                out.push((p("shared.gate"), gate));
                out.push((p("shared.down"), down));
            }
            if let Some(moe) = &b.moe {
                out.push((p("moe.router"), &moe.router.w));
                for (e, ex) in moe.experts.iter().enumerate() {
                    if let GluWeights::Latent { up, gate, down } = &ex.weights {
                        out.push((format!("blocks.{l}.moe.experts.{e}.up"), up));
                        out.push((format!("blocks.{l}.moe.experts.{e}.gate"), gate));
                        out.push((format!("blocks.{l}.moe.experts.{e}.down"), down));
                    }
                }
            }
        }
        out.push(("final_norm.scale".into(), &self.final_norm.scale));
        if let Some(bias) = &self.final_norm.bias {
            out.push(("final_norm.bias".into(), bias));
        }
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    /// Mutable twin of [`Model::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out: Vec<(String, &mut Param<T>)> = Vec::new();
        out.push(("embed".into(), &mut self.embed));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{l}.attn_norm.scale"), &mut b.attn_norm.scale));
            if let Some(bias) = &mut b.attn_norm.bias {
                out.push((format!("blocks.{l}.attn_norm.bias"), bias));
            }
            out.push((format!("blocks.{l}.attn.wq"), &mut b.attn.wq));
            out.push((format!("blocks.{l}.attn.wk"), &mut b.attn.wk));
            out.push((format!("blocks.{l}.attn.wv"), &mut b.attn.wv));
            out.push((format!("blocks.{l}.attn.wo"), &mut b.attn.wo));
            out.push((format!("blocks.{l}.ffn_norm.scale"), &mut b.ffn_norm.scale));
            if let Some(bias) = &mut b.ffn_norm.bias {
                out.push((format!("blocks.{l}.ffn_norm.bias"), bias));
            }
            if let GluWeights::Latent { up, gate, down } = &mut b.shared.weights {
                out.push((format!("blocks.{l}.shared.up"), up));
                out.push((format!("blocks.{l}.shared.gate"), gate));
                out.push((format!("blocks.{l}.shared.down"), down));
            }
            if let Some(moe) = &mut b.moe {
                out.push((format!("blocks.{l}.moe.router"), &mut moe.router.w));
                for (e, ex) in moe.experts.iter_mut().enumerate() {
                    if let GluWeights::Latent { up, gate, down } = &mut ex.weights {
                        out.push((format!("blocks.{l}.moe.experts.{e}.up"), up));
                        out.push((format!("blocks.{l}.moe.experts.{e}.gate"), gate));
                        out.push((format!("blocks.{l}.moe.experts.{e}.down"), down));
                    }
                }
            }
        }
        out.push(("final_norm.scale".into(), &mut self.final_norm.scale));
        if let Some(bias) = &mut self.final_norm.bias {
            out.push(("final_norm.bias".into(), bias));
        }
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    /// (frozen, trainable) scalar parameter counts over latent params.
    pub fn param_census(&self) -> (usize, usize) {
        let mut frozen = 0;
        let mut trainable = 0;
        for (_, p) in self.params() {
            let n = p.w.data().len();
            if p.frozen {
                frozen += n;
            } else {
                trainable += n;
            }
        }
        (frozen, trainable)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            embed: self.embed.cast(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }
}

/// Pulls the per-layer routing records out of a forward state.
pub fn extract_routing<T: Scalar>(state: &ForwardState<T>) -> Vec<LayerRouting> {
    state
        .blocks
        .iter()
        .filter_map(|b| b.moe.as_ref())
        .map(|m| LayerRouting {
            probs: m.probs.cast(),
            top1: m.top1.clone(),
        })
        .collect()
}
