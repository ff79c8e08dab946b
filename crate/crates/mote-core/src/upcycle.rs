//! Dense-to-routed conversion and the deployment memory model.
//!
//! Up-cycling reuses everything the dense parent learned: attention,
//! norms, embeddings and the GLU stay in place and are frozen, with the
//! GLU re-labelled as the shared expert. A fresh router and E routed
//! experts per layer are the only trainable pieces that come out.

use crate::error::{Error, Result};
use crate::model::{fill_gauss, GluExpert, GluWeights, Model, MoeLayer, Precision, Router};
use crate::quant::{dequantize_rtn, rtn_quantize};
use crate::tensor::{Matrix, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertInit {
    /// Every routed expert starts as a copy of the layer's GLU.
    FfnCopy,
    /// Routed experts start from normal(0, 0.02).
    Random,
}

#[derive(Clone, Copy, Debug)]
pub struct UpcycleOpts {
    pub n_experts: usize,
    pub init: ExpertInit,
    pub routed_precision: Precision,
    pub shared_precision: Precision,
    pub seed: u64,
}

impl Default for UpcycleOpts {
    fn default() -> Self {
        UpcycleOpts {
            n_experts: 4,
            init: ExpertInit::FfnCopy,
            routed_precision: Precision::Ternary,
            shared_precision: Precision::Full,
            seed: 0,
        }
    }
}

pub fn upcycle<T: Scalar>(dense: &Model<T>, opts: &UpcycleOpts) -> Result<Model<T>> {
    if dense.is_moe() {
        return Err(Error::Config("model is already routed".into()));
    }
    if opts.n_experts == 0 {
        return Err(Error::Config("n_experts must be at least 1".into()));
    }
    let mut model = dense.clone();
    model.config.n_experts = opts.n_experts;
    model.config.top_k = 1;
    model.config.routed_precision = opts.routed_precision;
    model.config.shared_precision = opts.shared_precision;
    model.config.validate()?;

    let d = model.config.d_model;
    let d_ffn = model.config.d_ffn;
    let mut rng = rand::SeedableRng::seed_from_u64(opts.seed);
    for block in &mut model.blocks {
        block.shared.precision = opts.shared_precision;
        let mut experts = Vec::with_capacity(opts.n_experts);
        for _ in 0..opts.n_experts {
            let (up, gate, down) = match opts.init {
                ExpertInit::FfnCopy => {
                    let GluWeights::Latent { up, gate, down } = &block.shared.weights else {
                        return Err(Error::Config("shared expert is packed".into()));
                    };
                    (up.w.clone(), gate.w.clone(), down.w.clone())
                }
                ExpertInit::Random => {
                    let mut mk = |r, c| {
                        let mut m = Matrix::zeros(r, c);
                        fill_gauss(&mut m, 0.02, &mut rng);
                        m
                    };
                    (mk(d_ffn, d), mk(d_ffn, d), mk(d, d_ffn))
                }
            };
            experts.push(GluExpert::latent(up, gate, down, opts.routed_precision));
        }
        let mut rw = Matrix::zeros(opts.n_experts, d);
        fill_gauss(&mut rw, 0.02, &mut rng);
        block.moe = Some(MoeLayer {
            router: Router::new(rw),
            experts,
        });
    }
    freeze_non_moe(&mut model);
    Ok(model)
}

/// Freezes every parameter outside the routed layers. After this only the
/// routers and routed experts take gradient.
pub fn freeze_non_moe<T: Scalar>(model: &mut Model<T>) {
    for (name, p) in model.params_mut() {
        p.frozen = !name.contains(".moe.");
    }
}

/// Converts every routed expert to its packed 2-bit deployment form.
pub fn pack_routed_experts<T: Scalar>(model: &mut Model<T>) -> Result<()> {
    if !model.is_moe() {
        return Err(Error::Config("model has no routed experts to pack".into()));
    }
    for block in &mut model.blocks {
        if let Some(moe) = &mut block.moe {
            for ex in &mut moe.experts {
                *ex = ex.pack()?;
            }
        }
    }
    Ok(())
}

/// Round-to-nearest post-training quantization of every shared expert,
/// in place: weights are replaced by their dequantized codes.
pub fn ptq_shared<T: Scalar>(model: &mut Model<T>, bits: u32) -> Result<()> {
    for block in &mut model.blocks {
        let GluWeights::Latent { up, gate, down } = &mut block.shared.weights else {
            return Err(Error::Config("shared expert is packed".into()));
        };
        for p in [up, gate, down] {
            p.w = dequantize_rtn(&rtn_quantize(&p.w, bits)?);
        }
    }
    Ok(())
}

pub const PRESETS: &[(&str, usize, usize, usize, usize)] = &[
    ("0.5b", 896, 4864, 24, 4),
    ("1.5b", 1536, 8960, 28, 4),
    ("3b", 2048, 11008, 36, 4),
];

pub fn preset(name: &str) -> Result<(usize, usize, usize, usize)> {
    PRESETS
        .iter()
        .find(|(n, ..)| *n == name)
        .map(|&(_, d, f, l, e)| (d, f, l, e))
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown preset {name:?}, expected one of 0.5b, 1.5b, 3b"
            ))
        })
}

/// FFN storage for one deployment, counting only expert weights: attention,
/// embeddings and norms are identical across the compared designs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemoryReport {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    /// fp16 shared expert, all layers.
    pub shared_bytes: u64,
    /// 2-bit packed routed experts plus their scales, all layers.
    pub routed_bytes: u64,
    pub total_gib: f64,
    /// Same layer count and expert count held in fp16, no shared expert.
    pub dense_experts_gib: f64,
    pub ratio: f64,
}

const GIB: f64 = (1u64 << 30) as f64;

pub fn memory_report(
    d_model: usize,
    d_ffn: usize,
    n_layers: usize,
    n_experts: usize,
) -> MemoryReport {
    let p = 3 * d_model * d_ffn;
    let per_layer_packed = n_experts * (p.div_ceil(4) + 3 * 4);
    let shared_bytes = (n_layers * p * 2) as u64;
    let routed_bytes = (n_layers * per_layer_packed) as u64;
    let dense_experts = (n_layers * n_experts * p * 2) as u64;
    let total = shared_bytes + routed_bytes;
    MemoryReport {
        d_model,
        d_ffn,
        n_layers,
        n_experts,
        shared_bytes,
        routed_bytes,
        total_gib: total as f64 / GIB,
        dense_experts_gib: dense_experts as f64 / GIB,
        ratio: dense_experts as f64 / total as f64,
    }
}
