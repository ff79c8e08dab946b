//! Checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`.
//! The manifest carries the model config plus one record per tensor:
//! name, dtype, shape, byte range, freeze flag and (for packed tensors)
//! the quantization scale. The weight file is a flat little-endian blob;
//! every tensor starts on a 64-byte boundary.
//!
//! Two dtypes round-trip through models: `f32` latent weights and
//! `i2packed` routed experts. Anything else is refused by name, so a
//! checkpoint from a future build fails loudly instead of half-loading.

use crate::error::{Error, Result};
use crate::model::{
    Attention, Block, GluExpert, GluWeights, Model, ModelConfig, MoeLayer, Norm, Param, Router,
};
use crate::packing::{self, PackedTernaryMatrix};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const ALIGN: usize = 64;

const DTYPE_F32: &str = "f32";
const DTYPE_I2: &str = "i2packed";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    dtype: String,
    rows: usize,
    cols: usize,
    offset: u64,
    byte_length: u64,
    #[serde(default)]
    frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f32>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

enum Payload<'a> {
    Latent(&'a Param<f32>),
    Packed(&'a PackedTernaryMatrix),
}

fn collect(model: &Model<f32>) -> Vec<(String, Payload<'_>)> {
    let mut out: Vec<(String, Payload)> = model
        .params()
        .into_iter()
        .map(|(n, p)| (n, Payload::Latent(p)))
        .collect();
    for (l, b) in model.blocks.iter().enumerate() {
        if let Some(moe) = &b.moe {
            for (e, ex) in moe.experts.iter().enumerate() {
                if let GluWeights::Packed { up, gate, down } = &ex.weights {
                    let name = |w| format!("blocks.{l}.moe.experts.{e}.{w}");
                    out.push((name("up"), Payload::Packed(up)));
                    out.push((name("gate"), Payload::Packed(gate)));
                    out.push((name("down"), Payload::Packed(down)));
                }
            }
        }
    }
    out
}

pub fn save_model(dir: &Path, model: &Model<f32>) -> Result<()> {
    model.config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut records = Vec::new();
    for (name, payload) in collect(model) {
        debug_assert_eq!(blob.len() % ALIGN, 0);
        let offset = blob.len() as u64;
        let record = match payload {
            Payload::Latent(p) => {
                for &v in p.w.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                TensorRecord {
                    name,
                    dtype: DTYPE_F32.into(),
                    rows: p.w.rows(),
                    cols: p.w.cols(),
                    offset,
                    byte_length: (p.w.data().len() * 4) as u64,
                    frozen: p.frozen,
                    scale: None,
                }
            }
            Payload::Packed(p) => {
                blob.extend_from_slice(p.data());
                TensorRecord {
                    name,
                    dtype: DTYPE_I2.into(),
                    rows: p.rows(),
                    cols: p.cols(),
                    offset,
                    byte_length: p.data().len() as u64,
                    frozen: true,
                    scale: Some(p.scale()),
                }
            }
        };
        records.push(record);
        let pad = blob.len().next_multiple_of(ALIGN) - blob.len();
        blob.extend(std::iter::repeat_n(0u8, pad));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors: records,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::CorruptManifest(format!("serialize: {e}")))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| Error::io(mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, blob).map_err(|e| Error::io(wpath, e))?;
    Ok(())
}

fn skeleton(config: ModelConfig) -> Model<f32> {
    let d = config.d_model;
    let glu = |precision| {
        GluExpert::latent(
            Matrix::zeros(config.d_ffn, d),
            Matrix::zeros(config.d_ffn, d),
            Matrix::zeros(d, config.d_ffn),
            precision,
        )
    };
    let blocks = (0..config.n_layers)
        .map(|_| Block {
            attn_norm: Norm::new(config.norm, d, config.norm_eps),
            attn: Attention::new(d, config.n_heads, config.rope_base),
            ffn_norm: Norm::new(config.norm, d, config.norm_eps),
            shared: glu(config.shared_precision),
            moe: (config.n_experts > 0).then(|| MoeLayer {
                router: Router::new(Matrix::zeros(config.n_experts, d)),
                experts: (0..config.n_experts)
                    .map(|_| glu(config.routed_precision))
                    .collect(),
            }),
        })
        .collect();
    Model {
        embed: Param::new(Matrix::zeros(config.vocab_size, d)),
        blocks,
        final_norm: Norm::new(config.norm, d, config.norm_eps),
        lm_head: Param::new(Matrix::zeros(config.vocab_size, d)),
        config,
    }
}

struct Records<'a> {
    by_name: HashMap<&'a str, &'a TensorRecord>,
    consumed: HashSet<&'a str>,
    blob: &'a [u8],
}

impl<'a> Records<'a> {
    fn build(tensors: &'a [TensorRecord], blob: &'a [u8]) -> Result<Self> {
        let mut by_name = HashMap::with_capacity(tensors.len());
        for t in tensors {
            if by_name.insert(t.name.as_str(), t).is_some() {
                return Err(Error::CorruptManifest(format!(
                    "duplicate tensor {:?}",
                    t.name
                )));
            }
            if !matches!(t.dtype.as_str(), DTYPE_F32 | DTYPE_I2) {
                return Err(Error::UnsupportedDtype(t.dtype.clone()));
            }
        }
        Ok(Records {
            by_name,
            consumed: HashSet::new(),
            blob,
        })
    }

    fn take(&mut self, name: &str, rows: usize, cols: usize, dtype: &str) -> Result<&'a TensorRecord> {
        let rec = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.into()))?;
        self.consumed.insert(rec.name.as_str());
        if rec.dtype != dtype {
            return Err(Error::CorruptManifest(format!(
                "tensor {name:?} has dtype {:?}, expected {dtype:?}",
                rec.dtype
            )));
        }
        if (rec.rows, rec.cols) != (rows, cols) {
            return Err(Error::CorruptManifest(format!(
                "tensor {name:?} is {}x{}, expected {rows}x{cols}",
                rec.rows, rec.cols
            )));
        }
        let expect_len = match dtype {
            DTYPE_F32 => rows * cols * 4,
            _ => rows * packing::bytes_per_row(cols),
        } as u64;
        if rec.byte_length != expect_len {
            return Err(Error::CorruptManifest(format!(
                "tensor {name:?} declares {} bytes, expected {expect_len}",
                rec.byte_length
            )));
        }
        if rec.offset % ALIGN as u64 != 0 {
            return Err(Error::CorruptManifest(format!(
                "tensor {name:?} offset {} is not {ALIGN}-byte aligned",
                rec.offset
            )));
        }
        let end = rec.offset.checked_add(rec.byte_length);
        if end.is_none() || end.unwrap() > self.blob.len() as u64 {
            return Err(Error::CorruptManifest(format!(
                "tensor {name:?} range {}..{:?} exceeds weight file ({} bytes)",
                rec.offset,
                end,
                self.blob.len()
            )));
        }
        Ok(rec)
    }

    fn bytes(&self, rec: &TensorRecord) -> &'a [u8] {
        &self.blob[rec.offset as usize..(rec.offset + rec.byte_length) as usize]
    }

    fn load_latent(&mut self, name: &str, p: &mut Param<f32>) -> Result<()> {
        let (rows, cols) = p.w.shape();
        let rec = self.take(name, rows, cols, DTYPE_F32)?;
        for (dst, chunk) in p.w.data_mut().iter_mut().zip(self.bytes(rec).chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        p.frozen = rec.frozen;
        Ok(())
    }

    fn load_packed(&mut self, name: &str, rows: usize, cols: usize) -> Result<PackedTernaryMatrix> {
        let rec = self.take(name, rows, cols, DTYPE_I2)?;
        let scale = rec.scale.ok_or_else(|| {
            Error::CorruptManifest(format!("packed tensor {name:?} has no scale"))
        })?;
        PackedTernaryMatrix::from_raw(rows, cols, scale, self.bytes(rec).to_vec())
    }
}

pub fn load_model(dir: &Path) -> Result<Model<f32>> {
    let mpath = dir.join(MANIFEST_FILE);
    let json = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::CorruptManifest(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CorruptManifest(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut records = Records::build(&manifest.tensors, &blob)?;
    let mut model = skeleton(manifest.config);

    // Experts first: their representation (latent or packed) follows the
    // checkpoint, and params_mut only walks whatever stayed latent.
    let d_ffn = model.config.d_ffn;
    let d = model.config.d_model;
    for (l, block) in model.blocks.iter_mut().enumerate() {
        let Some(moe) = &mut block.moe else { continue };
        for (e, ex) in moe.experts.iter_mut().enumerate() {
            let name = |w: &str| format!("blocks.{l}.moe.experts.{e}.{w}");
            let dt = |records: &Records, w: &str| -> Result<String> {
                records
                    .by_name
                    .get(name(w).as_str())
                    .map(|r| r.dtype.clone())
                    .ok_or_else(|| Error::MissingTensor(name(w)))
            };
            let kinds = [
                dt(&records, "up")?,
                dt(&records, "gate")?,
                dt(&records, "down")?,
            ];
            if kinds.iter().all(|k| k == DTYPE_I2) {
                *ex = GluExpert {
                    weights: GluWeights::Packed {
                        up: records.load_packed(&name("up"), d_ffn, d)?,
                        gate: records.load_packed(&name("gate"), d_ffn, d)?,
                        down: records.load_packed(&name("down"), d, d_ffn)?,
                    },
                    precision: ex.precision,
                };
            } else if kinds.iter().any(|k| k == DTYPE_I2) {
                return Err(Error::CorruptManifest(format!(
                    "expert {l}.{e} mixes latent and packed tensors"
                )));
            }
        }
    }
    for (name, p) in model.params_mut() {
        records.load_latent(&name, p)?;
    }
    if records.consumed.len() != manifest.tensors.len() {
        let extra: Vec<&str> = manifest
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .filter(|n| !records.consumed.contains(n))
            .collect();
        return Err(Error::CorruptManifest(format!(
            "unexpected tensors: {extra:?}"
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FlatBatch, ForwardOpts, NormKind, Precision};
    use crate::upcycle::{pack_routed_experts, upcycle, UpcycleOpts};
    use tempfile::tempdir;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            n_layers: 2,
            vocab_size: 16,
            max_seq: 16,
            n_experts: 0,
            top_k: 1,
            routed_precision: Precision::Ternary,
            shared_precision: Precision::Full,
            norm: NormKind::RmsNorm,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    fn assert_models_equal(a: &Model<f32>, b: &Model<f32>) {
        assert_eq!(a.config, b.config);
        let (pa, pb) = (a.params(), b.params());
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.w.data(), tb.w.data(), "{na}");
            assert_eq!(ta.frozen, tb.frozen, "{na}");
        }
    }

    #[test]
    fn dense_roundtrip_is_bitwise() {
        let model = Model::<f32>::init_dense(cfg(), 3).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_models_equal(&model, &back);
    }

    #[test]
    fn layer_norm_variant_roundtrips() {
        let model =
            Model::<f32>::init_dense(ModelConfig { norm: NormKind::LayerNorm, ..cfg() }, 4)
                .unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();
        assert_models_equal(&model, &load_model(dir.path()).unwrap());
    }

    #[test]
    fn upcycled_latent_roundtrip_keeps_freeze_flags() {
        let dense = Model::<f32>::init_dense(cfg(), 5).unwrap();
        let moe = upcycle(&dense, &UpcycleOpts::default()).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &moe).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_models_equal(&moe, &back);
        assert!(back.is_moe());
        let (frozen, trainable) = back.param_census();
        assert_eq!((frozen, trainable), moe.param_census());
        assert!(frozen > 0 && trainable > 0);
    }

    #[test]
    fn packed_roundtrip_preserves_bytes_and_forward() {
        let dense = Model::<f32>::init_dense(cfg(), 6).unwrap();
        let mut moe = upcycle(&dense, &UpcycleOpts::default()).unwrap();
        pack_routed_experts(&mut moe).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &moe).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_models_equal(&moe, &back);
        assert!(back.has_packed_experts());
        for (ba, bb) in moe.blocks.iter().zip(&back.blocks) {
            let (ma, mb) = (ba.moe.as_ref().unwrap(), bb.moe.as_ref().unwrap());
            for (ea, eb) in ma.experts.iter().zip(&mb.experts) {
                let GluWeights::Packed { up: ua, .. } = &ea.weights else { panic!() };
                let GluWeights::Packed { up: ub, .. } = &eb.weights else { panic!() };
                assert_eq!(ua.data(), ub.data());
                assert_eq!(ua.scale(), ub.scale());
            }
        }
        let batch = FlatBatch::from_sequences(&[vec![1, 2, 3, 4, 5]]);
        let (la, _) = moe.lm_forward(&batch, ForwardOpts::default()).unwrap();
        let (lb, _) = back.lm_forward(&batch, ForwardOpts::default()).unwrap();
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn offsets_are_aligned() {
        let model = Model::<f32>::init_dense(cfg(), 7).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();
        let json = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let manifest: Manifest = serde_json::from_str(&json).unwrap();
        assert!(!manifest.tensors.is_empty());
        for t in &manifest.tensors {
            assert_eq!(t.offset % ALIGN as u64, 0, "{}", t.name);
        }
    }

    fn tamper(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let path = dir.join(MANIFEST_FILE);
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        f(&mut v);
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    }

    #[test]
    fn tampered_byte_length_is_rejected() {
        let model = Model::<f32>::init_dense(cfg(), 8).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();
        tamper(dir.path(), |v| {
            let t = &mut v["tensors"][0]["byte_length"];
            *t = serde_json::json!(t.as_u64().unwrap() + 4);
        });
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::CorruptManifest(_))
        ));
    }

    #[test]
    fn missing_tensor_is_named() {
        let model = Model::<f32>::init_dense(cfg(), 9).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();
        tamper(dir.path(), |v| {
            let tensors = v["tensors"].as_array_mut().unwrap();
            tensors.retain(|t| t["name"] != "embed");
        });
        match load_model(dir.path()) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "embed"),
            other => panic!("expected missing tensor, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_is_rejected_by_name() {
        let model = Model::<f32>::init_dense(cfg(), 10).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();
        tamper(dir.path(), |v| {
            v["tensors"][0]["dtype"] = serde_json::json!("f16");
        });
        match load_model(dir.path()) {
            Err(Error::UnsupportedDtype(d)) => assert_eq!(d, "f16"),
            other => panic!("expected unsupported dtype, got {other:?}"),
        }
    }

    #[test]
    fn extra_tensor_is_rejected() {
        let model = Model::<f32>::init_dense(cfg(), 11).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();
        tamper(dir.path(), |v| {
            let tensors = v["tensors"].as_array_mut().unwrap();
            let mut ghost = tensors[0].clone();
            ghost["name"] = serde_json::json!("ghost");
            tensors.push(ghost);
        });
        match load_model(dir.path()) {
            Err(Error::CorruptManifest(msg)) => assert!(msg.contains("ghost"), "{msg}"),
            other => panic!("expected corrupt manifest, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_offset_is_rejected() {
        let model = Model::<f32>::init_dense(cfg(), 12).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();
        tamper(dir.path(), |v| {
            v["tensors"][0]["offset"] = serde_json::json!(1u64 << 40);
        });
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::CorruptManifest(_))
        ));
    }

    #[test]
    fn future_format_version_is_rejected() {
        let model = Model::<f32>::init_dense(cfg(), 13).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();
        tamper(dir.path(), |v| {
            v["format_version"] = serde_json::json!(2);
        });
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::CorruptManifest(_))
        ));
    }

    #[test]
    fn corrupt_packed_codes_are_rejected() {
        let dense = Model::<f32>::init_dense(cfg(), 14).unwrap();
        let mut moe = upcycle(&dense, &UpcycleOpts::default()).unwrap();
        pack_routed_experts(&mut moe).unwrap();
        let dir = tempdir().unwrap();
        save_model(dir.path(), &moe).unwrap();
        let json = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let manifest: Manifest = serde_json::from_str(&json).unwrap();
        let rec = manifest
            .tensors
            .iter()
            .find(|t| t.dtype == DTYPE_I2)
            .unwrap();
        let wpath = dir.path().join(WEIGHTS_FILE);
        let mut blob = std::fs::read(&wpath).unwrap();
        // 0xAA is the reserved 0b10 field in all four slots.
        blob[rec.offset as usize] = 0xAA;
        std::fs::write(&wpath, blob).unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::CorruptWeights(_))
        ));
    }

    #[test]
    fn missing_files_surface_io_errors() {
        let dir = tempdir().unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Io { .. })));
    }
}
