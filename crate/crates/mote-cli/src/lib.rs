//! Command-line surface.
//!
//! Every run emits exactly one JSON object on stdout with the command
//! name, the fully resolved settings and the result; progress goes to
//! stderr. Operational failures print `{"error": {...}}` to stderr and
//! exit 1; usage errors are clap's exit 2.
//!
//! Settings resolve as: explicit flag, then `--config` file value, then
//! built-in default.

use clap::{Args, Parser, Subcommand, ValueEnum};
use mote_core::model::{ForwardOpts, Model, ModelConfig, NormKind, Precision};
use mote_core::synthdata::{self, encode_batch, Example};
use mote_core::upcycle::{
    self, memory_report, pack_routed_experts, preset, ptq_shared, upcycle, ExpertInit, UpcycleOpts,
};
use mote_core::{analytics, checkpoint, train, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "mote",
    version,
    about = "Up-cycle dense transformers into ternary mixture-of-experts models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a dense parent model on the synthetic counting task.
    PretrainDense(PretrainDenseArgs),
    /// Convert a dense checkpoint into a frozen-shared routed model.
    Upcycle(UpcycleArgs),
    /// Train the routed experts and router of an up-cycled checkpoint.
    TrainMoe(TrainMoeArgs),
    /// Evaluate response cross-entropy on held-out data.
    Eval(EvalArgs),
    /// Pack routed experts into the 2-bit deployment format.
    Pack(PackArgs),
    /// Post-training round-to-nearest quantization of the shared experts.
    PtqShared(PtqSharedArgs),
    /// FFN memory accounting for the deployment presets.
    MemoryReport(MemoryReportArgs),
    /// Routing analytics: loads, pathways, modality mixes, projection.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    #[value(alias = "rms_norm", alias = "rms")]
    RmsNorm,
    #[value(alias = "layer_norm", alias = "layer")]
    LayerNorm,
}

impl From<NormArg> for NormKind {
    fn from(v: NormArg) -> Self {
        match v {
            NormArg::RmsNorm => NormKind::RmsNorm,
            NormArg::LayerNorm => NormKind::LayerNorm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    #[value(name = "ffn", alias = "ffn_copy", alias = "ffn-copy")]
    Ffn,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RoutedArg {
    Ternary,
    Binary,
    Full,
}

impl From<RoutedArg> for Precision {
    fn from(v: RoutedArg) -> Self {
        match v {
            RoutedArg::Ternary => Precision::Ternary,
            RoutedArg::Binary => Precision::Binary,
            RoutedArg::Full => Precision::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SharedArg {
    Full,
    Ternary,
}

impl From<SharedArg> for Precision {
    fn from(v: SharedArg) -> Self {
        match v {
            SharedArg::Full => Precision::Full,
            SharedArg::Ternary => Precision::Ternary,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BitsArg {
    #[value(name = "4")]
    B4,
    #[value(name = "8")]
    B8,
}

impl BitsArg {
    fn bits(self) -> u32 {
        match self {
            BitsArg::B4 => 4,
            BitsArg::B8 => 8,
        }
    }
}

/// Optional JSON settings file; flags win over file values.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ffn: Option<usize>,
    pub n_layers: Option<usize>,
    pub norm: Option<String>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup: Option<usize>,
    pub grad_clip: Option<f64>,
    pub gamma: Option<f64>,
    pub ternary_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub train_examples: Option<usize>,
    pub eval_examples: Option<usize>,
    pub experts: Option<usize>,
    pub init: Option<String>,
    pub routed: Option<String>,
    pub shared: Option<String>,
    pub bits: Option<u32>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn norm_kind(&self) -> Result<Option<NormKind>> {
        match self.norm.as_deref() {
            None => Ok(None),
            Some("rms-norm" | "rms_norm" | "rms") => Ok(Some(NormKind::RmsNorm)),
            Some("layer-norm" | "layer_norm" | "layer") => Ok(Some(NormKind::LayerNorm)),
            Some(other) => Err(Error::Config(format!("unknown norm {other:?}"))),
        }
    }

    fn init_kind(&self) -> Result<Option<ExpertInit>> {
        match self.init.as_deref() {
            None => Ok(None),
            Some("ffn" | "ffn_copy" | "ffn-copy") => Ok(Some(ExpertInit::FfnCopy)),
            Some("random") => Ok(Some(ExpertInit::Random)),
            Some(other) => Err(Error::Config(format!("unknown init {other:?}"))),
        }
    }

    fn routed_kind(&self) -> Result<Option<Precision>> {
        match self.routed.as_deref() {
            None => Ok(None),
            Some("ternary") => Ok(Some(Precision::Ternary)),
            Some("binary") => Ok(Some(Precision::Binary)),
            Some("full") => Ok(Some(Precision::Full)),
            Some(other) => Err(Error::Config(format!("unknown routed precision {other:?}"))),
        }
    }

    fn shared_kind(&self) -> Result<Option<Precision>> {
        match self.shared.as_deref() {
            None => Ok(None),
            Some("full") => Ok(Some(Precision::Full)),
            Some("ternary") => Ok(Some(Precision::Ternary)),
            Some(other) => Err(Error::Config(format!("unknown shared precision {other:?}"))),
        }
    }
}

#[derive(Args, Debug)]
pub struct ModelFlags {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
}

#[derive(Args, Debug)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub train_examples: Option<usize>,
    #[arg(long)]
    pub eval_examples: Option<usize>,
    /// Append one JSON line of metrics per step to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Resolve and print settings without training or writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct PretrainDenseArgs {
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct UpcycleArgs {
    /// Dense checkpoint to read.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    #[arg(long, value_enum)]
    pub routed: Option<RoutedArg>,
    #[arg(long, value_enum)]
    pub shared: Option<SharedArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainMoeArgs {
    /// Up-cycled checkpoint to read.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Balance loss coefficient.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Fraction of steps (from the end) with routed quantizers active.
    #[arg(long)]
    pub ternary_fraction: Option<f64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1234)]
    pub data_seed: u64,
    /// Skip this many training draws first, so the eval split matches a
    /// training run with the same data seed and train size.
    #[arg(long, default_value_t = 0)]
    pub train_examples: usize,
    #[arg(long, default_value_t = 64)]
    pub eval_examples: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Skip the routed layer, evaluating the frozen dense path alone.
    #[arg(long)]
    pub ablate_moe: bool,
    /// Evaluate routed experts at full latent precision.
    #[arg(long)]
    pub no_quantize: bool,
}

#[derive(Args, Debug)]
pub struct PackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PtqSharedArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "8")]
    pub bits: BitsArg,
}

#[derive(Args, Debug)]
pub struct MemoryReportArgs {
    /// One of 0.5b, 1.5b, 3b; omit to pass explicit dimensions.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory for report.json, CSVs and the projection SVG.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1234)]
    pub data_seed: u64,
    /// Skip this many training draws first (see `eval`).
    #[arg(long, default_value_t = 0)]
    pub train_examples: usize,
    #[arg(long, default_value_t = 64)]
    pub eval_examples: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedTrain {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub norm: NormKind,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    pub gamma: f64,
    pub ternary_fraction: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub train_examples: usize,
    pub eval_examples: usize,
}

impl ResolvedTrain {
    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            n_layers: self.n_layers,
            vocab_size: self.vocab_size,
            max_seq: self.max_seq,
            n_experts: 0,
            top_k: 1,
            routed_precision: Precision::Ternary,
            shared_precision: Precision::Full,
            norm: self.norm,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    fn train_config(&self) -> train::TrainConfig {
        train::TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup: self.warmup,
            grad_clip: self.grad_clip,
            gamma: self.gamma,
            ternary_fraction: self.ternary_fraction,
            seed: self.seed,
            log_every: 50,
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn resolve_train(
    model: &ModelFlags,
    tf: &TrainFlags,
    gamma: Option<f64>,
    ternary_fraction: Option<f64>,
    file: &FileConfig,
) -> Result<ResolvedTrain> {
    Ok(ResolvedTrain {
        d_model: pick(model.d_model, file.d_model, 64),
        n_heads: pick(model.n_heads, file.n_heads, 4),
        d_ffn: pick(model.d_ffn, file.d_ffn, 192),
        n_layers: pick(model.n_layers, file.n_layers, 2),
        norm: pick(model.norm.map(NormKind::from), file.norm_kind()?, NormKind::RmsNorm),
        vocab_size: synthdata::VOCAB,
        max_seq: synthdata::MAX_LEN,
        steps: pick(tf.steps, file.steps, 200),
        batch_size: pick(tf.batch_size, file.batch_size, 8),
        lr: pick(tf.lr, file.lr, 1e-3),
        weight_decay: pick(tf.weight_decay, file.weight_decay, 0.1),
        warmup: pick(tf.warmup, file.warmup, 20),
        grad_clip: pick(tf.grad_clip, file.grad_clip, 1.0),
        gamma: pick(gamma, file.gamma, 0.0),
        ternary_fraction: pick(ternary_fraction, file.ternary_fraction, 1.0),
        seed: pick(tf.seed, file.seed, 0),
        data_seed: pick(tf.data_seed, file.data_seed, 1234),
        train_examples: pick(tf.train_examples, file.train_examples, 512),
        eval_examples: pick(tf.eval_examples, file.eval_examples, 64),
    })
}

struct MetricsSink {
    file: Option<std::io::BufWriter<fs::File>>,
    log_every: usize,
}

impl MetricsSink {
    fn open(path: Option<&Path>, log_every: usize) -> Result<Self> {
        let file = match path {
            None => None,
            Some(p) => Some(std::io::BufWriter::new(
                fs::File::create(p).map_err(|e| Error::io(p, e))?,
            )),
        };
        Ok(MetricsSink { file, log_every })
    }

    fn record(&mut self, m: &train::StepMetrics, steps: usize) {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(m).expect("metrics serialize");
            let _ = writeln!(f, "{line}");
        }
        if self.log_every > 0 && (m.step.is_multiple_of(self.log_every) || m.step + 1 == steps) {
            eprintln!(
                "step {:>6}  lm {:.4}  balance {:.4}  grad {:.3}  lr {:.2e}{}",
                m.step,
                m.lm_loss,
                m.balance_loss,
                m.grad_norm,
                m.lr,
                if m.quantized { "  [q]" } else { "" }
            );
        }
    }
}

fn gen_data(resolved: &ResolvedTrain) -> Result<(Vec<Example>, Vec<Example>)> {
    synthdata::gen_split(
        resolved.data_seed,
        resolved.train_examples,
        resolved.eval_examples,
    )
}

fn run_pretrain_dense(args: &PretrainDenseArgs) -> Result<serde_json::Value> {
    let file = FileConfig::load(args.config.as_deref())?;
    let resolved = resolve_train(&args.model, &args.train, None, None, &file)?;
    let resolved_json = serde_json::to_value(&resolved).expect("resolved");
    if args.train.dry_run {
        return Ok(json!({ "resolved": resolved_json, "result": null }));
    }
    let mut model: Model<f32> = Model::init_dense(resolved.model_config(), resolved.seed)?;
    let (train_set, eval_set) = gen_data(&resolved)?;
    let mut sink = MetricsSink::open(args.train.metrics.as_deref(), args.train.log_every)?;
    let cfg = resolved.train_config();
    let metrics = train::train(&mut model, &train_set, &cfg, |m| sink.record(m, cfg.steps))?;
    checkpoint::save_model(&args.out, &model)?;
    let eval = train::eval_loss(&model, &eval_set, ForwardOpts::default(), 16)?;
    Ok(json!({
        "resolved": resolved_json,
        "result": {
            "checkpoint": args.out,
            "steps": metrics.len(),
            "final_train_loss": metrics.last().map(|m| m.lm_loss),
            "eval_loss": eval,
        }
    }))
}

fn run_upcycle(args: &UpcycleArgs) -> Result<serde_json::Value> {
    let file = FileConfig::load(args.config.as_deref())?;
    let opts = UpcycleOpts {
        n_experts: pick(args.experts, file.experts, 4),
        init: pick(args.init.map(|v| match v {
            InitArg::Ffn => ExpertInit::FfnCopy,
            InitArg::Random => ExpertInit::Random,
        }), file.init_kind()?, ExpertInit::FfnCopy),
        routed_precision: pick(args.routed.map(Precision::from), file.routed_kind()?, Precision::Ternary),
        shared_precision: pick(args.shared.map(Precision::from), file.shared_kind()?, Precision::Full),
        seed: pick(args.seed, file.seed, 0),
    };
    let dense = checkpoint::load_model(&args.model)?;
    let moe = upcycle(&dense, &opts)?;
    checkpoint::save_model(&args.out, &moe)?;
    let (frozen, trainable) = moe.param_census();
    Ok(json!({
        "resolved": {
            "experts": opts.n_experts,
            "init": opts.init,
            "routed": opts.routed_precision,
            "shared": opts.shared_precision,
            "seed": opts.seed,
        },
        "result": {
            "checkpoint": args.out,
            "frozen_params": frozen,
            "trainable_params": trainable,
        }
    }))
}

fn run_train_moe(args: &TrainMoeArgs) -> Result<serde_json::Value> {
    let file = FileConfig::load(args.config.as_deref())?;
    let model_flags = ModelFlags {
        d_model: None,
        n_heads: None,
        d_ffn: None,
        n_layers: None,
        norm: None,
    };
    let mut resolved = resolve_train(
        &model_flags,
        &args.train,
        args.gamma,
        args.ternary_fraction,
        &file,
    )?;
    if args.gamma.is_none() && file.gamma.is_none() {
        resolved.gamma = 0.01;
    }
    let mut model = checkpoint::load_model(&args.model)?;
    if !model.is_moe() {
        return Err(Error::Config(
            "train-moe needs an up-cycled checkpoint; run `mote upcycle` first".into(),
        ));
    }
    if model.has_packed_experts() {
        return Err(Error::Config(
            "checkpoint has packed experts; training needs latent weights".into(),
        ));
    }
    // The checkpoint defines the architecture; drop any model dims that
    // came from defaults so the resolved record reflects reality.
    resolved.d_model = model.config.d_model;
    resolved.n_heads = model.config.n_heads;
    resolved.d_ffn = model.config.d_ffn;
    resolved.n_layers = model.config.n_layers;
    resolved.norm = model.config.norm;
    let resolved_json = serde_json::to_value(&resolved).expect("resolved");
    if args.train.dry_run {
        return Ok(json!({ "resolved": resolved_json, "result": null }));
    }
    let (train_set, eval_set) = gen_data(&resolved)?;
    let mut sink = MetricsSink::open(args.train.metrics.as_deref(), args.train.log_every)?;
    let cfg = resolved.train_config();
    let metrics = train::train(&mut model, &train_set, &cfg, |m| sink.record(m, cfg.steps))?;
    checkpoint::save_model(&args.out, &model)?;
    let eval = train::eval_loss(&model, &eval_set, ForwardOpts::default(), 16)?;
    let tail = metrics.iter().rev().take(50.min(metrics.len()));
    let tail_balance: f64 =
        tail.clone().map(|m| m.balance_loss).sum::<f64>() / tail.len().max(1) as f64;
    Ok(json!({
        "resolved": resolved_json,
        "result": {
            "checkpoint": args.out,
            "steps": metrics.len(),
            "final_train_loss": metrics.last().map(|m| m.lm_loss),
            "tail_balance_loss": tail_balance,
            "eval_loss": eval,
        }
    }))
}

fn run_eval(args: &EvalArgs) -> Result<serde_json::Value> {
    let model = checkpoint::load_model(&args.model)?;
    let (_, eval_set) =
        synthdata::gen_split(args.data_seed, args.train_examples, args.eval_examples)?;
    let opts = ForwardOpts {
        quantize_routed: !args.no_quantize,
        ablate_moe: args.ablate_moe,
    };
    let loss = train::eval_loss(&model, &eval_set, opts, args.batch_size)?;
    Ok(json!({
        "resolved": {
            "data_seed": args.data_seed,
            "train_examples": args.train_examples,
            "eval_examples": args.eval_examples,
            "ablate_moe": args.ablate_moe,
            "quantize_routed": !args.no_quantize,
        },
        "result": {
            "eval_loss": loss,
            "uniform_baseline": (synthdata::VOCAB as f64).ln(),
            "is_moe": model.is_moe(),
            "packed": model.has_packed_experts(),
        }
    }))
}

fn run_pack(args: &PackArgs) -> Result<serde_json::Value> {
    let mut model = checkpoint::load_model(&args.model)?;
    pack_routed_experts(&mut model)?;
    checkpoint::save_model(&args.out, &model)?;
    let packed = model
        .blocks
        .iter()
        .filter_map(|b| b.moe.as_ref())
        .map(|m| m.experts.len())
        .sum::<usize>();
    let bytes = fs::metadata(args.out.join(checkpoint::WEIGHTS_FILE))
        .map(|m| m.len())
        .unwrap_or(0);
    Ok(json!({
        "resolved": {},
        "result": {
            "checkpoint": args.out,
            "packed_experts": packed,
            "weights_bytes": bytes,
        }
    }))
}

fn run_ptq_shared(args: &PtqSharedArgs) -> Result<serde_json::Value> {
    let mut model = checkpoint::load_model(&args.model)?;
    ptq_shared(&mut model, args.bits.bits())?;
    checkpoint::save_model(&args.out, &model)?;
    Ok(json!({
        "resolved": { "bits": args.bits.bits() },
        "result": { "checkpoint": args.out }
    }))
}

fn run_memory_report(args: &MemoryReportArgs) -> Result<serde_json::Value> {
    let reports: Vec<upcycle::MemoryReport> = match (&args.preset, args.d_model) {
        (Some(name), _) => {
            let (d, f, l, e) = preset(name)?;
            vec![memory_report(d, f, l, e)]
        }
        (None, Some(_)) => {
            let need = |v: Option<usize>, name: &str| {
                v.ok_or_else(|| Error::Config(format!("--{name} is required without --preset")))
            };
            vec![memory_report(
                need(args.d_model, "d-model")?,
                need(args.d_ffn, "d-ffn")?,
                need(args.n_layers, "n-layers")?,
                need(args.experts, "experts")?,
            )]
        }
        (None, None) => upcycle::PRESETS
            .iter()
            .map(|&(_, d, f, l, e)| memory_report(d, f, l, e))
            .collect(),
    };
    Ok(json!({
        "resolved": { "preset": args.preset },
        "result": { "reports": reports }
    }))
}

fn run_analyze(args: &AnalyzeArgs) -> Result<serde_json::Value> {
    let model = checkpoint::load_model(&args.model)?;
    if !model.is_moe() {
        return Err(Error::Config("analyze needs a routed checkpoint".into()));
    }
    let (_, eval_set) =
        synthdata::gen_split(args.data_seed, args.train_examples, args.eval_examples)?;
    let refs: Vec<&Example> = eval_set.iter().collect();
    let enc = encode_batch(&refs);
    let (_, trace) = model.lm_forward(&enc.batch, ForwardOpts::default())?;
    let trace = analytics::RoutingTrace::collect(trace, &enc)?;
    let report = analytics::write_report_files(&args.out, &trace)?;
    Ok(json!({
        "resolved": {
            "data_seed": args.data_seed,
            "train_examples": args.train_examples,
            "eval_examples": args.eval_examples,
        },
        "result": {
            "out": args.out,
            "report": report,
        }
    }))
}

pub fn run(cli: &Cli) -> Result<serde_json::Value> {
    let (name, body) = match &cli.command {
        Command::PretrainDense(a) => ("pretrain-dense", run_pretrain_dense(a)?),
        Command::Upcycle(a) => ("upcycle", run_upcycle(a)?),
        Command::TrainMoe(a) => ("train-moe", run_train_moe(a)?),
        Command::Eval(a) => ("eval", run_eval(a)?),
        Command::Pack(a) => ("pack", run_pack(a)?),
        Command::PtqShared(a) => ("ptq-shared", run_ptq_shared(a)?),
        Command::MemoryReport(a) => ("memory-report", run_memory_report(a)?),
        Command::Analyze(a) => ("analyze", run_analyze(a)?),
    };
    let mut out = json!({ "command": name });
    out.as_object_mut()
        .unwrap()
        .extend(body.as_object().cloned().unwrap_or_default());
    Ok(out)
}

/// Stable machine-readable error envelope for exit code 1.
pub fn error_json(e: &Error) -> serde_json::Value {
    let kind = match e {
        Error::InvalidInput(_) => "invalid-input",
        Error::ShapeMismatch(_) => "shape-mismatch",
        Error::UnsupportedBitWidth(_) => "unsupported-bit-width",
        Error::InvalidCode { .. } => "invalid-code",
        Error::CorruptWeights(_) => "corrupt-weights",
        Error::AccumulatorOverflow { .. } => "accumulator-overflow",
        Error::InvalidToken { .. } => "invalid-token",
        Error::EmptyResponse(_) => "empty-response",
        Error::EmptySelection(_) => "empty-selection",
        Error::Config(_) => "config",
        Error::NonFiniteLoss { .. } => "non-finite-loss",
        Error::CorruptManifest(_) => "corrupt-manifest",
        Error::MissingTensor(_) => "missing-tensor",
        Error::UnsupportedDtype(_) => "unsupported-dtype",
        Error::Io { .. } => "io",
    };
    json!({ "error": { "kind": kind, "message": e.to_string() } })
}

/// Applies MOTE_THREADS before any parallel work happens.
pub fn apply_thread_env() -> Result<()> {
    match std::env::var("MOTE_THREADS") {
        Err(_) => Ok(()),
        Ok(s) => {
            let n: usize = s
                .parse()
                .map_err(|_| Error::Config(format!("MOTE_THREADS={s:?} is not a thread count")))?;
            if n == 0 {
                return Err(Error::Config("MOTE_THREADS must be at least 1".into()));
            }
            if !mote_core::parallel::configure_threads(n) {
                eprintln!("note: thread pool already initialized, MOTE_THREADS ignored");
            }
            Ok(())
        }
    }
}
