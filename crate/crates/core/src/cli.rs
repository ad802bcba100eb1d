//! Experiment configuration, the `MMCK` checkpoint format, and the command
//! implementations behind the `avmult` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::data::{dataset_fingerprint, generate_synthetic, load_dataset, split, subsample_training, write_dataset, Splits, SplitScheme, SyntheticSpec, UtteranceRecord};
use crate::error::{Error, Result};
use crate::masking::StaticPlans;
use crate::metrics::MetricsReport;
use crate::mult::{ModelConfig, MultModel};
use crate::numerics::{AdamState, ParamStore, Tensor};
use crate::training::{
    crop_records, finetune, pretrain_epoch, write_csv, FinetuneConfig, FinetuneModel, Optimizer, PretrainConfig, PretrainState, Task,
};

pub const SEED_ENV: &str = "AVMULT_SEED";

/// Data handling shared by all commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub split: SplitScheme,
    /// Percentage of the training split used for fine-tuning.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { split: SplitScheme::speaker_60_20_20(0), train_fraction: 100.0 }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    preset: Option<String>,
    #[serde(default)]
    model: Map<String, Value>,
    #[serde(default)]
    pretrain: Value,
    #[serde(default)]
    finetune: Value,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    baseline: Option<BaselineConfig>,
    seed: Option<u64>,
}

/// Fully resolved experiment: the preset expanded, overrides applied, and
/// one seed driving every random choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
    pub baseline: Option<BaselineConfig>,
    pub seed: u64,
}

pub const DEFAULT_PRESET: &str = "tiny";

impl ExperimentConfig {
    /// Parses a config document. `preset` and `seed` given here take
    /// precedence over the document.
    pub fn from_json(text: &str, preset: Option<&str>, seed: Option<u64>) -> Result<Self> {
        let raw: RawExperiment = serde_json::from_str(text)?;
        Self::resolve(raw, preset, seed)
    }

    pub fn load(path: Option<&Path>, preset: Option<&str>, seed: Option<u64>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_json(&text, preset, seed)
            }
            None => Self::resolve(RawExperiment::default(), preset, seed),
        }
    }

    fn resolve(raw: RawExperiment, preset: Option<&str>, seed: Option<u64>) -> Result<Self> {
        let preset = preset.map(str::to_string).or(raw.preset).unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let mut model = serde_json::to_value(ModelConfig::preset(&preset)?)?;
        let fields = model.as_object_mut().expect("model config is an object");
        for (k, v) in raw.model {
            if !fields.contains_key(&k) {
                return Err(Error::Config(format!("unknown model field `{k}`")));
            }
            fields.insert(k, v);
        }
        let model: ModelConfig = serde_json::from_value(model).map_err(|e| Error::Config(format!("model: {e}")))?;
        model.validate()?;
        let seed = seed.or(raw.seed).unwrap_or(0);
        let mut pretrain: PretrainConfig = overlay("pretrain", PretrainConfig::default(), raw.pretrain)?;
        pretrain.seed = seed;
        pretrain.schedule.validate()?;
        let mut finetune: FinetuneConfig = overlay("finetune", FinetuneConfig::default(), raw.finetune)?;
        finetune.seed = seed;
        finetune.schedule.validate()?;
        Ok(ExperimentConfig { preset, model, pretrain, finetune, data: raw.data, baseline: raw.baseline, seed })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Applies a partial JSON document on top of `base`, so omitted nested
/// fields keep the base's values rather than the nested type's defaults.
fn overlay<T: Serialize + serde::de::DeserializeOwned>(section: &str, base: T, patch: Value) -> Result<T> {
    fn merge(dst: &mut Value, src: Value) {
        match (dst, src) {
            (Value::Object(d), Value::Object(s)) => {
                for (k, v) in s {
                    match d.get_mut(&k) {
                        Some(slot) => merge(slot, v),
                        None => {
                            d.insert(k, v);
                        }
                    }
                }
            }
            (dst, src) => *dst = src,
        }
    }
    let mut value = serde_json::to_value(base)?;
    if !patch.is_null() {
        merge(&mut value, patch);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{section}: {e}")))
}

/// Field-by-field differences between two serializable configs.
pub fn config_diff<T: Serialize>(left: &T, right: &T) -> Vec<String> {
    let (a, b) = (serde_json::to_value(left).unwrap_or(Value::Null), serde_json::to_value(right).unwrap_or(Value::Null));
    let mut out = Vec::new();
    diff_values("", &a, &b, &mut out);
    out
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                diff_values(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} vs {b}")),
        _ => {}
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mult,
    EfGru,
    LfGru,
    Tfn,
}

impl Architecture {
    fn baseline_kind(self) -> Option<BaselineKind> {
        match self {
            Architecture::Mult => None,
            Architecture::EfGru => Some(BaselineKind::EfGru),
            Architecture::LfGru => Some(BaselineKind::LfGru),
            Architecture::Tfn => Some(BaselineKind::Tfn),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub architecture: Architecture,
    pub task: Option<Task>,
    pub experiment: ExperimentConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub adam_step: Option<u64>,
    pub seed: u64,
    /// Dataset fingerprint of the data the run saw.
    pub fingerprint: String,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param.";
const ADAM_M_PREFIX: &str = "adam.m.";
const ADAM_V_PREFIX: &str = "adam.v.";

/// Binary checkpoint: magic `MMCK`, u32 version, u32 length and JSON
/// metadata, then named tensors as `[u32 name length, name, u32 rank, u32
/// dims..., little-endian f32 data]`, all integers little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos as u64, detail: format!("truncated {what}: need {n} bytes") });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: &ParamStore<f32>, adam: Option<&AdamState>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = params.iter().map(|(_, n, t)| (format!("{PARAM_PREFIX}{n}"), t.clone())).collect();
        if let Some(a) = adam {
            for (prefix, buf) in [(ADAM_M_PREFIX, &a.m), (ADAM_V_PREFIX, &a.v)] {
                tensors.extend(params.iter().zip(buf).map(|((_, n, _), t)| (format!("{prefix}{n}"), t.clone())));
            }
        }
        Checkpoint { meta, tensors }
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format { offset: 0, detail: "not an MMCK checkpoint (bad magic)".into() });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { offset: 4, detail: format!("unsupported checkpoint version {version}") });
        }
        let len = r.u32("metadata length")? as usize;
        let at = r.pos;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(len, "metadata")?).map_err(|e| Error::Format { offset: at as u64, detail: format!("metadata: {e}") })?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let at = r.pos;
            let n = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
                .map_err(|_| Error::Format { offset: at as u64 + 4, detail: "tensor name is not UTF-8".into() })?;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(Error::Format { offset: r.pos as u64 - 4, detail: format!("implausible rank {rank} for {name}") });
            }
            let shape = (0..rank).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(4 * count, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    fn named(&self, prefix: &str) -> BTreeMap<&str, &Tensor<f32>> {
        self.tensors.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|k| (k, t))).collect()
    }

    /// Overwrites every parameter of `store` with the tensor of the same
    /// name. Names present in the checkpoint but not in `store` are ignored.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let saved = self.named(PARAM_PREFIX);
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = saved.get(name.as_str()).ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
            store.set(id, (*t).clone())?;
        }
        Ok(())
    }

    pub fn restore_adam(&self, store: &ParamStore<f32>) -> Result<Option<AdamState>> {
        let Some(step) = self.meta.adam_step else { return Ok(None) };
        let (m, v) = (self.named(ADAM_M_PREFIX), self.named(ADAM_V_PREFIX));
        let pick = |map: &BTreeMap<&str, &Tensor<f32>>, name: &str| {
            map.get(name).map(|t| (*t).clone()).ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state for `{name}`")))
        };
        let mut state = AdamState { m: Vec::new(), v: Vec::new(), step };
        for (_, name, _) in store.iter() {
            state.m.push(pick(&m, name)?);
            state.v.push(pick(&v, name)?);
        }
        Ok(Some(state))
    }

    /// Parameter scalars grouped by the first name component.
    pub fn component_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in self.named(PARAM_PREFIX) {
            *out.entry(name.split('.').next().unwrap_or(name).to_string()).or_insert(0) += t.len();
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named(PARAM_PREFIX).values().map(|t| t.len()).sum()
    }
}

/// Transformer backbone restored from a checkpoint's parameters.
pub fn backbone_from_checkpoint(ckpt: &Checkpoint) -> Result<MultModel> {
    if ckpt.meta.architecture != Architecture::Mult {
        return Err(Error::Config(format!("checkpoint holds a {:?} model, not a transformer", ckpt.meta.architecture)));
    }
    let mut model = MultModel::build(&ckpt.meta.experiment.model, 0)?;
    ckpt.restore_params(&mut model.params)?;
    Ok(model)
}

fn baseline_config(exp: &ExperimentConfig, kind: BaselineKind) -> BaselineConfig {
    match &exp.baseline {
        Some(b) if b.kind == kind => b.clone(),
        _ => BaselineConfig::small(kind, exp.model.audio_dim, exp.model.visual_dim),
    }
}

/// Fine-tuned model restored from a checkpoint.
pub fn finetuned_from_checkpoint(ckpt: &Checkpoint) -> Result<FinetuneModel> {
    if ckpt.meta.kind != CheckpointKind::Finetune {
        return Err(Error::Config("checkpoint is not a fine-tuned model".into()));
    }
    let task = ckpt.meta.task.ok_or_else(|| Error::Config("fine-tuned checkpoint has no task".into()))?;
    let mut model = match ckpt.meta.architecture.baseline_kind() {
        None => FinetuneModel::new(MultModel::build(&ckpt.meta.experiment.model, 0)?, task, 0)?,
        Some(kind) => FinetuneModel::baseline(&baseline_config(&ckpt.meta.experiment, kind), task, 0)?,
    };
    ckpt.restore_params(&mut model.params)?;
    Ok(model)
}

#[derive(Parser, Debug)]
#[command(name = "avmult", version, about = "Audio-visual multimodal transformer: synthetic data, pretraining, fine-tuning, evaluation")]
pub struct Cli {
    /// Seed for every random choice; defaults to the config's seed.
    #[arg(long, env = SEED_ENV, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired-modality dataset.
    Synth(SynthArgs),
    /// Masked-frame pretraining.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning with early stopping.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint on one split.
    Eval(EvalArgs),
    /// Print a checkpoint's configuration and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Best-validation checkpoint; the latest state goes to `<out>.last`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub preset: Option<String>,
    /// Continue from a `.last` checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (the schedule still spans all).
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// CSV log; defaults to `<out>.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Classify,
    Regress,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// `scratch` or a pretraining checkpoint.
    #[arg(long, default_value = "scratch")]
    pub init: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mult")]
    pub model: Architecture,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Metrics JSON; defaults to `<out>.metrics.json`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, cli.seed, out),
        Command::Pretrain(a) => cmd_pretrain(&a, cli.seed, out),
        Command::Finetune(a) => cmd_finetune(&a, cli.seed, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_synth(args: &SynthArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(p) => serde_json::from_slice(&fs::read(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let records = generate_synthetic(&spec)?;
    write_dataset(&args.out, &records)?;
    fs::write(args.out.join("synth_spec.json"), serde_json::to_vec_pretty(&spec)?)?;
    let lens: Vec<usize> = records.iter().map(|r| r.len()).collect();
    let speakers: std::collections::BTreeSet<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect();
    let mut classes = BTreeMap::new();
    for r in &records {
        *classes.entry(r.labels.class.unwrap_or(usize::MAX)).or_insert(0usize) += 1;
    }
    let stats = json!({
        "utterances": records.len(),
        "speakers": speakers.len(),
        "frames": lens.iter().sum::<usize>(),
        "min_len": lens.iter().min(),
        "max_len": lens.iter().max(),
        "class_counts": classes.values().collect::<Vec<_>>(),
        "audio_dim": spec.audio_dim,
        "visual_dim": spec.visual_dim,
        "seed": spec.seed,
        "fingerprint": dataset_fingerprint(&records),
    });
    writeln!(out, "{stats}")?;
    Ok(())
}

fn load_for(exp: &ExperimentConfig, data: &Path, crop: bool) -> Result<(Vec<UtteranceRecord>, Splits)> {
    let mut records = load_dataset(data)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} has no utterances", data.display())));
    }
    let (da, dv) = (records[0].audio.dim(), records[0].visual.dim());
    if da != exp.model.audio_dim || dv != exp.model.visual_dim {
        return Err(Error::Config(format!(
            "data has audio_dim={da}, visual_dim={dv} but the model expects {} and {}",
            exp.model.audio_dim, exp.model.visual_dim
        )));
    }
    if crop {
        records = crop_records(&records, exp.model.seq_len);
    }
    let parts = split(&records, &exp.data.split)?;
    Ok((records, parts))
}

fn read_rows_until(path: &Path, epoch: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).unwrap_or_default();
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch))
        .map(str::to_string)
        .collect())
}

pub fn cmd_pretrain(args: &PretrainArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let exp = ExperimentConfig::load(args.config.as_deref(), args.preset.as_deref(), seed)?;
    writeln!(out, "config {}", exp.to_json())?;
    let model = MultModel::build(&exp.model, exp.seed)?;
    writeln!(out, "parameters {} ({:.2}M)", model.parameter_count(), model.parameter_count() as f64 / 1e6)?;
    let (records, parts) = load_for(&exp, &args.data, true)?;
    let fingerprint = dataset_fingerprint(&records);
    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".csv"));
    let last_path = with_suffix(&args.out, ".last");

    let (mut state, mut lines) = match &args.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let diff = config_diff(&ckpt.meta.experiment, &exp);
            if !diff.is_empty() {
                return Err(Error::Config(format!("resume config differs from the checkpoint: {}", diff.join("; "))));
            }
            if ckpt.meta.fingerprint != fingerprint {
                return Err(Error::Config("resume data differs from the data the checkpoint was trained on".into()));
            }
            let mut model = model;
            ckpt.restore_params(&mut model.params)?;
            let adam = ckpt.restore_adam(&model.params)?.ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume".into()))?;
            let optimizer = Optimizer { state: adam, config: Default::default() };
            let state = PretrainState { model, optimizer, epoch: ckpt.meta.epoch, best_val: ckpt.meta.best_val, best_epoch: ckpt.meta.best_epoch };
            let lines = read_rows_until(&log_path, ckpt.meta.epoch)?;
            (state, lines)
        }
        None => (PretrainState::new(model), Vec::new()),
    };

    let cfg = &exp.pretrain;
    let val_plans = StaticPlans::build(&cfg.masking, cfg.seed, parts.validation.iter().map(|r| (r.utterance_id.as_str(), r.len())))?;
    let stop = args.stop_after.unwrap_or(usize::MAX).min(cfg.schedule.epochs);
    let meta = |state: &PretrainState| CheckpointMeta {
        kind: CheckpointKind::Pretrain,
        architecture: Architecture::Mult,
        task: None,
        experiment: exp.clone(),
        epoch: state.epoch,
        best_epoch: state.best_epoch,
        best_val: state.best_val,
        adam_step: Some(state.optimizer.state.step),
        seed: exp.seed,
        fingerprint: fingerprint.clone(),
    };
    while state.epoch < stop {
        let (tr, va, improved) = pretrain_epoch(&mut state, &parts.train, &parts.validation, &val_plans, cfg)?;
        writeln!(out, "epoch {} train {} validation {}", tr.epoch, tr.loss.unwrap_or(f64::NAN), va.loss.unwrap_or(f64::NAN))?;
        lines.push(tr.csv());
        lines.push(va.csv());
        let mut log = format!("{}\n", crate::training::CSV_HEADER);
        for l in &lines {
            log.push_str(l);
            log.push('\n');
        }
        fs::write(&log_path, log)?;
        let ckpt = Checkpoint::new(meta(&state), &state.model.params, Some(&state.optimizer.state));
        if improved {
            ckpt.save(&args.out)?;
        }
        ckpt.save(&last_path)?;
    }
    writeln!(out, "best validation {} at epoch {}", state.best_val.unwrap_or(f64::NAN), state.best_epoch)?;
    Ok(())
}

fn n_classes(records: &[UtteranceRecord]) -> Result<usize> {
    let max = records.iter().map(|r| r.labels.class.ok_or_else(|| Error::Data(format!("utterance {} has no class label", r.utterance_id)))).collect::<Result<Vec<_>>>()?;
    Ok(max.into_iter().max().unwrap_or(0) + 1)
}

pub fn cmd_finetune(args: &FinetuneArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let explicit = args.config.is_some() || args.preset.is_some();
    let mut exp = ExperimentConfig::load(args.config.as_deref(), args.preset.as_deref(), seed)?;
    let init = if args.init == "scratch" { None } else { Some(Checkpoint::load(Path::new(&args.init))?) };
    if let Some(ckpt) = &init {
        if args.model != Architecture::Mult {
            return Err(Error::Config("only the transformer can start from a pretrained checkpoint".into()));
        }
        let diff = config_diff(&ckpt.meta.experiment.model, &exp.model);
        if explicit && !diff.is_empty() {
            return Err(Error::Config(format!("init checkpoint and config disagree: {}", diff.join("; "))));
        }
        exp.model = ckpt.meta.experiment.model.clone();
    }
    if let Some(f) = args.train_fraction {
        exp.data.train_fraction = f;
    }
    if let Some(kind) = args.model.baseline_kind() {
        exp.baseline = Some(baseline_config(&exp, kind));
    }
    writeln!(out, "config {}", exp.to_json())?;
    let (records, parts) = load_for(&exp, &args.data, true)?;
    let task = match args.task {
        TaskArg::Classify => Task::Classify { n_classes: n_classes(&records)? },
        TaskArg::Regress => Task::Regress,
    };
    let model = match (&init, args.model.baseline_kind()) {
        (Some(ckpt), _) => FinetuneModel::new(backbone_from_checkpoint(ckpt)?, task, exp.seed)?,
        (None, None) => FinetuneModel::new(MultModel::build(&exp.model, exp.seed)?, task, exp.seed)?,
        (None, Some(kind)) => FinetuneModel::baseline(exp.baseline.as_ref().unwrap_or(&baseline_config(&exp, kind)), task, exp.seed)?,
    };
    writeln!(out, "parameters {}", model.params.scalar_count())?;
    let train = subsample_training(&parts.train, exp.data.train_fraction, exp.seed)?;
    let outcome = finetune(model, &train, &parts.validation, &exp.finetune)?;
    let test = outcome.model.evaluate(&parts.test)?;

    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".csv"));
    let mut log = Vec::new();
    write_csv(&mut log, &outcome.rows)?;
    fs::write(log_path, log)?;
    let meta = CheckpointMeta {
        kind: CheckpointKind::Finetune,
        architecture: args.model,
        task: Some(task),
        experiment: exp.clone(),
        epoch: outcome.rows.last().map_or(0, |r| r.epoch),
        best_epoch: outcome.best_epoch,
        best_val: Some(outcome.best_val.selection_score()),
        adam_step: None,
        seed: exp.seed,
        fingerprint: dataset_fingerprint(&records),
    };
    Checkpoint::new(meta, &outcome.model.params, None).save(&args.out)?;
    let report = json!({
        "architecture": args.model,
        "init": if init.is_some() { "pretrained" } else { "scratch" },
        "train_fraction": exp.data.train_fraction,
        "train_utterances": train.len(),
        "best_epoch": outcome.best_epoch,
        "validation": outcome.best_val,
        "test": test,
        "seed": exp.seed,
        "config": exp,
    });
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(args.metrics.clone().unwrap_or_else(|| with_suffix(&args.out, ".metrics.json")), &text)?;
    writeln!(out, "{text}")?;
    Ok(())
}

/// Metrics of a fine-tuned checkpoint on one split of a dataset.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &Path, which: SplitArg) -> Result<MetricsReport> {
    let model = finetuned_from_checkpoint(ckpt)?;
    let (_, parts) = load_for(&ckpt.meta.experiment, data, true)?;
    let records = match which {
        SplitArg::Train => &parts.train,
        SplitArg::Validation => &parts.validation,
        SplitArg::Test => &parts.test,
    };
    if records.is_empty() {
        return Err(Error::Data(format!("split {which:?} is empty")));
    }
    model.evaluate(records)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let report = evaluate_checkpoint(&ckpt, &args.data, args.split)?;
    let split_name = format!("{:?}", args.split).to_lowercase();
    let doc = json!({ "split": split_name, "metrics": report, "seed": ckpt.meta.seed, "config": ckpt.meta.experiment });
    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let m = &ckpt.meta;
    writeln!(out, "format MMCK v{CHECKPOINT_VERSION}")?;
    writeln!(out, "kind {:?} / architecture {:?} / task {:?}", m.kind, m.architecture, m.task)?;
    writeln!(out, "epoch {} (best {} at {:?})", m.epoch, m.best_epoch, m.best_val)?;
    writeln!(out, "seed {}", m.seed)?;
    writeln!(out, "fingerprint {}", m.fingerprint)?;
    writeln!(out, "config {}", m.experiment.to_json())?;
    for (component, n) in ckpt.component_counts() {
        writeln!(out, "  {component:<12} {n:>12}")?;
    }
    writeln!(out, "total parameters {}", ckpt.parameter_count())?;
    writeln!(out, "optimizer state {}", if m.adam_step.is_some() { "present" } else { "absent" })?;
    Ok(())
}
