//! Masked-frame pretraining, supervised fine-tuning with early stopping, and
//! the learning-rate schedule shared by both.

use std::io::Write;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineKind, EfGru, LfGru, Tfn};
use crate::data::UtteranceRecord;
use crate::error::{Error, Result};
use crate::masking::{derive_seed, MaskPlan, MaskingConfig, MaskingMode, StaticPlans};
use crate::metrics::MetricsReport;
use crate::mult::{ModelConfig, MultModel, MultNet};
use crate::nn::{Init, ResidualHead, Session};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamGrads, ParamId, ParamStore, Scalar, Tensor, Var};

/// Warmup-then-linear-decay schedule and loop sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule { peak_lr: 5e-4, warmup_fraction: 0.1, batch_size: 64, epochs: 30, patience: 5 }
    }
}

/// Default peak learning rate when fine-tuning.
pub const FINETUNE_LR: f64 = 1e-4;

impl TrainSchedule {
    pub fn finetune() -> Self {
        TrainSchedule { peak_lr: FINETUNE_LR, ..TrainSchedule::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be finite and non-negative", self.peak_lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_items: usize) -> usize {
        n_items.div_ceil(self.batch_size)
    }

    /// Linear ramp from 0 to the peak at `floor(warmup_fraction * total)`,
    /// then linear decay to 0 at `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step > total {
            warn!("lr requested at step {step} beyond the last step {total}; using 0");
            return 0.0;
        }
        if total == 0 {
            return 0.0;
        }
        let warm = (self.warmup_fraction * total as f64).floor() as usize;
        if step < warm {
            self.peak_lr * (step as f64 / warm as f64)
        } else {
            self.peak_lr * ((total - step) as f64 / (total - warm) as f64)
        }
    }
}

/// Adam state and hyperparameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub state: AdamState,
    pub config: AdamConfig,
}

impl Optimizer {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Optimizer { state: AdamState::new(params), config: AdamConfig::default() }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamGrads<f32>, lr: f64) -> Result<()> {
        adam_step(params, grads, &mut self.state, lr, &self.config)
    }
}

/// Mean masked-frame L1 per modality over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLossReport {
    pub l1_audio: f64,
    pub l1_visual: f64,
    pub total: f64,
}

impl PretrainLossReport {
    fn from_parts(parts: &[(f64, f64)]) -> Self {
        let n = parts.len().max(1) as f64;
        let l1_audio = parts.iter().map(|p| p.0).sum::<f64>() / n;
        let l1_visual = parts.iter().map(|p| p.1).sum::<f64>() / n;
        PretrainLossReport { l1_audio, l1_visual, total: l1_audio + l1_visual }
    }
}

/// One row of the per-epoch CSV log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub metric: Option<f64>,
    pub lr: f64,
}

pub const CSV_HEADER: &str = "epoch,split,loss,metric,lr";

impl EpochRow {
    pub fn csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|m| format!("{m:.8}")).unwrap_or_default();
        format!("{},{},{},{},{:.8e}", self.epoch, self.split, cell(self.loss), cell(self.metric), self.lr)
    }
}

pub fn write_csv(out: &mut impl Write, rows: &[EpochRow]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

/// Keeps the first `seq_len` frames of every utterance.
pub fn crop_records(records: &[UtteranceRecord], seq_len: usize) -> Vec<UtteranceRecord> {
    records
        .iter()
        .map(|r| UtteranceRecord { audio: r.audio.truncate(seq_len), visual: r.visual.truncate(seq_len), ..r.clone() })
        .collect()
}

fn check_fits(max_len: usize, records: &[&UtteranceRecord]) -> Result<()> {
    for r in records {
        if r.audio.len() != r.visual.len() {
            return Err(Error::Data(format!("utterance {} is not aligned", r.utterance_id)));
        }
        if r.len() > max_len || r.is_empty() {
            return Err(Error::Data(format!(
                "utterance {} has {} frames; the model accepts 1..={}",
                r.utterance_id,
                r.len(),
                max_len
            )));
        }
    }
    Ok(())
}

fn masked_weights<S: Scalar>(mask: &[bool], d: usize) -> Tensor<S> {
    let n = mask.iter().filter(|&&m| m).count().max(1);
    let w = S::from_f64(1.0 / (n * d) as f64).unwrap();
    Tensor::from_fn(&[mask.len(), d], |k| if mask[k / d] { w } else { S::zero() })
}

/// Masked-frame L1 of the two reconstructions against the clean targets.
pub fn reconstruction_loss<S: Scalar>(
    s: &mut Session<S>,
    net: &MultNet,
    audio_in: &Tensor<S>,
    visual_in: &Tensor<S>,
    audio_target: &Tensor<S>,
    visual_target: &Tensor<S>,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let a = s.input(audio_in.clone());
    let v = s.input(visual_in.clone());
    let out = net.forward(s, a, v)?;
    let mut l1 = |recon: Var, target: &Tensor<S>| -> Result<Var> {
        let t = s.input(target.clone());
        let diff = s.tape.sub(recon, t)?;
        let diff = s.tape.abs(diff);
        let weighted = s.tape.mul_const(diff, &masked_weights(mask, target.cols()))?;
        Ok(s.tape.sum(weighted))
    };
    Ok((l1(out.audio_recon, audio_target)?, l1(out.visual_recon, visual_target)?))
}

fn item_pretrain_grads(
    model: &MultModel,
    rec: &UtteranceRecord,
    plan: &MaskPlan,
    scale: f32,
    dropout_seed: Option<u64>,
) -> Result<((f64, f64), Option<ParamGrads<f32>>)> {
    let corrupted = plan.apply(&rec.audio.frames, &rec.visual.frames)?;
    let mut s = match dropout_seed {
        Some(seed) => Session::train(&model.params, model.config().dropout, seed),
        None => Session::eval(&model.params),
    };
    let (la, lv) = reconstruction_loss(
        &mut s,
        &model.net,
        &corrupted.audio,
        &corrupted.visual,
        &rec.audio.frames,
        &rec.visual.frames,
        &corrupted.target_mask,
    )?;
    let parts = (s.tape.value(la).item() as f64, s.tape.value(lv).item() as f64);
    if dropout_seed.is_none() {
        return Ok((parts, None));
    }
    let total = s.tape.add(la, lv)?;
    let root = s.tape.scale(total, scale);
    let grads = s.tape.backward(root)?.param_grads(model.params.len());
    Ok((parts, Some(grads)))
}

/// Finite-difference check of the whole model in 64-bit precision: the
/// masked reconstruction loss of the transformer, plus cross-entropy through a
/// classification head on the fused output. Returns the worst relative error
/// over every parameter element.
pub fn end_to_end_gradient_check(config: &ModelConfig, t: usize, seed: u64) -> Result<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = |d: usize| Tensor::<f64>::from_fn(&[t, d], |_| rng.random_range(-1.0..1.0));
    let (audio, visual) = (frames(config.audio_dim), frames(config.visual_dim));
    let plan = MaskingConfig::default().plan(MaskingMode::Static, seed, 0, "gradcheck", t)?;
    let corrupted = plan.apply(&audio.cast::<f32>(), &visual.cast::<f32>())?;
    let (a_in, v_in) = (corrupted.audio.cast::<f64>(), corrupted.visual.cast::<f64>());

    let model = MultModel::build(config, seed)?;
    let params = model.params.cast::<f64>();
    let recon = crate::nn::check_param_gradients(&params, 1e-6, |s| {
        let (la, lv) = reconstruction_loss(s, &model.net, &a_in, &v_in, &audio, &visual, &corrupted.target_mask)?;
        s.tape.add(la, lv)
    })?;

    let classifier = FinetuneModel::new(model, Task::Classify { n_classes: 3 }, seed)?;
    let params = classifier.params.cast::<f64>();
    let classify = crate::nn::check_param_gradients(&params, 1e-6, |s| {
        let logits = classifier.forward(s, &audio, &visual)?;
        s.tape.cross_entropy(logits, &[2])
    })?;
    Ok(recon.max(classify))
}

/// One optimizer update on a batch: every utterance runs on its own tape in
/// parallel and gradients are summed in batch order.
pub fn pretrain_step(
    model: &mut MultModel,
    batch: &[&UtteranceRecord],
    plans: &[MaskPlan],
    optimizer: &mut Optimizer,
    lr: f64,
    step_seed: u64,
) -> Result<PretrainLossReport> {
    if batch.is_empty() || batch.len() != plans.len() {
        return Err(Error::Training(format!("{} utterances with {} plans", batch.len(), plans.len())));
    }
    check_fits(model.config().seq_len, batch)?;
    for (r, p) in batch.iter().zip(plans) {
        if r.utterance_id != p.utterance_id || r.len() != p.t {
            return Err(Error::Training(format!("plan for {} (T={}) does not match {}", p.utterance_id, p.t, r.utterance_id)));
        }
    }
    let scale = 1.0 / batch.len() as f32;
    let model_ref = &*model;
    let results: Vec<_> = batch
        .par_iter()
        .zip(plans.par_iter())
        .enumerate()
        .map(|(i, (r, p))| item_pretrain_grads(model_ref, r, p, scale, Some(derive_seed(&[b"dropout", &step_seed.to_le_bytes(), &(i as u64).to_le_bytes()]))))
        .collect::<Result<_>>()?;
    let parts: Vec<(f64, f64)> = results.iter().map(|r| r.0).collect();
    let report = PretrainLossReport::from_parts(&parts);
    let mut grads = ParamGrads::empty(model.params.len());
    for (_, g) in &results {
        grads.merge(g.as_ref().expect("training pass returns gradients"));
    }
    if !report.total.is_finite() || !grads.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|r| r.utterance_id.as_str()).collect();
        return Err(Error::Training(format!(
            "non-finite pretraining loss {} at lr {lr:.3e}, step seed {step_seed}, batch {ids:?}",
            report.total
        )));
    }
    optimizer.step(&mut model.params, &grads, lr)?;
    Ok(report)
}

/// Masked L1 without dropout or updates.
pub fn evaluate_masked_l1(model: &MultModel, records: &[UtteranceRecord], plans: &StaticPlans) -> Result<PretrainLossReport> {
    let refs: Vec<&UtteranceRecord> = records.iter().collect();
    check_fits(model.config().seq_len, &refs)?;
    let parts: Vec<(f64, f64)> = records
        .par_iter()
        .map(|r| {
            let plan = plans.get(&r.utterance_id).ok_or_else(|| Error::Data(format!("no static plan for {}", r.utterance_id)))?;
            Ok(item_pretrain_grads(model, r, plan, 1.0, None)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(PretrainLossReport::from_parts(&parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub schedule: TrainSchedule,
    pub masking: MaskingConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { schedule: TrainSchedule::default(), masking: MaskingConfig::default(), seed: 0 }
    }
}

/// Mutable state of a pretraining run; everything needed to resume.
#[derive(Clone, Debug)]
pub struct PretrainState {
    pub model: MultModel,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
}

impl PretrainState {
    pub fn new(model: MultModel) -> Self {
        let optimizer = Optimizer::new(&model.params);
        PretrainState { model, optimizer, epoch: 0, best_val: None, best_epoch: 0 }
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[b"order", &seed.to_le_bytes(), &(epoch as u64).to_le_bytes()])));
    order
}

/// Runs one pretraining epoch and the validation pass. Returns the train and
/// validation rows, and whether validation improved.
pub fn pretrain_epoch(
    state: &mut PretrainState,
    train: &[UtteranceRecord],
    val: &[UtteranceRecord],
    val_plans: &StaticPlans,
    cfg: &PretrainConfig,
) -> Result<(EpochRow, EpochRow, bool)> {
    let sched = &cfg.schedule;
    let steps = sched.steps_per_epoch(train.len());
    let total = steps * sched.epochs;
    let epoch = state.epoch;
    let order = epoch_order(train.len(), cfg.seed, epoch);
    let mut reports = Vec::with_capacity(steps);
    let mut lr = 0.0;
    for (b, chunk) in order.chunks(sched.batch_size).enumerate() {
        let global = epoch * steps + b;
        lr = sched.lr_at(global + 1, total);
        let batch: Vec<&UtteranceRecord> = chunk.iter().map(|&i| &train[i]).collect();
        let plans = batch
            .iter()
            .map(|r| cfg.masking.plan(MaskingMode::Dynamic, cfg.seed, epoch, &r.utterance_id, r.len()))
            .collect::<Result<Vec<_>>>()?;
        let step_seed = derive_seed(&[b"step", &cfg.seed.to_le_bytes(), &(global as u64).to_le_bytes()]);
        reports.push((pretrain_step(&mut state.model, &batch, &plans, &mut state.optimizer, lr, step_seed)?, chunk.len()));
    }
    let n: usize = reports.iter().map(|r| r.1).sum();
    let train_loss = reports.iter().map(|(r, k)| r.total * *k as f64).sum::<f64>() / n as f64;
    let val_report = evaluate_masked_l1(&state.model, val, val_plans)?;
    state.epoch += 1;
    let improved = state.best_val.is_none_or(|b| val_report.total < b);
    if improved {
        state.best_val = Some(val_report.total);
        state.best_epoch = state.epoch;
    }
    let row = |split: &str, loss: f64| EpochRow { epoch: state.epoch, split: split.into(), loss: Some(loss), metric: None, lr };
    Ok((row("train", train_loss), row("validation", val_report.total), improved))
}

/// Outcome of a full pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub state: PretrainState,
    /// Parameters of the best validation epoch.
    pub best_params: ParamStore<f32>,
    pub rows: Vec<EpochRow>,
    /// Validation masked L1 after each epoch.
    pub val_curve: Vec<f64>,
}

pub fn pretrain(model: MultModel, train: &[UtteranceRecord], val: &[UtteranceRecord], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.schedule.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("pretraining needs non-empty train and validation sets".into()));
    }
    let val_plans = StaticPlans::build(&cfg.masking, cfg.seed, val.iter().map(|r| (r.utterance_id.as_str(), r.len())))?;
    let mut state = PretrainState::new(model);
    let mut best_params = state.model.params.clone();
    let mut rows = Vec::new();
    let mut val_curve = Vec::new();
    while state.epoch < cfg.schedule.epochs {
        let (tr, va, improved) = pretrain_epoch(&mut state, train, val, &val_plans, cfg)?;
        log::info!("epoch {} train {:.5} val {:.5}", tr.epoch, tr.loss.unwrap_or(f64::NAN), va.loss.unwrap_or(f64::NAN));
        val_curve.push(va.loss.unwrap_or(f64::NAN));
        rows.push(tr);
        rows.push(va);
        if improved {
            best_params = state.model.params.clone();
        }
    }
    Ok(PretrainOutcome { state, best_params, rows, val_curve })
}

/// Supervised target kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Task {
    Classify { n_classes: usize },
    /// Arousal and valence.
    Regress,
}

pub const REGRESSION_TARGETS: [&str; 2] = ["arousal", "valence"];

impl Task {
    pub fn n_outputs(self) -> usize {
        match self {
            Task::Classify { n_classes } => n_classes,
            Task::Regress => REGRESSION_TARGETS.len(),
        }
    }

    fn check_labels(self, records: &[UtteranceRecord]) -> Result<()> {
        for r in records {
            let ok = match self {
                Task::Classify { n_classes } => r.labels.class.is_some_and(|c| c < n_classes),
                Task::Regress => r.labels.affect().is_some(),
            };
            if !ok {
                return Err(Error::Data(format!("utterance {} lacks a valid label for {self:?}", r.utterance_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionLoss {
    /// One minus the batch CCC, averaged over targets.
    Ccc,
    Mse,
}

/// Trainable architecture behind a supervised head.
#[derive(Clone, Debug)]
pub enum Network {
    /// Transformer backbone with a residual head on the last fused frame.
    Mult { net: MultNet, head: ResidualHead },
    EfGru(EfGru),
    LfGru(LfGru),
    Tfn(Tfn),
}

/// A network with its parameters and task.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub network: Network,
    pub params: ParamStore<f32>,
    pub task: Task,
    /// Parameters below this index belong to the backbone.
    pub backbone_len: usize,
    pub dropout: f64,
}

/// Name prefix of the task head parameters.
pub const HEAD_PREFIX: &str = "task_head";

impl FinetuneModel {
    pub fn new(backbone: MultModel, task: Task, seed: u64) -> Result<Self> {
        let backbone_len = backbone.params.len();
        let width = backbone.config().self_stack_dim();
        let dropout = backbone.config().dropout;
        let mut init = Init::from_store(backbone.params, seed);
        let head = ResidualHead::new(&mut init, HEAD_PREFIX, width, task.n_outputs())?;
        Ok(FinetuneModel { network: Network::Mult { net: backbone.net, head }, params: init.store, task, backbone_len, dropout })
    }

    pub fn baseline(config: &BaselineConfig, task: Task, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let (a, v, h, l, p, n) = (config.audio_dim, config.visual_dim, config.hidden, config.layers, config.dropout, task.n_outputs());
        let network = match config.kind {
            BaselineKind::EfGru => Network::EfGru(EfGru::new(&mut init, a, v, h, l, p, n)?),
            BaselineKind::LfGru => Network::LfGru(LfGru::new(&mut init, a, v, h, l, p, n)?),
            BaselineKind::Tfn => Network::Tfn(Tfn::new(&mut init, a, v, h, n)?),
        };
        let backbone_len = init.store.iter().take_while(|(_, name, _)| !name.starts_with(HEAD_PREFIX)).count();
        Ok(FinetuneModel { network, params: init.store, task, backbone_len, dropout: config.dropout })
    }

    /// Transformer configuration, when the network is one.
    pub fn mult_config(&self) -> Option<&ModelConfig> {
        match &self.network {
            Network::Mult { net, .. } => Some(&net.config),
            _ => None,
        }
    }

    pub fn is_backbone(&self, id: ParamId) -> bool {
        id.index() < self.backbone_len
    }

    /// Longest accepted sequence.
    pub fn max_len(&self) -> usize {
        self.mult_config().map_or(usize::MAX, |c| c.seq_len)
    }

    /// `[1, n_outputs]` prediction for one utterance.
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, audio: &Tensor<S>, visual: &Tensor<S>) -> Result<Var> {
        let a = s.input(audio.clone());
        let v = s.input(visual.clone());
        match &self.network {
            Network::Mult { net, head } => {
                let out = net.forward(s, a, v)?;
                let t = s.tape.shape(out.fused)[0];
                let last = s.tape.slice_rows(out.fused, t - 1, 1)?;
                head.forward(s, last)
            }
            Network::EfGru(m) => m.forward(s, a, v),
            Network::LfGru(m) => m.forward(s, a, v),
            Network::Tfn(m) => m.forward(s, a, v),
        }
    }

    pub fn predict(&self, r: &UtteranceRecord) -> Result<Vec<f32>> {
        let mut s = Session::eval(&self.params);
        let y = self.forward(&mut s, &r.audio.frames, &r.visual.frames)?;
        Ok(s.tape.value(y).data().to_vec())
    }

    pub fn evaluate(&self, records: &[UtteranceRecord]) -> Result<MetricsReport> {
        if records.is_empty() {
            return Err(Error::Data("cannot evaluate on an empty split".into()));
        }
        self.task.check_labels(records)?;
        let refs: Vec<&UtteranceRecord> = records.iter().collect();
        check_fits(self.max_len(), &refs)?;
        let preds: Vec<Vec<f32>> = records.par_iter().map(|r| self.predict(r)).collect::<Result<_>>()?;
        match self.task {
            Task::Classify { .. } => {
                let p: Vec<usize> = preds.iter().map(|row| argmax(row)).collect();
                let t: Vec<usize> = records.iter().map(|r| r.labels.class.unwrap()).collect();
                MetricsReport::classification(&p, &t)
            }
            Task::Regress => {
                let p: Vec<Vec<f64>> = preds.iter().map(|row| row.iter().map(|&x| x as f64).collect()).collect();
                let t: Vec<Vec<f64>> = records.iter().map(|r| r.labels.affect().unwrap().to_vec()).collect();
                MetricsReport::regression(&REGRESSION_TARGETS, &p, &t)
            }
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &x)| if x > row[best] { i } else { best })
}

/// `(1 - mean_k CCC_k, d loss / d pred)` over a batch of predictions
/// `preds[i][k]` against `truths[i][k]`.
pub fn ccc_loss(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = preds.len();
    let k = preds.first().map_or(0, |p| p.len());
    let nf = n as f64;
    let mut grad = vec![vec![0.0; k]; n];
    let mut total = 0.0;
    for j in 0..k {
        let x: Vec<f64> = preds.iter().map(|p| p[j]).collect();
        let y: Vec<f64> = truths.iter().map(|t| t[j]).collect();
        let mx = x.iter().sum::<f64>() / nf;
        let my = y.iter().sum::<f64>() / nf;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / nf;
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / nf;
        let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / nf;
        let num = 2.0 * cov;
        let den = (vx + vy + (mx - my).powi(2)).max(1e-12);
        total += num / den;
        for i in 0..n {
            let dnum = 2.0 * (y[i] - my) / nf;
            let dden = 2.0 * (x[i] - mx) / nf + 2.0 * (mx - my) / nf;
            grad[i][j] = -(dnum * den - num * dden) / (den * den) / k as f64;
        }
    }
    (1.0 - total / k as f64, grad)
}

/// Mean squared error over items and targets, with its gradient.
pub fn mse_loss(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let count = preds.iter().map(|p| p.len()).sum::<usize>().max(1) as f64;
    let mut loss = 0.0;
    let grad = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(a, b)| {
                    loss += (a - b).powi(2) / count;
                    2.0 * (a - b) / count
                })
                .collect()
        })
        .collect();
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub schedule: TrainSchedule,
    pub regression_loss: RegressionLoss,
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { schedule: TrainSchedule::finetune(), regression_loss: RegressionLoss::Ccc, freeze_backbone: false, seed: 0 }
    }
}

/// Result of fine-tuning: the model restored to its best validation epoch.
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: FinetuneModel,
    pub best_epoch: usize,
    pub best_val: MetricsReport,
    pub rows: Vec<EpochRow>,
    /// Validation selection score after each epoch.
    pub val_curve: Vec<f64>,
}

fn finetune_batch(model: &mut FinetuneModel, batch: &[&UtteranceRecord], opt: &mut Optimizer, lr: f64, step_seed: u64, cfg: &FinetuneConfig) -> Result<f64> {
    let dropout = model.dropout;
    let scale = 1.0 / batch.len() as f32;
    let m = &*model;
    let n_params = m.params.len();
    let mut grads = ParamGrads::empty(n_params);
    let loss = match m.task {
        Task::Classify { .. } => {
            let results: Vec<(f64, ParamGrads<f32>)> = batch
                .par_iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut s = Session::train(&m.params, dropout, derive_seed(&[&step_seed.to_le_bytes(), &(i as u64).to_le_bytes()]));
                    let logits = m.forward(&mut s, &r.audio.frames, &r.visual.frames)?;
                    let ce = s.tape.cross_entropy(logits, &[r.labels.class.unwrap()])?;
                    let value = s.tape.value(ce).item() as f64;
                    let root = s.tape.scale(ce, scale);
                    Ok((value, s.tape.backward(root)?.param_grads(n_params)))
                })
                .collect::<Result<_>>()?;
            for (_, g) in &results {
                grads.merge(g);
            }
            results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64
        }
        Task::Regress => {
            let mut sessions: Vec<(Session<f32>, Var)> = batch
                .par_iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut s = Session::train(&m.params, dropout, derive_seed(&[&step_seed.to_le_bytes(), &(i as u64).to_le_bytes()]));
                    let y = m.forward(&mut s, &r.audio.frames, &r.visual.frames)?;
                    Ok((s, y))
                })
                .collect::<Result<_>>()?;
            let preds: Vec<Vec<f64>> = sessions.iter().map(|(s, y)| s.tape.value(*y).data().iter().map(|&x| x as f64).collect()).collect();
            let truths: Vec<Vec<f64>> = batch.iter().map(|r| r.labels.affect().unwrap().to_vec()).collect();
            let (loss, dpred) = match cfg.regression_loss {
                RegressionLoss::Ccc => ccc_loss(&preds, &truths),
                RegressionLoss::Mse => mse_loss(&preds, &truths),
            };
            let results: Vec<ParamGrads<f32>> = sessions
                .par_iter_mut()
                .zip(dpred.par_iter())
                .map(|((s, y), g)| {
                    let seed = Tensor::new(&[1, g.len()], g.iter().map(|&v| v as f32).collect())?;
                    Ok(s.tape.backward_with(*y, seed)?.param_grads(n_params))
                })
                .collect::<Result<_>>()?;
            for g in &results {
                grads.merge(g);
            }
            loss
        }
    };
    if !loss.is_finite() || !grads.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|r| r.utterance_id.as_str()).collect();
        return Err(Error::Training(format!("non-finite fine-tuning loss {loss} at lr {lr:.3e}, batch {ids:?}")));
    }
    if cfg.freeze_backbone {
        let cut = model.backbone_len;
        grads.retain(|id| id.index() >= cut);
    }
    opt.step(&mut model.params, &grads, lr)?;
    Ok(loss)
}

/// Trains with early stopping on the validation selection score (accuracy or
/// mean CCC) and returns the best epoch's parameters.
pub fn finetune(mut model: FinetuneModel, train: &[UtteranceRecord], val: &[UtteranceRecord], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    let sched = &cfg.schedule;
    sched.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("fine-tuning needs non-empty train and validation splits".into()));
    }
    model.task.check_labels(train)?;
    model.task.check_labels(val)?;
    let refs: Vec<&UtteranceRecord> = train.iter().chain(val).collect();
    check_fits(model.max_len(), &refs)?;

    let mut opt = Optimizer::new(&model.params);
    let steps = sched.steps_per_epoch(train.len());
    let total = steps * sched.epochs;
    let mut best: Option<(f64, FinetuneModel, usize, MetricsReport)> = None;
    let mut rows = Vec::new();
    let mut val_curve = Vec::new();
    for epoch in 0..sched.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut lr = 0.0;
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(sched.batch_size).enumerate() {
            let global = epoch * steps + b;
            lr = sched.lr_at(global + 1, total);
            let batch: Vec<&UtteranceRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let step_seed = derive_seed(&[b"finetune", &cfg.seed.to_le_bytes(), &(global as u64).to_le_bytes()]);
            loss_sum += finetune_batch(&mut model, &batch, &mut opt, lr, step_seed, cfg)? * chunk.len() as f64;
        }
        let report = model.evaluate(val)?;
        let score = report.selection_score();
        rows.push(EpochRow { epoch: epoch + 1, split: "train".into(), loss: Some(loss_sum / train.len() as f64), metric: None, lr });
        rows.push(EpochRow { epoch: epoch + 1, split: "validation".into(), loss: None, metric: Some(score), lr });
        val_curve.push(score);
        match &best {
            Some((b, _, best_epoch, _)) if score <= *b => {
                if epoch + 1 - best_epoch >= sched.patience {
                    break;
                }
            }
            _ => best = Some((score, model.clone(), epoch + 1, report)),
        }
    }
    let (_, model, best_epoch, best_val) = best.expect("at least one epoch ran");
    Ok(FinetuneOutcome { model, best_epoch, best_val, rows, val_curve })
}

/// Fine-tuning on class labels.
pub fn finetune_classification(model: FinetuneModel, train: &[UtteranceRecord], val: &[UtteranceRecord], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    if !matches!(model.task, Task::Classify { .. }) {
        return Err(Error::Config("model head is not a classification head".into()));
    }
    finetune(model, train, val, cfg)
}

/// Fine-tuning on arousal/valence targets.
pub fn finetune_regression(model: FinetuneModel, train: &[UtteranceRecord], val: &[UtteranceRecord], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    if model.task != Task::Regress {
        return Err(Error::Config("model head is not a regression head".into()));
    }
    finetune(model, train, val, cfg)
}

/// Test-set score of one fine-tuning run pair (accuracy or mean CCC).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub task: String,
    pub train_fraction: f64,
    pub scratch: f64,
    pub pretrained: f64,
}

impl TransferResult {
    pub fn gap(&self) -> f64 {
        self.pretrained - self.scratch
    }
}

/// Pretrains on the training split, then fine-tunes both the pretrained
/// backbone and an identically initialized fresh one for each task and
/// training fraction. Everything derives from `seed`.
pub fn transfer_trial(
    splits: &crate::data::Splits,
    model: &ModelConfig,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<TransferResult>> {
    let pre = pretrain(MultModel::build(model, seed)?, &splits.train, &splits.validation, &PretrainConfig { seed, ..PretrainConfig::default() })?;
    let mut pretrained = MultModel::build(model, seed)?;
    pretrained.params = pre.best_params;
    let n_classes = splits.train.iter().filter_map(|r| r.labels.class).max().map_or(2, |c| c + 1);
    let cfg = FinetuneConfig { seed, ..FinetuneConfig::default() };
    let mut out = Vec::new();
    for (name, task) in [("classify", Task::Classify { n_classes }), ("regress", Task::Regress)] {
        for &fraction in fractions {
            let train = crate::data::subsample_training(&splits.train, fraction, seed)?;
            let score = |backbone: MultModel| -> Result<f64> {
                let run = finetune(FinetuneModel::new(backbone, task, seed)?, &train, &splits.validation, &cfg)?;
                Ok(run.model.evaluate(&splits.test)?.selection_score())
            };
            out.push(TransferResult {
                task: name.to_string(),
                train_fraction: fraction,
                scratch: score(MultModel::build(model, seed)?)?,
                pretrained: score(pretrained.clone())?,
            });
        }
    }
    Ok(out)
}
