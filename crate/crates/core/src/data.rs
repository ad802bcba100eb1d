//! Feature sequences, the preprocessing pipeline (confidence filter →
//! downsample → alignment), dataset splits, the synthetic paired-modality
//! generator, and the on-disk feature container and manifest formats.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::Modality;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frames per second as a rational number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRate {
    pub num: u32,
    pub den: u32,
}

impl FrameRate {
    pub fn hz(hz: u32) -> Self {
        FrameRate { num: hz, den: 1 }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Common rate both modalities are brought to.
pub const COMMON_RATE: FrameRate = FrameRate { num: 5, den: 1 };
pub const CONFIDENCE_THRESHOLD: f32 = 0.8;
pub const MAX_SKEW_SECONDS: f64 = 1.0;

/// One modality's frame-by-feature matrix with timing.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub frame_rate: FrameRate,
    pub frames: Tensor<f32>,
    /// Per-frame time in seconds; survives frame dropping.
    pub timestamps: Vec<f64>,
    pub confidence: Option<Vec<f32>>,
    pub start_time: f64,
}

impl FeatureSequence {
    /// Uniformly timed sequence starting at zero.
    pub fn new(modality: Modality, frame_rate: FrameRate, frames: Tensor<f32>, confidence: Option<Vec<f32>>) -> Result<Self> {
        if frame_rate.num == 0 || frame_rate.den == 0 {
            return Err(Error::Data("frame rate must be positive".into()));
        }
        if frames.rank() != 2 {
            return Err(Error::shape("feature_sequence", format!("frames must be [T, D], got {:?}", frames.shape())));
        }
        let t = frames.rows();
        if let Some(c) = &confidence {
            if c.len() != t {
                return Err(Error::Data(format!("{} confidences for {} frames", c.len(), t)));
            }
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data("confidence values must lie in [0, 1]".into()));
            }
        }
        let rate = frame_rate.as_f64();
        let timestamps = (0..t).map(|i| i as f64 / rate).collect();
        Ok(FeatureSequence { modality, frame_rate, frames, timestamps, confidence, start_time: 0.0 })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// First `t` frames.
    pub fn truncate(&self, t: usize) -> FeatureSequence {
        let t = t.min(self.len());
        FeatureSequence {
            frames: self.frames.slice_rows(0, t),
            timestamps: self.timestamps[..t].to_vec(),
            confidence: self.confidence.as_ref().map(|c| c[..t].to_vec()),
            ..self.clone()
        }
    }
}

/// Drops frames whose detection confidence is below `threshold`.
pub fn confidence_filter(seq: &FeatureSequence, threshold: f32) -> Result<FeatureSequence> {
    let conf = seq
        .confidence
        .as_ref()
        .ok_or_else(|| Error::Data("confidence filter needs per-frame confidences".into()))?;
    let keep: Vec<usize> = (0..seq.len()).filter(|&i| conf[i] >= threshold).collect();
    if keep.is_empty() {
        return Err(Error::Data(format!("every frame fell below confidence {threshold}")));
    }
    let d = seq.dim();
    let mut data = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        data.extend_from_slice(seq.frames.row(i));
    }
    Ok(FeatureSequence {
        frames: Tensor::new(&[keep.len(), d], data)?,
        timestamps: keep.iter().map(|&i| seq.timestamps[i]).collect(),
        confidence: Some(keep.iter().map(|&i| conf[i]).collect()),
        ..seq.clone()
    })
}

/// Bins frames by the target period and averages each bin. Bins that end up
/// without any source frame are zero-filled and get confidence 0.
pub fn downsample(seq: &FeatureSequence, target: FrameRate) -> Result<FeatureSequence> {
    let (src_rate, dst_rate) = (seq.frame_rate.as_f64(), target.as_f64());
    if dst_rate > src_rate {
        return Err(Error::Data(format!("cannot downsample from {src_rate} Hz to a higher rate {dst_rate} Hz")));
    }
    if seq.is_empty() {
        return Err(Error::Data("cannot downsample an empty sequence".into()));
    }
    let bin_of = |ts: f64| ((ts - seq.start_time) * dst_rate + 1e-9).floor().max(0.0) as usize;
    let n_bins = bin_of(*seq.timestamps.last().unwrap()) + 1;
    let d = seq.dim();
    let mut sums = vec![0.0f64; n_bins * d];
    let mut counts = vec![0usize; n_bins];
    let mut conf_sums = vec![0.0f64; n_bins];
    for i in 0..seq.len() {
        let b = bin_of(seq.timestamps[i]);
        counts[b] += 1;
        conf_sums[b] += seq.confidence.as_ref().map_or(1.0, |c| c[i] as f64);
        for (s, &x) in sums[b * d..(b + 1) * d].iter_mut().zip(seq.frames.row(i)) {
            *s += x as f64;
        }
    }
    let data = (0..n_bins * d)
        .map(|k| if counts[k / d] == 0 { 0.0 } else { (sums[k] / counts[k / d] as f64) as f32 })
        .collect();
    let any_missing = counts.iter().any(|&c| c == 0);
    let confidence = if seq.confidence.is_none() && !any_missing {
        None
    } else {
        Some((0..n_bins).map(|b| if counts[b] == 0 { 0.0 } else { (conf_sums[b] / counts[b] as f64) as f32 }).collect())
    };
    Ok(FeatureSequence {
        modality: seq.modality,
        frame_rate: target,
        frames: Tensor::new(&[n_bins, d], data)?,
        timestamps: (0..n_bins).map(|b| seq.start_time + b as f64 / dst_rate).collect(),
        confidence,
        start_time: seq.start_time,
    })
}

/// Per-utterance supervision targets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub arousal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valence: Option<f64>,
}

impl Labels {
    pub fn affect(&self) -> Option<[f64; 2]> {
        Some([self.arousal?, self.valence?])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub session_id: Option<String>,
    pub audio: FeatureSequence,
    pub visual: FeatureSequence,
    pub labels: Labels,
}

impl UtteranceRecord {
    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Alignment {
    Accepted(UtteranceRecord),
    Rejected { utterance_id: String, reason: String },
}

/// Accepts pairs whose lengths differ by at most `max_skew` seconds (5
/// frames at 5 Hz) and trims both to the shorter length.
pub fn alignment_check(
    utterance_id: &str,
    speaker_id: &str,
    audio: &FeatureSequence,
    visual: &FeatureSequence,
    max_skew: f64,
) -> Result<Alignment> {
    if audio.frame_rate != visual.frame_rate {
        return Err(Error::Data(format!(
            "alignment needs a common frame rate, got {:?} and {:?}",
            audio.frame_rate, visual.frame_rate
        )));
    }
    let max_frames = (max_skew * audio.frame_rate.as_f64()).round() as usize;
    let (ta, tv) = (audio.len(), visual.len());
    let skew = ta.abs_diff(tv);
    if skew > max_frames {
        return Ok(Alignment::Rejected {
            utterance_id: utterance_id.to_string(),
            reason: format!("audio has {ta} frames, visual {tv}: skew of {skew} frames exceeds {max_frames}"),
        });
    }
    let t = ta.min(tv);
    Ok(Alignment::Accepted(UtteranceRecord {
        utterance_id: utterance_id.to_string(),
        speaker_id: speaker_id.to_string(),
        session_id: None,
        audio: audio.truncate(t),
        visual: visual.truncate(t),
        labels: Labels::default(),
    }))
}

/// Parameters of the fixed preprocessing order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub confidence_threshold: f32,
    pub target_rate: FrameRate,
    pub max_skew_seconds: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { confidence_threshold: CONFIDENCE_THRESHOLD, target_rate: COMMON_RATE, max_skew_seconds: MAX_SKEW_SECONDS }
    }
}

impl PipelineConfig {
    /// Filters the visual stream by confidence, brings both streams to the
    /// common rate, then runs the alignment check.
    pub fn run(&self, utterance_id: &str, speaker_id: &str, audio: &FeatureSequence, visual: &FeatureSequence) -> Result<Alignment> {
        let visual = match &visual.confidence {
            Some(_) => confidence_filter(visual, self.confidence_threshold)?,
            None => visual.clone(),
        };
        let visual = downsample(&visual, self.target_rate)?;
        let audio = downsample(audio, self.target_rate)?;
        alignment_check(utterance_id, speaker_id, &audio, &visual, self.max_skew_seconds)
    }

    /// Hash of the pipeline parameters and an input pair, stable across runs.
    pub fn fingerprint(&self, audio: &FeatureSequence, visual: &FeatureSequence) -> String {
        let mut h = Sha256::new();
        h.update(b"filter>downsample>align");
        h.update(serde_json::to_vec(self).expect("pipeline config serializes"));
        for s in [audio, visual] {
            for x in s.frames.data() {
                h.update(x.to_le_bytes());
            }
            for x in &s.timestamps {
                h.update(x.to_le_bytes());
            }
            if let Some(c) = &s.confidence {
                for x in c {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// How records are partitioned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitScheme {
    /// Speaker-disjoint partition with the given fractions.
    SpeakerRatio { train: f64, validation: f64, test: f64, seed: u64 },
    /// Fixed session ids per partition.
    Sessions { train: Vec<String>, validation: Vec<String>, test: Vec<String> },
}

impl SplitScheme {
    pub fn speaker_60_20_20(seed: u64) -> Self {
        SplitScheme::SpeakerRatio { train: 0.6, validation: 0.2, test: 0.2, seed }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<UtteranceRecord>,
    pub validation: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

pub fn split(records: &[UtteranceRecord], scheme: &SplitScheme) -> Result<Splits> {
    let mut out = Splits::default();
    match scheme {
        SplitScheme::SpeakerRatio { train, validation, test, seed } => {
            let total = train + validation + test;
            if (total - 1.0).abs() > 1e-9 || [train, validation, test].iter().any(|&&f| f < 0.0) {
                return Err(Error::Config(format!("split fractions {train}/{validation}/{test} must be non-negative and sum to 1")));
            }
            let mut speakers: Vec<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
            let n = speakers.len();
            let n_train = (train * n as f64).round() as usize;
            let n_val = (validation * n as f64).round() as usize;
            if n_train == 0 || n_val == 0 || n_train + n_val >= n {
                return Err(Error::Data(format!("{n} speakers are too few for a speaker-disjoint {train}/{validation}/{test} split")));
            }
            speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let part: BTreeMap<&str, usize> = speakers
                .iter()
                .enumerate()
                .map(|(i, s)| (*s, if i < n_train { 0 } else if i < n_train + n_val { 1 } else { 2 }))
                .collect();
            for r in records {
                match part[r.speaker_id.as_str()] {
                    0 => out.train.push(r.clone()),
                    1 => out.validation.push(r.clone()),
                    _ => out.test.push(r.clone()),
                }
            }
        }
        SplitScheme::Sessions { train, validation, test } => {
            for r in records {
                let session = r
                    .session_id
                    .as_deref()
                    .ok_or_else(|| Error::Data(format!("utterance {} has no session id", r.utterance_id)))?;
                let has = |v: &Vec<String>| v.iter().any(|s| s == session);
                if has(train) {
                    out.train.push(r.clone());
                } else if has(validation) {
                    out.validation.push(r.clone());
                } else if has(test) {
                    out.test.push(r.clone());
                }
            }
            if out.train.is_empty() || out.validation.is_empty() || out.test.is_empty() {
                return Err(Error::Data("session split left a partition empty".into()));
            }
        }
    }
    Ok(out)
}

/// Keeps `percent`% of the training set, stratified by class when class
/// labels exist. Smaller fractions under the same seed give subsets of larger
/// ones.
pub fn subsample_training(train: &[UtteranceRecord], percent: f64, seed: u64) -> Result<Vec<UtteranceRecord>> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!("training fraction {percent}% outside (0, 100]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stratified = train.iter().all(|r| r.labels.class.is_some());
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in train.iter().enumerate() {
        let key = if stratified { r.labels.class.unwrap() } else { 0 };
        groups.entry(key).or_default().push(i);
    }
    let mut picked = Vec::new();
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let take = (percent / 100.0 * idx.len() as f64).round() as usize;
        picked.extend_from_slice(&idx[..take.min(idx.len())]);
    }
    if picked.is_empty() {
        return Err(Error::Data(format!("{percent}% of {} training records is empty", train.len())));
    }
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| train[i].clone()).collect())
}

/// Generator parameters for paired audio/visual data with a shared latent.
///
/// Each utterance has a smooth latent path `s_t = mu + fluctuation * x_t`
/// (`x` an AR(1) process with coefficient `smoothness`). Audio frames are
/// `A s_t + noise`, visual frames `B s_{t-lag} + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_utterances: usize,
    pub n_speakers: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub factor_dim: usize,
    pub lag: usize,
    pub smoothness: f64,
    pub offset_scale: f64,
    pub fluctuation: f64,
    pub audio_noise: f64,
    pub visual_noise: f64,
    /// Use the same projection for both modalities (requires equal dims).
    pub shared_projection: bool,
    pub n_classes: usize,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_utterances: 1000,
            n_speakers: 50,
            t_min: 20,
            t_max: 50,
            audio_dim: 32,
            visual_dim: 17,
            factor_dim: 4,
            lag: 1,
            smoothness: 0.9,
            offset_scale: 1.0,
            fluctuation: 0.5,
            audio_noise: 0.2,
            visual_noise: 0.2,
            shared_projection: false,
            n_classes: 2,
            label_noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_utterances == 0 {
            problems.push("n_utterances must be positive".to_string());
        }
        if self.n_speakers == 0 {
            problems.push("n_speakers must be positive".to_string());
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            problems.push(format!("T range {}..={} is empty", self.t_min, self.t_max));
        }
        if self.audio_dim == 0 || self.visual_dim == 0 || self.factor_dim == 0 {
            problems.push("feature and factor dimensions must be positive".to_string());
        }
        if self.offset_scale <= 0.0 && self.fluctuation <= 0.0 {
            problems.push("latent factor has zero variance".to_string());
        }
        if !(0.0..1.0).contains(&self.smoothness) {
            problems.push(format!("smoothness {} outside [0, 1)", self.smoothness));
        }
        if self.shared_projection && self.audio_dim != self.visual_dim {
            problems.push("shared_projection needs audio_dim == visual_dim".to_string());
        }
        if self.n_classes < 2 {
            problems.push("n_classes must be at least 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// A generated record together with the latent mean its labels derive from.
#[derive(Clone, Debug)]
pub struct SyntheticUtterance {
    pub record: UtteranceRecord,
    pub latent_mean: Vec<f64>,
    pub latent_path: Vec<Vec<f64>>,
}

/// Planted projections and label weights shared by all utterances.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub audio_proj: Vec<Vec<f64>>,
    pub visual_proj: Vec<Vec<f64>>,
    pub arousal_weights: Vec<f64>,
    pub valence_weights: Vec<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows).map(|_| (0..cols).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()).collect()
}

fn project<'a>(m: &'a [Vec<f64>], s: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    m.iter().map(move |row| row.iter().zip(s).map(|(a, b)| a * b).sum())
}

/// Class index from the sign pattern of the leading factor means.
pub fn class_from_latent(mean: &[f64], n_classes: usize) -> usize {
    let bits = (usize::BITS - (n_classes - 1).leading_zeros()) as usize;
    let code = mean.iter().take(bits.max(1)).enumerate().fold(0, |acc, (i, &m)| acc | (usize::from(m > 0.0) << i));
    code % n_classes
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<UtteranceRecord>> {
    Ok(generate_synthetic_with_latents(spec)?.0.into_iter().map(|u| u.record).collect())
}

pub fn generate_synthetic_with_latents(spec: &SyntheticSpec) -> Result<(Vec<SyntheticUtterance>, SyntheticWorld)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.factor_dim;
    let audio_proj = gaussian_matrix(&mut rng, spec.audio_dim, f);
    let visual_proj = if spec.shared_projection { audio_proj.clone() } else { gaussian_matrix(&mut rng, spec.visual_dim, f) };
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let arousal_weights = unit(&mut rng);
    let valence_weights = unit(&mut rng);
    let world = SyntheticWorld { audio_proj, visual_proj, arousal_weights, valence_weights };
    let innovation = (1.0 - spec.smoothness * spec.smoothness).sqrt();
    let rate = COMMON_RATE;

    let mut out = Vec::with_capacity(spec.n_utterances);
    for u in 0..spec.n_utterances {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(u as u64 + 1));
        let t = rng.random_range(spec.t_min..=spec.t_max);
        let mu: Vec<f64> = (0..f).map(|_| spec.offset_scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut x: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        let mut path = Vec::with_capacity(t + spec.lag);
        for _ in 0..t + spec.lag {
            path.push(mu.iter().zip(&x).map(|(m, xi)| m + spec.fluctuation * xi).collect::<Vec<f64>>());
            for xi in &mut x {
                *xi = spec.smoothness * *xi + innovation * rng.sample::<f64, _>(StandardNormal);
            }
        }
        // path index k corresponds to time k - lag
        let at = |time: usize| &path[time + spec.lag];
        let mut audio = Vec::with_capacity(t * spec.audio_dim);
        let mut visual = Vec::with_capacity(t * spec.visual_dim);
        for time in 0..t {
            for v in project(&world.audio_proj, at(time)) {
                audio.push((v + spec.audio_noise * rng.sample::<f64, _>(StandardNormal)) as f32);
            }
            for v in project(&world.visual_proj, &path[time]) {
                visual.push((v + spec.visual_noise * rng.sample::<f64, _>(StandardNormal)) as f32);
            }
        }
        let latent: Vec<Vec<f64>> = (0..t).map(|time| at(time).clone()).collect();
        let mean: Vec<f64> = (0..f).map(|j| latent.iter().map(|s| s[j]).sum::<f64>() / t as f64).collect();
        let dot = |w: &[f64]| w.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
        let arousal = (3.0 + dot(&world.arousal_weights) + spec.label_noise * rng.sample::<f64, _>(StandardNormal)).clamp(1.0, 5.0);
        let valence = (3.0 + dot(&world.valence_weights) + spec.label_noise * rng.sample::<f64, _>(StandardNormal)).clamp(1.0, 5.0);
        let record = UtteranceRecord {
            utterance_id: format!("utt{u:05}"),
            speaker_id: format!("spk{:03}", u % spec.n_speakers),
            session_id: None,
            audio: FeatureSequence::new(Modality::Audio, rate, Tensor::new(&[t, spec.audio_dim], audio)?, None)?,
            visual: FeatureSequence::new(Modality::Visual, rate, Tensor::new(&[t, spec.visual_dim], visual)?, None)?,
            labels: Labels { class: Some(class_from_latent(&mean, spec.n_classes)), arousal: Some(arousal), valence: Some(valence) },
        };
        out.push(SyntheticUtterance { record, latent_mean: mean, latent_path: latent });
    }
    Ok((out, world))
}

/// Hash over utterance ids, labels and feature values, in order.
pub fn dataset_fingerprint(records: &[UtteranceRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.utterance_id.as_bytes());
        h.update(r.speaker_id.as_bytes());
        h.update(serde_json::to_vec(&r.labels).expect("labels serialize"));
        for seq in [&r.audio, &r.visual] {
            h.update((seq.len() as u64).to_le_bytes());
            for x in seq.frames.data() {
                h.update(x.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

const MMF_MAGIC: &[u8; 4] = b"MMF1";

fn modality_tag(m: Modality) -> u32 {
    match m {
        Modality::Audio => 0,
        Modality::Visual => 1,
    }
}

/// Encodes a sequence in the `MMF1` container: magic, five little-endian
/// u32 fields (modality, T, D, rate numerator, rate denominator), `T*D` f32
/// frames, then optionally `T` f32 confidences.
pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + 4 * seq.frames.len());
    buf.extend_from_slice(MMF_MAGIC);
    for v in [modality_tag(seq.modality), seq.len() as u32, seq.dim() as u32, seq.frame_rate.num, seq.frame_rate.den] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in seq.frames.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(c) = &seq.confidence {
        for x in c {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < 24 {
        return Err(Error::Format { offset: bytes.len() as u64, detail: "truncated MMF1 header".into() });
    }
    if &bytes[..4] != MMF_MAGIC {
        return Err(Error::Format { offset: 0, detail: format!("bad magic {:?}", &bytes[..4]) });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let modality = match u32_at(4) {
        0 => Modality::Audio,
        1 => Modality::Visual,
        other => return Err(Error::Format { offset: 4, detail: format!("unknown modality tag {other}") }),
    };
    let (t, d) = (u32_at(8) as usize, u32_at(12) as usize);
    let rate = FrameRate { num: u32_at(16), den: u32_at(20) };
    let body = 24 + 4 * t * d;
    if bytes.len() < body {
        return Err(Error::Format { offset: bytes.len() as u64, detail: format!("expected {} frame bytes", 4 * t * d) });
    }
    let floats = |from: usize, n: usize| -> Vec<f32> {
        (0..n).map(|i| f32::from_le_bytes(bytes[from + 4 * i..from + 4 * i + 4].try_into().unwrap())).collect()
    };
    let frames = Tensor::new(&[t, d], floats(24, t * d))?;
    let confidence = match bytes.len() - body {
        0 => None,
        n if n == 4 * t => Some(floats(body, t)),
        n => return Err(Error::Format { offset: body as u64, detail: format!("{n} trailing bytes, expected 0 or {}", 4 * t) }),
    };
    FeatureSequence::new(modality, rate, frames, confidence)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub audio_path: String,
    pub visual_path: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub session_id: Option<String>,
    #[serde(flatten)]
    pub labels: Labels,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes feature containers under `dir/features/` and `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, records: &[UtteranceRecord]) -> Result<()> {
    fs::create_dir_all(dir.join("features"))?;
    let mut manifest = Vec::new();
    for r in records {
        let audio_path = format!("features/{}.audio.mmf", r.utterance_id);
        let visual_path = format!("features/{}.visual.mmf", r.utterance_id);
        fs::write(dir.join(&audio_path), encode_features(&r.audio))?;
        fs::write(dir.join(&visual_path), encode_features(&r.visual))?;
        let entry = ManifestEntry {
            utterance_id: r.utterance_id.clone(),
            speaker_id: r.speaker_id.clone(),
            audio_path,
            visual_path,
            session_id: r.session_id.clone(),
            labels: r.labels.clone(),
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1))))
        .collect()
}

/// Loads every utterance of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<UtteranceRecord>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let audio = decode_features(&fs::read(dir.join(&e.audio_path))?)?;
            let visual = decode_features(&fs::read(dir.join(&e.visual_path))?)?;
            Ok(UtteranceRecord {
                utterance_id: e.utterance_id,
                speaker_id: e.speaker_id,
                session_id: e.session_id,
                audio,
                visual,
                labels: e.labels,
            })
        })
        .collect()
}
