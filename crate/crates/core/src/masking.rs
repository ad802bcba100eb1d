//! Masked-frame corruption plans.
//!
//! A plan selects `ceil(ratio * T)` frames as runs of `C` consecutive frames
//! (the last run trimmed so the count is exact) and tags each run: zeroed
//! with probability 0.8, replaced by other frames of the same utterance with
//! probability 0.1, left untouched with probability 0.1. The same positions
//! are corrupted in both modalities.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MASK_RATIO: f64 = 0.15;
pub const CHUNK_LEN: usize = 3;
pub const P_ZERO: f64 = 0.8;
pub const P_RANDOM: f64 = 0.1;
pub const MAX_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Zero,
    RandomReplace,
    Keep,
}

/// Whether corruption tags are drawn once per run or once per frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagGranularity {
    #[default]
    Chunk,
    Frame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedRun {
    pub start: usize,
    pub len: usize,
    pub tag: Corruption,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub utterance_id: String,
    pub t: usize,
    pub chunk_len: usize,
    pub seed: u64,
    /// Runs in sampling order. With per-frame tags every run has length 1.
    pub runs: Vec<MaskedRun>,
}

impl MaskPlan {
    /// Sorted masked frame indices.
    pub fn positions(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.runs.iter().flat_map(|r| r.start..r.start + r.len).collect();
        p.sort_unstable();
        p
    }

    pub fn target_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.t];
        for p in self.positions() {
            m[p] = true;
        }
        m
    }

    /// Corrupts both modalities using a generator derived from the plan seed.
    pub fn apply(&self, audio: &Tensor<f32>, visual: &Tensor<f32>) -> Result<Corrupted> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_a991);
        apply_plan(self, audio, visual, &mut rng)
    }
}

fn draw_tag(rng: &mut impl Rng) -> Corruption {
    let u: f64 = rng.random();
    if u < P_ZERO {
        Corruption::Zero
    } else if u < P_ZERO + P_RANDOM {
        Corruption::RandomReplace
    } else {
        Corruption::Keep
    }
}

/// Number of frames a plan masks for a sequence of length `t`.
pub fn masked_count(t: usize, ratio: f64) -> usize {
    // guard against ratio * t landing a hair above an integer
    ((ratio * t as f64) - 1e-9).ceil().max(1.0) as usize
}

pub fn make_plan(t: usize, chunk_len: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    make_plan_with(t, chunk_len, ratio, seed, TagGranularity::Chunk, "")
}

/// Samples non-overlapping runs until `ceil(ratio * t)` frames are covered.
pub fn make_plan_with(
    t: usize,
    chunk_len: usize,
    ratio: f64,
    seed: u64,
    granularity: TagGranularity,
    utterance_id: &str,
) -> Result<MaskPlan> {
    if chunk_len == 0 || t < chunk_len {
        return Err(Error::Data(format!("sequence length {t} is shorter than the mask run length {chunk_len}")));
    }
    if !(ratio > 0.0 && ratio <= MAX_RATIO) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, {MAX_RATIO}]")));
    }
    let target = masked_count(t, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; t];
    let mut count = 0;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    while count < target {
        let starts: Vec<usize> = (0..=t - chunk_len)
            .filter(|&s| (s..s + chunk_len).all(|i| !taken[i]))
            .collect();
        let (start, len) = if starts.is_empty() {
            // fragmented: no full run fits, take the first free stretch
            let s = (0..t).find(|&i| !taken[i]).expect("count < target ≤ t leaves a free frame");
            let len = (s..t).take_while(|&i| !taken[i]).count().min(chunk_len);
            (s, len)
        } else {
            let s = starts[rng.random_range(0..starts.len())];
            (s, chunk_len)
        };
        let len = len.min(target - count);
        for i in start..start + len {
            taken[i] = true;
        }
        count += len;
        spans.push((start, len));
    }
    let runs = match granularity {
        TagGranularity::Chunk => spans.into_iter().map(|(start, len)| MaskedRun { start, len, tag: draw_tag(&mut rng) }).collect(),
        TagGranularity::Frame => spans
            .into_iter()
            .flat_map(|(start, len)| start..start + len)
            .map(|start| MaskedRun { start, len: 1, tag: draw_tag(&mut rng) })
            .collect(),
    };
    Ok(MaskPlan { utterance_id: utterance_id.to_string(), t, chunk_len, seed, runs })
}

/// Corrupted inputs and the frames the reconstruction loss is taken over.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrupted {
    pub audio: Tensor<f32>,
    pub visual: Tensor<f32>,
    pub target_mask: Vec<bool>,
}

/// Applies a plan. Random-replacement frames are drawn uniformly from the
/// utterance's unmasked frames, using one source position for both
/// modalities.
pub fn apply_plan(plan: &MaskPlan, audio: &Tensor<f32>, visual: &Tensor<f32>, rng: &mut impl Rng) -> Result<Corrupted> {
    if audio.rows() != plan.t || visual.rows() != plan.t || audio.rank() != 2 || visual.rank() != 2 {
        return Err(Error::shape(
            "apply_plan",
            format!("plan for T={} applied to audio {:?} / visual {:?}", plan.t, audio.shape(), visual.shape()),
        ));
    }
    let target_mask = plan.target_mask();
    let pool: Vec<usize> = (0..plan.t).filter(|&i| !target_mask[i]).collect();
    let mut a = audio.clone();
    let mut v = visual.clone();
    let (da, dv) = (audio.cols(), visual.cols());
    for run in &plan.runs {
        for pos in run.start..run.start + run.len {
            match run.tag {
                Corruption::Keep => {}
                Corruption::Zero => {
                    a.data_mut()[pos * da..(pos + 1) * da].fill(0.0);
                    v.data_mut()[pos * dv..(pos + 1) * dv].fill(0.0);
                }
                Corruption::RandomReplace => {
                    if pool.is_empty() {
                        continue;
                    }
                    let src = pool[rng.random_range(0..pool.len())];
                    a.data_mut()[pos * da..(pos + 1) * da].copy_from_slice(audio.row(src));
                    v.data_mut()[pos * dv..(pos + 1) * dv].copy_from_slice(visual.row(src));
                }
            }
        }
    }
    Ok(Corrupted { audio: a, visual: v, target_mask })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskingMode {
    /// Fresh plan every epoch.
    Dynamic,
    /// One plan per utterance, fixed for the whole run.
    Static,
}

pub fn masking_mode(split: Split) -> MaskingMode {
    match split {
        Split::Train => MaskingMode::Dynamic,
        Split::Validation | Split::Test => MaskingMode::Static,
    }
}

/// Stable 64-bit seed from arbitrary parts (platform independent).
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Seed of the plan for one utterance under a masking mode.
pub fn plan_seed(mode: MaskingMode, base_seed: u64, epoch: usize, utterance_id: &str) -> u64 {
    match mode {
        MaskingMode::Dynamic => derive_seed(&[b"dynamic", &base_seed.to_le_bytes(), &(epoch as u64).to_le_bytes(), utterance_id.as_bytes()]),
        MaskingMode::Static => derive_seed(&[b"static", &base_seed.to_le_bytes(), utterance_id.as_bytes()]),
    }
}

/// Masking hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub ratio: f64,
    pub chunk_len: usize,
    pub granularity: TagGranularity,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { ratio: MASK_RATIO, chunk_len: CHUNK_LEN, granularity: TagGranularity::Chunk }
    }
}

impl MaskingConfig {
    pub fn plan(&self, mode: MaskingMode, base_seed: u64, epoch: usize, utterance_id: &str, t: usize) -> Result<MaskPlan> {
        let seed = plan_seed(mode, base_seed, epoch, utterance_id);
        make_plan_with(t, self.chunk_len.min(t), self.ratio, seed, self.granularity, utterance_id)
    }
}

/// Precomputed validation plans, serializable for bit-exact reuse.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticPlans {
    pub plans: BTreeMap<String, MaskPlan>,
}

impl StaticPlans {
    pub fn build<'a>(cfg: &MaskingConfig, base_seed: u64, items: impl IntoIterator<Item = (&'a str, usize)>) -> Result<Self> {
        let plans = items
            .into_iter()
            .map(|(id, t)| Ok((id.to_string(), cfg.plan(MaskingMode::Static, base_seed, 0, id, t)?)))
            .collect::<Result<_>>()?;
        Ok(StaticPlans { plans })
    }

    pub fn get(&self, id: &str) -> Option<&MaskPlan> {
        self.plans.get(id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// SHA-256 over the canonical serialization.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("plans serialize")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(t: usize, d: usize, offset: f32) -> Tensor<f32> {
        Tensor::from_fn(&[t, d], |i| offset + i as f32 + 1.0)
    }

    fn plan_with_tag(t: usize, tag: Corruption, seed: u64) -> MaskPlan {
        let mut p = make_plan(t, 3, 0.15, seed).unwrap();
        for r in &mut p.runs {
            r.tag = tag;
        }
        p
    }

    #[test]
    fn fifty_frames_mask_eight_in_three_runs() {
        for seed in 0..200 {
            let p = make_plan(50, 3, 0.15, seed).unwrap();
            assert_eq!(p.positions().len(), 8);
            assert_eq!(p.runs.len(), 3);
            let mut lens: Vec<usize> = p.runs.iter().map(|r| r.len).collect();
            lens.sort_unstable();
            assert_eq!(lens, vec![2, 3, 3], "seed {seed}");
        }
    }

    #[test]
    fn guards() {
        assert!(make_plan(2, 3, 0.15, 0).is_err());
        assert!(make_plan(50, 3, 0.9, 0).is_err());
        assert!(make_plan(50, 3, 0.0, 0).is_err());
    }

    #[test]
    fn seeds_control_plans() {
        assert_eq!(make_plan(50, 3, 0.15, 4).unwrap(), make_plan(50, 3, 0.15, 4).unwrap());
        let base = make_plan(50, 3, 0.15, 0).unwrap().positions();
        let differing = (1..=100).filter(|&s| make_plan(50, 3, 0.15, s).unwrap().positions() != base).count();
        assert!(differing >= 99);
    }

    #[test]
    fn keep_tags_leave_inputs_untouched() {
        let p = plan_with_tag(20, Corruption::Keep, 3);
        let (a, v) = (seq(20, 4, 0.0), seq(20, 2, 100.0));
        let c = p.apply(&a, &v).unwrap();
        assert_eq!(c.audio, a);
        assert_eq!(c.visual, v);
        assert_eq!(c.target_mask.iter().filter(|&&m| m).count(), 3);
    }

    #[test]
    fn zero_tags_zero_exactly_the_masked_frames() {
        let p = plan_with_tag(20, Corruption::Zero, 5);
        let (a, v) = (seq(20, 4, 0.0), seq(20, 2, 100.0));
        let c = p.apply(&a, &v).unwrap();
        for t in 0..20 {
            let masked = c.target_mask[t];
            assert_eq!(c.audio.row(t).iter().all(|&x| x == 0.0), masked);
            assert_eq!(c.visual.row(t).iter().all(|&x| x == 0.0), masked);
            if !masked {
                assert_eq!(c.audio.row(t), a.row(t));
            }
        }
    }

    #[test]
    fn random_replacement_uses_one_unmasked_source_for_both() {
        let p = plan_with_tag(30, Corruption::RandomReplace, 9);
        let (a, v) = (seq(30, 3, 0.0), seq(30, 2, 1000.0));
        let c = p.apply(&a, &v).unwrap();
        for t in p.positions() {
            let src_a = (0..30).find(|&s| a.row(s) == c.audio.row(t)).unwrap();
            let src_v = (0..30).find(|&s| v.row(s) == c.visual.row(t)).unwrap();
            assert_eq!(src_a, src_v);
            assert!(!c.target_mask[src_a]);
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let p = make_plan(10, 3, 0.15, 0).unwrap();
        assert!(p.apply(&seq(9, 2, 0.0), &seq(9, 2, 0.0)).is_err());
    }

    #[test]
    fn tag_frequencies_within_three_sigma() {
        let mut counts = [0usize; 3];
        for seed in 0..10_000u64 {
            for r in make_plan(50, 3, 0.15, seed).unwrap().runs {
                counts[match r.tag {
                    Corruption::Zero => 0,
                    Corruption::RandomReplace => 1,
                    Corruption::Keep => 2,
                }] += 1;
            }
        }
        let n = counts.iter().sum::<usize>() as f64;
        for (c, p) in counts.iter().zip([0.8, 0.1, 0.1]) {
            let sigma = (n * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn per_frame_tags_cover_same_count() {
        let p = make_plan_with(50, 3, 0.15, 1, TagGranularity::Frame, "u").unwrap();
        assert_eq!(p.runs.len(), 8);
        assert!(p.runs.iter().all(|r| r.len == 1));
    }

    #[test]
    fn static_masks_repeat_and_dynamic_masks_vary() {
        let cfg = MaskingConfig::default();
        let a = seq(40, 3, 0.0);
        let v = seq(40, 2, 50.0);
        let e1 = cfg.plan(masking_mode(Split::Validation), 7, 1, "utt-3", 40).unwrap().apply(&a, &v).unwrap();
        let e2 = cfg.plan(masking_mode(Split::Validation), 7, 2, "utt-3", 40).unwrap().apply(&a, &v).unwrap();
        assert_eq!(e1, e2);

        let mut failures = 0;
        for u in 0..1000 {
            let id = format!("utt-{u}");
            let plans: Vec<_> = (0..10).map(|e| cfg.plan(MaskingMode::Dynamic, 7, e, &id, 40).unwrap().positions()).collect();
            if plans.iter().all(|p| *p == plans[0]) {
                failures += 1;
            }
        }
        assert!(failures <= 1, "{failures} utterances never changed plan");
    }

    #[test]
    fn static_plan_fingerprint_is_stable() {
        let cfg = MaskingConfig::default();
        let items: Vec<(String, usize)> = (0..5).map(|i| (format!("u{i}"), 20 + i)).collect();
        let build = || StaticPlans::build(&cfg, 42, items.iter().map(|(s, t)| (s.as_str(), *t))).unwrap();
        assert_eq!(build().fingerprint(), build().fingerprint());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plans.json");
        build().save(&path).unwrap();
        assert_eq!(StaticPlans::load(&path).unwrap(), build());
    }

    proptest! {
        #[test]
        fn masked_fraction_is_exact(t in 3usize..=50, seed in any::<u64>()) {
            let p = make_plan(t, 3, 0.15, seed).unwrap();
            let pos = p.positions();
            prop_assert_eq!(pos.len(), (0.15 * t as f64 - 1e-9).ceil() as usize);
            let mut dedup = pos.clone();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), pos.len());
            prop_assert!(p.runs.iter().all(|r| r.len >= 1 && r.len <= 3));
        }

        #[test]
        fn corruption_only_touches_masked_non_keep_frames(t in 3usize..=50, seed in any::<u64>()) {
            let p = make_plan(t, 3, 0.15, seed).unwrap();
            let (a, v) = (seq(t, 3, 0.0), seq(t, 2, 500.0));
            let c = p.apply(&a, &v).unwrap();
            let mut touchable = vec![false; t];
            for r in &p.runs {
                for i in r.start..r.start + r.len {
                    touchable[i] = r.tag != Corruption::Keep;
                }
            }
            for i in 0..t {
                if !touchable[i] {
                    prop_assert_eq!(c.audio.row(i), a.row(i));
                    prop_assert_eq!(c.visual.row(i), v.row(i));
                }
            }
        }
    }
}
