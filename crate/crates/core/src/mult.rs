//! The two-modality Multimodal Transformer.
//!
//! ```text
//! audio ─conv─+PE─┬─────────────┐         ┌─ head_a → [T, Da]
//!                 │  V→A stack ─┤         │
//!                 ├─ (K,V) ─┐   ├─ concat ─ self stack ─┤
//!                 │  A→V stack ─┤         │
//! visual ─conv─+PE┴─────────────┘         └─ head_v → [T, Dv]
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{CrossModalStack, Modality, PositionalEncoding, SelfAttentionStack};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Session};
use crate::numerics::{ParamId, ParamStore, Scalar, Tensor, Var};

/// How the two cross-modal stack outputs enter the self-attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionWiring {
    /// Framewise concatenation; the self stack runs at `2 * d_model`.
    Concat,
    /// Concatenation followed by an affine map back to `d_model`.
    Project,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_cross_blocks: usize,
    pub n_self_blocks: usize,
    pub ff_dim_cross: usize,
    pub ff_dim_self: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub seq_len: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub fusion: FusionWiring,
    /// `false` replaces each cross-modal stack by a stack attending to its
    /// own modality (the ablation used to measure the cross-modal benefit).
    pub cross_modal: bool,
    /// Add the positional table to the key/value source stream as well as
    /// to the query stream.
    pub pe_on_source: bool,
}

impl ModelConfig {
    pub fn base() -> Self {
        ModelConfig {
            d_model: 288,
            n_heads: 12,
            n_cross_blocks: 6,
            n_self_blocks: 6,
            ff_dim_cross: 1152,
            ff_dim_self: 2304,
            conv_kernel: 1,
            dropout: 0.1,
            seq_len: 50,
            audio_dim: 512,
            visual_dim: 17,
            fusion: FusionWiring::Concat,
            cross_modal: true,
            pe_on_source: true,
        }
    }

    pub fn large() -> Self {
        ModelConfig {
            d_model: 576,
            n_cross_blocks: 8,
            n_self_blocks: 8,
            ff_dim_cross: 1536,
            ff_dim_self: 3072,
            ..Self::base()
        }
    }

    /// Smoke-test configuration sized for CI.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_cross_blocks: 1,
            n_self_blocks: 1,
            ff_dim_cross: 16,
            ff_dim_self: 32,
            seq_len: 10,
            audio_dim: 32,
            visual_dim: 17,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected base, large or tiny)"))),
        }
    }

    pub fn self_stack_dim(&self) -> usize {
        match self.fusion {
            FusionWiring::Concat => 2 * self.d_model,
            FusionWiring::Project => self.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!("d_model ({}) must be divisible by n_heads ({})", self.d_model, self.n_heads));
        }
        if self.n_heads != 0 && self.self_stack_dim() % self.n_heads != 0 {
            problems.push(format!("self_stack_dim ({}) must be divisible by n_heads ({})", self.self_stack_dim(), self.n_heads));
        }
        if self.conv_kernel % 2 == 0 {
            problems.push(format!("conv_kernel ({}) must be odd", self.conv_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout ({}) must lie in [0, 1)", self.dropout));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_cross_blocks", self.n_cross_blocks),
            ("ff_dim_cross", self.ff_dim_cross),
            ("ff_dim_self", self.ff_dim_self),
            ("seq_len", self.seq_len),
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Graph structure of the transformer; parameter values live in a
/// [`ParamStore`] so the same network can be evaluated in either precision.
#[derive(Clone, Debug)]
pub struct MultNet {
    pub config: ModelConfig,
    pub conv_a: ParamId,
    pub conv_v: ParamId,
    pub positions: PositionalEncoding,
    pub cross_v2a: CrossModalStack,
    pub cross_a2v: CrossModalStack,
    pub fuse: Option<Linear>,
    pub self_stack: SelfAttentionStack,
    pub head_a: Linear,
    pub head_v: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct MultOutputs {
    pub audio_recon: Var,
    pub visual_recon: Var,
    pub fused: Var,
    /// Layer-0 sequences after projection (and positional encoding).
    pub audio_low: Var,
    pub visual_low: Var,
}

impl MultNet {
    pub fn new(init: &mut Init, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d_model;
        let conv_a = init.uniform_fan_in("conv_a.kernel", &[c.conv_kernel, c.audio_dim, d], c.conv_kernel * c.audio_dim)?;
        let conv_v = init.uniform_fan_in("conv_v.kernel", &[c.conv_kernel, c.visual_dim, d], c.conv_kernel * c.visual_dim)?;
        let (src_for_a, src_for_v) = if c.cross_modal {
            (Modality::Visual, Modality::Audio)
        } else {
            (Modality::Audio, Modality::Visual)
        };
        let cross_v2a = CrossModalStack::new(init, "cross_v2a", src_for_a, Modality::Audio, c.n_cross_blocks, d, c.n_heads, c.ff_dim_cross)?;
        let cross_a2v = CrossModalStack::new(init, "cross_a2v", src_for_v, Modality::Visual, c.n_cross_blocks, d, c.n_heads, c.ff_dim_cross)?;
        let fuse = match c.fusion {
            FusionWiring::Concat => None,
            FusionWiring::Project => Some(init.linear("fuse", 2 * d, d)?),
        };
        let ds = c.self_stack_dim();
        let self_stack = SelfAttentionStack::new(init, "self", c.n_self_blocks, ds, c.n_heads, c.ff_dim_self)?;
        let head_a = init.linear("head_a", ds, c.audio_dim)?;
        let head_v = init.linear("head_v", ds, c.visual_dim)?;
        Ok(MultNet {
            config: c.clone(),
            conv_a,
            conv_v,
            positions: PositionalEncoding::new(c.seq_len, d),
            cross_v2a,
            cross_a2v,
            fuse,
            self_stack,
            head_a,
            head_v,
        })
    }

    /// Projects both modalities to `d_model` and returns
    /// `(query_a, query_v, source_a, source_v)` layer-0 streams.
    fn embed<S: Scalar>(&self, s: &mut Session<S>, audio: Var, visual: Var) -> Result<(Var, Var, Var, Var)> {
        let (sa, sv) = (s.tape.shape(audio).to_vec(), s.tape.shape(visual).to_vec());
        let c = &self.config;
        if sa.len() != 2 || sv.len() != 2 || sa[1] != c.audio_dim || sv[1] != c.visual_dim {
            return Err(Error::shape(
                "mult_forward",
                format!("audio {:?} / visual {:?}, expected [T, {}] / [T, {}]", sa, sv, c.audio_dim, c.visual_dim),
            ));
        }
        if sa[0] != sv[0] {
            return Err(Error::Data(format!("modalities are not aligned: audio T={} vs visual T={}", sa[0], sv[0])));
        }
        if sa[0] > c.seq_len || sa[0] == 0 {
            return Err(Error::Data(format!("sequence length {} outside 1..={}", sa[0], c.seq_len)));
        }
        let ka = s.p(self.conv_a);
        let kv = s.p(self.conv_v);
        let a0 = s.tape.conv1d(audio, ka)?;
        let v0 = s.tape.conv1d(visual, kv)?;
        let a_pe = self.positions.apply(s, a0)?;
        let v_pe = self.positions.apply(s, v0)?;
        if c.pe_on_source {
            Ok((a_pe, v_pe, a_pe, v_pe))
        } else {
            Ok((a_pe, v_pe, a0, v0))
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, audio: Var, visual: Var) -> Result<MultOutputs> {
        let (qa, qv, src_a, src_v) = self.embed(s, audio, visual)?;
        let (za, zv) = if self.config.cross_modal {
            (self.cross_v2a.forward(s, qa, src_v)?, self.cross_a2v.forward(s, qv, src_a)?)
        } else {
            (self.cross_v2a.forward(s, qa, src_a)?, self.cross_a2v.forward(s, qv, src_v)?)
        };
        let cat = s.tape.concat_cols(&[za, zv])?;
        let fused_in = match &self.fuse {
            Some(lin) => lin.forward(s, cat)?,
            None => cat,
        };
        let fused = self.self_stack.forward(s, fused_in)?;
        let audio_recon = self.head_a.forward(s, fused)?;
        let visual_recon = self.head_v.forward(s, fused)?;
        Ok(MultOutputs { audio_recon, visual_recon, fused, audio_low: src_a, visual_low: src_v })
    }
}

/// A built transformer together with its parameter values.
#[derive(Clone, Debug)]
pub struct MultModel {
    pub net: MultNet,
    pub params: ParamStore<f32>,
}

impl MultModel {
    /// Deterministic construction: equal seeds give bit-identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let net = MultNet::new(&mut init, config)?;
        Ok(MultModel { net, params: init.store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Inference forward pass on plain tensors.
    pub fn forward(&self, audio: &Tensor<f32>, visual: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let mut s = Session::eval(&self.params);
        let (a, v) = (s.input(audio.clone()), s.input(visual.clone()));
        let out = self.net.forward(&mut s, a, v)?;
        Ok((
            s.tape.value(out.audio_recon).clone(),
            s.tape.value(out.visual_recon).clone(),
            s.tape.value(out.fused).clone(),
        ))
    }

    /// Runs utterances independently (in parallel) and returns per-item outputs
    /// in input order.
    pub fn forward_batch(&self, items: &[(Tensor<f32>, Tensor<f32>)]) -> Result<Vec<(Tensor<f32>, Tensor<f32>, Tensor<f32>)>> {
        use rayon::prelude::*;
        items.par_iter().map(|(a, v)| self.forward(a, v)).collect()
    }
}

/// Scalar learnables grouped by the first component of their name.
pub fn parameter_breakdown<S: Scalar>(params: &ParamStore<S>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (_, name, t) in params.iter() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        *out.entry(group).or_insert(0) += t.len();
    }
    out
}

/// Parameter count reported for the BASE configuration.
pub const REPORTED_BASE_PARAMS: f64 = 38.3e6;
/// Parameter count reported for the LARGE configuration.
pub const REPORTED_LARGE_PARAMS: f64 = 89.2e6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_hold_reported_hyperparameters() {
        let b = ModelConfig::base();
        assert_eq!((b.d_model, b.ff_dim_cross, b.ff_dim_self, b.n_cross_blocks, b.n_self_blocks, b.n_heads, b.seq_len), (288, 1152, 2304, 6, 6, 12, 50));
        let l = ModelConfig::large();
        assert_eq!((l.d_model, l.ff_dim_cross, l.ff_dim_self, l.n_cross_blocks, l.n_self_blocks, l.n_heads, l.seq_len), (576, 1536, 3072, 8, 8, 12, 50));
        b.validate().unwrap();
        l.validate().unwrap();
    }

    #[test]
    fn invalid_config_lists_violations() {
        let cfg = ModelConfig { d_model: 10, n_heads: 3, conv_kernel: 2, ..ModelConfig::tiny() };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible") && msg.contains("conv_kernel"), "{msg}");
        assert!(MultModel::build(&cfg, 0).is_err());
    }

    #[test]
    fn tiny_builds_small_and_deterministic() {
        let a = MultModel::build(&ModelConfig::tiny(), 7).unwrap();
        let b = MultModel::build(&ModelConfig::tiny(), 7).unwrap();
        assert!(a.parameter_count() < 20_000);
        assert_eq!(a.params, b.params);
        let c = MultModel::build(&ModelConfig::tiny(), 8).unwrap();
        assert_ne!(a.params, c.params);
        assert_eq!(a.parameter_count(), c.parameter_count());
    }

    #[test]
    fn tiny_count_matches_shape_sum() {
        let c = ModelConfig::tiny();
        let (d, da, dv, fc, fs) = (c.d_model, c.audio_dim, c.visual_dim, c.ff_dim_cross, c.ff_dim_self);
        let attn = |d: usize| 4 * (d * d + d);
        let ff = |d: usize, h: usize| d * h + h + h * d + d;
        let cross_block = attn(d) + ff(d, fc) + 3 * 2 * d;
        let self_block = attn(2 * d) + ff(2 * d, fs) + 2 * 2 * (2 * d);
        let expected = (da + dv) * d
            + 2 * (cross_block + 2 * d)
            + (self_block + 2 * 2 * d)
            + (2 * d * da + da)
            + (2 * d * dv + dv);
        let m = MultModel::build(&c, 0).unwrap();
        assert_eq!(m.parameter_count(), expected);
        let by_group: usize = parameter_breakdown(&m.params).values().sum();
        assert_eq!(by_group, expected);
    }

    #[test]
    fn zero_input_gives_finite_outputs_of_right_shape() {
        let c = ModelConfig::tiny();
        let m = MultModel::build(&c, 1).unwrap();
        let (a, v, f) = m.forward(&Tensor::zeros(&[6, c.audio_dim]), &Tensor::zeros(&[6, c.visual_dim])).unwrap();
        assert_eq!(a.shape(), &[6, c.audio_dim]);
        assert_eq!(v.shape(), &[6, c.visual_dim]);
        assert_eq!(f.shape(), &[6, 2 * c.d_model]);
        assert!(a.is_finite() && v.is_finite() && f.is_finite());
    }

    #[test]
    fn misaligned_or_long_inputs_rejected() {
        let c = ModelConfig::tiny();
        let m = MultModel::build(&c, 1).unwrap();
        assert!(m.forward(&Tensor::zeros(&[6, c.audio_dim]), &Tensor::zeros(&[5, c.visual_dim])).is_err());
        assert!(m.forward(&Tensor::zeros(&[11, c.audio_dim]), &Tensor::zeros(&[11, c.visual_dim])).is_err());
    }

    #[test]
    fn project_wiring_shrinks_self_stack() {
        let c = ModelConfig { fusion: FusionWiring::Project, ..ModelConfig::tiny() };
        let m = MultModel::build(&c, 1).unwrap();
        let (_, _, f) = m.forward(&Tensor::zeros(&[4, c.audio_dim]), &Tensor::zeros(&[4, c.visual_dim])).unwrap();
        assert_eq!(f.shape(), &[4, c.d_model]);
        assert!(parameter_breakdown(&m.params).contains_key("fuse"));
    }

    #[test]
    fn key_value_inputs_are_always_layer_zero() {
        let c = ModelConfig { n_cross_blocks: 3, ..ModelConfig::tiny() };
        let m = MultModel::build(&c, 2).unwrap();
        let mut s = Session::eval(&m.params).with_kv_log();
        let a = s.input(Tensor::full(&[5, c.audio_dim], 0.3));
        let v = s.input(Tensor::full(&[5, c.visual_dim], -0.2));
        let out = m.net.forward(&mut s, a, v).unwrap();
        let log = s.kv_log().unwrap();
        assert_eq!(log.len(), 6);
        assert!(log[..3].iter().all(|&x| x == out.visual_low));
        assert!(log[3..].iter().all(|&x| x == out.audio_low));
    }
}
