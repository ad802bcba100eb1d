//! Sinusoidal positional encoding, multihead attention and the pre-norm
//! cross-modal attention block.
//!
//! A cross-modal block `b → a` lets the running target stream `X_a^[i]`
//! query the source modality. Keys and values always come from the source's
//! low-level sequence `X_b^[0]`, whatever depth the block sits at.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Init, Linear, Norm, Session};
use crate::numerics::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn short(self) -> char {
        match self {
            Modality::Audio => 'a',
            Modality::Visual => 'v',
        }
    }
}

/// Fixed sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    max_len: usize,
    d_model: usize,
    table: Vec<f64>,
}

impl PositionalEncoding {
    pub fn new(max_len: usize, d_model: usize) -> Self {
        let mut table = vec![0.0; max_len * d_model];
        for pos in 0..max_len {
            for j in 0..d_model {
                let pair = (j / 2) * 2;
                let angle = pos as f64 / 10000f64.powf(pair as f64 / d_model as f64);
                table[pos * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        PositionalEncoding { max_len, d_model, table }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn get(&self, pos: usize, j: usize) -> f64 {
        self.table[pos * self.d_model + j]
    }

    /// The first `t` rows of the table.
    pub fn rows<S: Scalar>(&self, t: usize) -> Result<Tensor<S>> {
        if t > self.max_len {
            return Err(Error::Config(format!(
                "sequence length {t} exceeds positional table length {}",
                self.max_len
            )));
        }
        Ok(Tensor::from_fn(&[t, self.d_model], |i| S::from_f64(self.table[i]).unwrap()))
    }

    /// `x + PE[0..T]`.
    pub fn apply<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::shape("positional_encoding", format!("{:?} with d_model {}", shape, self.d_model)));
        }
        let pe = self.rows(shape[0])?;
        s.tape.add_const(x, &pe)
    }
}

/// Boolean `[Tq, Tk]` attention mask; `true` marks positions a query may
/// attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    tq: usize,
    tk: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(tq: usize, tk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != tq * tk {
            return Err(Error::shape("attention_mask", format!("{} entries for [{tq}, {tk}]", allowed.len())));
        }
        Ok(AttentionMask { tq, tk, allowed })
    }

    /// Every query may see exactly the key positions flagged in `keys`.
    pub fn keys(tq: usize, keys: &[bool]) -> Self {
        let allowed = (0..tq).flat_map(|_| keys.iter().copied()).collect();
        AttentionMask { tq, tk: keys.len(), allowed }
    }

    fn additive<S: Scalar>(&self) -> Result<Tensor<S>> {
        for q in 0..self.tq {
            if !self.allowed[q * self.tk..(q + 1) * self.tk].iter().any(|&a| a) {
                return Err(Error::Invariant(format!("attention query row {q} is fully masked")));
            }
        }
        Ok(Tensor::from_fn(&[self.tq, self.tk], |i| if self.allowed[i] { S::zero() } else { S::neg_infinity() }))
    }
}

#[derive(Clone, Debug)]
pub struct MultiheadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiheadAttention {
    pub fn new(init: &mut Init, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
        }
        Ok(MultiheadAttention {
            query: init.linear(&format!("{name}.q"), d_model, d_model)?,
            key: init.linear(&format!("{name}.k"), d_model, d_model)?,
            value: init.linear(&format!("{name}.v"), d_model, d_model)?,
            output: init.linear(&format!("{name}.o"), d_model, d_model)?,
            heads,
            d_model,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        q_seq: Var,
        kv_seq: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(s, q_seq, kv_seq, mask)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns each head's
    /// `[Tq, Tk]` attention weights (before dropout).
    pub fn forward_with_weights<S: Scalar>(
        &self,
        s: &mut Session<S>,
        q_seq: Var,
        kv_seq: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<(Var, Vec<Var>)> {
        let (sq, sk) = (s.tape.shape(q_seq).to_vec(), s.tape.shape(kv_seq).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != self.d_model || sk[1] != self.d_model {
            return Err(Error::shape("multihead_attention", format!("query {:?}, key/value {:?}, d_model {}", sq, sk, self.d_model)));
        }
        let additive = match mask {
            Some(m) if m.tq != sq[0] || m.tk != sk[0] => {
                return Err(Error::shape("multihead_attention", format!("mask [{}, {}] for scores [{}, {}]", m.tq, m.tk, sq[0], sk[0])));
            }
            Some(m) => Some(m.additive::<S>()?),
            None => None,
        };
        let q = self.query.forward(s, q_seq)?;
        let k = self.key.forward(s, kv_seq)?;
        let v = self.value.forward(s, kv_seq)?;
        let dh = self.d_model / self.heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt()).unwrap();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = s.tape.slice_cols(q, h * dh, dh)?;
            let kh = s.tape.slice_cols(k, h * dh, dh)?;
            let vh = s.tape.slice_cols(v, h * dh, dh)?;
            let kt = s.tape.transpose(kh)?;
            let scores = s.tape.matmul(qh, kt)?;
            let mut scores = s.tape.scale(scores, scale);
            if let Some(add) = &additive {
                scores = s.tape.add_const(scores, add)?;
            }
            let w = s.tape.softmax(scores);
            weights.push(w);
            let w = s.drop(w)?;
            outs.push(s.tape.matmul(w, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { s.tape.concat_cols(&outs)? };
        Ok((self.output.forward(s, cat)?, weights))
    }
}

/// Pre-norm residual attention block. With `source` set to the target's own
/// modality it degenerates to a self-attention block over the low-level
/// sequence of that modality.
#[derive(Clone, Debug)]
pub struct CrossModalBlock {
    pub source: Modality,
    pub target: Modality,
    pub layer: usize,
    pub norm_query: Norm,
    pub norm_source: Norm,
    pub attention: MultiheadAttention,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

impl CrossModalBlock {
    pub fn new(
        init: &mut Init,
        name: &str,
        source: Modality,
        target: Modality,
        layer: usize,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        Ok(CrossModalBlock {
            source,
            target,
            layer,
            norm_query: init.norm(&format!("{name}.norm_q"), d_model)?,
            norm_source: init.norm(&format!("{name}.norm_kv"), d_model)?,
            attention: MultiheadAttention::new(init, &format!("{name}.attn"), d_model, heads)?,
            norm_ff: init.norm(&format!("{name}.norm_ff"), d_model)?,
            ff: init.feed_forward(&format!("{name}.ff"), d_model, ff_dim)?,
        })
    }

    /// `x ← x + Attn(LN(x), LN(src)); x ← x + FF(LN(x))`.
    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        target_running: Var,
        source_low: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (st, ss) = (s.tape.shape(target_running).to_vec(), s.tape.shape(source_low).to_vec());
        if st.len() != 2 || ss.len() != 2 || st[1] != ss[1] {
            return Err(Error::shape("crossmodal_block", format!("target {:?}, source {:?}", st, ss)));
        }
        s.log_kv(source_low);
        let q = self.norm_query.forward(s, target_running)?;
        let kv = self.norm_source.forward(s, source_low)?;
        let a = self.attention.forward(s, q, kv, mask)?;
        let x = s.tape.add(target_running, a)?;
        let h = self.norm_ff.forward(s, x)?;
        let f = self.ff.forward(s, h)?;
        s.tape.add(x, f)
    }
}

/// Standard pre-norm self-attention encoder layer.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm_attn: Norm,
    pub attention: MultiheadAttention,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(init: &mut Init, name: &str, d_model: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        Ok(SelfAttentionBlock {
            norm_attn: init.norm(&format!("{name}.norm_attn"), d_model)?,
            attention: MultiheadAttention::new(init, &format!("{name}.attn"), d_model, heads)?,
            norm_ff: init.norm(&format!("{name}.norm_ff"), d_model)?,
            ff: init.feed_forward(&format!("{name}.ff"), d_model, ff_dim)?,
        })
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let h = self.norm_attn.forward(s, x)?;
        let a = self.attention.forward(s, h, h, mask)?;
        let x = s.tape.add(x, a)?;
        let h = self.norm_ff.forward(s, x)?;
        let f = self.ff.forward(s, h)?;
        s.tape.add(x, f)
    }
}

/// A `source → target` stack of cross-modal blocks followed by a final norm.
#[derive(Clone, Debug)]
pub struct CrossModalStack {
    pub blocks: Vec<CrossModalBlock>,
    pub final_norm: Norm,
}

impl CrossModalStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        source: Modality,
        target: Modality,
        depth: usize,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| CrossModalBlock::new(init, &format!("{name}.{i}"), source, target, i, d_model, heads, ff_dim))
            .collect::<Result<_>>()?;
        Ok(CrossModalStack { blocks, final_norm: init.norm(&format!("{name}.final_norm"), d_model)? })
    }

    /// Runs every block against the same low-level source sequence.
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, target_low: Var, source_low: Var) -> Result<Var> {
        let mut x = target_low;
        for b in &self.blocks {
            x = b.forward(s, x, source_low, None)?;
        }
        self.final_norm.forward(s, x)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttentionStack {
    pub blocks: Vec<SelfAttentionBlock>,
    pub final_norm: Norm,
}

impl SelfAttentionStack {
    pub fn new(init: &mut Init, name: &str, depth: usize, d_model: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| SelfAttentionBlock::new(init, &format!("{name}.{i}"), d_model, heads, ff_dim))
            .collect::<Result<_>>()?;
        Ok(SelfAttentionStack { blocks, final_norm: init.norm(&format!("{name}.final_norm"), d_model)? })
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let mut x = x;
        for b in &self.blocks {
            x = b.forward(s, x, None)?;
        }
        self.final_norm.forward(s, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamStore, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[r, c], |_| rng.random_range(-1.0..1.0))
    }

    fn store_f64(init: Init) -> ParamStore<f64> {
        init.store.cast()
    }

    fn zero_param(store: &mut ParamStore<f64>, lin: &Linear) {
        let id = lin.weight;
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
        if let Some(b) = lin.bias {
            let shape = store.get(b).shape().to_vec();
            store.set(b, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn pe_first_row_alternates() {
        let pe = PositionalEncoding::new(10, 6);
        let row0 = pe.rows::<f64>(1).unwrap();
        assert_eq!(row0.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pe_matches_formula_at_pos_one() {
        let pe = PositionalEncoding::new(4, 4);
        let expected = [
            (1.0f64).sin(),
            (1.0f64).cos(),
            (1.0 / 10000f64.powf(0.5)).sin(),
            (1.0 / 10000f64.powf(0.5)).cos(),
        ];
        for (j, e) in expected.iter().enumerate() {
            assert!((pe.get(1, j) - e).abs() < 1e-7);
        }
    }

    #[test]
    fn pe_on_zero_input_is_table_and_rejects_long_input() {
        let pe = PositionalEncoding::new(5, 4);
        let store = ParamStore::<f64>::new();
        let mut s = Session::eval(&store);
        let x = s.input(Tensor::zeros(&[3, 4]));
        let y = pe.apply(&mut s, x).unwrap();
        assert_eq!(s.tape.value(y), &pe.rows::<f64>(3).unwrap());
        let x = s.input(Tensor::zeros(&[6, 4]));
        assert!(pe.apply(&mut s, x).is_err());
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut init = Init::new(0);
        assert!(matches!(MultiheadAttention::new(&mut init, "a", 6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn single_key_returns_value_projection() {
        let mut init = Init::new(1);
        let attn = MultiheadAttention::new(&mut init, "a", 4, 2).unwrap();
        let store = store_f64(init);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_matrix(&mut rng, 3, 4);
        let kv = random_matrix(&mut rng, 1, 4);
        let mut s = Session::eval(&store);
        let (qv, kvv) = (s.input(q), s.input(kv));
        let out = attn.forward(&mut s, qv, kvv, None).unwrap();
        let v = attn.value.forward(&mut s, kvv).unwrap();
        let expected = attn.output.forward(&mut s, v).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((s.tape.value(out).at(r, c) - s.tape.value(expected).at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut init = Init::new(1);
        let attn = MultiheadAttention::new(&mut init, "a", 4, 2).unwrap();
        let store = store_f64(init);
        let mut s = Session::eval(&store);
        let q = s.input(Tensor::zeros(&[2, 4]));
        let kv = s.input(Tensor::zeros(&[3, 4]));
        let mask = AttentionMask::new(2, 3, vec![true, false, false, false, false, false]).unwrap();
        assert!(matches!(attn.forward(&mut s, q, kv, Some(&mask)), Err(Error::Invariant(_))));
    }

    #[test]
    fn matches_per_head_brute_force() {
        let mut init = Init::new(9);
        let attn = MultiheadAttention::new(&mut init, "a", 4, 2).unwrap();
        let store = store_f64(init);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_matrix(&mut rng, 3, 4);
        let kv = random_matrix(&mut rng, 5, 4);
        let mut s = Session::eval(&store);
        let (qv, kvv) = (s.input(q.clone()), s.input(kv.clone()));
        let out = attn.forward(&mut s, qv, kvv, None).unwrap();
        let got = s.tape.value(out).clone();

        // plain loops, one head at a time
        let affine = |x: &Tensor<f64>, lin: &Linear| -> Vec<Vec<f64>> {
            let w = store.get(lin.weight);
            let b = store.get(lin.bias.unwrap());
            (0..x.rows())
                .map(|r| (0..w.cols()).map(|c| b.data()[c] + (0..w.rows()).map(|k| x.at(r, k) * w.at(k, c)).sum::<f64>()).collect())
                .collect()
        };
        let qp = affine(&q, &attn.query);
        let kp = affine(&kv, &attn.key);
        let vp = affine(&kv, &attn.value);
        let mut cat = vec![vec![0.0; 4]; 3];
        for h in 0..2 {
            for i in 0..3 {
                let scores: Vec<f64> = (0..5)
                    .map(|j| (0..2).map(|d| qp[i][h * 2 + d] * kp[j][h * 2 + d]).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..2 {
                    cat[i][h * 2 + d] = (0..5).map(|j| e[j] / z * vp[j][h * 2 + d]).sum();
                }
            }
        }
        let cat = Tensor::from_rows(&cat).unwrap();
        let expected = affine(&cat, &attn.output);
        for i in 0..3 {
            for c in 0..4 {
                assert!((got.at(i, c) - expected[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut init = Init::new(5);
        let attn = MultiheadAttention::new(&mut init, "a", 8, 2).unwrap();
        let store = init.store;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = Session::eval(&store);
        let q = s.input(Tensor::from_fn(&[4, 8], |_| rng.random_range(-3.0..3.0)));
        let kv = s.input(Tensor::from_fn(&[7, 8], |_| rng.random_range(-3.0..3.0)));
        let (_, ws) = attn.forward_with_weights(&mut s, q, kv, None).unwrap();
        for w in ws {
            let w = s.tape.value(w);
            for r in 0..w.rows() {
                let total: f32 = w.row(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-5);
            }
        }
    }

    fn block_fixture(seed: u64) -> (CrossModalBlock, ParamStore<f64>) {
        let mut init = Init::new(seed);
        let block = CrossModalBlock::new(&mut init, "blk", Modality::Visual, Modality::Audio, 0, 4, 2, 8).unwrap();
        (block, store_f64(init))
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let (block, mut store) = block_fixture(3);
        zero_param(&mut store, &block.attention.output);
        zero_param(&mut store, &block.ff.down);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(&mut rng, 3, 4);
        let src = random_matrix(&mut rng, 5, 4);
        let mut s = Session::eval(&store);
        let (xv, sv) = (s.input(x.clone()), s.input(src));
        let y = block.forward(&mut s, xv, sv, None).unwrap();
        assert_eq!(s.tape.value(y), &x);
    }

    #[test]
    fn block_matches_scripted_substeps() {
        let (block, store) = block_fixture(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_matrix(&mut rng, 3, 4);
        let src = random_matrix(&mut rng, 3, 4);
        let mut s = Session::eval(&store);
        let (xv, sv) = (s.input(x.clone()), s.input(src.clone()));
        let y = block.forward(&mut s, xv, sv, None).unwrap();
        let got = s.tape.value(y).clone();

        // replay each sub-step on a fresh tape with the primitive ops
        let mut t = Tape::<f64>::new();
        let p = |t: &mut Tape<f64>, id| t.constant(store.get(id).clone());
        let ln = |t: &mut Tape<f64>, n: &Norm, v: Var| {
            let g = p(t, n.gain);
            let b = p(t, n.bias);
            t.layernorm(v, g, b, 1e-5).unwrap()
        };
        let lin = |t: &mut Tape<f64>, l: &Linear, v: Var| {
            let w = p(t, l.weight);
            let b = p(t, l.bias.unwrap());
            let y = t.matmul(v, w).unwrap();
            t.add_row(y, b).unwrap()
        };
        let xv = t.constant(x);
        let sv = t.constant(src);
        let qn = ln(&mut t, &block.norm_query, xv);
        let kn = ln(&mut t, &block.norm_source, sv);
        let a = &block.attention;
        let q = lin(&mut t, &a.query, qn);
        let k = lin(&mut t, &a.key, kn);
        let v = lin(&mut t, &a.value, kn);
        let mut heads = vec![];
        for h in 0..2 {
            let qh = t.slice_cols(q, 2 * h, 2).unwrap();
            let kh = t.slice_cols(k, 2 * h, 2).unwrap();
            let vh = t.slice_cols(v, 2 * h, 2).unwrap();
            let kt = t.transpose(kh).unwrap();
            let sc = t.matmul(qh, kt).unwrap();
            let sc = t.scale(sc, 1.0 / 2f64.sqrt());
            let w = t.softmax(sc);
            heads.push(t.matmul(w, vh).unwrap());
        }
        let cat = t.concat_cols(&heads).unwrap();
        let att = lin(&mut t, &a.output, cat);
        let x1 = t.add(xv, att).unwrap();
        let hn = ln(&mut t, &block.norm_ff, x1);
        let up = lin(&mut t, &block.ff.up, hn);
        let up = t.relu(up);
        let down = lin(&mut t, &block.ff.down, up);
        let x2 = t.add(x1, down).unwrap();
        assert!(got.max_abs_diff(t.value(x2)) < 1e-5);
    }

    #[test]
    fn source_frame_order_does_not_matter_without_positions() {
        let (block, store) = block_fixture(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_matrix(&mut rng, 3, 4);
        let src = random_matrix(&mut rng, 4, 4);
        let perm = [2usize, 0, 3, 1];
        let permuted = Tensor::from_rows(&perm.iter().map(|&i| src.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |src: Tensor<f64>| {
            let mut s = Session::eval(&store);
            let (xv, sv) = (s.input(x.clone()), s.input(src));
            let y = block.forward(&mut s, xv, sv, None).unwrap();
            s.tape.value(y).clone()
        };
        assert!(run(src).max_abs_diff(&run(permuted)) < 1e-12);
    }

    #[test]
    fn masked_source_frames_do_not_influence_output() {
        let (block, store) = block_fixture(31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = random_matrix(&mut rng, 3, 4);
        let src = random_matrix(&mut rng, 4, 4);
        let keys = [true, false, true, true];
        let mask = AttentionMask::keys(3, &keys);
        let mut zeroed = src.clone();
        for c in 0..4 {
            zeroed.data_mut()[4 + c] = 0.0;
        }
        let run = |src: Tensor<f64>| {
            let mut s = Session::eval(&store);
            let (xv, sv) = (s.input(x.clone()), s.input(src));
            let y = block.forward(&mut s, xv, sv, Some(&mask)).unwrap();
            s.tape.value(y).clone()
        };
        // layer norm is per frame, so a masked frame's value cannot leak
        assert!(run(src).max_abs_diff(&run(zeroed)) < 1e-12);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        use crate::numerics::gradcheck::rel_err;
        let (block, store) = block_fixture(41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random_matrix(&mut rng, 3, 4);
        let src = random_matrix(&mut rng, 2, 4);
        let weights = random_matrix(&mut rng, 3, 4);
        let loss = |store: &ParamStore<f64>| -> (f64, Option<crate::numerics::ParamGrads<f64>>) {
            let mut s = Session::eval(store);
            let (xv, sv) = (s.input(x.clone()), s.input(src.clone()));
            let y = block.forward(&mut s, xv, sv, None).unwrap();
            let y = s.tape.mul_const(y, &weights).unwrap();
            let l = s.tape.sum(y);
            let v = s.tape.value(l).item();
            let g = s.tape.backward(l).unwrap();
            (v, Some(g.param_grads(store.len())))
        };
        let (_, grads) = loss(&store);
        let grads = grads.unwrap();
        let mut worst = 0.0f64;
        let h = 1e-5;
        for id in store.ids() {
            for i in 0..store.get(id).len() {
                let mut up = store.clone();
                up.get_mut(id).data_mut()[i] += h;
                let mut dn = store.clone();
                dn.get_mut(id).data_mut()[i] -= h;
                let num = (loss(&up).0 - loss(&dn).0) / (2.0 * h);
                let ana = grads.get(id).map_or(0.0, |g| g.data()[i]);
                worst = worst.max(rel_err(ana, num));
            }
        }
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}
