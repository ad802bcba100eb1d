//! Comparison models: early- and late-fusion bidirectional GRUs, the tensor
//! fusion network, and the single-layer GRU probe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ResidualHead, Session};
use crate::numerics::{ParamId, Scalar, Tensor, Var};

/// Gate order in the packed weights is reset, update, candidate:
///
/// ```text
/// r  = σ(x W_r + b_r + h U_r + c_r)
/// z  = σ(x W_z + b_z + h U_z + c_z)
/// n  = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(init: &mut Init, name: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        Ok(GruCell {
            w_ih: init.uniform_fan_in(&format!("{name}.w_ih"), &[input_dim, 3 * hidden], hidden)?,
            w_hh: init.uniform_fan_in(&format!("{name}.w_hh"), &[hidden, 3 * hidden], hidden)?,
            b_ih: init.uniform_fan_in(&format!("{name}.b_ih"), &[3 * hidden], hidden)?,
            b_hh: init.uniform_fan_in(&format!("{name}.b_hh"), &[3 * hidden], hidden)?,
            input_dim,
            hidden,
        })
    }

    pub fn param_count(input_dim: usize, hidden: usize) -> usize {
        3 * hidden * (input_dim + hidden + 2)
    }

    /// One step given the precomputed input projection `gi = x W + b` ([1, 3H]).
    fn step<S: Scalar>(&self, s: &mut Session<S>, gi: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let w_hh = s.p(self.w_hh);
        let b_hh = s.p(self.b_hh);
        let gh = s.tape.matmul(h, w_hh)?;
        let gh = s.tape.add_row(gh, b_hh)?;
        let (gi_r, gi_z, gi_n) = (s.tape.slice_cols(gi, 0, hd)?, s.tape.slice_cols(gi, hd, hd)?, s.tape.slice_cols(gi, 2 * hd, hd)?);
        let (gh_r, gh_z, gh_n) = (s.tape.slice_cols(gh, 0, hd)?, s.tape.slice_cols(gh, hd, hd)?, s.tape.slice_cols(gh, 2 * hd, hd)?);
        let r = s.tape.add(gi_r, gh_r)?;
        let r = s.tape.sigmoid(r);
        let z = s.tape.add(gi_z, gh_z)?;
        let z = s.tape.sigmoid(z);
        let rn = s.tape.mul(r, gh_n)?;
        let n = s.tape.add(gi_n, rn)?;
        let n = s.tape.tanh(n);
        let zn = s.tape.mul(z, n)?;
        let keep = s.tape.sub(n, zn)?;
        let zh = s.tape.mul(z, h)?;
        s.tape.add(keep, zh)
    }

    /// Runs over the rows of `x` ([T, Din]) in the given order and returns the
    /// hidden state after every step, indexed by time.
    pub fn run<S: Scalar>(&self, s: &mut Session<S>, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::shape("gru", format!("input {:?}, expected [T, {}]", shape, self.input_dim)));
        }
        let t = shape[0];
        let w_ih = s.p(self.w_ih);
        let b_ih = s.p(self.b_ih);
        let gi_all = s.tape.matmul(x, w_ih)?;
        let gi_all = s.tape.add_row(gi_all, b_ih)?;
        let mut h = s.input(Tensor::zeros(&[1, self.hidden]));
        let mut states = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for i in order {
            let gi = s.tape.slice_rows(gi_all, i, 1)?;
            h = self.step(s, gi, h)?;
            states[i] = h;
        }
        Ok(states)
    }
}

/// Stacked bidirectional GRU.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub layers: Vec<(GruCell, GruCell)>,
    pub dropout: f64,
}

impl BiGru {
    pub fn new(init: &mut Init, name: &str, input_dim: usize, hidden: usize, layers: usize, dropout: f64) -> Result<Self> {
        if layers == 0 || hidden == 0 {
            return Err(Error::Config("GRU needs at least one layer and a positive hidden size".into()));
        }
        let cells = (0..layers)
            .map(|l| {
                let d_in = if l == 0 { input_dim } else { 2 * hidden };
                Ok((GruCell::new(init, &format!("{name}.l{l}.fwd"), d_in, hidden)?, GruCell::new(init, &format!("{name}.l{l}.bwd"), d_in, hidden)?))
            })
            .collect::<Result<_>>()?;
        Ok(BiGru { layers: cells, dropout })
    }

    pub fn param_count(input_dim: usize, hidden: usize, layers: usize) -> usize {
        (0..layers).map(|l| 2 * GruCell::param_count(if l == 0 { input_dim } else { 2 * hidden }, hidden)).sum()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].0.hidden
    }

    /// Final forward state concatenated with the backward state at t = 0:
    /// `[1, 2H]`.
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let mut input = x;
        let mut summary = None;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 {
                input = s.drop_with(input, self.dropout)?;
            }
            let hf = fwd.run(s, input, false)?;
            let hb = bwd.run(s, input, true)?;
            summary = Some(s.tape.concat_cols(&[*hf.last().unwrap(), hb[0]])?);
            if l + 1 < self.layers.len() {
                let rows = hf.iter().zip(&hb).map(|(a, b)| s.tape.concat_cols(&[*a, *b])).collect::<Result<Vec<_>>>()?;
                input = s.tape.concat_rows(&rows)?;
            }
        }
        Ok(summary.expect("at least one layer"))
    }
}

fn check_aligned<S: Scalar>(s: &Session<S>, audio: Var, visual: Var) -> Result<()> {
    let (ta, tv) = (s.tape.shape(audio)[0], s.tape.shape(visual)[0]);
    if ta != tv {
        return Err(Error::Data(format!("modalities are not aligned: audio T={ta} vs visual T={tv}")));
    }
    if ta == 0 {
        return Err(Error::Data("empty sequence".into()));
    }
    Ok(())
}

/// Framewise concatenation followed by one bidirectional GRU.
#[derive(Clone, Debug)]
pub struct EfGru {
    pub gru: BiGru,
    pub head: ResidualHead,
}

impl EfGru {
    pub fn new(init: &mut Init, audio_dim: usize, visual_dim: usize, hidden: usize, layers: usize, dropout: f64, n_out: usize) -> Result<Self> {
        let gru = BiGru::new(init, "ef_gru", audio_dim + visual_dim, hidden, layers, dropout)?;
        let head = ResidualHead::new(init, "task_head", 2 * hidden, n_out)?;
        Ok(EfGru { gru, head })
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, audio: Var, visual: Var) -> Result<Var> {
        check_aligned(s, audio, visual)?;
        let x = s.tape.concat_cols(&[audio, visual])?;
        let h = self.gru.forward(s, x)?;
        self.head.forward(s, h)
    }
}

/// Separate bidirectional GRUs per modality, merged at their final states.
#[derive(Clone, Debug)]
pub struct LfGru {
    pub audio: BiGru,
    pub visual: BiGru,
    pub head: ResidualHead,
}

impl LfGru {
    pub fn new(init: &mut Init, audio_dim: usize, visual_dim: usize, hidden: usize, layers: usize, dropout: f64, n_out: usize) -> Result<Self> {
        let audio = BiGru::new(init, "lf_gru_a", audio_dim, hidden, layers, dropout)?;
        let visual = BiGru::new(init, "lf_gru_v", visual_dim, hidden, layers, dropout)?;
        let head = ResidualHead::new(init, "task_head", 4 * hidden, n_out)?;
        Ok(LfGru { audio, visual, head })
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, audio: Var, visual: Var) -> Result<Var> {
        check_aligned(s, audio, visual)?;
        let ha = self.audio.forward(s, audio)?;
        let hv = self.visual.forward(s, visual)?;
        let h = s.tape.concat_cols(&[ha, hv])?;
        self.head.forward(s, h)
    }
}

/// Flattened outer product of `[z_a; 1]` and `[z_v; 1]` (both `[1, D]` rows).
pub fn tensor_fusion<S: Scalar>(s: &mut Session<S>, za: Var, zv: Var) -> Result<Var> {
    let one_a = s.input(Tensor::full(&[1, 1], S::one()));
    let one_v = s.input(Tensor::full(&[1, 1], S::one()));
    let a1 = s.tape.concat_cols(&[za, one_a])?;
    let v1 = s.tape.concat_cols(&[zv, one_v])?;
    let col = s.tape.transpose(a1)?;
    let outer = s.tape.matmul(col, v1)?;
    let n = s.tape.value(outer).len();
    s.tape.reshape(outer, &[1, n])
}

/// Static-input fusion: temporal means of both modalities, outer-product
/// fusion, then a two-layer head.
#[derive(Clone, Debug)]
pub struct Tfn {
    pub hidden: Linear,
    pub out: Linear,
}

impl Tfn {
    pub fn new(init: &mut Init, audio_dim: usize, visual_dim: usize, hidden: usize, n_out: usize) -> Result<Self> {
        Ok(Tfn {
            hidden: init.linear("tfn.hidden", (audio_dim + 1) * (visual_dim + 1), hidden)?,
            out: init.linear("task_head.out", hidden, n_out)?,
        })
    }

    pub fn forward_static<S: Scalar>(&self, s: &mut Session<S>, za: Var, zv: Var) -> Result<Var> {
        let fused = tensor_fusion(s, za, zv)?;
        let h = self.hidden.forward(s, fused)?;
        let h = s.tape.relu(h);
        let h = s.drop(h)?;
        self.out.forward(s, h)
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, audio: Var, visual: Var) -> Result<Var> {
        check_aligned(s, audio, visual)?;
        let za = s.tape.mean_rows(audio)?;
        let zv = s.tape.mean_rows(visual)?;
        self.forward_static(s, za, zv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    EfGru,
    LfGru,
    Tfn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// GRU hidden size, or the TFN head width.
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl BaselineConfig {
    /// Desk-scale defaults for synthetic data.
    pub fn small(kind: BaselineKind, audio_dim: usize, visual_dim: usize) -> Self {
        BaselineConfig { kind, audio_dim, visual_dim, hidden: 16, layers: 1, dropout: 0.1 }
    }
}

/// Parameter count of a GRU baseline including its head.
pub fn gru_baseline_params(kind: BaselineKind, audio_dim: usize, visual_dim: usize, hidden: usize, layers: usize, n_out: usize) -> usize {
    let head = |w: usize| 2 * (w * w + w) + w * n_out + n_out;
    match kind {
        BaselineKind::EfGru => BiGru::param_count(audio_dim + visual_dim, hidden, layers) + head(2 * hidden),
        BaselineKind::LfGru => BiGru::param_count(audio_dim, hidden, layers) + BiGru::param_count(visual_dim, hidden, layers) + head(4 * hidden),
        BaselineKind::Tfn => (audio_dim + 1) * (visual_dim + 1) * hidden + hidden + hidden * n_out + n_out,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSolution {
    pub hidden: usize,
    pub layers: usize,
    pub params: usize,
}

/// Smallest hidden size whose count comes closest to `target`, trying one
/// layer before two. Fails when neither depth lands within `tolerance`.
pub fn solve_budget(kind: BaselineKind, audio_dim: usize, visual_dim: usize, n_out: usize, target: f64, tolerance: f64) -> Result<BudgetSolution> {
    if kind == BaselineKind::Tfn {
        return Err(Error::Config("the budget solver applies to GRU baselines".into()));
    }
    for layers in [1, 2] {
        let count = |h: usize| gru_baseline_params(kind, audio_dim, visual_dim, h, layers, n_out);
        let (mut lo, mut hi) = (1usize, 1usize);
        while (count(hi) as f64) < target {
            hi *= 2;
        }
        while lo < hi {
            let mid = (lo + hi) / 2;
            if (count(mid) as f64) < target {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let best = [lo.saturating_sub(1).max(1), lo]
            .into_iter()
            .min_by(|a, b| (count(*a) as f64 - target).abs().total_cmp(&(count(*b) as f64 - target).abs()))
            .unwrap();
        let params = count(best);
        if (params as f64 / target - 1.0).abs() <= tolerance {
            return Ok(BudgetSolution { hidden: best, layers, params });
        }
    }
    Err(Error::Config(format!("no hidden size within {:.0}% of {target} parameters", tolerance * 100.0)))
}

/// Single-layer GRU over one modality with a linear readout, used to compare
/// feature extractors.
#[derive(Clone, Debug)]
pub struct GruProbe {
    pub cell: GruCell,
    pub out: Linear,
    pub dropout: f64,
}

pub const PROBE_HIDDEN: usize = 512;
pub const PROBE_DROPOUT: f64 = 0.2;

impl GruProbe {
    pub fn new(init: &mut Init, input_dim: usize, hidden: usize, n_out: usize) -> Result<Self> {
        Ok(GruProbe {
            cell: GruCell::new(init, "probe.gru", input_dim, hidden)?,
            out: init.linear("task_head.out", hidden, n_out)?,
            dropout: PROBE_DROPOUT,
        })
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let states = self.cell.run(s, x, false)?;
        let h = s.drop_with(*states.last().unwrap(), self.dropout)?;
        self.out.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Direct loop over the recurrence, reading packed weights.
    fn unrolled(params: &ParamStore<f64>, cell: &GruCell, x: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
        let (w, u, b, c) = (params.get(cell.w_ih), params.get(cell.w_hh), params.get(cell.b_ih), params.get(cell.b_hh));
        let hd = cell.hidden;
        let mut h = vec![0.0; hd];
        let mut out = vec![vec![]; x.len()];
        let order: Vec<usize> = if reverse { (0..x.len()).rev().collect() } else { (0..x.len()).collect() };
        for t in order {
            let gate = |g: usize, j: usize| {
                let col = g * hd + j;
                let gi: f64 = (0..cell.input_dim).map(|i| x[t][i] * w.at(i, col)).sum::<f64>() + b.data()[col];
                let gh: f64 = (0..hd).map(|k| h[k] * u.at(k, col)).sum::<f64>() + c.data()[col];
                (gi, gh)
            };
            let mut next = vec![0.0; hd];
            for (j, nj) in next.iter_mut().enumerate() {
                let (ri, rh) = gate(0, j);
                let (zi, zh) = gate(1, j);
                let (ni, nh) = gate(2, j);
                let r = sigmoid(ri + rh);
                let z = sigmoid(zi + zh);
                let n = (ni + r * nh).tanh();
                *nj = (1.0 - z) * n + z * h[j];
            }
            h = next;
            out[t] = h.clone();
        }
        out
    }

    #[test]
    fn gru_matches_unrolled_recurrence() {
        let mut init = Init::new(3);
        let cell = GruCell::new(&mut init, "g", 2, 3).unwrap();
        let params = init.store.cast::<f64>();
        let x = vec![vec![0.5, -1.0], vec![0.25, 2.0]];
        for reverse in [false, true] {
            let mut s = Session::eval(&params);
            let xv = s.input(Tensor::from_rows(&x).unwrap());
            let states = cell.run(&mut s, xv, reverse).unwrap();
            let oracle = unrolled(&params, &cell, &x, reverse);
            for t in 0..2 {
                for j in 0..3 {
                    assert!((s.tape.value(states[t]).data()[j] - oracle[t][j]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_weights_keep_hidden_zero_and_return_head_bias() {
        let mut init = Init::new(0);
        let model = EfGru::new(&mut init, 3, 2, 4, 1, 0.0, 2).unwrap();
        let mut params = init.store;
        for id in params.ids().collect::<Vec<_>>() {
            let shape = params.get(id).shape().to_vec();
            params.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let bias = model.head.out.bias.unwrap();
        params.set(bias, Tensor::new(&[2], vec![0.7, -0.3]).unwrap()).unwrap();
        let mut s = Session::eval(&params);
        let a = s.input(Tensor::full(&[5, 3], 1.0));
        let v = s.input(Tensor::full(&[5, 2], -2.0));
        let x = s.tape.concat_cols(&[a, v]).unwrap();
        let h = model.gru.forward(&mut s, x).unwrap();
        assert!(s.tape.value(h).data().iter().all(|&x| x == 0.0));
        let y = model.forward(&mut s, a, v).unwrap();
        assert_eq!(s.tape.value(y).data(), &[0.7, -0.3]);
    }

    #[test]
    fn single_frame_is_finite_and_misalignment_rejected() {
        let mut init = Init::new(1);
        let model = EfGru::new(&mut init, 3, 2, 4, 2, 0.0, 2).unwrap();
        let mut s = Session::eval(&init.store);
        let a = s.input(Tensor::full(&[1, 3], 0.3));
        let v = s.input(Tensor::full(&[1, 2], 0.1));
        let y = model.forward(&mut s, a, v).unwrap();
        assert!(s.tape.value(y).is_finite());
        let v2 = s.input(Tensor::full(&[2, 2], 0.1));
        assert!(model.forward(&mut s, a, v2).is_err());
    }

    #[test]
    fn lf_gru_ignores_visual_when_its_weights_are_zero() {
        let mut init = Init::new(2);
        let model = LfGru::new(&mut init, 3, 2, 4, 1, 0.0, 1).unwrap();
        let mut params = init.store;
        for id in params.ids().collect::<Vec<_>>() {
            if params.name(id).starts_with("lf_gru_v") {
                let shape = params.get(id).shape().to_vec();
                params.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let audio = Tensor::from_fn(&[4, 3], |i| (i as f32 * 0.37).sin());
        let out = |visual: Tensor<f32>| {
            let mut s = Session::eval(&params);
            let a = s.input(audio.clone());
            let v = s.input(visual);
            let y = model.forward(&mut s, a, v).unwrap();
            s.tape.value(y).clone()
        };
        assert_eq!(out(Tensor::zeros(&[4, 2])), out(Tensor::from_fn(&[4, 2], |i| i as f32 - 3.0)));
    }

    #[test]
    fn gru_gradients_match_differences() {
        let mut init = Init::new(5);
        let model = LfGru::new(&mut init, 2, 2, 3, 2, 0.0, 2).unwrap();
        let params = init.store.cast::<f64>();
        let x_a = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.7).cos());
        let x_v = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.3).sin());
        let worst = crate::nn::check_param_gradients(&params, 1e-6, |s| {
            let a = s.input(x_a.clone());
            let v = s.input(x_v.clone());
            let y = model.forward(s, a, v)?;
            let y = s.tape.tanh(y);
            Ok(s.tape.sum(y))
        })
        .unwrap();
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn fusion_structure() {
        let p = ParamStore::<f64>::new();
        let mut s = Session::eval(&p);
        let za = s.input(Tensor::zeros(&[1, 3]));
        let zv = s.input(Tensor::zeros(&[1, 2]));
        let f = tensor_fusion(&mut s, za, zv).unwrap();
        let data = s.tape.value(f).data();
        assert_eq!(data.len(), 12);
        assert_eq!(data.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(data[11], 1.0);

        let za = s.input(Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap());
        let zv = s.input(Tensor::new(&[1, 1], vec![5.0]).unwrap());
        let f = tensor_fusion(&mut s, za, zv).unwrap();
        // rows of [2, 3, 1] ⊗ [5, 1]
        assert_eq!(s.tape.value(f).data(), &[10.0, 2.0, 15.0, 3.0, 5.0, 1.0]);

        let za_v = vec![0.5, -1.5, 2.5];
        let zv_v = vec![4.0, -2.0];
        let za = s.input(Tensor::new(&[1, 3], za_v.clone()).unwrap());
        let zv = s.input(Tensor::new(&[1, 2], zv_v.clone()).unwrap());
        let f = tensor_fusion(&mut s, za, zv).unwrap();
        let d = s.tape.value(f).data();
        let last_col: Vec<f64> = (0..3).map(|i| d[i * 3 + 2]).collect();
        assert_eq!(last_col, za_v);
        assert_eq!(&d[9..11], &zv_v[..]);
    }

    #[test]
    fn tfn_ignores_visual_frame_order() {
        let mut init = Init::new(7);
        let model = Tfn::new(&mut init, 3, 2, 5, 2).unwrap();
        let audio = Tensor::from_fn(&[4, 3], |i| (i as f32).sin());
        let visual = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.25], vec![-2.0, 4.0]]).unwrap();
        let shuffled = Tensor::from_rows(&[vec![0.5, 0.25], vec![-2.0, 4.0], vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let out = |v: &Tensor<f32>| {
            let mut s = Session::eval(&init.store);
            let a = s.input(audio.clone());
            let v = s.input(v.clone());
            let y = model.forward(&mut s, a, v).unwrap();
            s.tape.value(y).clone()
        };
        assert!(out(&visual).max_abs_diff(&out(&shuffled)) < 1e-6);
    }

    #[test]
    fn counts_match_built_models() {
        for (kind, layers) in [(BaselineKind::EfGru, 1), (BaselineKind::EfGru, 2), (BaselineKind::LfGru, 2), (BaselineKind::Tfn, 1)] {
            let mut init = Init::new(0);
            match kind {
                BaselineKind::EfGru => drop(EfGru::new(&mut init, 6, 3, 5, layers, 0.0, 2).unwrap()),
                BaselineKind::LfGru => drop(LfGru::new(&mut init, 6, 3, 5, layers, 0.0, 2).unwrap()),
                BaselineKind::Tfn => drop(Tfn::new(&mut init, 6, 3, 5, 2).unwrap()),
            }
            assert_eq!(init.store.scalar_count(), gru_baseline_params(kind, 6, 3, 5, layers, 2), "{kind:?}");
        }
    }

    #[test]
    fn budget_solver_lands_near_target() {
        for kind in [BaselineKind::EfGru, BaselineKind::LfGru] {
            let sol = solve_budget(kind, 512, 17, 6, 38.3e6, 0.10).unwrap();
            assert!((sol.params as f64 / 38.3e6 - 1.0).abs() <= 0.10, "{kind:?} {sol:?}");
            assert_eq!(sol.params, gru_baseline_params(kind, 512, 17, sol.hidden, sol.layers, 6));
        }
        assert!(solve_budget(BaselineKind::EfGru, 512, 17, 6, 10.0, 0.01).is_err());
    }

    #[test]
    fn probe_shapes() {
        let mut init = Init::new(0);
        let probe = GruProbe::new(&mut init, 17, PROBE_HIDDEN, 6).unwrap();
        let mut s = Session::eval(&init.store);
        let x = s.input(Tensor::full(&[3, 17], 0.1));
        let y = probe.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), &[1, 6]);
    }
}
