//! Parameter initialization and the small layer building blocks shared by
//! the transformer and the baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// A single forward evaluation: the tape, the parameter values it reads,
/// and the dropout state.
pub struct Session<'a, S: Scalar> {
    pub tape: Tape<S>,
    pub params: &'a ParamStore<S>,
    pub train: bool,
    pub dropout: f64,
    rng: ChaCha8Rng,
    kv_log: Option<Vec<Var>>,
}

impl<'a, S: Scalar> Session<'a, S> {
    /// Inference session: dropout disabled.
    pub fn eval(params: &'a ParamStore<S>) -> Self {
        Session { tape: Tape::new(), params, train: false, dropout: 0.0, rng: ChaCha8Rng::seed_from_u64(0), kv_log: None }
    }

    /// Training session with dropout rate `dropout`, seeded for reproducibility.
    pub fn train(params: &'a ParamStore<S>, dropout: f64, seed: u64) -> Self {
        Session {
            tape: Tape::new(),
            params,
            train: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            kv_log: None,
        }
    }

    /// Records the key/value source of every cross-modal attention call.
    pub fn with_kv_log(mut self) -> Self {
        self.kv_log = Some(Vec::new());
        self
    }

    pub fn kv_log(&self) -> Option<&[Var]> {
        self.kv_log.as_deref()
    }

    pub(crate) fn log_kv(&mut self, v: Var) {
        if let Some(log) = &mut self.kv_log {
            log.push(v);
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.tape.constant(t)
    }

    pub fn drop(&mut self, x: Var) -> Result<Var> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x);
        }
        self.tape.dropout(x, self.dropout, &mut self.rng)
    }

    pub fn drop_with(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        self.tape.dropout(x, p, &mut self.rng)
    }
}

/// Deterministic parameter allocator.
pub struct Init {
    pub store: ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn from_store(store: ParamStore<f32>, seed: u64) -> Self {
        Init { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in ±1/sqrt(fan_in) (Kaiming-uniform with a = sqrt(5)).
    pub fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound) as f32);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, 1.0))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.uniform_fan_in(&format!("{name}.weight"), &[d_in, d_out], d_in)?,
            bias: Some(self.zeros(&format!("{name}.bias"), &[d_out])?),
        })
    }

    pub fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm { gain: self.ones(&format!("{name}.gain"), &[d])?, bias: self.zeros(&format!("{name}.bias"), &[d])? })
    }

    pub fn feed_forward(&mut self, name: &str, d: usize, hidden: usize) -> Result<FeedForward> {
        Ok(FeedForward { up: self.linear(&format!("{name}.up"), d, hidden)?, down: self.linear(&format!("{name}.down"), hidden, d)? })
    }
}

/// Affine map `x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.p(b);
                s.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let g = s.p(self.gain);
        let b = s.p(self.bias);
        s.tape.layernorm(x, g, b, LAYERNORM_EPS)
    }
}

/// Position-wise `down(dropout(relu(up(x))))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.tape.relu(h);
        let h = s.drop(h)?;
        self.down.forward(s, h)
    }
}

/// Residual block over a single feature row followed by an output map:
/// `out(h + down(relu(up(h))))`.
#[derive(Clone, Debug)]
pub struct ResidualHead {
    pub up: Linear,
    pub down: Linear,
    pub out: Linear,
}

impl ResidualHead {
    pub fn new(init: &mut Init, name: &str, width: usize, n_out: usize) -> Result<Self> {
        Ok(ResidualHead {
            up: init.linear(&format!("{name}.res_up"), width, width)?,
            down: init.linear(&format!("{name}.res_down"), width, width)?,
            out: init.linear(&format!("{name}.out"), width, n_out)?,
        })
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, h: Var) -> Result<Var> {
        let r = self.up.forward(s, h)?;
        let r = s.tape.relu(r);
        let r = s.drop(r)?;
        let r = self.down.forward(s, r)?;
        let h = s.tape.add(h, r)?;
        self.out.forward(s, h)
    }
}

/// Largest relative error between taped parameter gradients of the scalar
/// `f` and central differences with step `h`, over every parameter element.
pub fn check_param_gradients<F>(params: &ParamStore<f64>, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::eval(p);
        let out = f(&mut s)?;
        Ok(s.tape.value(out).item())
    };
    let mut s = Session::eval(params);
    let out = f(&mut s)?;
    let grads = s.tape.backward(out)?.param_grads(params.len());
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for id in params.ids() {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let ana = grads.get(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(crate::numerics::gradcheck::rel_err(ana, (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

