//! Central finite-difference checks for taped functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

/// Smallest denominator used when forming relative errors, so that
/// gradients that are exactly zero compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`, over every element of every input. Returns the
/// largest relative error seen.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Values drawn uniformly from ±[0.1, 1], away from the kinks of relu/abs.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// Contracts `x` with fixed random weights so every output element carries a
/// distinct gradient.
fn weighted_sum(t: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(t.shape(x), |_| rng.random_range(-1.0..1.0));
    let y = t.mul_const(x, &w)?;
    Ok(t.sum(y))
}

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

/// Finite-difference check of every differentiable tape operation in 64-bit
/// precision. Returns the worst relative error per operation.
pub fn op_suite(seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_shared_rhs", vec![vec![2, 3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("div", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.div(v[0], v[1]))),
        ("add_row", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("scale", vec![vec![3, 4]], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", vec![vec![3, 4]], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("mul_const", vec![vec![3, 4]], Box::new(|t, v| t.mul_const(v[0], &Tensor::from_fn(&[3, 4], |i| i as f64 - 5.5)))),
        ("add_const", vec![vec![3, 4]], Box::new(|t, v| t.add_const(v[0], &Tensor::from_fn(&[3, 4], |i| i as f64)))),
        ("relu", vec![vec![3, 4]], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("tanh", vec![vec![3, 4]], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("sigmoid", vec![vec![3, 4]], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("abs", vec![vec![3, 4]], Box::new(|t, v| Ok(t.abs(v[0])))),
        ("dropout", vec![vec![3, 4]], Box::new(|t, v| t.dropout(v[0], 0.4, &mut ChaCha8Rng::seed_from_u64(9)))),
        ("transpose", vec![vec![3, 4]], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![vec![3, 4]], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("softmax", vec![vec![3, 4]], Box::new(|t, v| Ok(t.softmax(v[0])))),
        ("layernorm", vec![vec![3, 4], vec![4], vec![4]], Box::new(|t, v| t.layernorm(v[0], v[1], v[2], 1e-5))),
        ("conv1d_k1", vec![vec![5, 3], vec![1, 3, 2]], Box::new(|t, v| t.conv1d(v[0], v[1]))),
        ("conv1d_k3", vec![vec![5, 3], vec![3, 3, 2]], Box::new(|t, v| t.conv1d(v[0], v[1]))),
        ("slice_cols", vec![vec![3, 5]], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("slice_rows", vec![vec![5, 3]], Box::new(|t, v| t.slice_rows(v[0], 2, 2))),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("sum", vec![vec![3, 4]], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![vec![3, 4]], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("mean_rows", vec![vec![3, 4]], Box::new(|t, v| t.mean_rows(v[0]))),
        ("cross_entropy", vec![vec![3, 4]], Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 3]))),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len());
    for (k, (name, shapes, f)) in cases.into_iter().enumerate() {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| away_from_zero(&mut rng, s)).collect();
        let worst = check_gradients(&inputs, h, |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, seed ^ k as u64)
        })?;
        out.push((name, worst));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..100 {
            for (name, err) in op_suite(seed, 1e-6).unwrap() {
                assert!(err < 1e-4, "{name} (instance {seed}): {err:e}");
            }
        }
    }
}
