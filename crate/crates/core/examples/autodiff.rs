//! The tape on a small expression, then finite-difference checks of every
//! operation and of the whole tiny model.

use avmult::numerics::gradcheck::op_suite;
use avmult::numerics::{Tape, Tensor};
use avmult::mult::ModelConfig;
use avmult::training::end_to_end_gradient_check;

fn main() -> avmult::Result<()> {
    // loss = sum(tanh(x · w))
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]])?);
    let w = tape.leaf(Tensor::from_rows(&[vec![0.3], vec![-0.2]])?);
    let h = tape.matmul(x, w)?;
    let y = tape.tanh(h);
    let loss = tape.sum(y);
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item());
    println!("dloss/dw {:?}", grads.get(w).map(|g| g.data().to_vec()));

    for (name, err) in op_suite(0, 1e-6)? {
        println!("{name:<18} worst relative error {err:.2e}");
    }
    let e2e = end_to_end_gradient_check(&ModelConfig::tiny(), 10, 0)?;
    println!("tiny model end to end {e2e:.2e}");
    Ok(())
}
