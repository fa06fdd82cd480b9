//! Checks tape gradients of a small SwiGLU block against central differences.
//!
//! `cargo run --release --example autodiff_gradcheck`

use ntk_prune::rng::SplitMix64;
use ntk_prune::tape::Tape;
use ntk_prune::tensor::Tensor;

fn loss(x: &Tensor, w_gate: &Tensor, w_up: &Tensor) -> ntk_prune::Result<(f64, Vec<f32>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(x.clone(), false);
    let g = tape.leaf(w_gate.clone(), true);
    let u = tape.leaf(w_up.clone(), true);
    let gate = tape.matmul(x, g)?;
    let gate = tape.swish(gate)?;
    let up = tape.matmul(x, u)?;
    let h = tape.mul(gate, up)?;
    let out = tape.sum(h)?;
    let value = tape.value(out).data()[0] as f64;
    tape.backward(out)?;
    Ok((value, tape.grad(g).expect("gate grad").to_vec()))
}

fn main() -> ntk_prune::Result<()> {
    let mut rng = SplitMix64::new(1);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let w_gate = Tensor::randn(&[6, 5], 0.5, &mut rng);
    let w_up = Tensor::randn(&[6, 5], 0.5, &mut rng);
    let (_, grad) = loss(&x, &w_gate, &w_up)?;
    let h = 1e-3f32;
    let mut worst = 0f64;
    for i in 0..w_gate.len() {
        let mut plus = w_gate.clone();
        plus.data_mut()[i] += h;
        let mut minus = w_gate.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(&x, &plus, &w_up)?.0 - loss(&x, &minus, &w_up)?.0) / (2.0 * h as f64);
        let err = (numeric - grad[i] as f64).abs() / (1.0 + numeric.abs());
        worst = worst.max(err);
    }
    println!("checked {} gate weights, worst relative error {worst:.2e}", w_gate.len());
    Ok(())
}
