//! Finite-difference checks of every differentiable primitive.

use ntk_prune::rng::SplitMix64;
use ntk_prune::tape::{AttnGeometry, Tape, Var};
use ntk_prune::tensor::Tensor;
use ntk_prune::Result;

const TRIALS: u64 = 100;
const H: f32 = 1e-3;
const PROBES: usize = 4;

/// Builds `sum(op(inputs) * r)` for a fixed random `r` and compares the
/// tape gradient of every input with central differences.
fn check(
    name: &str,
    seed: u64,
    inputs: &[Tensor],
    op: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let mut rng = SplitMix64::new(seed ^ 0xABCD);
    let scalar = |vals: &[Tensor], weights: Option<&Tensor>, grad: bool| -> (Tape, Vec<Var>, Var, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = op(&mut tape, &vars).unwrap();
        let shape = tape.value(out).shape().to_vec();
        let w = weights.cloned().unwrap_or_else(|| {
            Tensor::randn(&shape, 1.0, &mut SplitMix64::new(seed ^ 0x5151))
        });
        let wv = tape.leaf(w.clone(), false);
        let prod = tape.mul(out, wv).unwrap();
        let s = tape.sum(prod).unwrap();
        (tape, vars, s, w)
    };
    let (mut tape, vars, s, w) = scalar(inputs, None, true);
    tape.backward(s).unwrap();
    let mut worst = 0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("leaf gradient").to_vec();
        for _ in 0..PROBES {
            let j = rng.below(inputs[i].len() as u64) as usize;
            let eval = |delta: f32| {
                let mut vals = inputs.to_vec();
                vals[i].data_mut()[j] += delta;
                let (t, _, s, _) = scalar(&vals, Some(&w), false);
                t.value(s).data()[0] as f64
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H as f64);
            let a = analytic[j] as f64;
            let err = (numeric - a).abs() / (1e-2 + 0.05 * numeric.abs().max(a.abs()));
            assert!(
                err <= 1.0,
                "{name} trial {seed}: input {i}[{j}] analytic {a} numeric {numeric}"
            );
            worst = worst.max(err);
        }
    }
    worst
}

fn randn(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn dims(rng: &mut SplitMix64) -> (usize, usize, usize) {
    (1 + rng.below(4) as usize, 1 + rng.below(5) as usize, 1 + rng.below(4) as usize)
}

#[test]
fn matmul() {
    for t in 0..TRIALS {
        let mut rng = SplitMix64::new(t);
        let (n, k, m) = dims(&mut rng);
        let ins = [randn(&[n, k], &mut rng), randn(&[k, m], &mut rng)];
        check("matmul", t, &ins, &|tp, v| tp.matmul(v[0], v[1]));
    }
}

#[test]
fn add_and_mul() {
    for t in 0..TRIALS {
        let mut rng = SplitMix64::new(t);
        let (n, k, _) = dims(&mut rng);
        let ins = [randn(&[n, k], &mut rng), randn(&[n, k], &mut rng)];
        check("add", t, &ins, &|tp, v| tp.add(v[0], v[1]));
        check("mul", t, &ins, &|tp, v| tp.mul(v[0], v[1]));
        // shared input exercises gradient accumulation
        check("mul-self", t, &ins[..1], &|tp, v| tp.mul(v[0], v[0]));
    }
}

#[test]
fn unary_ops() {
    for t in 0..TRIALS {
        let mut rng = SplitMix64::new(t);
        let (n, k, _) = dims(&mut rng);
        let ins = [randn(&[n, k], &mut rng)];
        check("swish", t, &ins, &|tp, v| tp.swish(v[0]));
        check("scale", t, &ins, &|tp, v| tp.scale(v[0], -1.7));
        check("softmax", t, &ins, &|tp, v| tp.softmax_rows(v[0]));
        check("sum", t, &ins, &|tp, v| tp.sum(v[0]));
    }
}

#[test]
fn rmsnorm() {
    for t in 0..TRIALS {
        let mut rng = SplitMix64::new(t);
        let (n, k, _) = dims(&mut rng);
        let k = k + 1;
        let ins = [randn(&[n, k], &mut rng), randn(&[k], &mut rng)];
        check("rmsnorm", t, &ins, &|tp, v| tp.rmsnorm(v[0], v[1]));
    }
}

#[test]
fn embed() {
    for t in 0..TRIALS {
        let mut rng = SplitMix64::new(t);
        let (rows, d, n) = dims(&mut rng);
        let ids: Vec<usize> = (0..n + 2).map(|_| rng.below(rows as u64) as usize).collect();
        let ins = [randn(&[rows, d], &mut rng)];
        check("embed", t, &ins, &|tp, v| tp.embed(v[0], &ids));
    }
}

#[test]
fn cross_entropy() {
    for t in 0..TRIALS {
        let mut rng = SplitMix64::new(t);
        let (n, v, _) = dims(&mut rng);
        let (n, v) = (n + 1, v + 1);
        let mut targets: Vec<Option<usize>> =
            (0..n).map(|_| Some(rng.below(v as u64) as usize)).collect();
        targets[n - 1] = None;
        let ins = [randn(&[n, v], &mut rng)];
        check("cross_entropy", t, &ins, &|tp, x| tp.cross_entropy_mean(x[0], &targets));
    }
}

#[test]
fn causal_attention() {
    for t in 0..TRIALS {
        let mut rng = SplitMix64::new(t);
        let kv_heads = 1 + rng.below(2) as usize;
        let heads = kv_heads * (1 + rng.below(2) as usize);
        let geom = AttnGeometry {
            batch: 1 + rng.below(2) as usize,
            seq: 1 + rng.below(4) as usize,
            heads,
            kv_heads,
            head_dim: 1 + rng.below(3) as usize,
        };
        let rows = geom.batch * geom.seq;
        let ins = [
            randn(&[rows, heads * geom.head_dim], &mut rng),
            randn(&[rows, kv_heads * geom.head_dim], &mut rng),
            randn(&[rows, kv_heads * geom.head_dim], &mut rng),
        ];
        check("attention", t, &ins, &|tp, v| tp.causal_attention(v[0], v[1], v[2], geom));
    }
}
