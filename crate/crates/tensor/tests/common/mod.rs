#![allow(dead_code)]

use irisseg_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Builds the loss from leaves on a fresh tape and returns its value.
pub fn eval<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).item()
}

/// Maximum error of analytic gradients against central differences, under
/// the combined relative / absolute criterion. Returns the worst relative
/// error among entries whose magnitude exceeds the absolute floor, and
/// panics with context when any entry fails.
pub fn check_gradients<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus, &build) - eval(&minus, &build)) / (2.0 * H);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs());
            if denom < 1e-6 {
                assert!(
                    (a - numeric).abs() <= ABS_TOL,
                    "input {k} entry {i}: analytic {a} numeric {numeric}"
                );
            } else {
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel <= REL_TOL,
                    "input {k} entry {i}: analytic {a} numeric {numeric} rel {rel}"
                );
                worst = worst.max(rel);
            }
        }
    }
    worst
}

/// `sum(y * weights)` for a fixed weight tensor so every output element
/// contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = rand_tensor(tape.shape(y), &mut r);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p)
}
