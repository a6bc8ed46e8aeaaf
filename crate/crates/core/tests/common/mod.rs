//! Helpers shared by the integration tests: finite differences and
//! independent reference implementations.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swpc_core::autodiff::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Some inputs have an exactly zero gradient (a bias ahead of a batch norm),
/// where central differences return pure rounding noise near 1e-10. Norms
/// below this floor are compared in absolute terms.
pub const ZERO_GRAD_FLOOR: f64 = 1e-5;

pub fn rel_err_floored(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}

/// `Σ y ⊙ r` for a fixed random `r`, turning any tensor output into a scalar.
pub fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Var {
    let r = tape.leaf(r.clone());
    let m = tape.mul(y, r).unwrap();
    tape.sum(m)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every input of `build`. At most `max_coords` coordinates per
/// input are probed, chosen at random.
pub fn gradcheck(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    max_coords: usize,
    seed: u64,
) -> f64 {
    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut pick = rng(seed);
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).expect("gradient for every input").data().to_vec();
        let coords: Vec<usize> = if input.len() <= max_coords {
            (0..input.len()).collect()
        } else {
            (0..max_coords).map(|_| pick.gen_range(0..input.len())).collect()
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &i in &coords {
            let h = 1e-6 * input.data()[i].abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
            analytic.push(g[i]);
        }
        worst = worst.max(rel_err_floored(&analytic, &numeric, ZERO_GRAD_FLOOR));
    }
    worst
}

/// Direct evaluation of `exp(-Σ‖a_i − b_i‖² / 2σ²)` on row-normalized inputs.
pub fn kernel_oracle(a: &[f64], b: &[f64], dim: usize, sigma: f64) -> f64 {
    let mut total = 0.0;
    for (ra, rb) in a.chunks(dim).zip(b.chunks(dim)) {
        let na = norm(ra);
        let nb = norm(rb);
        for (x, y) in ra.iter().zip(rb) {
            let d = x / na - y / nb;
            total += d * d;
        }
    }
    (-total / (2.0 * sigma * sigma)).exp()
}
