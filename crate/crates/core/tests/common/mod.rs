//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod models;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinylab::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces any node to a scalar through a fixed random projection so every
/// output element carries a distinct weight.
pub fn project_to_scalar(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let n = tape.value(y).len();
    let flat = tape.reshape(y, &[1, n]).unwrap();
    let w = random_tensor(&[n, 1], seed);
    let w = tape.leaf(&w);
    let s = tape.matmul(flat, w).unwrap();
    tape.sum(s)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Like [`relative_error`] but never divides by less than `floor`, for
/// gradients that vanish in exact arithmetic and only carry rounding noise.
pub fn relative_error_floored(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_grads(
    inputs: &[Tensor<f64>],
    loss: &dyn Fn(&[Tensor<f64>]) -> f64,
    h: f64,
) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = loss(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = loss(&work);
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Builds the graph on fresh tapes, compares autodiff gradients with central
/// differences, and returns the worst per-input relative error.
pub fn gradcheck(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |ts: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss)[0]
    };
    let numeric = numeric_grads(inputs, &eval, FD_STEP);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
