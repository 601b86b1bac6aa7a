//! Whole-model gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinylab::{Mode, Model, ModelConfig, Tape};

use super::{relative_error_floored, FD_STEP};

fn random_window(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Central-difference check of every parameter of a model on a fixed batch,
/// with dropout active under a mask that is identical on every evaluation.
pub fn model_gradcheck(cfg: ModelConfig) -> Vec<(String, f64)> {
    let (t, v) = (cfg.context, cfg.vocab);
    let mut model = Model::<f64>::new(cfg, 7).unwrap();
    // Move every parameter well away from its tiny initialization so each
    // path carries a visible gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in model.params_mut() {
        for x in p.tensor.data_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
    }
    let windows: Vec<Vec<usize>> = (0..3).map(|s| random_window(t, v, 20 + s)).collect();
    let batch: Vec<&[usize]> = windows.iter().map(Vec::as_slice).collect();
    let targets = [1, 4, 0];
    let loss_with = |m: &Model<f64>, tape: &mut Tape<f64>| {
        let bound = m.bind(tape);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let logits = m
            .forward(tape, &bound, &batch, &mut Mode::Train(&mut drop_rng))
            .unwrap();
        (bound, tape.cross_entropy(logits, &targets).unwrap())
    };
    let mut tape = Tape::new();
    let (bound, loss) = loss_with(&model, &mut tape);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = bound
        .iter()
        .zip(model.params())
        .map(|(&b, p)| {
            tape.grad(b)
                .map(<[f64]>::to_vec)
                .unwrap_or(vec![0.0; p.tensor.numel()])
        })
        .collect();

    let h = FD_STEP;
    let mut errors = Vec::new();
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = model.params()[i].tensor.data()[j];
            let mut eval_at = |x: f64| {
                model.params_mut()[i].tensor.data_mut()[j] = x;
                let mut tape = Tape::new();
                let (_, l) = loss_with(&model, &mut tape);
                tape.value(l)[0]
            };
            *n = (eval_at(orig + h) - eval_at(orig - h)) / (2.0 * h);
            model.params_mut()[i].tensor.data_mut()[j] = orig;
        }
        // With learned positions the key bias adds the same q.b to every
        // score of a row, which softmax ignores: its true gradient is zero.
        errors.push((
            model.params()[i].name.clone(),
            relative_error_floored(grad, &numeric, 1e-6),
        ));
    }
    errors
}

pub fn tiny_transformer() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        ff_width: 16,
        ..ModelConfig::transformer(4, 5, 2)
    }
}
