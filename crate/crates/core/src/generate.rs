//! Autoregressive sampling from a trained model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{TokenMode, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;

/// Below this temperature sampling becomes argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub prompt: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_tokens: 100,
            temperature: 1.0,
            seed: 0,
            prompt: "HAMLET:".into(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 {
            return Err(Error::invalid("sampler", "n_tokens must be at least 1"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(
                "sampler",
                format!("temperature must be positive, got {}", self.temperature),
            ));
        }
        Ok(())
    }
}

/// `softmax(logits / temperature)` in f64.
pub fn sampling_distribution<F: Scalar>(logits: &[F], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|x| x.as_f64() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Draws one index from `softmax(logits / temperature)`, or the first
/// maximum when the temperature is below [`GREEDY_TEMPERATURE`].
pub fn sample_index<F: Scalar, R: Rng>(logits: &[F], temperature: f64, rng: &mut R) -> usize {
    if temperature < GREEDY_TEMPERATURE {
        let mut best = 0;
        for (i, x) in logits.iter().enumerate() {
            if *x > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let probs = sampling_distribution(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum a hair below u.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Continues the prompt by `n_tokens` sampled tokens and returns prompt plus
/// continuation. Windows shorter than the model's context are left-padded
/// with id 0, longer ones keep the most recent tokens.
pub fn generate<F: Scalar>(model: &Model<F>, vocab: &Vocab, cfg: &SamplerConfig) -> Result<String> {
    cfg.validate()?;
    if model.config().vocab != vocab.len() {
        return Err(Error::invalid(
            "generate",
            format!(
                "model vocabulary {} differs from {}",
                model.config().vocab,
                vocab.len()
            ),
        ));
    }
    let prompt = vocab.encode(&cfg.prompt)?;
    if prompt.is_empty() && vocab.mode() == TokenMode::Char {
        return Err(Error::Empty("prompt"));
    }
    let t = model.config().context;
    let mut window = vec![0usize; t.saturating_sub(prompt.len())];
    window.extend_from_slice(&prompt[prompt.len().saturating_sub(t)..]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut produced = Vec::with_capacity(cfg.n_tokens);
    for _ in 0..cfg.n_tokens {
        let logits = model.logits(&[&window])?;
        let next = sample_index(logits.data(), cfg.temperature, &mut rng);
        produced.push(next);
        window.remove(0);
        window.push(next);
    }
    let continuation = vocab.decode(&produced)?;
    Ok(match vocab.mode() {
        TokenMode::Char => format!("{}{continuation}", cfg.prompt),
        TokenMode::Word => {
            let prompt = vocab.decode(&prompt)?;
            if prompt.is_empty() {
                continuation
            } else {
                format!("{prompt} {continuation}")
            }
        }
    })
}
