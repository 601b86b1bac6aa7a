//! Mini-batch training with per-epoch validation and best-checkpoint
//! retention.

use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{window_count, window_stream, EncodedSplits, Split, SplitSpec, Windows};
use crate::error::{Error, Result};
use crate::model::{Arch, Model};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tape::{Mode, Tape};
use crate::tensor::{Scalar, Tensor};

/// Sampling seed of the validation and test streams. It does not depend on
/// the run seed, so every model is scored on the same windows.
pub const EVAL_SEED: u64 = 0x7e57;

/// Train/eval caps of the `--fast` profile.
pub const FAST_TRAIN_CAP: usize = 5_000;
pub const FAST_EVAL_CAP: usize = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_cap: usize,
    pub val_cap: usize,
    pub test_cap: usize,
    /// Stop after this many consecutive epochs without a new best
    /// validation NLL.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    /// Draw a fresh training sample every epoch (seed + epoch) rather than
    /// reusing the first one.
    pub resample_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 64,
            epochs: 4,
            train_cap: 50_000,
            val_cap: 10_000,
            test_cap: 10_000,
            early_stop_patience: None,
            seed: 0,
            resample_each_epoch: true,
        }
    }
}

impl TrainConfig {
    /// Character-level recipe: 3 epochs for linear and MLP, 4 otherwise.
    pub fn char_level(arch: Arch) -> Self {
        let epochs = if arch.uses_attention() { 4 } else { 3 };
        Self {
            epochs,
            ..Self::default()
        }
    }

    /// Word-level recipe with early stopping.
    pub fn word_level() -> Self {
        Self {
            batch_size: 32,
            epochs: 8,
            train_cap: 80_000,
            val_cap: 20_000,
            test_cap: 20_000,
            early_stop_patience: Some(2),
            ..Self::default()
        }
    }

    /// Scaled-down caps and a single epoch for smoke runs.
    pub fn fast(mut self) -> Self {
        self.train_cap = self.train_cap.min(FAST_TRAIN_CAP);
        self.val_cap = self.val_cap.min(FAST_EVAL_CAP);
        self.test_cap = self.test_cap.min(FAST_EVAL_CAP);
        self.epochs = 1;
        self.batch_size = self.batch_size.min(self.val_cap).min(self.test_cap);
        self
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::TrainConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        for (name, cap) in [
            ("train_cap", self.train_cap),
            ("val_cap", self.val_cap),
            ("test_cap", self.test_cap),
        ] {
            if cap < self.batch_size {
                return fail(format!(
                    "{name} {cap} is smaller than batch_size {}",
                    self.batch_size
                ));
            }
        }
        if self.early_stop_patience == Some(0) {
            return fail("early_stop_patience must be at least 1".into());
        }
        Ok(())
    }

    /// Windows per training epoch for a training split of `train_len` ids.
    pub fn positions_per_epoch(&self, train_len: usize, context: usize) -> usize {
        window_count(train_len, context).min(self.train_cap)
    }

    fn split_spec(&self, split: Split, epoch: usize) -> SplitSpec {
        let (cap, seed) = match split {
            Split::Train if self.resample_each_epoch => {
                (self.train_cap, self.seed.wrapping_add(epoch as u64))
            }
            Split::Train => (self.train_cap, self.seed),
            Split::Val => (self.val_cap, EVAL_SEED),
            Split::Test => (self.test_cap, EVAL_SEED.wrapping_add(1)),
        };
        SplitSpec {
            split,
            max_positions: cap,
            seed,
        }
    }

    /// The evaluation stream used for `split` (train uses epoch 0's sample).
    pub fn eval_stream<'a>(
        &self,
        ids: &'a [usize],
        context: usize,
        split: Split,
    ) -> Result<Windows<'a>> {
        window_stream(ids, context, self.split_spec(split, 0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, weighted by batch size.
    pub train_nll: f64,
    pub val_nll: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    /// Test NLL of the retained best checkpoint.
    pub test_nll: f64,
    pub positions_per_epoch: usize,
    pub stopped_early: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Scalar = f32> {
    pub report: RunReport,
    /// Parameter values at the best validation epoch; the model is left
    /// holding the same values.
    pub best: Vec<Tensor<F>>,
}

/// Trains `model` on the encoded splits. The model ends up restored to the
/// best validation epoch, which is also the state scored on the test split.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    data: &EncodedSplits,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let context = model.config().context;
    let val = cfg.eval_stream(&data.val, context, Split::Val)?;
    let test = cfg.eval_stream(&data.test, context, Split::Test)?;
    let adam = cfg.adam();
    let mut state = AdamState::new(model.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let started = Instant::now();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor<F>>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut positions = 0;

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let windows = window_stream(
            &data.train,
            context,
            cfg.split_spec(Split::Train, epoch - 1),
        )?;
        positions = windows.len();
        let mut loss_sum = 0.0;
        for (i, batch) in windows.batches(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let logits = model.forward(
                &mut tape,
                &bound,
                &batch.contexts,
                &mut Mode::Train(&mut dropout_rng),
            )?;
            let loss = tape.cross_entropy(logits, &batch.targets)?;
            let l = tape.value(loss)[0].as_f64();
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: i,
                    loss: l,
                });
            }
            loss_sum += l * batch.targets.len() as f64;
            tape.backward(loss)?;
            model.accumulate_grads(&tape, &bound);
            adam_step(model.params_mut(), &mut state, &adam)?;
            model.zero_grad();
            if i % 100 == 0 {
                debug!("epoch {epoch} batch {i}: loss {l:.4}");
            }
        }
        let train_nll = loss_sum / windows.len() as f64;
        let val_nll = evaluate_nll(model, &val, cfg.batch_size)?;
        let seconds = epoch_start.elapsed().as_secs_f64();
        info!("epoch {epoch}: train {train_nll:.4} val {val_nll:.4} ({seconds:.1}s)");
        records.push(EpochRecord {
            epoch,
            train_nll,
            val_nll,
            seconds,
        });

        if best.as_ref().is_none_or(|(_, b, _)| val_nll < *b) {
            best = Some((epoch, val_nll, model.snapshot()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.early_stop_patience.is_some_and(|p| stale >= p) {
                info!("early stop after epoch {epoch}");
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_nll, snapshot) = best.expect("at least one epoch ran");
    model.restore(snapshot.clone())?;
    let test_nll = evaluate_nll(model, &test, cfg.batch_size)?;
    info!("best epoch {best_epoch}: val {best_val_nll:.4} test {test_nll:.4}");
    Ok(TrainOutcome {
        report: RunReport {
            epochs: records,
            best_epoch,
            best_val_nll,
            test_nll,
            positions_per_epoch: positions,
            stopped_early,
            seconds: started.elapsed().as_secs_f64(),
        },
        best: snapshot,
    })
}

/// Mean next-token NLL in nats over every window, in eval mode.
pub fn evaluate_nll<F: Scalar>(
    model: &Model<F>,
    windows: &Windows<'_>,
    batch_size: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Empty("evaluation stream"));
    }
    if batch_size == 0 {
        return Err(Error::invalid(
            "evaluate_nll",
            "batch size must be at least 1",
        ));
    }
    let mut total = 0.0;
    for batch in windows.batches(batch_size) {
        let logits = model.logits(&batch.contexts)?;
        let v = model.config().vocab;
        for (row, &target) in logits.data().chunks_exact(v).zip(&batch.targets) {
            total += row_nll(row, target);
        }
    }
    Ok(total / windows.len() as f64)
}

/// `logsumexp(row) - row[target]`, accumulated in f64.
fn row_nll<F: Scalar>(row: &[F], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
    max + sum.ln() - row[target].as_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use crate::model::ModelConfig;

    fn toy_splits(text: &str, vocab: &Vocab) -> EncodedSplits {
        let ids = vocab.encode(text).unwrap();
        EncodedSplits {
            train: ids.clone(),
            val: ids.clone(),
            test: ids,
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                val_cap: 10,
                ..ok.clone()
            },
            TrainConfig {
                beta2: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                early_stop_patience: Some(0),
                ..ok.clone()
            },
        ] {
            assert!(
                matches!(bad.validate(), Err(Error::TrainConfig(_))),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn recipes_follow_architecture() {
        assert_eq!(TrainConfig::char_level(Arch::Linear).epochs, 3);
        assert_eq!(TrainConfig::char_level(Arch::Mlp).epochs, 3);
        assert_eq!(TrainConfig::char_level(Arch::Attention).epochs, 4);
        assert_eq!(TrainConfig::char_level(Arch::Transformer).epochs, 4);
        let w = TrainConfig::word_level();
        assert_eq!(
            (w.batch_size, w.epochs, w.train_cap, w.early_stop_patience),
            (32, 8, 80_000, Some(2))
        );
        let f = TrainConfig::default().fast();
        assert_eq!(
            (f.train_cap, f.val_cap, f.test_cap, f.epochs),
            (5_000, 1_000, 1_000, 1)
        );
    }

    #[test]
    fn one_epoch_smoke_beats_uniform() {
        let text: String =
            "the quick brown fox jumps over the lazy dog. ".repeat(5)[..200].to_string();
        let vocab = Vocab::build_char(&[&text]).unwrap();
        let data = toy_splits(&text, &vocab);
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 1,
            train_cap: 50,
            val_cap: 50,
            test_cap: 50,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut model = Model::<f32>::new(ModelConfig::linear(8, vocab.len()), 0).unwrap();
        let out = train(&mut model, &data, &cfg).unwrap();
        let r = &out.report;
        assert_eq!(r.epochs.len(), 1);
        assert!(r.epochs[0].train_nll.is_finite());
        assert!(r.epochs[0].train_nll < (vocab.len() as f64).ln());
        assert_eq!(r.positions_per_epoch, 50);
    }

    #[test]
    fn zero_head_scores_ln_v_and_eval_is_stable() {
        let text = "abcdefghij".repeat(10);
        let vocab = Vocab::build_char(&[&text]).unwrap();
        let data = toy_splits(&text, &vocab);
        let mut model = Model::<f32>::new(ModelConfig::transformer(6, vocab.len(), 1), 3).unwrap();
        model.zero_output_head();
        let cfg = TrainConfig {
            val_cap: 40,
            ..TrainConfig::default()
        };
        let w = cfg.eval_stream(&data.val, 6, Split::Val).unwrap();
        let a = evaluate_nll(&model, &w, 7).unwrap();
        assert!((a - 10f64.ln()).abs() < 1e-6, "{a}");
        assert_eq!(a, evaluate_nll(&model, &w, 7).unwrap());
    }

    #[test]
    fn best_epoch_bookkeeping_with_early_stop() {
        let text = "abcabcabcabd".repeat(20);
        let vocab = Vocab::build_char(&[&text]).unwrap();
        let data = toy_splits(&text, &vocab);
        // A huge learning rate makes validation loss bounce around.
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 30,
            train_cap: 64,
            val_cap: 64,
            test_cap: 64,
            learning_rate: 5.0,
            early_stop_patience: Some(1),
            ..TrainConfig::default()
        };
        let mut model = Model::<f32>::new(ModelConfig::mlp(4, vocab.len(), 16), 1).unwrap();
        let out = train(&mut model, &data, &cfg).unwrap();
        let r = out.report;
        let min = r
            .epochs
            .iter()
            .map(|e| e.val_nll)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_val_nll, min);
        assert_eq!(r.epochs[r.best_epoch - 1].val_nll, min);
        if r.stopped_early {
            assert_eq!(r.epochs.len(), r.best_epoch + 1);
        }
        let w = cfg.eval_stream(&data.val, 4, Split::Val).unwrap();
        assert_eq!(
            evaluate_nll(&model, &w, 16).unwrap(),
            r.best_val_nll,
            "model holds the best weights"
        );
    }
}
