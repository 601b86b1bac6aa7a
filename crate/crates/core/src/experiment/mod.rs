//! Experiment runner: training runs with on-disk artifacts, sweeps over the
//! architecture grids, checkpoint evaluation, sampling and report merging.
//!
//! A training run writes into `<out_dir>/<name>/`:
//! `report.csv` (per-epoch losses), `compute.csv` (one [`ComputeReport`]
//! row), `best.ckpt` and `config.cfg` (the resolved configuration).

pub mod checkpoint;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::compute::{self, ComputeReport};
use crate::data::{Corpus, EncodedSplits, Split, Vocab};
use crate::error::{Error, Result};
use crate::generate::{generate, SamplerConfig};
use crate::model::{Arch, Model, ModelConfig};
use crate::train::{evaluate_nll, train, RunReport};

pub use checkpoint::Checkpoint;
pub use config::{DataPaths, ExperimentConfig, DATA_DIR_ENV};

/// Sweeps train each grid point for at most this many epochs.
pub const SWEEP_EPOCHS: usize = 2;

/// Command-line adjustments applied on top of a parsed configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub fast: bool,
    pub out_dir: Option<PathBuf>,
    pub overwrite: bool,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if o.fast {
            self.train = self.train.clone().fast();
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
        self.overwrite |= o.overwrite;
    }
}

/// A vocabulary and the three encoded splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub splits: EncodedSplits,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let corpus = Corpus::read(&cfg.paths.train, &cfg.paths.val, &cfg.paths.test)?;
    let vocab = corpus.build_vocab(cfg.tokenization, cfg.unk_token.as_deref())?;
    let splits = corpus.encode(&vocab)?;
    info!(
        "{}: vocab {} | train {} val {} test {} tokens",
        cfg.dataset,
        vocab.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(Dataset { vocab, splits })
}

/// Creates the run directory, refusing to reuse an existing one unless the
/// configuration allows overwriting.
pub fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    if dir.exists() && !cfg.overwrite {
        return Err(Error::invalid(
            "run directory",
            format!(
                "{} already exists (pass --overwrite to replace it)",
                dir.display()
            ),
        ));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

#[derive(Debug)]
pub struct TrainedRun {
    pub dir: Option<PathBuf>,
    pub model: Model<f32>,
    pub report: RunReport,
    pub compute: ComputeReport,
}

/// Trains one model in memory without touching the file system.
pub fn run_training(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainedRun> {
    let model_cfg = cfg.model_for_vocab(data.vocab.len())?;
    let mut model = Model::new(model_cfg, cfg.train.seed)?;
    info!(
        "{}: {} with {} parameters, seed {}",
        cfg.name,
        model.config().arch,
        model.count_params(),
        cfg.train.seed
    );
    let outcome = train(&mut model, &data.splits, &cfg.train)?;
    let report = outcome.report;
    let compute = ComputeReport::for_run(
        &model,
        &cfg.dataset,
        &cfg.train,
        cfg.train
            .positions_per_epoch(data.splits.train.len(), model.config().context),
        report.test_nll,
    );
    Ok(TrainedRun {
        dir: None,
        model,
        report,
        compute,
    })
}

/// `train` subcommand: validates, trains and writes the run artifacts.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let dir = prepare_run_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let mut run = run_training(cfg, &data)?;
    write_run(&dir, cfg, &data.vocab, &run)?;
    run.dir = Some(dir);
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub seconds: f64,
    pub best: bool,
    /// Filled on the best epoch only: the test NLL of the kept checkpoint.
    pub test_nll: Option<f64>,
}

pub fn epoch_rows(report: &RunReport) -> Vec<EpochRow> {
    report
        .epochs
        .iter()
        .map(|e| {
            let best = e.epoch == report.best_epoch;
            EpochRow {
                epoch: e.epoch,
                train_nll: e.train_nll,
                val_nll: e.val_nll,
                seconds: e.seconds,
                best,
                test_nll: best.then_some(report.test_nll),
            }
        })
        .collect()
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, vocab: &Vocab, run: &TrainedRun) -> Result<()> {
    write_rows(&dir.join("report.csv"), &epoch_rows(&run.report))?;
    write_rows(&dir.join("compute.csv"), std::slice::from_ref(&run.compute))?;
    let mut cfg = cfg.clone();
    cfg.model = run.model.config().clone();
    let path = dir.join("config.cfg");
    fs::write(&path, cfg.render()).map_err(|e| Error::io(&path, e))?;
    Checkpoint::from_model(&run.model, &cfg, vocab, run.report.best_val_nll)
        .save(&dir.join("best.ckpt"))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// One trained grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: String,
    pub setting: String,
    pub seed: u64,
    pub params: usize,
    pub flops: f64,
    pub test_nll: f64,
}

/// The three grid points of a family: context length for linear, hidden
/// width for MLP, heads for attention and depth for the transformer.
pub fn sweep_points(family: Arch, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let base = if base.arch == family {
        base.clone()
    } else {
        ModelConfig::preset(family, base.context, base.vocab)
    };
    let with = |label: String, f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (label, c)
    };
    match family {
        Arch::Linear => [32, 64, 128]
            .map(|t| with(format!("T={t}"), &|c| c.context = t))
            .to_vec(),
        Arch::Mlp => [128, 256, 512]
            .map(|h| with(format!("h={h}"), &|c| c.mlp_hidden = h))
            .to_vec(),
        Arch::Attention => [1, 2, 4]
            .map(|h| with(format!("H={h}"), &|c| c.heads = h))
            .to_vec(),
        Arch::Transformer => [2, 3, 4]
            .map(|l| with(format!("L={l}"), &|c| c.layers = l))
            .to_vec(),
    }
}

/// Trains every grid point of `family` once per seed on the configured data,
/// with at most [`SWEEP_EPOCHS`] epochs.
pub fn run_sweep(
    family: Arch,
    cfg: &ExperimentConfig,
    data: &Dataset,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::Empty("sweep seeds"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for (setting, model) in sweep_points(family, &cfg.model) {
            let mut point = cfg.clone();
            point.name = format!("{}-{setting}", cfg.name);
            point.model = ModelConfig { vocab: 0, ..model };
            point.train.seed = seed;
            point.train.epochs = point.train.epochs.min(SWEEP_EPOCHS);
            let run = run_training(&point, data)?;
            info!(
                "sweep {family} {setting} seed {seed}: test {:.4}",
                run.report.test_nll
            );
            rows.push(SweepRow {
                family: family.to_string(),
                setting,
                seed,
                params: run.compute.params,
                flops: run.compute.flops,
                test_nll: run.report.test_nll,
            });
        }
    }
    Ok(rows)
}

/// `sweep` subcommand: writes `<out_dir>/<name>-sweep-<family>/sweep.csv`.
pub fn cmd_sweep(
    family: Arch,
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<(PathBuf, Vec<SweepRow>)> {
    cfg.validate()?;
    let mut named = cfg.clone();
    named.name = format!("{}-sweep-{family}", cfg.name);
    let dir = prepare_run_dir(&named)?;
    let data = load_dataset(cfg)?;
    let rows = run_sweep(family, cfg, &data, seeds)?;
    let path = dir.join("sweep.csv");
    write_rows(&path, &rows)?;
    Ok((path, rows))
}

/// `eval` subcommand: NLL of a checkpoint on one split, using the stream the
/// training run used. `data` replaces the dataset paths echoed in the
/// checkpoint.
pub fn cmd_eval(ckpt_path: &Path, split: Split, data: Option<&DataPaths>) -> Result<f64> {
    let ck = Checkpoint::load(ckpt_path)?;
    let model = ck.model()?;
    let paths = data.unwrap_or(&ck.config.paths);
    let corpus = Corpus::read(&paths.train, &paths.val, &paths.test)?;
    let ids = ck.vocab.encode(corpus.text(split))?;
    let train_cfg = &ck.config.train;
    let stream = train_cfg.eval_stream(&ids, model.config().context, split)?;
    evaluate_nll(&model, &stream, train_cfg.batch_size)
}

/// `generate` subcommand.
pub fn cmd_generate(ckpt_path: &Path, sampler: &SamplerConfig) -> Result<String> {
    let ck = Checkpoint::load(ckpt_path)?;
    generate(&ck.model()?, &ck.vocab, sampler)
}

/// `report` subcommand: every run's compute row, sorted by FLOPs.
pub fn cmd_report(run_dirs: &[PathBuf]) -> Result<Vec<ComputeReport>> {
    if run_dirs.is_empty() {
        return Err(Error::Empty("run directories"));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        rows.extend(read_rows::<ComputeReport>(&dir.join("compute.csv"))?);
    }
    rows.sort_by(|a, b| a.flops.total_cmp(&b.flops));
    Ok(rows)
}

pub fn write_report<W: std::io::Write>(out: W, rows: &[ComputeReport]) -> Result<()> {
    compute::write_csv(out, rows)
}
