//! Training-compute estimates: `FLOPs = 2 * params * train_tokens`, where
//! `train_tokens = positions_per_epoch * T * epochs` counts every token
//! position a window feeds through the model.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;
use crate::tensor::Scalar;
use crate::train::TrainConfig;

pub fn train_tokens(positions_per_epoch: usize, context: usize, epochs: usize) -> u64 {
    positions_per_epoch as u64 * context as u64 * epochs as u64
}

pub fn estimate_flops(
    params: usize,
    positions_per_epoch: usize,
    context: usize,
    epochs: usize,
) -> f64 {
    2.0 * params as f64 * train_tokens(positions_per_epoch, context, epochs) as f64
}

/// Formats with three significant digits, e.g. `2.21e13`.
pub fn sci3(x: f64) -> String {
    format!("{x:.2e}")
}

/// One row of `compute.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeReport {
    pub arch: String,
    pub dataset: String,
    pub params: usize,
    #[serde(rename = "T")]
    pub context: usize,
    pub positions_per_epoch: usize,
    pub epochs: usize,
    pub train_tokens: u64,
    pub flops: f64,
    pub test_nll: f64,
}

impl ComputeReport {
    pub fn new(
        arch: impl Into<String>,
        dataset: impl Into<String>,
        params: usize,
        context: usize,
        positions_per_epoch: usize,
        epochs: usize,
        test_nll: f64,
    ) -> Self {
        Self {
            arch: arch.into(),
            dataset: dataset.into(),
            params,
            context,
            positions_per_epoch,
            epochs,
            train_tokens: train_tokens(positions_per_epoch, context, epochs),
            flops: estimate_flops(params, positions_per_epoch, context, epochs),
            test_nll,
        }
    }

    /// Compute record of a finished run. The epoch count is the configured
    /// budget, also when early stopping ended the run sooner.
    pub fn for_run<F: Scalar>(
        model: &Model<F>,
        dataset: &str,
        cfg: &TrainConfig,
        positions_per_epoch: usize,
        test_nll: f64,
    ) -> Self {
        let mc = model.config();
        let arch = match mc.positional {
            crate::model::Positional::Rope => format!("{}-rope", mc.arch),
            crate::model::Positional::Learned => mc.arch.to_string(),
        };
        Self::new(
            arch,
            dataset,
            model.count_params(),
            mc.context,
            positions_per_epoch,
            cfg.epochs,
            test_nll,
        )
    }

    /// `flops` recomputed from the other fields.
    pub fn recomputed_flops(&self) -> f64 {
        estimate_flops(
            self.params,
            self.positions_per_epoch,
            self.context,
            self.epochs,
        )
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[ComputeReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ComputeReport>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
