//! Small language models from a tape-based autodiff core: tensors and
//! reverse-mode differentiation, char/word data pipelines, the linear, MLP,
//! attention and transformer models, Adam training, compute accounting,
//! sampling, and the experiment runner behind the `tinylab` binary.

pub mod compute;
pub mod data;
pub mod error;
pub mod experiment;
pub mod generate;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use compute::{estimate_flops, ComputeReport};
pub use data::{EncodedSplits, Split, SplitSpec, TokenMode, Vocab, WindowExample, Windows};
pub use error::{Error, Result};
pub use generate::{generate, SamplerConfig};
pub use model::{Arch, Model, ModelConfig, Param, Positional};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{Mode, Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use train::{evaluate_nll, train, RunReport, TrainConfig, TrainOutcome};
