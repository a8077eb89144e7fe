//! Minimal reverse-mode differentiable network kernel: exactly the layers
//! the equalizers use (linear, 1-D convolution, ReLU, LSTM, softmax) plus
//! the MSE and cross-entropy losses. All arithmetic is `f64`.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_param_sets, read_tensors, save_param_sets, write_tensors};
pub use gradcheck::{
    grad_check, gradcheck_suite, GradCheckCase, GradCheckReport, LAYER_TOLERANCE, LSTM_TOLERANCE,
};
pub use params::{Owner, ParamSet};
pub use tape::{Gradients, LstmParams, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Format(String),
}
