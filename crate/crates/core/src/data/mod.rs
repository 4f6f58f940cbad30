//! Synthetic and event-encoded benchmark data, plus padding and batching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod batch;
pub mod cache;
pub mod event;
pub mod mnist;
pub mod xor;

pub use batch::{make_batches, IrregularBatch};
pub use cache::{cache_path, read_cache, write_cache, CacheKey, CacheStatus};
pub use event::{event_decode, event_encode};
pub use mnist::{encode_seqmnist, load_mnist_idx, MnistSet, SEQMNIST_PAD_LEN};
pub use xor::gen_xor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    PerStep(Vec<usize>),
}

/// One sequence of observations with the time elapsed since the previous
/// observation. Rows at or beyond `valid_len` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularSequence {
    pub features: Tensor,
    pub elapsed: Vec<f64>,
    pub label: Label,
    pub valid_len: usize,
}

impl IrregularSequence {
    pub fn new(features: Tensor, elapsed: Vec<f64>, label: Label, valid_len: usize) -> Result<Self> {
        if elapsed.len() != features.rows() {
            return Err(Error::dim(
                "IrregularSequence",
                format!("{} elapsed values for {} rows", elapsed.len(), features.rows()),
            ));
        }
        if valid_len > features.rows() {
            return Err(Error::contract(format!(
                "valid_len {valid_len} exceeds {} rows",
                features.rows()
            )));
        }
        if let Some(bad) = elapsed[..valid_len].iter().find(|v| !(**v > 0.0)) {
            return Err(Error::contract(format!("elapsed times must be positive, got {bad}")));
        }
        if let Label::PerStep(labels) = &label {
            if labels.len() != features.rows() {
                return Err(Error::dim(
                    "IrregularSequence",
                    format!("{} step labels for {} rows", labels.len(), features.rows()),
                ));
            }
        }
        Ok(IrregularSequence {
            features,
            elapsed,
            label,
            valid_len,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_len == 0
    }

    /// Total time covered by the valid observations.
    pub fn horizon(&self) -> f64 {
        self.elapsed[..self.valid_len].iter().sum()
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::PerStep(_) => None,
        }
    }
}

/// Benchmark families with a deterministic generator or encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    XorDense,
    XorEvent,
    SeqmnistEvent,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::XorDense => "xor_dense",
            Task::XorEvent => "xor_event",
            Task::SeqmnistEvent => "seqmnist_event",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Task::XorDense | Task::XorEvent => 2,
            Task::SeqmnistEvent => 10,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Task::XorDense, Task::XorEvent, Task::SeqmnistEvent]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown task {s:?}")))
    }
}
