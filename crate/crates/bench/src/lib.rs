//! Fixtures shared by the benchmarks.

use ctrnn_lab::cells::{Arch, InitMode};
use ctrnn_lab::data::{event_encode, gen_xor, IrregularBatch, IrregularSequence};
use ctrnn_lab::model::{Model, ModelDims};
use ctrnn_lab::Tensor;

/// A batch of `size` dense or event-encoded XOR streams of `bits` bits.
pub fn xor_batch(size: usize, bits: usize, event: bool) -> IrregularBatch {
    let dense = gen_xor(size, bits, 42);
    let seqs: Vec<IrregularSequence> = if event {
        dense.iter().map(|s| event_encode(s).expect("non-empty")).collect()
    } else {
        dense
    };
    let refs: Vec<&IrregularSequence> = seqs.iter().collect();
    IrregularBatch::from_sequences(&refs, (0..size).collect()).expect("uniform width")
}

pub fn xor_model(arch: Arch, hidden: usize) -> Model {
    let dims = ModelDims {
        in_dim: 1,
        hidden,
        classes: 2,
    };
    Model::init(arch, dims, InitMode::Training, None, 0).expect("valid dims")
}

/// Deterministic `rows x cols` matrix with entries in (-1, 1).
pub fn filled(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| ((i * 7919 % 1000) as f64 / 500.0) - 1.0)
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sizes agree")
}
