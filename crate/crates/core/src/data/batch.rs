use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{IrregularSequence, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padded minibatch, stored step-major so that one recurrent step reads a
/// contiguous `batch × dim` block.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularBatch {
    /// `maxlen` tensors of shape `batch × dim`.
    pub features: Vec<Tensor>,
    /// `batch × maxlen`.
    pub elapsed: Tensor,
    /// `batch × maxlen`, 1 for observed steps and 0 for padding.
    pub mask: Tensor,
    pub labels: Vec<Label>,
    pub valid_len: Vec<usize>,
    /// Position of each row in the source dataset.
    pub indices: Vec<usize>,
}

impl IrregularBatch {
    /// Stacks `seqs` and pads them to the longest valid length among them.
    pub fn from_sequences(seqs: &[&IrregularSequence], indices: Vec<usize>) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(Error::contract("cannot batch zero sequences"));
        };
        let dim = first.dim();
        if let Some(s) = seqs.iter().find(|s| s.dim() != dim) {
            return Err(Error::dim(
                "make_batches",
                format!("feature width {} differs from {dim}", s.dim()),
            ));
        }
        let maxlen = seqs.iter().map(|s| s.valid_len).max().unwrap_or(0);
        if maxlen == 0 {
            return Err(Error::contract("batch has no observed steps"));
        }
        let rows = seqs.len();
        let placeholder = 1.0 / maxlen as f64;
        let mut features = vec![Tensor::zeros(rows, dim); maxlen];
        let mut elapsed = Tensor::full(rows, maxlen, placeholder);
        let mut mask = Tensor::zeros(rows, maxlen);
        let mut labels = Vec::with_capacity(rows);
        for (i, s) in seqs.iter().enumerate() {
            #[allow(clippy::needless_range_loop)]
            for t in 0..s.valid_len {
                let dst = &mut features[t].data_mut()[i * dim..(i + 1) * dim];
                dst.copy_from_slice(s.features.row(t));
                elapsed.set(i, t, s.elapsed[t]);
                mask.set(i, t, 1.0);
            }
            labels.push(match &s.label {
                Label::Class(c) => Label::Class(*c),
                Label::PerStep(l) => {
                    let mut l = l[..s.valid_len].to_vec();
                    l.resize(maxlen, 0);
                    Label::PerStep(l)
                }
            });
        }
        Ok(IrregularBatch {
            features,
            elapsed,
            mask,
            labels,
            valid_len: seqs.iter().map(|s| s.valid_len).collect(),
            indices,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.valid_len.len()
    }

    pub fn maxlen(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].cols()
    }

    pub fn step_features(&self, t: usize) -> &Tensor {
        &self.features[t]
    }

    pub fn step_elapsed(&self, t: usize) -> Vec<f64> {
        (0..self.batch_size()).map(|i| self.elapsed.get(i, t)).collect()
    }

    pub fn step_mask(&self, t: usize) -> Vec<f64> {
        (0..self.batch_size()).map(|i| self.mask.get(i, t)).collect()
    }

    /// True when every row is observed at step `t`.
    pub fn step_full(&self, t: usize) -> bool {
        self.valid_len.iter().all(|v| t < *v)
    }
}

/// Partitions `data` into batches of `batch_size`, the last one possibly
/// smaller. With `shuffle`, the order is a seeded permutation.
pub fn make_batches(
    data: &[IrregularSequence],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<IrregularBatch>> {
    if data.is_empty() {
        return Err(Error::contract("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let seqs: Vec<&IrregularSequence> = idx.iter().map(|i| &data[*i]).collect();
            IrregularBatch::from_sequences(&seqs, idx.to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::xor::gen_xor;

    fn seq(bits: &[f64], valid: usize) -> IrregularSequence {
        IrregularSequence::new(Tensor::column(bits), vec![0.5; bits.len()], Label::Class(1), valid).unwrap()
    }

    #[test]
    fn partition_sizes() {
        let data = gen_xor(10, 4, 0);
        let b = make_batches(&data, 4, 1, true).unwrap();
        let sizes: Vec<usize> = b.iter().map(|b| b.batch_size()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut seen: Vec<usize> = b.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_order() {
        let data = gen_xor(50, 4, 0);
        let a = make_batches(&data, 8, 3, true).unwrap();
        assert_eq!(a, make_batches(&data, 8, 3, true).unwrap());
        assert_ne!(a, make_batches(&data, 8, 4, true).unwrap());
        let plain = make_batches(&data, 8, 3, false).unwrap();
        assert_eq!(plain[0].indices, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn padding_and_mask() {
        let a = seq(&[1.0, 0.0, 1.0], 3);
        let b = seq(&[1.0, 1.0, 7.0, 7.0], 1);
        let batch = IrregularBatch::from_sequences(&[&a, &b], vec![0, 1]).unwrap();
        assert_eq!(batch.maxlen(), 3);
        assert_eq!(batch.mask.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(batch.step_features(1).data(), &[0.0, 0.0]);
        assert_eq!(batch.step_elapsed(2), vec![0.5, 1.0 / 3.0]);
        assert!(batch.step_full(0));
        assert!(!batch.step_full(1));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(make_batches(&[], 4, 0, true), Err(Error::Contract(_))));
        assert!(make_batches(&gen_xor(3, 2, 0), 0, 0, true).is_err());
        let wide = IrregularSequence::new(Tensor::zeros(2, 2), vec![1.0; 2], Label::Class(0), 2).unwrap();
        let narrow = seq(&[1.0, 0.0], 2);
        assert!(matches!(
            make_batches(&[wide, narrow], 2, 0, false),
            Err(Error::Dimension { .. })
        ));
    }
}
