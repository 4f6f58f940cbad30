use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{IrregularSequence, Label};
use crate::tensor::Tensor;

/// Training set size of the full-scale bit-stream benchmark.
pub const XOR_TRAIN_COUNT: usize = 100_000;
pub const XOR_TEST_COUNT: usize = 10_000;

/// `count` streams of `bits_per_seq` fair random bits, one bit per step at
/// period `1 / bits_per_seq`. Label 1 when the number of ones is odd.
pub fn gen_xor(count: usize, bits_per_seq: usize, seed: u64) -> Vec<IrregularSequence> {
    assert!(bits_per_seq >= 1, "bits_per_seq must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = 1.0 / bits_per_seq as f64;
    (0..count)
        .map(|_| {
            let bits: Vec<f64> = (0..bits_per_seq)
                .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
                .collect();
            let parity = bits.iter().filter(|b| **b == 1.0).count() % 2;
            IrregularSequence {
                features: Tensor::column(&bits),
                elapsed: vec![period; bits_per_seq],
                label: Label::Class(parity),
                valid_len: bits_per_seq,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn popcount_parity(bits: &[f64]) -> usize {
        let word = bits.iter().enumerate().fold(0u64, |w, (i, b)| w | ((*b as u64) << i));
        (word.count_ones() % 2) as usize
    }

    #[test]
    fn labels_are_parity() {
        for s in gen_xor(500, 16, 3) {
            assert_eq!(s.class(), Some(popcount_parity(s.features.data())));
            assert_eq!(s.horizon(), 1.0);
        }
    }

    #[test]
    fn hand_examples() {
        assert_eq!(popcount_parity(&[1.0, 1.0, 1.0, 1.0]), 0);
        assert_eq!(popcount_parity(&[1.0, 0.0, 0.0, 0.0]), 1);
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_xor(100_000, 32, 7);
        let b = gen_xor(100_000, 32, 7);
        assert_eq!(a, b);
        let odd = a.iter().filter(|s| s.class() == Some(1)).count() as f64;
        let frac = odd / a.len() as f64;
        assert!((frac - 0.5).abs() <= 0.01, "{frac}");
        assert_ne!(gen_xor(10, 32, 8), a[..10].to_vec());
    }
}
