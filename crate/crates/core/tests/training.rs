use ctrnn_lab::cells::{Arch, InitMode};
use ctrnn_lab::data::{gen_xor, make_batches, IrregularBatch, IrregularSequence, Label};
use ctrnn_lab::model::{LossMode, Model, ModelDims};
use ctrnn_lab::train::{evaluate, loss_and_grads, split_validation, train, Metric, TrainConfig};
use ctrnn_lab::Tensor;
use proptest::prelude::*;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn training_loss_drops_for_every_architecture() {
    let (tr, val) = split_validation(gen_xor(240, 4, 3), 0.1, 3).unwrap();
    for arch in Arch::ALL {
        let cfg = TrainConfig {
            arch,
            hidden_dim: 8,
            batch_size: 16,
            learning_rate: 5e-3,
            epochs: 20,
            seed: 1,
            ..TrainConfig::default()
        };
        let dims = ModelDims {
            in_dim: 1,
            hidden: 8,
            classes: 2,
        };
        let model = Model::init(arch, dims, cfg.init, None, cfg.seed).unwrap();
        let out = train(model, &tr, &val, &cfg).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
        let k = (losses.len() / 10).max(1);
        let first = median(losses[..k].to_vec());
        let last = median(losses[losses.len() - k..].to_vec());
        assert!(last < first, "{arch}: {first} -> {last}");
    }
}

#[test]
fn untrained_theorem_init_is_at_chance() {
    let data = gen_xor(2000, 16, 11);
    let dims = ModelDims {
        in_dim: 1,
        hidden: 32,
        classes: 2,
    };
    let model = Model::init(Arch::OdeLstm, dims, InitMode::Theorem, None, 2).unwrap();
    let acc = evaluate(&model, &data, Metric::AccuracyFinal).unwrap();
    assert!((0.45..=0.55).contains(&acc), "{acc}");
}

fn seq(values: &[f64], elapsed: &[f64], valid: usize, class: usize) -> IrregularSequence {
    IrregularSequence::new(Tensor::column(values), elapsed.to_vec(), Label::Class(class), valid).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Padding content never reaches the loss or the gradients.
    #[test]
    fn padding_is_invisible(
        values in proptest::collection::vec(-1.0f64..1.0, 5),
        junk in proptest::collection::vec(-5.0f64..5.0, 3),
        dts in proptest::collection::vec(0.1f64..2.0, 5),
        arch in proptest::sample::select(Arch::ALL.to_vec()),
    ) {
        let dims = ModelDims { in_dim: 1, hidden: 3, classes: 2 };
        let model = Model::init(arch, dims, InitMode::Training, None, 4).unwrap();
        let short = seq(&values, &dts, 5, 1);
        let mut padded_v = values.clone();
        padded_v.extend(&junk);
        let mut padded_t = dts.clone();
        padded_t.extend([0.3, 0.7, 1.9]);
        let padded = seq(&padded_v, &padded_t, 5, 1);
        let long = seq(&[values.clone(), vec![0.5; 3]].concat(), &[dts.clone(), vec![1.0; 3]].concat(), 8, 0);

        let b1 = IrregularBatch::from_sequences(&[&short, &long], vec![0, 1]).unwrap();
        let b2 = IrregularBatch::from_sequences(&[&padded, &long], vec![0, 1]).unwrap();
        let (l1, g1) = loss_and_grads(&model, &b1, LossMode::FinalStep).unwrap();
        let (l2, g2) = loss_and_grads(&model, &b2, LossMode::FinalStep).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert!(a.max_abs_diff(b) <= 1e-12);
        }

        let alone = IrregularBatch::from_sequences(&[&short], vec![0]).unwrap();
        let (la, _) = loss_and_grads(&model, &alone, LossMode::FinalStep).unwrap();
        let only_long = IrregularBatch::from_sequences(&[&long], vec![0]).unwrap();
        let (ll, _) = loss_and_grads(&model, &only_long, LossMode::FinalStep).unwrap();
        prop_assert!((l1 - 0.5 * (la + ll)).abs() <= 1e-12);
    }

    #[test]
    fn batches_partition_the_data(n in 1usize..40, bs in 1usize..12, seed in 0u64..1000) {
        let data = gen_xor(n, 3, seed);
        let batches = make_batches(&data, bs, seed, true).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.batch_size() <= bs));
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
    }
}
