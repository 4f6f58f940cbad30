use ctrnn_lab::cells::{Arch, InitMode};
use ctrnn_lab::data::{IrregularBatch, IrregularSequence, Label};
use ctrnn_lab::model::{LossMode, Model, ModelDims};
use ctrnn_lab::train::check_gradients;
use ctrnn_lab::Tensor;

fn batch(per_step: bool) -> IrregularBatch {
    let label = |c: usize, steps: &[usize]| {
        if per_step {
            Label::PerStep(steps.to_vec())
        } else {
            Label::Class(c)
        }
    };
    let a = IrregularSequence::new(
        Tensor::from_rows(&[[0.4, -1.0], [0.9, 0.2], [-0.3, 0.5], [0.1, -0.7]]),
        vec![0.3, 1.1, 0.5, 0.8],
        label(2, &[0, 2, 1, 2]),
        4,
    )
    .unwrap();
    let b = IrregularSequence::new(
        Tensor::from_rows(&[[-0.6, 0.3], [0.2, 0.8], [1.0, -0.4], [0.0, 0.0]]),
        vec![0.7, 0.2, 1.6, 0.25],
        label(0, &[1, 1, 0, 0]),
        3,
    )
    .unwrap();
    IrregularBatch::from_sequences(&[&a, &b], vec![0, 1]).unwrap()
}

fn dims() -> ModelDims {
    ModelDims {
        in_dim: 2,
        hidden: 3,
        classes: 3,
    }
}

#[test]
fn every_parameter_gradient_matches_central_differences() {
    for (mode, per_step) in [(LossMode::FinalStep, false), (LossMode::PerStep, true)] {
        let b = batch(per_step);
        for arch in Arch::ALL {
            let model = Model::init(arch, dims(), InitMode::Training, None, 17).unwrap();
            for c in check_gradients(&model, &b, mode, 1e-5, 1e-6).unwrap() {
                assert!(
                    c.max_rel_error <= 1e-4,
                    "{arch} {mode:?} {}: rel {:e} abs {:e}",
                    c.param,
                    c.max_rel_error,
                    c.max_abs_error
                );
            }
        }
    }
}

#[test]
fn theorem_init_gradients_are_also_exact() {
    let b = batch(false);
    for arch in [Arch::OdeLstm, Arch::OdeRnn] {
        let model = Model::init(arch, dims(), InitMode::Theorem, None, 5).unwrap();
        let worst = check_gradients(&model, &b, LossMode::FinalStep, 1e-5, 1e-6)
            .unwrap()
            .into_iter()
            .fold(0.0f64, |m, c| m.max(c.max_rel_error));
        assert!(worst <= 1e-4, "{arch}: {worst:e}");
    }
}
