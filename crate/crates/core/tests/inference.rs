mod common;

use common::*;
use pow2prune::autodiff::{Dense, Layer, Model};
use pow2prune::costmodel::{cost_report, CostParams};
use pow2prune::inference::{compile, forward_shift, scale_pow2, CompiledLayer, ShiftTerm};
use pow2prune::pruning::sparsity;
use pow2prune::quantization::{pow2, quantize_all};
use pow2prune::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shift_forward_is_bit_exact(seed in any::<u64>(), bits in 2u8..=8, scale in 0.01f64..100.0) {
        let model = random_quantized(seed, bits);
        let mut r = rng(seed);
        let mut x = batch_for(&model, 16, &mut r);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let compiled = compile(&model).unwrap();
        let out = forward_shift(&compiled, &x).unwrap();
        let reference = model.evaluate(&x).unwrap();
        prop_assert_eq!(out.output.shape(), reference.shape());
        for (a, b) in out.output.data().iter().zip(reference.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn term_count_matches_nonzero_weights(seed in any::<u64>()) {
        let model = random_quantized(seed, 5);
        let compiled = compile(&model).unwrap();
        let nonzero: usize = model.weights().map(|(_, w)| w.len() - w.zero_count()).sum();
        prop_assert_eq!(compiled.term_count(), nonzero);
        let expected = ((1.0 - sparsity(&model).unwrap()) * model.prunable_count() as f64).round() as usize;
        prop_assert_eq!(compiled.term_count(), expected);
        for (layer, (_, w)) in compiled.layers().iter().filter(|l| !matches!(l, CompiledLayer::Relu)).zip(model.weights()) {
            let grid = w.grid().unwrap();
            if let CompiledLayer::Dense { units, .. } | CompiledLayer::Conv2d { units, .. } = layer {
                for t in units.iter().flatten() {
                    prop_assert!((grid.n_min()..=grid.n_max()).contains(&t.exponent));
                }
            }
        }
    }

    #[test]
    fn shift_ops_match_the_cost_model(seed in any::<u64>()) {
        let model = random_quantized(seed, 5);
        let x = batch_for(&model, 1, &mut rng(seed));
        let out = forward_shift(&compile(&model).unwrap(), &x).unwrap();
        let report = cost_report(&model, &CostParams::default()).unwrap();
        prop_assert_eq!(out.shift_ops, report.shift_ops);
        let x = batch_for(&model, 3, &mut rng(seed));
        prop_assert_eq!(forward_shift(&compile(&model).unwrap(), &x).unwrap().shift_ops, 3 * report.shift_ops);
    }

    #[test]
    fn exponent_edit_equals_multiplication(x in -1e6f64..1e6, n in -40i32..40) {
        prop_assume!(x != 0.0);
        prop_assert_eq!(scale_pow2(x, n).unwrap().to_bits(), (x * pow2(n)).to_bits());
    }
}

fn dense(weights: &[f64], bias: f64) -> Model {
    let mut model = Model::build(&[weights.len()], &[pow2prune::autodiff::LayerSpec::Dense { out: 1 }], 0).unwrap();
    if let Layer::Dense(Dense { weight, bias: b, .. }) = &mut model.layers_mut()[0] {
        weight.base.value.data_mut().copy_from_slice(weights);
        b.value.data_mut()[0] = bias;
    }
    quantize_all(&mut model, 5).unwrap();
    model
}

#[test]
fn one_term_per_nonzero_weight() {
    let compiled = compile(&dense(&[0.5, 0.0], 0.0)).unwrap();
    let CompiledLayer::Dense { units, .. } = &compiled.layers()[0] else {
        panic!("dense expected")
    };
    assert_eq!(
        units[0],
        vec![ShiftTerm {
            input: 0,
            negative: false,
            exponent: -1
        }]
    );
}

#[test]
fn single_weight_scales_exactly() {
    let model = dense(&[pow2(-3)], 0.0);
    let x = Tensor::new(vec![1, 1], vec![5.0]).unwrap();
    let out = forward_shift(&compile(&model).unwrap(), &x).unwrap();
    assert_eq!(out.output.data(), &[0.625]);
}

#[test]
fn zero_input_gives_the_bias() {
    let model = random_quantized(11, 5);
    let x = batch_for(&model, 2, &mut rng(0));
    let zero = Tensor::zeros(x.shape());
    let out = forward_shift(&compile(&model).unwrap(), &zero).unwrap();
    let reference = model.evaluate(&zero).unwrap();
    assert_eq!(out.output, reference);
}

#[test]
fn all_zero_layer_compiles_to_nothing() {
    let model = dense(&[0.0, 0.0, 0.0], 1.5);
    let compiled = compile(&model).unwrap();
    assert_eq!(compiled.term_count(), 0);
    let out = forward_shift(&compiled, &Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    assert_eq!(out.output.data(), &[1.5]);
}

#[test]
fn unquantized_model_does_not_compile() {
    assert!(compile(&mlp(3, &[4], 2, 0)).is_err());
}

#[test]
fn overflow_and_underflow_are_reported() {
    assert!(scale_pow2(f64::MAX, 1).is_err());
    assert!(scale_pow2(f64::MIN_POSITIVE, -1).is_err());
    assert!(scale_pow2(f64::NAN, 0).is_err());
    assert_eq!(scale_pow2(0.0, 5).unwrap(), 0.0);
}
