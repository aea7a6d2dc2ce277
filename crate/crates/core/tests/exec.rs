mod common;

use common::*;
use pow2prune::autodiff::{ForwardMode, LayerSpec, Loss, Model};
use pow2prune::exec;
use pow2prune::inference::{compile, forward_shift};
use pow2prune::quantization::quantize_all;

fn wide_model() -> Model {
    let specs = [
        LayerSpec::Conv2d { out_channels: 8, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::Dense { out: 64 },
        LayerSpec::Relu,
        LayerSpec::Dense { out: 4 },
    ];
    Model::build(&[2, 12, 12], &specs, 1).unwrap()
}

fn run(model: &Model) -> Vec<u64> {
    let mut m = model.clone();
    let mut r = rng(2);
    let x = batch_for(&m, 32, &mut r);
    let y = target_for(&m, 32, &mut r);
    let pred = m.forward(&x, ForwardMode::Gated).unwrap();
    m.backward(Loss::Mse, &pred, &y).unwrap();
    let mut q = m.clone();
    quantize_all(&mut q, 5).unwrap();
    let shifted = forward_shift(&compile(&q).unwrap(), &x).unwrap();
    pred.data()
        .iter()
        .chain(m.parameters().iter().flat_map(|p| p.grad.data()))
        .chain(shifted.output.data())
        .map(|v| v.to_bits())
        .collect()
}

#[test]
fn parallel_and_sequential_agree_bit_for_bit() {
    let model = wide_model();
    let par = run(&model);
    let seq = exec::sequential(|| run(&model));
    assert_eq!(par, seq);
}
