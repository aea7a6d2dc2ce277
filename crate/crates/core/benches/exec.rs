use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pow2prune::autodiff::{ForwardMode, LayerSpec, Loss, Model};
use pow2prune::exec;
use pow2prune::inference::{compile, forward_shift};
use pow2prune::quantization::quantize_all;
use pow2prune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn mlp() -> Model {
    let specs = [
        LayerSpec::Dense { out: 256 },
        LayerSpec::Relu,
        LayerSpec::Dense { out: 256 },
        LayerSpec::Relu,
        LayerSpec::Dense { out: 16 },
    ];
    Model::build(&[64], &specs, 1).unwrap()
}

fn conv() -> Model {
    let specs = [
        LayerSpec::Conv2d { out_channels: 16, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::Dense { out: 10 },
    ];
    Model::build(&[4, 16, 16], &specs, 1).unwrap()
}

fn both(c: &mut Criterion, group: &str, f: impl Fn() + Send + Sync) {
    let mut g = c.benchmark_group(group);
    let label = if exec::is_parallel() { "parallel" } else { "default" };
    g.bench_function(BenchmarkId::from_parameter(label), |b| b.iter(&f));
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(|| exec::sequential(&f)));
    g.finish();
}

fn train_step(c: &mut Criterion) {
    for (name, model) in [("mlp", mlp()), ("conv", conv())] {
        let mut shape = vec![64];
        shape.extend_from_slice(model.input_shape());
        let x = random(&shape, 2);
        let mut out = vec![64];
        out.extend(model.output_shape());
        let y = random(&out, 3);
        both(c, &format!("forward_backward/{name}"), || {
            let mut m = model.clone();
            let pred = m.forward(&x, ForwardMode::Gated).unwrap();
            m.backward(Loss::Mse, &pred, &y).unwrap();
        });
    }
}

fn shift_inference(c: &mut Criterion) {
    let mut model = mlp();
    quantize_all(&mut model, 5).unwrap();
    let compiled = compile(&model).unwrap();
    let x = random(&[64, 64], 4);
    both(c, "forward_shift/mlp", || {
        forward_shift(&compiled, &x).unwrap();
    });
    both(c, "evaluate/mlp", || {
        model.evaluate(&x).unwrap();
    });
}

criterion_group!(benches, train_step, shift_inference);
criterion_main!(benches);
