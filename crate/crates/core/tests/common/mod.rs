#![allow(dead_code)]

use pow2prune::autodiff::{LayerSpec, Loss, Model};
use pow2prune::data::Dataset;
use pow2prune::metrics::Metric;
use pow2prune::quantization;
use pow2prune::train::Task;
use pow2prune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// MLP `inputs → hidden… → outputs` with ReLU between dense layers.
pub fn mlp(inputs: usize, hidden: &[usize], outputs: usize, seed: u64) -> Model {
    let mut specs = Vec::new();
    for &h in hidden {
        specs.push(LayerSpec::Dense { out: h });
        specs.push(LayerSpec::Relu);
    }
    specs.push(LayerSpec::Dense { out: outputs });
    Model::build(&[inputs], &specs, seed).unwrap()
}

/// Small random architecture: either an MLP or a conv stack with a dense
/// head, at most a few hundred weights.
pub fn random_model(seed: u64) -> Model {
    let mut r = rng(seed);
    if r.gen_bool(0.5) {
        let inputs = r.gen_range(1..6);
        let hidden: Vec<usize> = (0..r.gen_range(0..3)).map(|_| r.gen_range(1..8)).collect();
        mlp(inputs, &hidden, r.gen_range(1..4), seed)
    } else {
        let c = r.gen_range(1..3);
        let k = r.gen_range(1..4);
        let side = k + r.gen_range(0..3);
        let specs = vec![
            LayerSpec::Conv2d { out_channels: r.gen_range(1..4), kernel: k },
            LayerSpec::Relu,
            LayerSpec::Dense { out: r.gen_range(1..4) },
        ];
        Model::build(&[c, side, side], &specs, seed).unwrap()
    }
}

pub fn batch_for(model: &Model, rows: usize, rng: &mut impl Rng) -> Tensor {
    let mut shape = vec![rows];
    shape.extend_from_slice(model.input_shape());
    uniform(rng, &shape, 1.0)
}

pub fn target_for(model: &Model, rows: usize, rng: &mut impl Rng) -> Tensor {
    let mut shape = vec![rows];
    shape.extend(model.output_shape());
    uniform(rng, &shape, 1.0)
}

/// Closes a random subset of gates.
pub fn prune_randomly(model: &mut Model, p: f64, rng: &mut impl Rng) {
    for (_, w) in model.weights_mut() {
        for i in 0..w.len() {
            if rng.gen_bool(p) {
                w.prune(i);
            }
        }
    }
}

pub fn random_quantized(seed: u64, bits: u8) -> Model {
    let mut model = random_model(seed);
    let mut r = rng(seed ^ 0x5eed);
    prune_randomly(&mut model, 0.3, &mut r);
    quantization::quantize_all(&mut model, bits).unwrap();
    model
}

/// Regression data from a fixed random linear teacher.
pub fn linear_data(inputs: usize, outputs: usize, n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let w = uniform(&mut r, &[outputs, inputs], 1.0);
    let x = uniform(&mut r, &[n, inputs], 1.0);
    let mut y = Vec::with_capacity(n * outputs);
    for i in 0..n {
        for o in 0..outputs {
            y.push((0..inputs).map(|j| w.row(o)[j] * x.row(i)[j]).sum());
        }
    }
    Dataset::new(x, Tensor::new(vec![n, outputs], y).unwrap()).unwrap()
}

pub struct Fixture {
    pub train: Dataset,
    pub eval: Dataset,
}

impl Fixture {
    pub fn new(inputs: usize, outputs: usize, seed: u64) -> Self {
        Self {
            train: linear_data(inputs, outputs, 64, seed),
            eval: linear_data(inputs, outputs, 32, seed + 1),
        }
    }

    pub fn task(&self) -> Task<'_> {
        Task {
            train: &self.train,
            eval: &self.eval,
            loss: Loss::Mse,
            metric: Metric::ThresholdAccuracy(0.5),
        }
    }
}

/// Worst relative error between backward() and finite differences.
pub fn grad_error(model: &Model, loss: Loss, x: &Tensor, y: &Tensor, mode: pow2prune::autodiff::ForwardMode) -> f64 {
    use pow2prune::autodiff::{finite_diff_grad, max_relative_error};
    let numeric = finite_diff_grad(model, loss, x, y, 1e-5, mode).unwrap();
    let mut m = model.clone();
    let pred = m.forward(x, mode).unwrap();
    m.backward(loss, &pred, y).unwrap();
    let analytic: Vec<&Tensor> = m.parameters().into_iter().map(|p| &p.grad).collect();
    max_relative_error(&analytic, &numeric, 1e-8)
}

/// One-hot rows for `classes`, chosen at random.
pub fn one_hot(rows: usize, classes: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(&[rows, classes]);
    for r in 0..rows {
        let c = rng.gen_range(0..classes);
        t.data_mut()[r * classes + c] = 1.0;
    }
    t
}
