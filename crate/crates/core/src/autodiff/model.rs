use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::layer::{self, Conv2d, ConvDims, Dense, Layer};
use crate::autodiff::loss::Loss;
use crate::autodiff::param::{MaskedParameter, Parameter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer description used to build a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { out: usize },
    Conv2d { out_channels: usize, kernel: usize },
    Relu,
}

/// How weights enter the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Raw values; every gate is treated as open.
    Raw,
    /// Effective values `value ⊙ gate`.
    Gated,
}

#[derive(Debug, Clone)]
struct Trace {
    mode: ForwardMode,
    /// Input of every layer, then the final output.
    activations: Vec<Tensor>,
}

/// Sequential network of dense, convolution, and ReLU layers.
#[derive(Debug, Clone)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    trace: Option<Trace>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

impl Model {
    /// Builds a model with Kaiming-uniform weights (bound `sqrt(6 / fan_in)`)
    /// and biases uniform in `±1/sqrt(fan_in)`.
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut next_id = 0;
        let mut fresh = |rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            let p = Parameter::new(next_id, Tensor::new(shape, data).expect("sized"));
            next_id += 1;
            p
        };
        for (i, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Dense { out } => {
                    let fan_in: usize = shape.iter().product();
                    if fan_in == 0 || out == 0 {
                        return Err(Error::Config(format!("layer {i}: empty dense layer")));
                    }
                    let wb = (6.0 / fan_in as f64).sqrt();
                    let bb = 1.0 / (fan_in as f64).sqrt();
                    let weight = MaskedParameter::new(fresh(&mut rng, vec![out, fan_in], wb));
                    let bias = fresh(&mut rng, vec![out], bb);
                    Layer::Dense(Dense {
                        in_features: fan_in,
                        out_features: out,
                        weight,
                        bias,
                    })
                }
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                } => {
                    let [c, _, _] = shape[..] else {
                        return Err(Error::Config(format!(
                            "layer {i}: conv2d needs [C, H, W] input, got {shape:?}"
                        )));
                    };
                    if kernel == 0 || out_channels == 0 {
                        return Err(Error::Config(format!("layer {i}: empty conv2d layer")));
                    }
                    let fan_in = c * kernel * kernel;
                    let wb = (6.0 / fan_in as f64).sqrt();
                    let bb = 1.0 / (fan_in as f64).sqrt();
                    let weight = MaskedParameter::new(fresh(
                        &mut rng,
                        vec![out_channels, c, kernel, kernel],
                        wb,
                    ));
                    let bias = fresh(&mut rng, vec![out_channels], bb);
                    Layer::Conv2d(Conv2d {
                        in_channels: c,
                        out_channels,
                        kernel,
                        weight,
                        bias,
                    })
                }
                LayerSpec::Relu => Layer::Relu,
            };
            shape = layer.output_shape(&shape).ok_or_else(|| Error::LayerShape {
                layer: i,
                expected: vec![],
                got: shape.clone(),
            })?;
            layers.push(layer);
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            trace: None,
        })
    }

    /// Assembles a model from prepared layers, checking that shapes compose.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, l) in layers.iter().enumerate() {
            shape = l.output_shape(&shape).ok_or_else(|| Error::LayerShape {
                layer: i,
                expected: vec![],
                got: shape.clone(),
            })?;
        }
        Ok(Self {
            input_shape,
            layers,
            trace: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layers.iter().fold(self.input_shape.clone(), |s, l| {
            l.output_shape(&s).expect("checked at construction")
        })
    }

    /// Per-sample input shape of each layer.
    pub fn layer_input_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut s = self.input_shape.clone();
        for l in &self.layers {
            out.push(s.clone());
            s = l.output_shape(&s).expect("checked at construction");
        }
        out
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Prunable weights with their layer index.
    pub fn weights(&self) -> impl Iterator<Item = (usize, &MaskedParameter)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.weight().map(|w| (i, w)))
    }

    pub fn weights_mut(&mut self) -> impl Iterator<Item = (usize, &mut MaskedParameter)> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter_map(|(i, l)| l.weight_mut().map(|w| (i, w)))
    }

    /// All trainable parameters in layer order (weight, then bias).
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let (Some(w), Some(b)) = (l.weight(), l.bias()) {
                out.push(&w.base);
                out.push(b);
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(&mut d.weight.base);
                    out.push(&mut d.bias);
                }
                Layer::Conv2d(c) => {
                    out.push(&mut c.weight.base);
                    out.push(&mut c.bias);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn prunable_count(&self) -> usize {
        self.weights().map(|(_, w)| w.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Forward pass that records activations for [`Model::backward`].
    pub fn forward(&mut self, input: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let activations = self.run(input, mode, true)?;
        let out = activations.last().cloned().expect("at least the input");
        self.trace = Some(Trace { mode, activations });
        Ok(out)
    }

    /// Test-time forward pass on effective weights; records nothing.
    pub fn evaluate(&self, input: &Tensor) -> Result<Tensor> {
        self.infer(input, ForwardMode::Gated)
    }

    /// Forward pass without recording.
    pub fn infer(&self, input: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        Ok(self.run(input, mode, false)?.pop().expect("non-empty"))
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::LayerShape {
                layer: 0,
                expected: self.input_shape.clone(),
                got: shape.get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        Ok(shape[0])
    }

    fn run(&self, input: &Tensor, mode: ForwardMode, keep: bool) -> Result<Vec<Tensor>> {
        let n = self.check_input(input)?;
        let mut acts = vec![input.clone()];
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            let x = acts.last().expect("non-empty");
            let next_shape = layer.output_shape(&shape).expect("checked at construction");
            let y = match layer {
                Layer::Dense(d) => {
                    let w = weights_for(&d.weight, mode);
                    layer::dense_forward(
                        x.data(),
                        &w,
                        d.bias.value.data(),
                        n,
                        d.in_features,
                        d.out_features,
                    )
                }
                Layer::Conv2d(c) => {
                    let w = weights_for(&c.weight, mode);
                    layer::conv_forward(x.data(), &w, c.bias.value.data(), conv_dims(c, n, &shape))
                }
                Layer::Relu => layer::relu_forward(x.data()),
            };
            let mut full = vec![n];
            full.extend_from_slice(&next_shape);
            let y = Tensor::new(full, y)?;
            if keep {
                acts.push(y);
            } else {
                acts = vec![y];
            }
            shape = next_shape;
        }
        Ok(acts)
    }

    /// Backpropagates `loss(prediction, target)` through the last recorded
    /// forward pass. Every parameter's `grad` is overwritten with `∂E/∂w`;
    /// returns `E`. In gated mode the gradient of a closed weight is zero.
    pub fn backward(&mut self, loss: Loss, prediction: &Tensor, target: &Tensor) -> Result<f64> {
        let trace = self.trace.take().ok_or(Error::NoForward)?;
        let out = trace.activations.last().expect("non-empty");
        if prediction.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} does not match recorded output {:?}",
                prediction.shape(),
                out.shape()
            )));
        }
        let (value, mut dy) = loss.evaluate(prediction, target)?;
        let n = prediction.rows();
        let shapes = self.layer_input_shapes();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let x = &trace.activations[i];
            dy = match layer {
                Layer::Dense(d) => {
                    let w = weights_for(&d.weight, trace.mode);
                    let (dx, dw, db) = layer::dense_backward(
                        x.data(),
                        &w,
                        &dy,
                        n,
                        d.in_features,
                        d.out_features,
                    );
                    store_grads(&mut d.weight, &mut d.bias, dw, db, trace.mode);
                    dx
                }
                Layer::Conv2d(c) => {
                    let w = weights_for(&c.weight, trace.mode);
                    let dims = conv_dims(c, n, &shapes[i]);
                    let (dx, dw, db) = layer::conv_backward(x.data(), &w, &dy, dims);
                    store_grads(&mut c.weight, &mut c.bias, dw, db, trace.mode);
                    dx
                }
                Layer::Relu => layer::relu_backward(x.data(), &dy),
            };
        }
        Ok(value)
    }

    /// Loss of the model on a batch without touching gradients.
    pub fn loss(&self, loss: Loss, input: &Tensor, target: &Tensor, mode: ForwardMode) -> Result<f64> {
        let pred = self.infer(input, mode)?;
        Ok(loss.evaluate(&pred, target)?.0)
    }
}

fn weights_for(w: &MaskedParameter, mode: ForwardMode) -> Vec<f64> {
    match mode {
        ForwardMode::Raw => w.base.value.data().to_vec(),
        ForwardMode::Gated => w.effective(),
    }
}

fn store_grads(
    w: &mut MaskedParameter,
    b: &mut Parameter,
    dw: Vec<f64>,
    db: Vec<f64>,
    mode: ForwardMode,
) {
    w.base.grad.data_mut().copy_from_slice(&dw);
    if mode == ForwardMode::Gated {
        w.mask_grad(true, false);
    }
    b.grad.data_mut().copy_from_slice(&db);
}

fn conv_dims(c: &Conv2d, n: usize, in_shape: &[usize]) -> ConvDims {
    ConvDims {
        n,
        c: c.in_channels,
        h: in_shape[1],
        w: in_shape[2],
        o: c.out_channels,
        k: c.kernel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_2_1() -> Model {
        let mut m = Model::build(&[2], &[LayerSpec::Dense { out: 1 }], 0).unwrap();
        if let Layer::Dense(d) = &mut m.layers_mut()[0] {
            d.weight.base.value.data_mut().copy_from_slice(&[1.0, 1.0]);
            d.bias.value.data_mut()[0] = 0.0;
        }
        m
    }

    #[test]
    fn dense_linear_identity() {
        let m = dense_2_1();
        let y = m.evaluate(&Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn relu_layer() {
        let m = Model::build(&[3], &[LayerSpec::Relu], 0).unwrap();
        let y = m.evaluate(&Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn zero_kernel_conv_yields_bias() {
        let mut m = Model::build(
            &[1, 5, 5],
            &[LayerSpec::Conv2d { out_channels: 1, kernel: 3 }],
            1,
        )
        .unwrap();
        let bias = if let Layer::Conv2d(c) = &mut m.layers_mut()[0] {
            c.weight.base.value.fill(0.0);
            c.bias.value.data()[0]
        } else {
            unreachable!()
        };
        let x = Tensor::new(vec![1, 1, 5, 5], (0..25).map(|v| v as f64).collect()).unwrap();
        let y = m.evaluate(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == bias));
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let m = dense_2_1();
        let err = m.evaluate(&Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 0, .. }), "{err}");
        assert!(Model::build(&[2, 2], &[LayerSpec::Conv2d { out_channels: 1, kernel: 1 }], 0).is_err());
    }

    #[test]
    fn backward_needs_forward() {
        let mut m = dense_2_1();
        let t = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert!(matches!(m.backward(Loss::Mse, &t, &t), Err(Error::NoForward)));
    }

    #[test]
    fn single_weight_chain_rule() {
        let mut m = Model::build(&[1], &[LayerSpec::Dense { out: 1 }], 0).unwrap();
        if let Layer::Dense(d) = &mut m.layers_mut()[0] {
            d.weight.base.value.data_mut()[0] = 2.0;
            d.bias.value.data_mut()[0] = 0.0;
        }
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let p = m.forward(&x, ForwardMode::Raw).unwrap();
        let e = m.backward(Loss::Mse, &p, &y).unwrap();
        assert_eq!(e, 4.0);
        // dE/dw = 2(wx - y)x
        assert_eq!(m.parameters()[0].grad.data(), &[4.0]);
        assert_eq!(m.parameters()[1].grad.data(), &[4.0]);
    }

    #[test]
    fn perfect_prediction_has_zero_grads() {
        let mut m = Model::build(&[3], &[LayerSpec::Dense { out: 4 }, LayerSpec::Relu, LayerSpec::Dense { out: 2 }], 3).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.4, -0.1]).unwrap();
        let p = m.forward(&x, ForwardMode::Raw).unwrap();
        let e = m.backward(Loss::Mse, &p, &p.clone()).unwrap();
        assert_eq!(e, 0.0);
        for p in m.parameters() {
            assert!(p.grad.data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn gated_forward_zeroes_closed_weights() {
        let mut m = dense_2_1();
        m.weights_mut().next().unwrap().1.prune(0);
        let x = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(m.evaluate(&x).unwrap().data(), &[4.0]);
        assert_eq!(m.infer(&x, ForwardMode::Raw).unwrap().data(), &[7.0]);
        let p = m.forward(&x, ForwardMode::Gated).unwrap();
        m.backward(Loss::Mse, &p, &Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        assert_eq!(m.parameters()[0].grad.data()[0], 0.0);
        assert_ne!(m.parameters()[0].grad.data()[1], 0.0);
    }
}
