//! Multiplier-free inference for fully quantized models.
//!
//! Compilation keeps only nonzero weights, each as a sign and an exponent.
//! The forward pass then adds `±x·2^n` terms, computing `x·2^n` by editing
//! the exponent field of `x`. Terms are accumulated in the same order as
//! the reference kernels, so outputs match [`Model::evaluate`] bit for bit.

use crate::autodiff::{Layer, Model};
use crate::error::{Error, Result};
use crate::exec;
use crate::quantization::exponent_of_pow2;
use crate::tensor::Tensor;

/// One nonzero weight: `sign · 2^exponent` applied to input `input`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftTerm {
    /// Dense: input feature. Conv: offset in the `[C, k, k]` window.
    pub input: u32,
    pub negative: bool,
    pub exponent: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompiledLayer {
    Dense {
        fan_in: usize,
        /// Terms per output unit, in input order.
        units: Vec<Vec<ShiftTerm>>,
        bias: Vec<f64>,
    },
    Conv2d {
        in_channels: usize,
        kernel: usize,
        /// Terms per output channel, in `(c, ky, kx)` order.
        units: Vec<Vec<ShiftTerm>>,
        bias: Vec<f64>,
    },
    Relu,
}

impl CompiledLayer {
    pub fn term_count(&self) -> usize {
        match self {
            CompiledLayer::Dense { units, .. } | CompiledLayer::Conv2d { units, .. } => {
                units.iter().map(Vec::len).sum()
            }
            CompiledLayer::Relu => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledModel {
    input_shape: Vec<usize>,
    layers: Vec<CompiledLayer>,
}

/// Output of [`forward_shift`] plus the number of shift-and-add operations
/// performed over the whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOutput {
    pub output: Tensor,
    pub shift_ops: u64,
}

/// `x · 2^n` by exponent arithmetic. Errors instead of producing an
/// infinity or a subnormal.
pub fn scale_pow2(x: f64, n: i32) -> Result<f64> {
    if x == 0.0 {
        return Ok(x);
    }
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        return Err(Error::ExponentUnderflow { value: x, exponent: n });
    }
    if biased == 0x7ff {
        return Err(Error::ExponentOverflow { value: x, exponent: n });
    }
    let e = biased + n;
    if e >= 0x7ff {
        return Err(Error::ExponentOverflow { value: x, exponent: n });
    }
    if e <= 0 {
        return Err(Error::ExponentUnderflow { value: x, exponent: n });
    }
    Ok(f64::from_bits((bits & !(0x7ffu64 << 52)) | ((e as u64) << 52)))
}

fn compile_units(
    layer: usize,
    weights: &[f64],
    units: usize,
    per_unit: usize,
    range: Option<(i32, i32)>,
) -> Result<Vec<Vec<ShiftTerm>>> {
    (0..units)
        .map(|u| {
            let mut terms = Vec::new();
            for (j, &w) in weights[u * per_unit..(u + 1) * per_unit].iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let index = u * per_unit + j;
                let n = exponent_of_pow2(w).ok_or(Error::NotPowerOfTwo { layer, index, value: w })?;
                if let Some((lo, hi)) = range {
                    if !(lo..=hi).contains(&n) {
                        return Err(Error::NotPowerOfTwo { layer, index, value: w });
                    }
                }
                terms.push(ShiftTerm {
                    input: j as u32,
                    negative: w < 0.0,
                    exponent: n,
                });
            }
            Ok(terms)
        })
        .collect()
}

/// Builds the zero-skipping shift representation of `model`'s effective
/// weights. Fails on any nonzero weight that is not a power of two or lies
/// outside its layer's grid.
pub fn compile(model: &Model) -> Result<CompiledModel> {
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        let range = layer
            .weight()
            .and_then(|w| w.grid())
            .map(|g| (g.n_min(), g.n_max()));
        let compiled = match layer {
            Layer::Dense(d) => CompiledLayer::Dense {
                fan_in: d.in_features,
                units: compile_units(i, &d.weight.effective(), d.out_features, d.in_features, range)?,
                bias: d.bias.value.data().to_vec(),
            },
            Layer::Conv2d(c) => {
                let per = c.in_channels * c.kernel * c.kernel;
                CompiledLayer::Conv2d {
                    in_channels: c.in_channels,
                    kernel: c.kernel,
                    units: compile_units(i, &c.weight.effective(), c.out_channels, per, range)?,
                    bias: c.bias.value.data().to_vec(),
                }
            }
            Layer::Relu => CompiledLayer::Relu,
        };
        layers.push(compiled);
    }
    Ok(CompiledModel {
        input_shape: model.input_shape().to_vec(),
        layers,
    })
}

impl CompiledModel {
    pub fn layers(&self) -> &[CompiledLayer] {
        &self.layers
    }

    /// Stored nonzero weights.
    pub fn term_count(&self) -> usize {
        self.layers.iter().map(CompiledLayer::term_count).sum()
    }
}

#[inline]
fn shifted(x: f64, t: &ShiftTerm) -> Result<f64> {
    let v = scale_pow2(x, t.exponent)?;
    Ok(if t.negative { -v } else { v })
}

/// Runs the compiled model. Output matches the reference float forward
/// pass bit for bit.
pub fn forward_shift(compiled: &CompiledModel, input: &Tensor) -> Result<ShiftOutput> {
    let shape = input.shape();
    if shape.len() != compiled.input_shape.len() + 1 || shape[1..] != compiled.input_shape[..] {
        return Err(Error::LayerShape {
            layer: 0,
            expected: compiled.input_shape.clone(),
            got: shape.get(1..).unwrap_or(&[]).to_vec(),
        });
    }
    if !input.is_finite() {
        return Err(Error::Shape("input contains non-finite values".into()));
    }
    let n = shape[0];
    let mut sample_shape = compiled.input_shape.clone();
    let mut x = input.data().to_vec();
    let mut ops = 0u64;
    for layer in &compiled.layers {
        let (y, next_shape, layer_ops) = match layer {
            CompiledLayer::Dense { fan_in, units, bias } => {
                let fan_out = units.len();
                let rows = exec::map_indexed(n, |s| -> Result<Vec<f64>> {
                    let xs = &x[s * fan_in..(s + 1) * fan_in];
                    units
                        .iter()
                        .zip(bias)
                        .map(|(terms, &b)| {
                            let mut acc = 0.0;
                            for t in terms {
                                acc += shifted(xs[t.input as usize], t)?;
                            }
                            Ok(acc + b)
                        })
                        .collect()
                });
                let mut y = Vec::with_capacity(n * fan_out);
                for r in rows {
                    y.extend(r?);
                }
                (y, vec![fan_out], (n * layer.term_count()) as u64)
            }
            CompiledLayer::Conv2d {
                in_channels,
                kernel,
                units,
                bias,
            } => {
                let (c, h, w, k) = (*in_channels, sample_shape[1], sample_shape[2], *kernel);
                let (oh, ow) = (h - k + 1, w - k + 1);
                // window offset -> (channel, ky, kx)
                let rows = exec::map_indexed(n, |s| -> Result<Vec<f64>> {
                    let xs = &x[s * c * h * w..(s + 1) * c * h * w];
                    let mut out = Vec::with_capacity(units.len() * oh * ow);
                    for (terms, &b) in units.iter().zip(bias) {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = 0.0;
                                for t in terms {
                                    let j = t.input as usize;
                                    let (ch, ky, kx) = (j / (k * k), (j / k) % k, j % k);
                                    acc += shifted(xs[(ch * h + oy + ky) * w + ox + kx], t)?;
                                }
                                out.push(acc + b);
                            }
                        }
                    }
                    Ok(out)
                });
                let mut y = Vec::with_capacity(n * units.len() * oh * ow);
                for r in rows {
                    y.extend(r?);
                }
                let ops = (n * oh * ow * layer.term_count()) as u64;
                (y, vec![units.len(), oh, ow], ops)
            }
            CompiledLayer::Relu => (
                x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                sample_shape.clone(),
                0,
            ),
        };
        x = y;
        sample_shape = next_shape;
        ops += layer_ops;
    }
    let mut full = vec![n];
    full.extend_from_slice(&sample_shape);
    Ok(ShiftOutput {
        output: Tensor::new(full, x)?,
        shift_ops: ops,
    })
}
