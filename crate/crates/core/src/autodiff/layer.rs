use crate::autodiff::param::{MaskedParameter, Parameter};
use crate::exec;

/// Fully connected layer. Any input is flattened per sample; the weight is
/// stored `[out, in]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: MaskedParameter,
    pub bias: Parameter,
}

/// Valid-padding, stride-1 2-D convolution. Input `[C, H, W]` per sample,
/// weight `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: MaskedParameter,
    pub bias: Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
}

impl Layer {
    pub fn weight(&self) -> Option<&MaskedParameter> {
        match self {
            Layer::Dense(d) => Some(&d.weight),
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::Relu => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut MaskedParameter> {
        match self {
            Layer::Dense(d) => Some(&mut d.weight),
            Layer::Conv2d(c) => Some(&mut c.weight),
            Layer::Relu => None,
        }
    }

    pub fn bias(&self) -> Option<&Parameter> {
        match self {
            Layer::Dense(d) => Some(&d.bias),
            Layer::Conv2d(c) => Some(&c.bias),
            Layer::Relu => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Parameter> {
        match self {
            Layer::Dense(d) => Some(&mut d.bias),
            Layer::Conv2d(c) => Some(&mut c.bias),
            Layer::Relu => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
        }
    }

    /// Per-sample output shape, or `None` if `input` does not fit.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                (input.iter().product::<usize>() == d.in_features).then(|| vec![d.out_features])
            }
            Layer::Conv2d(c) => match *input {
                [ch, h, w] if ch == c.in_channels && h >= c.kernel && w >= c.kernel => Some(vec![
                    c.out_channels,
                    h - c.kernel + 1,
                    w - c.kernel + 1,
                ]),
                _ => None,
            },
            Layer::Relu => Some(input.to_vec()),
        }
    }
}

// Kernels. Each output value is an in-order sum that starts at +0.0 and adds
// the bias last; the shift-based inference path reproduces exactly this order.

pub(crate) fn dense_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; n * fan_out];
    exec::for_each_chunk_mut(&mut y, fan_out, |s, row| {
        let xs = &x[s * fan_in..(s + 1) * fan_in];
        for (o, out) in row.iter_mut().enumerate() {
            let ws = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = 0.0;
            for i in 0..fan_in {
                acc += ws[i] * xs[i];
            }
            *out = acc + b[o];
        }
    });
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn dense_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    fan_in: usize,
    fan_out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; fan_out * fan_in];
    exec::for_each_chunk_mut(&mut dw, fan_in, |o, row| {
        for s in 0..n {
            let g = dy[s * fan_out + o];
            if g == 0.0 {
                continue;
            }
            let xs = &x[s * fan_in..(s + 1) * fan_in];
            for (d, &xv) in row.iter_mut().zip(xs) {
                *d += g * xv;
            }
        }
    });
    let db = (0..fan_out)
        .map(|o| (0..n).map(|s| dy[s * fan_out + o]).sum())
        .collect();
    let mut dx = vec![0.0; n * fan_in];
    exec::for_each_chunk_mut(&mut dx, fan_in, |s, row| {
        for o in 0..fan_out {
            let g = dy[s * fan_out + o];
            if g == 0.0 {
                continue;
            }
            let ws = &w[o * fan_in..(o + 1) * fan_in];
            for (d, &wv) in row.iter_mut().zip(ws) {
                *d += g * wv;
            }
        }
    });
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
}

impl ConvDims {
    pub fn oh(&self) -> usize {
        self.h - self.k + 1
    }
    pub fn ow(&self) -> usize {
        self.w - self.k + 1
    }
}

pub(crate) fn conv_forward(x: &[f64], wt: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow, k) = (d.oh(), d.ow(), d.k);
    let plane = oh * ow;
    let mut y = vec![0.0; d.n * d.o * plane];
    exec::for_each_chunk_mut(&mut y, plane, |idx, out| {
        let (s, o) = (idx / d.o, idx % d.o);
        let xs = &x[s * d.c * d.h * d.w..(s + 1) * d.c * d.h * d.w];
        let ws = &wt[o * d.c * k * k..(o + 1) * d.c * k * k];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..d.c {
                    for ky in 0..k {
                        let xrow = &xs[(c * d.h + oy + ky) * d.w + ox..];
                        let wrow = &ws[(c * k + ky) * k..];
                        for kx in 0..k {
                            acc += wrow[kx] * xrow[kx];
                        }
                    }
                }
                out[oy * ow + ox] = acc + b[o];
            }
        }
    });
    y
}

pub(crate) fn conv_backward(
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
    d: ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow, k) = (d.oh(), d.ow(), d.k);
    let plane = oh * ow;
    let in_len = d.c * d.h * d.w;
    let ker = d.c * k * k;
    let mut dw = vec![0.0; d.o * ker];
    exec::for_each_chunk_mut(&mut dw, ker, |o, row| {
        for s in 0..d.n {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let gs = &dy[(s * d.o + o) * plane..(s * d.o + o + 1) * plane];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gs[oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..d.c {
                        for ky in 0..k {
                            let xrow = &xs[(c * d.h + oy + ky) * d.w + ox..];
                            let drow = &mut row[(c * k + ky) * k..(c * k + ky + 1) * k];
                            for kx in 0..k {
                                drow[kx] += g * xrow[kx];
                            }
                        }
                    }
                }
            }
        }
    });
    let db = (0..d.o)
        .map(|o| {
            let mut acc = 0.0;
            for s in 0..d.n {
                for g in &dy[(s * d.o + o) * plane..(s * d.o + o + 1) * plane] {
                    acc += g;
                }
            }
            acc
        })
        .collect();
    let mut dx = vec![0.0; d.n * in_len];
    exec::for_each_chunk_mut(&mut dx, in_len, |s, row| {
        for o in 0..d.o {
            let gs = &dy[(s * d.o + o) * plane..(s * d.o + o + 1) * plane];
            let ws = &wt[o * ker..(o + 1) * ker];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gs[oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..d.c {
                        for ky in 0..k {
                            let base = (c * d.h + oy + ky) * d.w + ox;
                            let wrow = &ws[(c * k + ky) * k..];
                            for kx in 0..k {
                                row[base + kx] += g * wrow[kx];
                            }
                        }
                    }
                }
            }
        }
    });
    (dx, dw, db)
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub(crate) fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}
