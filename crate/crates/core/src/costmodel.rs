//! Parameter, operation, hardware-cost, and memory accounting.
//!
//! One operation is a 16-bit MAC. A shift-and-add costs `shift_cost_ratio`
//! of that (2/33: a 16-bit multiplier plus accumulator decomposes into 17
//! adders and 16 shifts, of which a power-of-two weight needs two units).
//! Unstructured sparsity is assumed to save work uniformly at every output
//! position, so a layer's effective operations are its nonzero weights times
//! its output positions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Layer, Model};
use crate::error::{Error, Result};
use crate::model_io::{self, Encoding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub shift_cost_ratio: f64,
    pub bytes_per_dense_weight: usize,
    /// Multiplier applied to per-forward-pass counts (e.g. frames per second
    /// times positions).
    pub scale: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            shift_cost_ratio: 2.0 / 33.0,
            bytes_per_dense_weight: 4,
            scale: 1.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shift_cost_ratio > 0.0 && self.shift_cost_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "shift_cost_ratio must be in (0, 1], got {}",
                self.shift_cost_ratio
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }

    /// Hardware cost in MAC units of `ops` operations.
    pub fn hw_cost(&self, ops: f64, quantized: bool) -> f64 {
        let unit = if quantized { self.shift_cost_ratio } else { 1.0 };
        ops * self.scale * unit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params_total: u64,
    pub params_nonzero: u64,
    pub sparsity: f64,
    pub macs_dense: u64,
    pub ops_effective: u64,
    /// Shift-and-add operations of one quantized forward pass (0 when the
    /// model is not quantized).
    pub shift_ops: u64,
    pub hw_cost: f64,
    pub quantized: bool,
    pub memory_raw: u64,
    pub memory_compressed: Option<u64>,
    pub scale: f64,
}

/// `(dense MACs, output positions)` of each weight layer for one sample of
/// `input_shape`.
fn layer_work(model: &Model, input_shape: &[usize]) -> Result<Vec<(u64, u64)>> {
    let mut shape = input_shape.to_vec();
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let next = layer.output_shape(&shape).ok_or_else(|| Error::LayerShape {
            layer: i,
            expected: vec![],
            got: shape.clone(),
        })?;
        match layer {
            Layer::Dense(d) => out.push(((d.in_features * d.out_features) as u64, 1)),
            Layer::Conv2d(c) => {
                let positions = (next[1] * next[2]) as u64;
                let per = (c.kernel * c.kernel * c.in_channels * c.out_channels) as u64;
                out.push((positions * per, positions));
            }
            Layer::Relu => {}
        }
        shape = next;
    }
    Ok(out)
}

/// MACs of one dense (unpruned) forward pass.
pub fn count_dense_macs(model: &Model, input_shape: &[usize]) -> Result<u64> {
    Ok(layer_work(model, input_shape)?.iter().map(|w| w.0).sum())
}

/// Operation and hardware-cost accounting. Memory is left to
/// [`memory_report`]; `memory_compressed` is `None` here.
pub fn effective_cost(
    model: &Model,
    input_shape: &[usize],
    params: &CostParams,
    quantized: bool,
) -> Result<CostReport> {
    let work = layer_work(model, input_shape)?;
    let mut params_total = 0u64;
    let mut params_nonzero = 0u64;
    let mut ops_effective = 0u64;
    for ((_, w), &(_, positions)) in model.weights().zip(&work) {
        let nnz = (w.len() - w.zero_count()) as u64;
        params_total += w.len() as u64;
        params_nonzero += nnz;
        ops_effective += nnz * positions;
    }
    let macs_dense = work.iter().map(|w| w.0).sum();
    let sparsity = if params_total == 0 {
        0.0
    } else {
        (params_total - params_nonzero) as f64 / params_total as f64
    };
    Ok(CostReport {
        params_total,
        params_nonzero,
        sparsity,
        macs_dense,
        ops_effective,
        shift_ops: if quantized { ops_effective } else { 0 },
        hw_cost: params.hw_cost(ops_effective as f64, quantized),
        quantized,
        memory_raw: params_total * params.bytes_per_dense_weight as u64,
        memory_compressed: None,
        scale: params.scale,
    })
}

/// `(raw bytes, DEFLATE-compressed container bytes)`. The container uses
/// the sparse power-of-two encoding when the model is fully quantized.
pub fn memory_report(model: &Model, params: &CostParams) -> Result<(u64, u64)> {
    let raw = model.prunable_count() as u64 * params.bytes_per_dense_weight as u64;
    let bytes = model_io::to_bytes(model, model_io::natural_encoding(model))?;
    Ok((raw, model_io::measure_compressed(&bytes) as u64))
}

/// Compressed size of the model in a specific encoding.
pub fn compressed_size(model: &Model, encoding: Encoding) -> Result<u64> {
    Ok(model_io::measure_compressed(&model_io::to_bytes(model, encoding)?) as u64)
}

/// Full report at the model's own input shape. Quantized when every
/// layer is fully quantized.
/// `size` as a percentage of `baseline`.
pub fn memory_ratio(size: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) || !(size >= 0.0) {
        return Err(Error::Config(format!("cannot compare {size} with baseline {baseline}")));
    }
    Ok(100.0 * size / baseline)
}

pub fn cost_report(model: &Model, params: &CostParams) -> Result<CostReport> {
    params.validate()?;
    let quantized = model_io::natural_encoding(model) == Encoding::SparsePow2;
    let mut r = effective_cost(model, model.input_shape(), params, quantized)?;
    let (raw, compressed) = memory_report(model, params)?;
    r.memory_raw = raw;
    r.memory_compressed = Some(compressed);
    Ok(r)
}
