//! `.spqf` model container.
//!
//! All integers little-endian.
//!
//! ```text
//! magic "SPQF" | version u16 | layer count u16
//! input shape: ndim u8, dims u32 × ndim
//! per layer:
//!   kind u8 (0 dense, 1 conv2d, 2 relu)         relu stops here
//!   ndim u8, weight dims u32 × ndim             dense [out, in], conv [out, in, k, k]
//!   encoding u8 (0 dense_f32, 1 sparse_pow2)
//!   weight payload
//!   bias f32 × out
//!
//! dense_f32:   effective weights, f32 × product(dims), row-major
//! sparse_pow2: bits u8 | n_max i8 | nonzero count u32
//!              flat indices as LEB128 varints: first absolute, then gaps (≥ 1)
//!              codes, bits wide, packed LSB-first:
//!                bit (bits−1) = sign, low (bits−1) bits = k
//!                k = 0 is zero, k ≥ 1 is 2^(n_max − (k − 1))
//! ```
//!
//! Dense weights are narrowed to f32 on save, so the first save of an f64
//! model rounds; after that save/load is the identity. Powers of two survive
//! exactly in both encodings.

use std::io::Write;
use std::path::Path;

use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::autodiff::{Conv2d, Dense, Layer, MaskedParameter, Model, Parameter, QuantState};
use crate::error::{Error, Result};
use crate::quantization::{exponent_of_pow2, pow2, Pow2Grid, MAX_BITS, MIN_BITS};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPQF";
pub const VERSION: u16 = 1;
/// Largest tensor a container may declare. Anything bigger is treated as
/// corruption rather than allocated.
pub const MAX_ELEMENTS: usize = 1 << 24;

const KIND_DENSE: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_RELU: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    DenseF32 = 0,
    SparsePow2 = 1,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Appends `bits`-wide codes packed LSB-first.
fn pack_codes(out: &mut Vec<u8>, codes: &[u16], bits: u8) {
    let mut acc: u32 = 0;
    let mut filled = 0u8;
    for &c in codes {
        acc |= (c as u32) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
}

fn encode_sparse(out: &mut Vec<u8>, layer: usize, w: &MaskedParameter) -> Result<()> {
    let grid = match w.grid() {
        Some(g) if w.is_fully_quantized() => *g,
        _ => return Err(Error::NotQuantized { layer }),
    };
    let n_max = i8::try_from(grid.n_max())
        .map_err(|_| Error::Format(format!("layer {layer}: exponent {} exceeds i8", grid.n_max())))?;
    let eff = w.effective();
    let mut indices = Vec::new();
    let mut codes = Vec::new();
    let sign_bit = 1u16 << (grid.bits() - 1);
    for (i, &v) in eff.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let n = exponent_of_pow2(v)
            .filter(|n| (grid.n_min()..=grid.n_max()).contains(n))
            .ok_or(Error::NotPowerOfTwo { layer, index: i, value: v })?;
        let k = (grid.n_max() - n + 1) as u16;
        indices.push(i);
        codes.push(if v < 0.0 { sign_bit | k } else { k });
    }
    out.push(grid.bits());
    out.push(n_max as u8);
    put_u32(out, indices.len())?;
    let mut prev = 0;
    for (j, &i) in indices.iter().enumerate() {
        put_varint(out, (if j == 0 { i } else { i - prev }) as u64);
        prev = i;
    }
    pack_codes(out, &codes, grid.bits());
    Ok(())
}

/// Serializes `model` with every weight tensor in `encoding`.
pub fn to_bytes(model: &Model, encoding: Encoding) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u16::try_from(model.layers().len())
        .map_err(|_| Error::Format("more than 65535 layers".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    out.push(model.input_shape().len() as u8);
    for &d in model.input_shape() {
        put_u32(&mut out, d)?;
    }
    for (i, layer) in model.layers().iter().enumerate() {
        let (kind, w, b) = match layer {
            Layer::Dense(d) => (KIND_DENSE, &d.weight, &d.bias),
            Layer::Conv2d(c) => (KIND_CONV, &c.weight, &c.bias),
            Layer::Relu => {
                out.push(KIND_RELU);
                continue;
            }
        };
        out.push(kind);
        let dims = w.base.value.shape();
        out.push(dims.len() as u8);
        for &d in dims {
            put_u32(&mut out, d)?;
        }
        out.push(encoding as u8);
        match encoding {
            Encoding::DenseF32 => put_f32s(&mut out, &w.effective()),
            Encoding::SparsePow2 => encode_sparse(&mut out, i, w)?,
        }
        put_f32s(&mut out, b.value.data());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn varint(&mut self) -> Result<u64> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::Format("varint longer than 64 bits".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let nd = self.u8()? as usize;
        let dims = (0..nd).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        if dims.contains(&0) {
            return Err(Error::Format(format!("zero dimension in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Format(format!("dimensions {dims:?} too large")))?;
        Ok(dims)
    }
}

fn decode_sparse(r: &mut Reader, len: usize) -> Result<(Vec<f64>, Vec<QuantState>, Pow2Grid)> {
    let bits = r.u8()?;
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Format(format!("bit width {bits} out of range")));
    }
    let n_max = r.u8()? as i8 as i32;
    let grid = Pow2Grid::new(bits, n_max).map_err(|e| Error::Format(e.to_string()))?;
    let count = r.u32()?;
    if count > len || count > r.remaining() {
        return Err(Error::Format(format!("{count} nonzeros in {len} weights")));
    }
    let mut indices = Vec::with_capacity(count);
    let mut prev = 0u64;
    for j in 0..count {
        let d = r.varint()?;
        let i = if j == 0 {
            d
        } else if d == 0 {
            return Err(Error::Format("indices not strictly increasing".into()));
        } else {
            prev.checked_add(d).ok_or_else(|| Error::Format("index overflow".into()))?
        };
        if i >= len as u64 {
            return Err(Error::Format(format!("index {i} out of range {len}")));
        }
        indices.push(i as usize);
        prev = i;
    }
    let code_bytes = r.take((count * bits as usize).div_ceil(8))?;
    let mut values = vec![0.0; len];
    let mut states = vec![QuantState::Free; len];
    let mask = (1u32 << bits) - 1;
    let k_mask = (1u32 << (bits - 1)) - 1;
    for (j, &i) in indices.iter().enumerate() {
        let bit = j * bits as usize;
        let (byte, off) = (bit / 8, bit % 8);
        let mut word = 0u32;
        for (b, &v) in code_bytes[byte..].iter().take(3).enumerate() {
            word |= (v as u32) << (8 * b);
        }
        let code = (word >> off) & mask;
        let k = (code & k_mask) as i32;
        if k == 0 {
            continue;
        }
        if k as usize > grid.exponents_per_sign() {
            return Err(Error::Format(format!("code {k} outside {bits}-bit grid")));
        }
        let n = n_max - (k - 1);
        values[i] = if code >> (bits - 1) == 1 { -pow2(n) } else { pow2(n) };
        states[i] = QuantState::Quantized(n);
    }
    Ok((values, states, grid))
}

/// Parses a container produced by [`to_bytes`].
pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("missing magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u16()? as usize;
    let input_shape = r.dims()?;
    let mut layers = Vec::with_capacity(count);
    let mut next_id = 0;
    for l in 0..count {
        let kind = r.u8()?;
        if kind == KIND_RELU {
            layers.push(Layer::Relu);
            continue;
        }
        if kind != KIND_DENSE && kind != KIND_CONV {
            return Err(Error::Format(format!("layer {l}: unknown kind {kind}")));
        }
        let dims = r.dims()?;
        let ok = match kind {
            KIND_DENSE => dims.len() == 2,
            _ => dims.len() == 4 && dims[2] == dims[3],
        };
        if !ok {
            return Err(Error::Format(format!("layer {l}: bad weight dims {dims:?}")));
        }
        let len: usize = dims.iter().product();
        let weight = match r.u8()? {
            0 => {
                let values = r.f32s(len)?;
                MaskedParameter::from_effective(next_id, Tensor::new(dims.clone(), values)?)
            }
            1 => {
                let (values, states, grid) = decode_sparse(&mut r, len)?;
                let gate = values.iter().map(|&v| v != 0.0).collect();
                MaskedParameter::from_parts(
                    Parameter::new(next_id, Tensor::new(dims.clone(), values)?),
                    gate,
                    states,
                    Some(grid),
                )
            }
            e => return Err(Error::Format(format!("layer {l}: unknown encoding {e}"))),
        };
        let bias = Parameter::new(next_id + 1, Tensor::new(vec![dims[0]], r.f32s(dims[0])?)?);
        next_id += 2;
        layers.push(if kind == KIND_DENSE {
            Layer::Dense(Dense {
                in_features: dims[1],
                out_features: dims[0],
                weight,
                bias,
            })
        } else {
            Layer::Conv2d(Conv2d {
                in_channels: dims[1],
                out_channels: dims[0],
                kernel: dims[2],
                weight,
                bias,
            })
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Model::from_layers(input_shape, layers).map_err(|e| Error::Format(e.to_string()))
}

pub fn save(model: &Model, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    std::fs::write(path, to_bytes(model, encoding)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

/// Sparse power-of-two when every layer is fully quantized, dense otherwise.
pub fn natural_encoding(model: &Model) -> Encoding {
    let quantized = model.weights().all(|(_, w)| w.grid().is_some() && w.is_fully_quantized());
    if quantized && model.weights().next().is_some() {
        Encoding::SparsePow2
    } else {
        Encoding::DenseF32
    }
}

/// Size of `bytes` after DEFLATE at maximum compression.
pub fn measure_compressed(bytes: &[u8]) -> usize {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(bytes).expect("writing to a Vec");
    enc.finish().expect("writing to a Vec").len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::LayerSpec;

    fn quantized_dense_2x2() -> Model {
        let mut m = Model::build(&[2], &[LayerSpec::Dense { out: 2 }], 0).unwrap();
        let w = m.weights_mut().next().unwrap().1;
        w.base.value.data_mut().copy_from_slice(&[0.5, 0.0, 0.0, -0.25]);
        let grid = crate::quantization::build_grid(&w.base.value, &[true; 4], 3).unwrap();
        w.set_grid(grid);
        for i in 0..4 {
            let v = w.base.value.data()[i];
            w.freeze(i, grid.snap(v), grid.snap_state(v));
        }
        m
    }

    #[test]
    fn sparse_hand_encoding() {
        let m = quantized_dense_2x2();
        let bytes = to_bytes(&m, Encoding::SparsePow2).unwrap();
        // header 8, input dims 1+4, kind 1, dims 1+8, encoding 1
        let p = 8 + 5 + 1 + 9 + 1;
        assert_eq!(bytes[p], 3); // bits
        assert_eq!(bytes[p + 1] as i8, -1); // n_max = floor(log2(2/3))
        assert_eq!(u32::from_le_bytes(bytes[p + 2..p + 6].try_into().unwrap()), 2);
        assert_eq!(&bytes[p + 6..p + 8], &[0, 3]); // index deltas
        // codes: 0.5 = 2^-1 -> k=1, +; -0.25 -> k=2, sign; 3-bit fields LSB-first
        assert_eq!(bytes[p + 8], 0b110_001);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.weights().next().unwrap().1.effective(), vec![0.5, 0.0, 0.0, -0.25]);
    }

    #[test]
    fn empty_model_header_only() {
        let m = Model::from_layers(vec![3], vec![]).unwrap();
        let bytes = to_bytes(&m, Encoding::DenseF32).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(bytes.len(), 8 + 1 + 4);
        assert_eq!(from_bytes(&bytes).unwrap().layers().len(), 0);
    }

    #[test]
    fn resave_is_byte_identical() {
        let m = Model::build(&[3], &[LayerSpec::Dense { out: 4 }, LayerSpec::Relu, LayerSpec::Dense { out: 2 }], 9).unwrap();
        let a = to_bytes(&m, Encoding::DenseF32).unwrap();
        let b = to_bytes(&from_bytes(&a).unwrap(), Encoding::DenseF32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sparse_needs_quantized_model() {
        let m = Model::build(&[3], &[LayerSpec::Dense { out: 2 }], 1).unwrap();
        assert!(matches!(to_bytes(&m, Encoding::SparsePow2), Err(Error::NotQuantized { layer: 0 })));
    }

    #[test]
    fn bad_headers() {
        let m = quantized_dense_2x2();
        let good = to_bytes(&m, Encoding::SparsePow2).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(from_bytes(&bad).is_err());
        assert!(from_bytes(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn compressed_sizes() {
        let zeros = vec![0u8; 1 << 20];
        assert!(measure_compressed(&zeros) < 5 * 1024);
        assert_eq!(measure_compressed(&zeros), measure_compressed(&zeros));
        use rand::{RngCore, SeedableRng};
        // f32 values with uniformly random bit patterns
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let floats: Vec<u8> = std::iter::from_fn(|| Some(f32::from_bits(rng.next_u32())))
            .filter(|v| v.is_finite())
            .take(1 << 16)
            .flat_map(f32::to_le_bytes)
            .collect();
        let ratio = measure_compressed(&floats) as f64 / floats.len() as f64;
        assert!(ratio >= 0.95, "ratio {ratio}");
    }
}
