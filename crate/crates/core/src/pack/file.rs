//! Packed-model file: `SYSM` magic, version, provenance, then one record per
//! layer. All integers and floats are little-endian.
//!
//! ```text
//! "SYSM" u16:version [u8;32]:config_hash u64:seed u32:layers
//! per layer:
//!   u8:kind u8:ndim u32*ndim:shape [u8;3]:set u32:b1 u32:b2
//!   u32:channels u32*channels:permutation f64:weight_scale
//!   u32:elems_per_channel u32:lanes u16*lanes:payload
//!   f64:weight_offset f64:input_scale f64:input_offset u8:relu
//!   u32:out_channels f64*out_channels:affine_scale f64*out_channels:affine_bias
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{ChannelPermutation, GroupBoundaries, PackedTensor, QuantScale};
use crate::error::{Error, Result};
use crate::kernels::{ConvSpec, FusedAffine, LayerShape};
use crate::qformat::{bpp_of_model, LayerPrecisionMap, PrecisionSet};

pub const MAGIC: &[u8; 4] = b"SYSM";
pub const VERSION: u16 = 1;

const KIND_DENSE: u8 = 0;
const KIND_CONV: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedLayer {
    pub shape: LayerShape,
    pub weights: PackedTensor,
    /// Calibrated quantizer of this layer's input activations.
    pub input: QuantScale,
    pub affine: FusedAffine,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedModel {
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub layers: Vec<PackedLayer>,
}

impl PackedModel {
    pub fn maps(&self) -> Result<Vec<LayerPrecisionMap>> {
        self.layers.iter().map(|l| l.weights.precision_map()).collect()
    }

    pub fn bpp(&self) -> Result<f64> {
        bpp_of_model(&self.maps()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let m = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LE>(VERSION)?;
        w.write_all(&self.config_hash)?;
        w.write_u64::<LE>(self.seed)?;
        w.write_u32::<LE>(to_u32(self.layers.len())?)?;
        for layer in &self.layers {
            write_layer(w, layer)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = r.read_u16::<LE>().map_err(truncated)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash).map_err(truncated)?;
        let seed = r.read_u64::<LE>().map_err(truncated)?;
        let n = r.read_u32::<LE>().map_err(truncated)?;
        let layers = (0..n).map(|_| read_layer(r)).collect::<Result<Vec<_>>>()?;
        Ok(Self { config_hash, seed, layers })
    }
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated file: {e}"))
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in 32 bits")))
}

fn write_layer(w: &mut impl Write, layer: &PackedLayer) -> Result<()> {
    let (kind, dims): (u8, Vec<usize>) = match layer.shape {
        LayerShape::Dense { inputs, outputs } => (KIND_DENSE, vec![inputs, outputs]),
        LayerShape::Conv(c) => (KIND_CONV, vec![c.in_channels, c.in_h, c.in_w, c.out_channels, c.kh, c.kw, c.stride, c.pad]),
    };
    w.write_u8(kind)?;
    w.write_u8(dims.len() as u8)?;
    for d in dims {
        w.write_u32::<LE>(to_u32(d)?)?;
    }
    let t = &layer.weights;
    w.write_all(&t.set.bits())?;
    w.write_u32::<LE>(to_u32(t.boundaries.starts[0])?)?;
    w.write_u32::<LE>(to_u32(t.boundaries.starts[1])?)?;
    w.write_u32::<LE>(to_u32(t.channels())?)?;
    for &o in t.permutation.order() {
        w.write_u32::<LE>(to_u32(o)?)?;
    }
    w.write_f64::<LE>(t.quant.scale)?;
    w.write_u32::<LE>(to_u32(t.elems_per_channel)?)?;
    w.write_u32::<LE>(to_u32(t.lanes.len())?)?;
    for &lane in &t.lanes {
        w.write_u16::<LE>(lane)?;
    }
    w.write_f64::<LE>(t.quant.offset)?;
    w.write_f64::<LE>(layer.input.scale)?;
    w.write_f64::<LE>(layer.input.offset)?;
    w.write_u8(u8::from(layer.relu))?;
    w.write_u32::<LE>(to_u32(layer.affine.channels())?)?;
    for &a in &layer.affine.scale {
        w.write_f64::<LE>(a)?;
    }
    for &b in &layer.affine.bias {
        w.write_f64::<LE>(b)?;
    }
    Ok(())
}

fn read_u32s(r: &mut impl Read, n: usize) -> Result<Vec<usize>> {
    (0..n).map(|_| Ok(r.read_u32::<LE>().map_err(truncated)? as usize)).collect()
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.read_f64::<LE>().map_err(truncated)).collect()
}

fn read_layer(r: &mut impl Read) -> Result<PackedLayer> {
    let kind = r.read_u8().map_err(truncated)?;
    let ndim = r.read_u8().map_err(truncated)? as usize;
    let dims = read_u32s(r, ndim)?;
    let shape = match (kind, dims.as_slice()) {
        (KIND_DENSE, &[inputs, outputs]) => LayerShape::Dense { inputs, outputs },
        (KIND_CONV, &[c, h, w, k, kh, kw, stride, pad]) => {
            LayerShape::Conv(ConvSpec::new(c, h, w, k, kh, kw, stride, pad).map_err(|e| Error::Format(e.to_string()))?)
        }
        _ => return Err(Error::Format(format!("layer kind {kind} with {ndim} dims"))),
    };
    let mut set = [0u8; 3];
    r.read_exact(&mut set).map_err(truncated)?;
    let set = PrecisionSet::from_bits(set.map(u32::from)).map_err(|e| Error::Format(e.to_string()))?;
    let b1 = r.read_u32::<LE>().map_err(truncated)? as usize;
    let b2 = r.read_u32::<LE>().map_err(truncated)? as usize;
    let channels = r.read_u32::<LE>().map_err(truncated)? as usize;
    if channels != shape.in_channels() {
        return Err(Error::Format(format!("{channels} channels for shape {shape:?}")));
    }
    let perm = ChannelPermutation::from_order(read_u32s(r, channels)?).map_err(|e| Error::Format(e.to_string()))?;
    let boundaries = GroupBoundaries::new([b1, b2], channels).map_err(|e| Error::Format(e.to_string()))?;
    let scale = r.read_f64::<LE>().map_err(truncated)?;
    let elems = r.read_u32::<LE>().map_err(truncated)? as usize;
    if elems != shape.weight_elems_per_channel() {
        return Err(Error::Format(format!("{elems} weights per channel for shape {shape:?}")));
    }
    let nlanes = r.read_u32::<LE>().map_err(truncated)? as usize;
    let lanes = (0..nlanes).map(|_| r.read_u16::<LE>().map_err(truncated)).collect::<Result<Vec<_>>>()?;
    let w_offset = r.read_f64::<LE>().map_err(truncated)?;
    let quant = QuantScale::new(scale, w_offset).map_err(|e| Error::Format(e.to_string()))?;
    let weights = PackedTensor::from_parts(set, perm, boundaries, elems, quant, lanes)?;
    let in_scale = r.read_f64::<LE>().map_err(truncated)?;
    let in_offset = r.read_f64::<LE>().map_err(truncated)?;
    let input = QuantScale::new(in_scale, in_offset).map_err(|e| Error::Format(e.to_string()))?;
    let relu = match r.read_u8().map_err(truncated)? {
        0 => false,
        1 => true,
        x => return Err(Error::Format(format!("relu flag {x}"))),
    };
    let nout = r.read_u32::<LE>().map_err(truncated)? as usize;
    if nout != shape.out_channels() {
        return Err(Error::Format(format!("{nout} affine channels for shape {shape:?}")));
    }
    let scale = read_f64s(r, nout)?;
    let bias = read_f64s(r, nout)?;
    Ok(PackedLayer { shape, weights, input, affine: FusedAffine { scale, bias }, relu })
}
