//! Channel grouping, SIMD-fill promotion and bit-exact tensor packing.
//!
//! Input channels of a layer can be reordered freely as long as weights and
//! activations move together, so channels are grouped by precision (highest
//! first) and a layer only needs two boundary indices of metadata.

pub mod file;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qformat::{quantize_value, LayerPrecisionMap, Precision, PrecisionSet, QCode};
use crate::vexec::{vector_capacity, LANES};

/// Snaps raw precisions to the nearest available level. Exact midpoints go to
/// the lower level.
pub fn map2hardware(raw: &[f64], levels: &[Precision]) -> Result<Vec<Precision>> {
    if levels.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut sorted = levels.to_vec();
    sorted.sort();
    Ok(raw
        .iter()
        .map(|&r| {
            let mut best = sorted[0];
            for &p in &sorted[1..] {
                // strict comparison keeps the lower level on ties
                if (r - f64::from(p.bits())).abs() < (r - f64::from(best.bits())).abs() {
                    best = p;
                }
            }
            best
        })
        .collect())
}

/// `order[new_position] = old_channel`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPermutation {
    order: Vec<usize>,
}

impl ChannelPermutation {
    pub fn identity(n: usize) -> Self {
        Self { order: (0..n).collect() }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &o in &order {
            if o >= order.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::MapMismatch(format!("{order:?} is not a permutation")));
            }
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &o)| i == o)
    }

    /// `inverse()[old_channel] = new_position`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (new, &old) in self.order.iter().enumerate() {
            inv[old] = new;
        }
        inv
    }

    /// Reorders per-channel data into packing order.
    pub fn apply<T: Clone>(&self, per_channel: &[T]) -> Vec<T> {
        self.order.iter().map(|&o| per_channel[o].clone()).collect()
    }
}

/// First channel (in packing order) of the middle and of the lowest level of
/// the layer's set. Groups follow the set's levels in descending order and
/// may be empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupBoundaries {
    pub starts: [usize; 2],
    pub channels: usize,
}

impl GroupBoundaries {
    pub fn new(starts: [usize; 2], channels: usize) -> Result<Self> {
        if starts[0] > starts[1] || starts[1] > channels {
            return Err(Error::MapMismatch(format!("boundaries {starts:?} invalid for {channels} channels")));
        }
        Ok(Self { starts, channels })
    }

    /// Channel ranges of the three set levels, highest level first.
    pub fn ranges(&self, set: &PrecisionSet) -> [(Precision, Range<usize>); 3] {
        let [hi, mid, lo] = set.levels_desc();
        let [b1, b2] = self.starts;
        [(hi, 0..b1), (mid, b1..b2), (lo, b2..self.channels)]
    }

    /// Group starts after the first non-empty group; at most two.
    pub fn present(&self) -> Vec<usize> {
        let bounds = [0, self.starts[0], self.starts[1], self.channels];
        let starts: Vec<usize> = (0..3).filter(|&g| bounds[g] < bounds[g + 1]).map(|g| bounds[g]).collect();
        starts.into_iter().skip(1).collect()
    }

    pub fn precision_at(&self, set: &PrecisionSet, position: usize) -> Precision {
        let [hi, mid, lo] = set.levels_desc();
        if position < self.starts[0] {
            hi
        } else if position < self.starts[1] {
            mid
        } else {
            lo
        }
    }
}

fn boundaries_of(set: &PrecisionSet, permuted: &[Precision]) -> Result<GroupBoundaries> {
    let [hi, mid, _] = set.levels_desc();
    if permuted.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::MapMismatch("channels are not grouped by precision".into()));
    }
    let b1 = permuted.iter().take_while(|&&p| p == hi).count();
    let b2 = b1 + permuted[b1..].iter().take_while(|&&p| p == mid).count();
    GroupBoundaries::new([b1, b2], permuted.len())
}

/// Orders channels by non-increasing precision, stable within a group.
pub fn group_channels(map: &LayerPrecisionMap) -> (ChannelPermutation, GroupBoundaries) {
    let mut order: Vec<usize> = (0..map.channels()).collect();
    order.sort_by_key(|&c| std::cmp::Reverse(map.precision(c)));
    let perm = ChannelPermutation { order };
    let permuted = perm.apply(map.precisions());
    let bounds = boundaries_of(&map.set(), &permuted).expect("sorted channels are grouped");
    (perm, bounds)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPromotion {
    pub channel: usize,
    pub from: Precision,
    pub to: Precision,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromotionReport {
    pub promoted: Vec<ChannelPromotion>,
    /// Pad slots left in each group's trailing vector, highest level first.
    pub pads: Vec<(Precision, usize)>,
}

/// Fills each group's trailing partial vector with whole channels promoted
/// from the next lower non-empty group. Groups are visited from the highest
/// precision down; after promotion the remaining gap becomes pad slots.
pub fn promote_to_fill(
    map: &LayerPrecisionMap,
    elems_per_channel: &[usize],
    capacity: impl Fn(Precision) -> usize,
) -> Result<(LayerPrecisionMap, PromotionReport)> {
    if elems_per_channel.len() != map.channels() {
        return Err(Error::ShapeMismatch(format!("{} element counts for {} channels", elems_per_channel.len(), map.channels())));
    }
    let levels = map.set().levels_desc();
    let mut groups: Vec<Vec<usize>> = levels.iter().map(|&p| (0..map.channels()).filter(|&c| map.precision(c) == p).collect()).collect();
    let mut out = map.clone();
    let mut report = PromotionReport::default();

    for g in 0..levels.len() {
        if groups[g].is_empty() {
            continue;
        }
        let p = levels[g];
        let cap = capacity(p);
        let total: usize = groups[g].iter().map(|&c| elems_per_channel[c]).sum();
        let mut free = (cap - total % cap) % cap;
        if free > 0 {
            if let Some(lower) = (g + 1..levels.len()).find(|&l| !groups[l].is_empty()) {
                let mut keep = Vec::new();
                for c in std::mem::take(&mut groups[lower]) {
                    let e = elems_per_channel[c];
                    if e > 0 && e <= free {
                        free -= e;
                        out.set_precision(c, p);
                        report.promoted.push(ChannelPromotion { channel: c, from: levels[lower], to: p });
                        groups[g].push(c);
                    } else {
                        keep.push(c);
                    }
                }
                groups[lower] = keep;
            }
        }
        report.pads.push((p, free));
    }
    report.promoted.sort_by_key(|c| c.channel);
    Ok((out, report))
}

/// Real value of a code: `scale * grid_value + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScale {
    pub scale: f64,
    pub offset: f64,
}

impl QuantScale {
    pub const IDENTITY: QuantScale = QuantScale { scale: 1.0, offset: 0.0 };

    pub fn new(scale: f64, offset: f64) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::NonFinite(scale));
        }
        if !offset.is_finite() {
            return Err(Error::NonFinite(offset));
        }
        Ok(Self { scale, offset })
    }

    pub fn scale_only(scale: f64) -> Result<Self> {
        Self::new(scale, 0.0)
    }

    /// Maps a real value into grid units.
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    pub fn dequantize(&self, grid: f64) -> f64 {
        self.scale * grid + self.offset
    }

    pub fn quantize(&self, x: f64, p: Precision) -> Result<QCode> {
        quantize_value(self.normalize(x), p)
    }
}

/// A layer operand packed lane by lane in packing order. Each precision group
/// is padded with the all-ones code to a whole vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedTensor {
    pub set: PrecisionSet,
    pub permutation: ChannelPermutation,
    pub boundaries: GroupBoundaries,
    pub elems_per_channel: usize,
    pub quant: QuantScale,
    /// Lane payloads, group after group.
    pub lanes: Vec<u16>,
    /// Pad slots per group, highest level first.
    pub pads: [usize; 3],
}

impl PackedTensor {
    /// Reassembles a tensor from stored fields, checking the payload length.
    pub fn from_parts(
        set: PrecisionSet,
        permutation: ChannelPermutation,
        boundaries: GroupBoundaries,
        elems_per_channel: usize,
        quant: QuantScale,
        lanes: Vec<u16>,
    ) -> Result<Self> {
        if boundaries.channels != permutation.len() {
            return Err(Error::MapMismatch(format!(
                "boundaries cover {} channels, permutation {}",
                boundaries.channels,
                permutation.len()
            )));
        }
        let mut pads = [0usize; 3];
        let mut expected = 0;
        for (g, (p, range)) in boundaries.ranges(&set).into_iter().enumerate() {
            let n = range.len() * elems_per_channel;
            let l = padded_lanes(n, p);
            pads[g] = l * p.lane_elems() - n;
            expected += l;
        }
        if lanes.len() != expected {
            return Err(Error::Format(format!("payload has {} lanes, layout needs {expected}", lanes.len())));
        }
        Ok(Self { set, permutation, boundaries, elems_per_channel, quant, lanes, pads })
    }

    pub fn channels(&self) -> usize {
        self.permutation.len()
    }

    /// Precision of an original channel.
    pub fn channel_precision(&self, channel: usize) -> Precision {
        let pos = self.permutation.inverse()[channel];
        self.boundaries.precision_at(&self.set, pos)
    }

    pub fn precision_map(&self) -> Result<LayerPrecisionMap> {
        let inv = self.permutation.inverse();
        let precisions = (0..self.channels()).map(|c| self.boundaries.precision_at(&self.set, inv[c])).collect();
        LayerPrecisionMap::new(self.set, precisions, vec![self.elems_per_channel; self.channels()])
    }

    /// Codes per original channel.
    pub fn unpack(&self) -> Vec<Vec<QCode>> {
        let mut per_position = Vec::with_capacity(self.channels());
        let mut lane_base = 0usize;
        for (p, range) in self.boundaries.ranges(&self.set) {
            let n = range.len() * self.elems_per_channel;
            let per_lane = p.lane_elems();
            let mut flat = Vec::with_capacity(n);
            for i in 0..n {
                let lane = self.lanes[lane_base + i / per_lane];
                let field = (lane >> ((i % per_lane) as u32 * p.bits())) & ((1 << p.bits()) - 1);
                flat.push(QCode::new(field as u8, p).expect("field fits precision"));
            }
            per_position.extend(flat.chunks(self.elems_per_channel.max(1)).take(range.len()).map(<[QCode]>::to_vec));
            lane_base += padded_lanes(n, p);
        }
        let mut out = vec![Vec::new(); self.channels()];
        for (pos, codes) in per_position.into_iter().enumerate() {
            out[self.permutation.order()[pos]] = codes;
        }
        out
    }

    /// Real values per original channel.
    pub fn unpack_values(&self) -> Vec<Vec<f64>> {
        self.unpack().into_iter().map(|ch| ch.into_iter().map(|c| self.quant.dequantize(c.value_f64())).collect()).collect()
    }
}

fn padded_lanes(elems: usize, p: Precision) -> usize {
    elems.div_ceil(vector_capacity(p)) * LANES
}

/// Packs codes given per original channel. `perm` must put the channels of
/// `map` into grouped order.
pub fn pack_codes(codes: &[Vec<QCode>], map: &LayerPrecisionMap, perm: &ChannelPermutation, quant: QuantScale) -> Result<PackedTensor> {
    if codes.len() != map.channels() || perm.len() != map.channels() {
        return Err(Error::MapMismatch(format!(
            "{} channels of data, {} in map, {} in permutation",
            codes.len(),
            map.channels(),
            perm.len()
        )));
    }
    let elems = codes.first().map_or(0, Vec::len);
    if codes.iter().any(|c| c.len() != elems) {
        return Err(Error::ShapeMismatch("channels differ in length".into()));
    }
    let set = map.set();
    let boundaries = boundaries_of(&set, &perm.apply(map.precisions()))?;
    let mut lanes = Vec::new();
    let mut pads = [0usize; 3];
    for (g, (p, range)) in boundaries.ranges(&set).into_iter().enumerate() {
        let mut flat = Vec::with_capacity(range.len() * elems);
        for pos in range {
            let ch = perm.order()[pos];
            for &c in &codes[ch] {
                if c.precision() != p {
                    return Err(Error::MapMismatch(format!("channel {ch} holds {}-bit codes, map says {p}", c.precision())));
                }
                flat.push(c);
            }
        }
        let total = padded_lanes(flat.len(), p) * p.lane_elems();
        pads[g] = total - flat.len();
        flat.resize(total, QCode::max(p));
        for chunk in flat.chunks(p.lane_elems()) {
            let lane = chunk.iter().enumerate().fold(0u16, |acc, (i, c)| acc | (u16::from(c.bits()) << (i as u32 * p.bits())));
            lanes.push(lane);
        }
    }
    Ok(PackedTensor { set, permutation: perm.clone(), boundaries, elems_per_channel: elems, quant, lanes, pads })
}

/// Packs real values that already lie on their channel's grid once `quant` is
/// removed.
pub fn pack_tensor(values: &[Vec<f64>], map: &LayerPrecisionMap, perm: &ChannelPermutation, quant: QuantScale) -> Result<PackedTensor> {
    if values.len() != map.channels() {
        return Err(Error::MapMismatch(format!("{} channels of data, {} in map", values.len(), map.channels())));
    }
    let codes = values
        .iter()
        .enumerate()
        .map(|(ch, vals)| {
            let p = map.precision(ch);
            vals.iter().map(|&v| QCode::from_grid_value(quant.normalize(v), p)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    pack_codes(&codes, map, perm, quant)
}

/// Re-encodes a channel's codes at a higher precision, returning the new codes
/// and the largest absolute change of value.
pub fn requantize(codes: &[QCode], to: Precision) -> (Vec<QCode>, f64) {
    let mut delta = 0f64;
    let out = codes
        .iter()
        .map(|c| {
            let v = c.value_f64();
            let q = quantize_value(v, to).expect("grid values are finite");
            delta = delta.max((q.value_f64() - v).abs());
            q
        })
        .collect();
    (out, delta)
}
