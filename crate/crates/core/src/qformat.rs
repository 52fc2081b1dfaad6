//! The quantized number system.
//!
//! A `p`-bit code `b_p … b_1` (with `b_1` the least significant stored bit)
//! denotes the odd integer `k = Σ (2·b_i − 1)·2^(i−1)` and the value
//! `k / 2^(p−1)`. The grid is symmetric, has `2^p` points spaced `2^(2−p)`
//! apart and never contains zero.

use std::fmt;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the four power-of-two precision levels the MAC supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    One,
    Two,
    Four,
    Eight,
}

impl Precision {
    pub const ALL: [Precision; 4] = [Precision::One, Precision::Two, Precision::Four, Precision::Eight];

    pub const fn bits(self) -> u32 {
        match self {
            Precision::One => 1,
            Precision::Two => 2,
            Precision::Four => 4,
            Precision::Eight => 8,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            1 => Ok(Precision::One),
            2 => Ok(Precision::Two),
            4 => Ok(Precision::Four),
            8 => Ok(Precision::Eight),
            other => Err(Error::InvalidPrecision(other)),
        }
    }

    /// Position in `ALL`; also the 2-bit `Pn` field of the CPU instruction.
    pub const fn index(self) -> usize {
        match self {
            Precision::One => 0,
            Precision::Two => 1,
            Precision::Four => 2,
            Precision::Eight => 3,
        }
    }

    /// Number of elements packed in a 16-bit lane.
    pub const fn lane_elems(self) -> usize {
        16 / self.bits() as usize
    }

    /// Largest code integer, `2^p − 1`.
    pub const fn max_int(self) -> i64 {
        (1i64 << self.bits()) - 1
    }

    /// Denominator `2^(p−1)` mapping code integers to values.
    pub const fn denom(self) -> i64 {
        1i64 << (self.bits() - 1)
    }

    /// Largest grid value, `2 − 2^(1−p)`.
    pub fn grid_max(self) -> f64 {
        2.0 - 2f64.powi(1 - self.bits() as i32)
    }

    pub fn grid_max_exact(self) -> Rational64 {
        Rational64::new(self.max_int(), self.denom())
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl TryFrom<u32> for Precision {
    type Error = Error;
    fn try_from(bits: u32) -> Result<Self> {
        Precision::from_bits(bits)
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        p.bits()
    }
}

/// `s` used for the 1-bit level: `ln(2^9 − 1)`, so that `σ(s) = 1 − 2^(−9)`.
/// The closed form `−ln(2^0 − 1)` is `+∞`.
pub fn one_bit_s_cap() -> f64 {
    511f64.ln()
}

/// Noise-scale parameter of a precision level.
pub fn s_from_precision(p: Precision) -> f64 {
    match p {
        Precision::One => one_bit_s_cap(),
        _ => -(((1u64 << (p.bits() - 1)) - 1) as f64).ln(),
    }
}

/// Raw (unsnapped) precision `1 + round(log2(1 + e^(−s)))`.
pub fn precision_from_s(s: f64) -> f64 {
    1.0 + (softplus(-s) / std::f64::consts::LN_2).round()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The three-level precision menu of a layer together with its noise scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[u32; 3]", into = "[u32; 3]")]
pub struct PrecisionSet {
    levels: [Precision; 3],
    v: [f64; 3],
}

impl PrecisionSet {
    pub fn new(levels: [Precision; 3]) -> Result<Self> {
        let mut sorted = levels;
        sorted.sort();
        if sorted[0] == sorted[1] || sorted[1] == sorted[2] {
            return Err(Error::InvalidPrecisionSet(levels.iter().map(|p| p.bits()).collect()));
        }
        Ok(Self { levels: sorted, v: sorted.map(s_from_precision) })
    }

    pub fn from_bits(bits: [u32; 3]) -> Result<Self> {
        let levels = [Precision::from_bits(bits[0])?, Precision::from_bits(bits[1])?, Precision::from_bits(bits[2])?];
        Self::new(levels)
    }

    pub fn g124() -> Self {
        Self::new([Precision::One, Precision::Two, Precision::Four]).unwrap()
    }

    pub fn g128() -> Self {
        Self::new([Precision::One, Precision::Two, Precision::Eight]).unwrap()
    }

    pub fn g148() -> Self {
        Self::new([Precision::One, Precision::Four, Precision::Eight]).unwrap()
    }

    /// Parses the `G124` / `G128` / `G148` names.
    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "G124" => Ok(Self::g124()),
            "G128" => Ok(Self::g128()),
            "G148" => Ok(Self::g148()),
            _ => Err(Error::Config(format!("unknown precision set {name:?}"))),
        }
    }

    pub fn name(&self) -> String {
        format!("G{}{}{}", self.levels[0], self.levels[1], self.levels[2])
    }

    /// Levels in ascending order.
    pub fn levels(&self) -> [Precision; 3] {
        self.levels
    }

    /// Levels in descending order, the order channel groups are laid out in.
    pub fn levels_desc(&self) -> [Precision; 3] {
        [self.levels[2], self.levels[1], self.levels[0]]
    }

    /// Noise-scale vector, aligned with `levels()`.
    pub fn v(&self) -> [f64; 3] {
        self.v
    }

    pub fn contains(&self, p: Precision) -> bool {
        self.levels.contains(&p)
    }

    pub fn highest(&self) -> Precision {
        self.levels[2]
    }

    pub fn bits(&self) -> [u8; 3] {
        self.levels.map(|p| p.bits() as u8)
    }
}

impl TryFrom<[u32; 3]> for PrecisionSet {
    type Error = Error;
    fn try_from(bits: [u32; 3]) -> Result<Self> {
        PrecisionSet::from_bits(bits)
    }
}

impl From<PrecisionSet> for [u32; 3] {
    fn from(s: PrecisionSet) -> [u32; 3] {
        s.levels.map(|p| p.bits())
    }
}

/// A `p`-bit code. `bits` holds `b_1` in bit 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct QCode {
    bits: u8,
    precision: Precision,
}

impl QCode {
    pub fn new(bits: u8, precision: Precision) -> Result<Self> {
        if u32::from(bits) >> precision.bits() != 0 {
            return Err(Error::InvalidCode(format!("{bits:#x}"), precision.bits()));
        }
        Ok(Self { bits, precision })
    }

    /// Parses a bitstring written most-significant bit first, as in `"1101"`.
    pub fn parse(s: &str, precision: Precision) -> Result<Self> {
        let err = || Error::InvalidCode(s.to_string(), precision.bits());
        if s.len() != precision.bits() as usize {
            return Err(err());
        }
        let mut bits = 0u8;
        for ch in s.chars() {
            bits = (bits << 1)
                | match ch {
                    '0' => 0,
                    '1' => 1,
                    _ => return Err(err()),
                };
        }
        Ok(Self { bits, precision })
    }

    /// The all-ones code, which decodes to the largest grid value.
    pub fn max(precision: Precision) -> Self {
        Self { bits: precision.max_int() as u8, precision }
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    pub fn precision(self) -> Precision {
        self.precision
    }

    /// Odd integer `Σ (2b_i − 1)·2^(i−1)`, equal to `2u − (2^p − 1)`.
    pub fn integer(self) -> i64 {
        2 * i64::from(self.bits) - self.precision.max_int()
    }

    pub fn value(self) -> Rational64 {
        Rational64::new(self.integer(), self.precision.denom())
    }

    /// Exact: every grid value is a short dyadic fraction.
    pub fn value_f64(self) -> f64 {
        self.integer() as f64 / self.precision.denom() as f64
    }

    pub fn from_integer(k: i64, precision: Precision) -> Option<Self> {
        let u = k + precision.max_int();
        if (k & 1) == 0 || !(0..=2 * precision.max_int()).contains(&u) {
            return None;
        }
        Some(Self { bits: (u / 2) as u8, precision })
    }

    /// Exact inverse of `value_f64` for grid points; `OffGrid` otherwise.
    pub fn from_grid_value(value: f64, precision: Precision) -> Result<Self> {
        let scaled = value * precision.denom() as f64;
        if !value.is_finite() || scaled.fract() != 0.0 {
            return Err(Error::OffGrid { value, precision });
        }
        QCode::from_integer(scaled as i64, precision).ok_or(Error::OffGrid { value, precision })
    }
}

impl fmt::Display for QCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:0width$b}", self.bits, width = self.precision.bits() as usize)
    }
}

impl From<QCode> for String {
    fn from(c: QCode) -> String {
        c.to_string()
    }
}

/// Serialized form is the bitstring, MSB first; its length is the precision.
impl TryFrom<String> for QCode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        let p = Precision::from_bits(s.len() as u32)?;
        QCode::parse(&s, p)
    }
}

/// Decodes a code to its exact value.
pub fn decode_code(code: QCode) -> Rational64 {
    code.value()
}

/// All `2^p` grid values, ascending.
pub fn grid_values(p: Precision) -> Vec<Rational64> {
    (0..=p.max_int() as u8).map(|u| QCode { bits: u, precision: p }.value()).collect()
}

/// Nearest grid point. Out-of-range inputs clamp to the extremes and exact
/// midpoints go to the positive neighbour.
pub fn quantize_value(w: f64, p: Precision) -> Result<QCode> {
    if !w.is_finite() {
        return Err(Error::NonFinite(w));
    }
    let max = p.max_int() as f64;
    let x = (w * p.denom() as f64).clamp(-max, max);
    // nearest odd integer to x: k = 2n + 1 with n nearest to (x − 1)/2
    let n = ((x - 1.0) / 2.0 + 0.5).floor();
    let k = (2.0 * n + 1.0).clamp(-max, max) as i64;
    Ok(QCode::from_integer(k, p).expect("clamped odd integer is a valid code"))
}

/// Per-channel precision assignment of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPrecisionMap {
    set: PrecisionSet,
    precisions: Vec<Precision>,
    counts: Vec<usize>,
}

impl LayerPrecisionMap {
    /// `counts[i]` is the number of parameters stored in channel `i`.
    pub fn new(set: PrecisionSet, precisions: Vec<Precision>, counts: Vec<usize>) -> Result<Self> {
        if precisions.len() != counts.len() {
            return Err(Error::ShapeMismatch(format!("{} precisions for {} channel counts", precisions.len(), counts.len())));
        }
        if let Some(&p) = precisions.iter().find(|p| !set.contains(**p)) {
            return Err(Error::PrecisionNotInSet(p));
        }
        Ok(Self { set, precisions, counts })
    }

    pub fn uniform(set: PrecisionSet, p: Precision, counts: Vec<usize>) -> Result<Self> {
        Self::new(set, vec![p; counts.len()], counts)
    }

    pub fn set(&self) -> PrecisionSet {
        self.set
    }

    pub fn precisions(&self) -> &[Precision] {
        &self.precisions
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn channels(&self) -> usize {
        self.precisions.len()
    }

    pub fn precision(&self, channel: usize) -> Precision {
        self.precisions[channel]
    }

    pub(crate) fn set_precision(&mut self, channel: usize, p: Precision) {
        debug_assert!(self.set.contains(p));
        self.precisions[channel] = p;
    }

    /// Total stored bits.
    pub fn total_bits(&self) -> u64 {
        self.precisions.iter().zip(&self.counts).map(|(p, &c)| u64::from(p.bits()) * c as u64).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Parameter-weighted mean precision of a layer.
pub fn bpp_of_layer(map: &LayerPrecisionMap) -> Result<f64> {
    let params = map.total_params();
    if params == 0 {
        return Err(Error::EmptyLayer);
    }
    Ok(map.total_bits() as f64 / params as f64)
}

/// Bpp over several layers, weighting every parameter equally.
pub fn bpp_of_model<'a>(maps: impl IntoIterator<Item = &'a LayerPrecisionMap>) -> Result<f64> {
    let (bits, params) = maps.into_iter().fold((0u64, 0u64), |(b, n), m| (b + m.total_bits(), n + m.total_params()));
    if params == 0 {
        return Err(Error::EmptyLayer);
    }
    Ok(bits as f64 / params as f64)
}

pub fn compression_ratio(bpp: f64) -> f64 {
    32.0 / bpp
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn worked_decodings() {
        let c = QCode::parse("1101", Precision::Four).unwrap();
        assert_eq!(c.integer(), 11);
        assert_eq!(decode_code(c), r(11, 8));
        assert_eq!(decode_code(QCode::parse("10", Precision::Two).unwrap()), r(1, 2));
        assert_eq!(decode_code(QCode::parse("0", Precision::One).unwrap()), r(-1, 1));
        assert_eq!(decode_code(QCode::parse("1", Precision::One).unwrap()), r(1, 1));
    }

    #[test]
    fn parse_rejects_bad_strings() {
        assert!(QCode::parse("101", Precision::Two).is_err());
        assert!(QCode::parse("1x", Precision::Two).is_err());
        assert!(QCode::new(4, Precision::Two).is_err());
    }

    #[test]
    fn grids_by_enumeration() {
        assert_eq!(grid_values(Precision::One), vec![r(-1, 1), r(1, 1)]);
        assert_eq!(grid_values(Precision::Two), vec![r(-3, 2), r(-1, 2), r(1, 2), r(3, 2)]);
        let g4 = grid_values(Precision::Four);
        assert_eq!(g4.len(), 16);
        assert_eq!(g4[0], r(-15, 8));
        assert_eq!(g4[15], r(15, 8));
        for w in g4.windows(2) {
            assert_eq!(w[1] - w[0], r(1, 4));
        }
    }

    #[test]
    fn quantize_examples() {
        let q = |w, p| quantize_value(w, p).unwrap().value();
        assert_eq!(q(0.9, Precision::One), r(1, 1));
        assert_eq!(q(1.3, Precision::Four), r(11, 8));
        assert_eq!(q(0.0, Precision::Two), r(1, 2));
        assert_eq!(q(3.0, Precision::Two), r(3, 2));
        assert_eq!(q(-3.0, Precision::Two), r(-3, 2));
        assert_eq!(q(-1.0, Precision::Two), r(-1, 2), "tie at -1 goes up");
        assert!(quantize_value(f64::NAN, Precision::Two).is_err());
        assert!(quantize_value(f64::INFINITY, Precision::Two).is_err());
    }

    #[test]
    fn s_round_trips() {
        assert_eq!(s_from_precision(Precision::Two), 0.0);
        assert!((s_from_precision(Precision::Four) + 1.945910).abs() < 1e-6);
        assert!((s_from_precision(Precision::Eight) + 4.844187).abs() < 1e-6);
        assert!((s_from_precision(Precision::One) - 6.2364).abs() < 1e-4);
        for p in Precision::ALL {
            assert_eq!(precision_from_s(s_from_precision(p)), f64::from(p.bits()));
        }
        assert_eq!(precision_from_s(0.0), 2.0);
        assert_eq!(precision_from_s(-(7f64.ln())), 4.0);
        assert_eq!(precision_from_s(6.2364), 1.0);
    }

    #[test]
    fn sigma_of_s_matches_half_step() {
        for p in [Precision::Two, Precision::Four, Precision::Eight] {
            let sig = sigmoid(s_from_precision(p));
            assert!((sig - 2f64.powi(1 - p.bits() as i32)).abs() < 1e-15);
        }
        let sig1 = sigmoid(s_from_precision(Precision::One));
        assert!((sig1 - 1.0).abs() <= 2f64.powi(-9) + 1e-15);
    }

    #[test]
    fn bpp_examples() {
        let set = PrecisionSet::g124();
        use Precision::*;
        let m = LayerPrecisionMap::new(set, vec![One, One, One, One, Two, Two, Four, Four], vec![1; 8]).unwrap();
        assert_eq!(bpp_of_layer(&m).unwrap(), 2.0);
        let u = LayerPrecisionMap::uniform(set, Four, vec![3, 5]).unwrap();
        assert_eq!(bpp_of_layer(&u).unwrap(), 4.0);
        let w = LayerPrecisionMap::new(set, vec![One, Four], vec![10, 30]).unwrap();
        assert_eq!(bpp_of_layer(&w).unwrap(), 3.25);
        let e = LayerPrecisionMap::new(set, vec![], vec![]).unwrap();
        assert_eq!(bpp_of_layer(&e), Err(Error::EmptyLayer));
        assert_eq!(compression_ratio(32.0), 1.0);
    }

    #[test]
    fn precision_sets() {
        assert!(PrecisionSet::from_bits([1, 1, 4]).is_err());
        assert!(PrecisionSet::from_bits([1, 3, 4]).is_err());
        let s = PrecisionSet::from_bits([4, 1, 2]).unwrap();
        assert_eq!(s, PrecisionSet::g124());
        assert_eq!(s.name(), "G124");
        let v = s.v();
        assert!(v[0] > v[1] && v[1] > v[2]);
    }

    fn any_precision() -> impl Strategy<Value = Precision> {
        prop::sample::select(Precision::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn grid_is_odd_symmetric_zero_free(p in any_precision()) {
            let g = grid_values(p);
            prop_assert_eq!(g.len(), 1usize << p.bits());
            for v in &g {
                let k = v * Rational64::from_integer(p.denom());
                prop_assert!(k.is_integer() && k.to_integer() % 2 != 0);
                prop_assert!(g.contains(&-*v));
            }
        }

        #[test]
        fn quantize_round_trips_on_grid(p in any_precision(), u in 0u8..=255) {
            let code = QCode::new(u & p.max_int() as u8, p).unwrap();
            let back = quantize_value(code.value_f64(), p).unwrap();
            prop_assert_eq!(back, code);
        }

        #[test]
        fn quantize_half_step_bound(p in any_precision(), t in -1.0f64..1.0) {
            let w = t * p.grid_max();
            let q = quantize_value(w, p).unwrap().value_f64();
            prop_assert!((w - q).abs() <= 2f64.powi(1 - p.bits() as i32));
        }
    }
}
