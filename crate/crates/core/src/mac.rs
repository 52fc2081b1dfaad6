//! Bit-level model of one configurable 16-bit MAC lane.
//!
//! The lane multiplies `16/p` pairs of `p`-bit codes and sums the products in
//! an adder tree. Multipliers work on code integers; the value scale of a
//! product is `2^(2−2p)`, so 1/2/4-bit products need at most six fractional
//! bits and the 16.6 output holds them exactly. 8-bit products carry 14
//! fractional bits and are rounded once, to nearest even, after the tree.

use std::fmt;

use num_rational::Rational64;

use crate::error::{Error, Result};
use crate::qformat::{Precision, QCode};

/// Fractional bits of the lane output.
pub const ACC_FRAC_BITS: u32 = 6;

/// Sixteen bits holding `16/p` codes, element 0 in the least-significant bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Lane16(pub u16);

impl Lane16 {
    pub fn pack(codes: &[QCode], p: Precision) -> Result<Self> {
        if codes.len() != p.lane_elems() {
            return Err(Error::LaneWidth { precision: p, expected: p.lane_elems(), found: codes.len() });
        }
        let mut payload = 0u16;
        for (i, c) in codes.iter().enumerate() {
            if c.precision() != p {
                return Err(Error::InvalidCode(c.to_string(), p.bits()));
            }
            payload |= u16::from(c.bits()) << (i as u32 * p.bits());
        }
        Ok(Lane16(payload))
    }

    /// Raw `p`-bit field of element `i`.
    pub fn field(self, i: usize, p: Precision) -> u8 {
        let mask = (1u16 << p.bits()) - 1;
        ((self.0 >> (i as u32 * p.bits())) & mask) as u8
    }

    pub fn unpack(self, p: Precision) -> Vec<QCode> {
        (0..p.lane_elems()).map(|i| QCode::new(self.field(i, p), p).expect("field fits precision")).collect()
    }
}

/// Signed lane output with six fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct FixedAcc(pub i32);

impl FixedAcc {
    pub fn to_f64(self) -> f64 {
        f64::from(self.0) / f64::from(1 << ACC_FRAC_BITS)
    }

    pub fn to_ratio(self) -> Rational64 {
        Rational64::new(i64::from(self.0), 1 << ACC_FRAC_BITS)
    }
}

impl fmt::Display for FixedAcc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

fn bit(x: u8, i: u32) -> bool {
    (x >> i) & 1 == 1
}

fn from_bits(bits: &[bool]) -> u8 {
    // bits[0] is the most significant
    bits.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b))
}

/// Sign-extends the low `width` bits of `x`.
pub fn sign_extend(x: u32, width: u32) -> i32 {
    let shift = 32 - width;
    ((x << shift) as i32) >> shift
}

/// Sum of two 1-bit products as a 3-bit two's-complement code `Sd[2:0]`.
///
/// A 1-bit product is `+1` when its operand bits agree, so `Qn ⊕ Qm` flags a
/// `−1` product.
pub fn onebit_pair_sum(qn: bool, qm: bool, qr: bool, qs: bool) -> (u8, i32) {
    let x = qn ^ qm;
    let y = qr ^ qs;
    let code = from_bits(&[x & y, !(x ^ y), false]);
    (code, sign_extend(u32::from(code), 3))
}

/// 5-bit two's-complement product `Qd[4:0]` of two 2-bit codes.
pub fn twobit_product(qn: u8, qm: u8) -> u8 {
    let (n1, n0) = (bit(qn, 1), bit(qn, 0));
    let (m1, m0) = (bit(qm, 1), bit(qm, 0));
    let qd3 = (n1 & !n0 & !m1) | (n1 & n0 & m0) | (!n1 & n0 & m1) | (!n1 & !n0 & !m0);
    from_bits(&[n1 ^ m1, qd3, n1 ^ m1, n0 ^ m0, true])
}

/// Magnitude selected by one radix-4 Booth digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoothSelect {
    Zero,
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoothDigit {
    pub select: BoothSelect,
    pub negative: bool,
}

impl BoothDigit {
    pub fn value(self) -> i32 {
        let m = match self.select {
            BoothSelect::Zero => 0,
            BoothSelect::One => 1,
            BoothSelect::Two => 2,
        };
        if self.negative {
            -m
        } else {
            m
        }
    }
}

/// Recoded multiplier `k = d0 + 4·d1 + 16·d2` and the 5-bit multiplicand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoothDigits {
    pub digits: [BoothDigit; 3],
    pub multiplicand: u8,
}

/// `{¬Qn3, Qn2, Qn1, Qn0, 1}`: the two's complement of the decoded integer.
pub fn multiplicand(qn: u8) -> u8 {
    from_bits(&[!bit(qn, 3), bit(qn, 2), bit(qn, 1), bit(qn, 0), true])
}

/// Radix-4 Booth recoding of a 4-bit code, read as the 5-bit two's complement
/// `{¬Qm3, Qm2, Qm1, Qm0, 1}`. Digits whose select lines are all low
/// contribute nothing.
pub fn booth_recode(qm: u8) -> [BoothDigit; 3] {
    let (m3, m2, m1, m0) = (bit(qm, 3), bit(qm, 2), bit(qm, 1), bit(qm, 0));

    // digit 2 ∈ {−1, 1}
    let d2 = if !m3 & !m2 {
        BoothDigit { select: BoothSelect::One, negative: true }
    } else if m3 & m2 {
        BoothDigit { select: BoothSelect::One, negative: false }
    } else {
        BoothDigit { select: BoothSelect::Zero, negative: false }
    };

    // digit 1 ∈ {−2, −1, 1, 2}
    let neg_two = m2 & !m1 & !m0;
    let neg_one = m2 & (m1 ^ m0);
    let pos_one = !m2 & (m1 ^ m0);
    let pos_two = !m2 & m1 & m0;
    let d1 = BoothDigit {
        select: if neg_two | pos_two {
            BoothSelect::Two
        } else if neg_one | pos_one {
            BoothSelect::One
        } else {
            BoothSelect::Zero
        },
        negative: m2 & (!m1 | !m0),
    };

    // digit 0 ∈ {−1, 1}
    let d0 = BoothDigit { select: BoothSelect::One, negative: m0 };
    [d0, d1, d2]
}

pub fn booth_digits(qn: u8, qm: u8) -> BoothDigits {
    BoothDigits { digits: booth_recode(qm), multiplicand: multiplicand(qn) }
}

const PP_WIDTH: u32 = 10;
const PP_MASK: u32 = (1 << PP_WIDTH) - 1;

/// Product of two 4-bit codes from Booth partial products, summed as
/// 10-bit two's-complement words.
pub fn fourbit_product(qn: u8, qm: u8) -> i32 {
    let BoothDigits { digits, multiplicand } = booth_digits(qn, qm);
    let mcand = sign_extend(u32::from(multiplicand), 5) as u32 & PP_MASK;
    let mut sum = 0u32;
    for (j, d) in digits.iter().enumerate() {
        let mag = match d.select {
            BoothSelect::Zero => continue,
            BoothSelect::One => mcand,
            BoothSelect::Two => (mcand << 1) & PP_MASK,
        };
        let pp = if d.negative { (!mag + 1) & PP_MASK } else { mag };
        sum = (sum + (pp << (2 * j))) & PP_MASK;
    }
    sign_extend(sum, PP_WIDTH)
}

/// Product of two 8-bit codes from four 4×4 nibble products. Each nibble is
/// itself a 4-bit code, and `k = k_lo + 16·k_hi`.
pub fn eightbit_product(qn: u8, qm: u8) -> i32 {
    let (nl, nh) = (qn & 0xF, qn >> 4);
    let (ml, mh) = (qm & 0xF, qm >> 4);
    let ll = fourbit_product(nl, ml);
    let lh = fourbit_product(nl, mh);
    let hl = fourbit_product(nh, ml);
    let hh = fourbit_product(nh, mh);
    ll + ((lh + hl) << 4) + (hh << 8)
}

/// Rounds `x / 2^shift` to nearest, ties to even.
pub fn round_shift_rne(x: i64, shift: u32) -> i64 {
    if shift == 0 {
        return x;
    }
    let floor = x >> shift;
    let rem = x - (floor << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Per-stage partial sums of the adder tree, in lane-output units before the
/// final scaling.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AdderTrace {
    pub precision: Option<Precision>,
    pub stages: Vec<Vec<i64>>,
}

impl fmt::Display for AdderTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precision.map_or(0, |p| p.bits());
        for (i, stage) in self.stages.iter().enumerate() {
            let sums: Vec<String> = stage.iter().map(i64::to_string).collect();
            writeln!(f, "adder p={p} stage={i} sums={}", sums.join(","))?;
        }
        Ok(())
    }
}

fn product_terms(a: Lane16, b: Lane16, p: Precision) -> Vec<i64> {
    match p {
        Precision::One => (0..8)
            .map(|j| {
                let (_, v) = onebit_pair_sum(
                    bit(a.field(2 * j, p), 0),
                    bit(b.field(2 * j, p), 0),
                    bit(a.field(2 * j + 1, p), 0),
                    bit(b.field(2 * j + 1, p), 0),
                );
                i64::from(v)
            })
            .collect(),
        Precision::Two => (0..8)
            .map(|i| {
                let qd = twobit_product(a.field(i, p), b.field(i, p));
                i64::from(sign_extend(u32::from(qd), 5))
            })
            .collect(),
        Precision::Four => (0..4).map(|i| i64::from(fourbit_product(a.field(i, p), b.field(i, p)))).collect(),
        Precision::Eight => (0..2).map(|i| i64::from(eightbit_product(a.field(i, p), b.field(i, p)))).collect(),
    }
}

fn reduce_tree(mut level: Vec<i64>, trace: Option<&mut AdderTrace>) -> i64 {
    let mut stages = vec![level.clone()];
    while level.len() > 1 {
        level = level.chunks(2).map(|c| c.iter().sum()).collect();
        stages.push(level.clone());
    }
    if let Some(t) = trace {
        t.stages = stages;
    }
    level.first().copied().unwrap_or(0)
}

fn scale_to_acc(sum: i64, p: Precision) -> i32 {
    // products of p-bit codes carry 2p − 2 fractional bits
    let frac = 2 * p.bits() - 2;
    let out = if frac <= ACC_FRAC_BITS { sum << (ACC_FRAC_BITS - frac) } else { round_shift_rne(sum, frac - ACC_FRAC_BITS) };
    i32::try_from(out).expect("lane output fits 16.6")
}

/// Dot product of the `16/p` element pairs of two lanes.
pub fn lane_mac(a: Lane16, b: Lane16, p: Precision) -> FixedAcc {
    FixedAcc(scale_to_acc(reduce_tree(product_terms(a, b, p), None), p))
}

pub fn lane_mac_traced(a: Lane16, b: Lane16, p: Precision) -> (FixedAcc, AdderTrace) {
    let mut trace = AdderTrace { precision: Some(p), stages: Vec::new() };
    let sum = reduce_tree(product_terms(a, b, p), Some(&mut trace));
    (FixedAcc(scale_to_acc(sum, p)), trace)
}

/// Exact-rational reference for `lane_mac`: decode, multiply, sum.
pub fn lane_mac_exact(a: Lane16, b: Lane16, p: Precision) -> Rational64 {
    a.unpack(p).into_iter().zip(b.unpack(p)).map(|(x, y)| x.value() * y.value()).sum()
}

/// Largest possible `|lane_mac|` in the value domain (16, 18, 14.0625, 7.94).
pub fn lane_bound(p: Precision) -> Rational64 {
    let g = p.grid_max_exact();
    g * g * Rational64::from_integer(p.lane_elems() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(s: &str) -> u8 {
        u8::from_str_radix(s, 2).unwrap()
    }

    fn int(qn: u8, p: Precision) -> i64 {
        QCode::new(qn, p).unwrap().integer()
    }

    #[test]
    fn onebit_examples() {
        assert_eq!(onebit_pair_sum(false, false, false, false), (0b010, 2));
        assert_eq!(onebit_pair_sum(false, true, false, false), (0b000, 0));
        assert_eq!(onebit_pair_sum(false, true, true, false), (0b110, -2));
    }

    #[test]
    fn onebit_exhaustive() {
        for x in 0u8..16 {
            let b = |i| bit(x, i);
            let (_, v) = onebit_pair_sum(b(0), b(1), b(2), b(3));
            let prod = |p: bool, q: bool| if p == q { 1 } else { -1 };
            assert_eq!(v, prod(b(0), b(1)) + prod(b(2), b(3)));
        }
    }

    #[test]
    fn twobit_examples() {
        assert_eq!(twobit_product(code("10"), code("10")), 0b00001);
        assert_eq!(twobit_product(code("11"), code("00")), 0b10111);
        assert_eq!(twobit_product(code("01"), code("01")), 0b00001);
    }

    #[test]
    fn twobit_exhaustive() {
        for n in 0..4u8 {
            for m in 0..4u8 {
                let got = sign_extend(u32::from(twobit_product(n, m)), 5);
                assert_eq!(i64::from(got), int(n, Precision::Two) * int(m, Precision::Two));
            }
        }
    }

    #[test]
    fn multiplicand_examples() {
        assert_eq!(multiplicand(code("0000")), 0b10001);
        assert_eq!(sign_extend(0b10001, 5), -15);
        assert_eq!(multiplicand(code("1101")), 0b01011);
        for n in 0..16u8 {
            assert_eq!(i64::from(sign_extend(u32::from(multiplicand(n)), 5)), int(n, Precision::Four));
        }
    }

    #[test]
    fn booth_digit_zero_selects_minus_one_when_qm0_set() {
        let d = booth_recode(0b0001);
        assert_eq!(d[0], BoothDigit { select: BoothSelect::One, negative: true });
        let d = booth_recode(0b0000);
        assert_eq!(d[0].value(), 1);
    }

    #[test]
    fn booth_recombines_multiplier() {
        for m in 0..16u8 {
            let d = booth_recode(m);
            let k = d[0].value() + 4 * d[1].value() + 16 * d[2].value();
            assert_eq!(i64::from(k), int(m, Precision::Four), "qm={m:04b}");
        }
    }

    #[test]
    fn fourbit_examples_and_exhaustive() {
        assert_eq!(fourbit_product(code("1111"), code("0000")), -225);
        assert_eq!(fourbit_product(code("1101"), code("1101")), 121);
        assert_eq!(fourbit_product(code("1000"), code("1000")), 1);
        for n in 0..16u8 {
            for m in 0..16u8 {
                assert_eq!(i64::from(fourbit_product(n, m)), int(n, Precision::Four) * int(m, Precision::Four));
            }
        }
    }

    #[test]
    fn eightbit_examples() {
        assert_eq!(int(code("11011101"), Precision::Eight), 187);
        assert_eq!(eightbit_product(0xFF, 0xFF), 65025);
        assert_eq!(eightbit_product(0x00, 0xFF), -65025);
    }

    #[test]
    fn rne() {
        assert_eq!(round_shift_rne(5, 1), 2);
        assert_eq!(round_shift_rne(7, 1), 4);
        assert_eq!(round_shift_rne(-5, 1), -2);
        assert_eq!(round_shift_rne(-7, 1), -4);
        assert_eq!(round_shift_rne(130050, 8), 508);
    }

    fn filled(bits: u8, p: Precision) -> Lane16 {
        let c = QCode::new(bits, p).unwrap();
        Lane16::pack(&vec![c; p.lane_elems()], p).unwrap()
    }

    #[test]
    fn lane_examples() {
        let z = Lane16(0);
        assert_eq!(lane_mac(z, z, Precision::One).to_f64(), 16.0);
        let l = filled(code("1101"), Precision::Four);
        assert_eq!(lane_mac(l, l, Precision::Four), FixedAcc(484));
        assert_eq!(lane_mac(l, l, Precision::Four).to_f64(), 7.5625);
        let m = Lane16(0xFFFF);
        assert_eq!(lane_mac(m, m, Precision::Eight).to_f64(), 7.9375);
    }

    #[test]
    fn lane_pack_layout() {
        let p = Precision::Four;
        let codes = [0xD, 0x3, 0xF, 0xF].map(|b| QCode::new(b, p).unwrap());
        assert_eq!(Lane16::pack(&codes, p).unwrap(), Lane16(0xFF3D));
        assert_eq!(Lane16(0xFF3D).unpack(p), codes.to_vec());
        assert!(Lane16::pack(&codes[..3], p).is_err());
    }

    #[test]
    fn trace_reports_stages() {
        let l = filled(code("1101"), Precision::Four);
        let (acc, trace) = lane_mac_traced(l, l, Precision::Four);
        assert_eq!(acc, FixedAcc(484));
        assert_eq!(trace.stages, vec![vec![121; 4], vec![242, 242], vec![484]]);
        let text = trace.to_string();
        assert!(text.starts_with("adder p=4 stage=0 sums=121,121,121,121"));
    }

    #[test]
    fn bounds() {
        assert_eq!(lane_bound(Precision::One), Rational64::from_integer(16));
        assert_eq!(lane_bound(Precision::Two), Rational64::from_integer(18));
        assert_eq!(lane_bound(Precision::Four), Rational64::new(225, 16));
        assert!(lane_bound(Precision::Eight) < Rational64::from_integer(8));
    }
}
