//! Exhaustive oracles for the MAC datapaths, checked against decode-multiply.

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::mac::{eightbit_product, fourbit_product, onebit_pair_sum, sign_extend, twobit_product};
use crate::qformat::{Precision, QCode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: u64,
    pub mismatches: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.mismatches == 0)
    }

    pub fn mismatches(&self) -> u64 {
        self.suites.iter().map(|s| s.mismatches).sum()
    }
}

fn value(bits: u8, p: Precision) -> Rational64 {
    QCode::new(bits, p).expect("code in range").value()
}

/// Integer-domain product `k_n·k_m` back in value units.
fn product_value(k: i64, p: Precision) -> Rational64 {
    Rational64::new(k, p.denom() * p.denom())
}

/// Sum of two 1-bit products over all 16 operand combinations.
pub fn onebit_suite() -> SuiteResult {
    let mut mismatches = 0;
    for x in 0u8..16 {
        let b = |i: u8| (x >> i) & 1;
        let (_, got) = onebit_pair_sum(b(0) == 1, b(1) == 1, b(2) == 1, b(3) == 1);
        let want = value(b(0), Precision::One) * value(b(1), Precision::One) + value(b(2), Precision::One) * value(b(3), Precision::One);
        mismatches += u64::from(Rational64::from_integer(i64::from(got)) != want);
    }
    SuiteResult { name: "onebit_pair_sum".into(), cases: 16, mismatches }
}

/// Two 2-bit products summed in one lane slot, all 256 operand combinations.
pub fn twobit_suite() -> SuiteResult {
    let p = Precision::Two;
    let mut mismatches = 0;
    for x in 0u16..256 {
        let c = |i: u16| ((x >> (2 * i)) & 3) as u8;
        let prod = |a: u8, b: u8| i64::from(sign_extend(u32::from(twobit_product(a, b)), 5));
        let got = product_value(prod(c(0), c(1)) + prod(c(2), c(3)), p);
        let want = value(c(0), p) * value(c(1), p) + value(c(2), p) * value(c(3), p);
        mismatches += u64::from(got != want);
    }
    SuiteResult { name: "twobit_product".into(), cases: 256, mismatches }
}

pub fn fourbit_suite() -> SuiteResult {
    let p = Precision::Four;
    let mut mismatches = 0;
    for n in 0u8..16 {
        for m in 0u8..16 {
            let got = product_value(i64::from(fourbit_product(n, m)), p);
            mismatches += u64::from(got != value(n, p) * value(m, p));
        }
    }
    SuiteResult { name: "booth_fourbit_product".into(), cases: 256, mismatches }
}

pub fn eightbit_suite() -> SuiteResult {
    let p = Precision::Eight;
    let mut mismatches = 0;
    for n in 0..=255u8 {
        for m in 0..=255u8 {
            let got = product_value(i64::from(eightbit_product(n, m)), p);
            mismatches += u64::from(got != value(n, p) * value(m, p));
        }
    }
    SuiteResult { name: "eightbit_product".into(), cases: 65536, mismatches }
}

pub fn run() -> SelftestReport {
    SelftestReport { suites: vec![onebit_suite(), twobit_suite(), fourbit_suite(), eightbit_suite()] }
}
