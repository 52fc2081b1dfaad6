//! Functional model of the vector units.
//!
//! The CPU issues `vmac_Pn` over eight 16-bit lanes, all at one precision
//! selected by a 2-bit `Pn`. The GPU compute unit drives four such vectors
//! per instruction, each at its own precision, selected by a 6-bit index into
//! the 35 canonical patterns. Results are widened to 32-bit slots with six
//! fractional bits and reduced with pairwise and horizontal adds.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::sync::OnceLock;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mac::{lane_mac, Lane16, ACC_FRAC_BITS};
use crate::qformat::{Precision, QCode};

pub const LANES: usize = 8;
pub const GPU_UNITS: usize = 4;
pub const PATTERN_COUNT: usize = 35;

/// Fractional bits of compensated dot products. Every product of two codes
/// (at most 14 fractional bits for 8-bit) is exact at this scale.
pub const DOT_FRAC_BITS: u32 = 14;

/// Elements one vector register holds at precision `p`.
pub const fn vector_capacity(p: Precision) -> usize {
    LANES * p.lane_elems()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VReg128(pub [Lane16; LANES]);

impl VReg128 {
    /// Packs up to one vector of codes; missing slots become the all-ones pad.
    pub fn pack_padded(codes: &[QCode], p: Precision) -> Result<(Self, usize)> {
        let cap = vector_capacity(p);
        if codes.len() > cap {
            return Err(Error::StreamMismatch(format!("{} codes exceed vector capacity {cap}", codes.len())));
        }
        let pad = QCode::max(p);
        let mut lanes = [Lane16::default(); LANES];
        let per_lane = p.lane_elems();
        for (l, lane) in lanes.iter_mut().enumerate() {
            let chunk: Vec<QCode> = (0..per_lane).map(|i| codes.get(l * per_lane + i).copied().unwrap_or(pad)).collect();
            *lane = Lane16::pack(&chunk, p)?;
        }
        Ok((VReg128(lanes), cap - codes.len()))
    }
}

/// Eight signed 32-bit slots with six fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WideVec(pub [i32; LANES]);

impl WideVec {
    pub fn from_values(vals: [f64; LANES]) -> Self {
        WideVec(vals.map(|v| (v * f64::from(1 << ACC_FRAC_BITS)).round() as i32))
    }

    pub fn to_f64(&self) -> [f64; LANES] {
        self.0.map(|x| f64::from(x) / f64::from(1 << ACC_FRAC_BITS))
    }

    fn accumulate(&mut self, other: &WideVec) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            *a = a.checked_add(b).ok_or(Error::Saturation("vmac accumulate"))?;
        }
        Ok(())
    }
}

/// `slot[i] = lane_mac(qn[i], qm[i], p)`.
pub fn vmac_pn_cpu(qn: &VReg128, qm: &VReg128, p: Precision) -> WideVec {
    let mut out = [0i32; LANES];
    for (o, (a, b)) in out.iter_mut().zip(qn.0.iter().zip(qm.0.iter())) {
        *o = lane_mac(*a, *b, p).0;
    }
    WideVec(out)
}

/// Decodes the 2-bit CPU `Pn` field.
pub fn decode_pn_cpu(pn: u8) -> Result<Precision> {
    Precision::ALL.get(usize::from(pn)).copied().ok_or(Error::InvalidPrecision(u32::from(pn)))
}

pub fn encode_pn_cpu(p: Precision) -> u8 {
    p.index() as u8
}

/// Pairwise widening add: `out[j] = v[2j] + v[2j+1]`.
pub fn vpadd_widen(v: &WideVec) -> Result<[i32; LANES / 2]> {
    let mut out = [0i32; LANES / 2];
    for (j, o) in out.iter_mut().enumerate() {
        *o = v.0[2 * j].checked_add(v.0[2 * j + 1]).ok_or(Error::Saturation("vpadd"))?;
    }
    Ok(out)
}

/// Horizontal add of all slots.
pub fn vaddv(parts: &[i32]) -> Result<i32> {
    parts.iter().try_fold(0i32, |acc, &x| acc.checked_add(x)).ok_or(Error::Saturation("vaddv"))
}

/// Precisions of the four GPU units, non-increasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrecisionPattern(pub [Precision; GPU_UNITS]);

impl PrecisionPattern {
    pub fn canonical(mut units: [Precision; GPU_UNITS]) -> Self {
        units.sort_by(|a, b| b.cmp(a));
        PrecisionPattern(units)
    }

    pub fn is_canonical(&self) -> bool {
        self.0.windows(2).all(|w| w[0] >= w[1])
    }

    /// 6-bit `Pn` index.
    pub fn index(&self) -> Option<usize> {
        enumerate_gpu_patterns().iter().position(|p| p == self)
    }

    pub fn from_index(index: usize) -> Result<Self> {
        enumerate_gpu_patterns().get(index).copied().ok_or(Error::PatternIndex(index))
    }

    /// Element pairs one instruction consumes.
    pub fn capacity(&self) -> usize {
        self.0.iter().map(|&p| vector_capacity(p)).sum()
    }
}

impl fmt::Display for PrecisionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "({a},{b},{c},{d})")
    }
}

/// All size-4 multisets over {1,2,4,8}, each non-increasing, listed in
/// descending lexicographic order. Index 0 is (8,8,8,8).
pub fn enumerate_gpu_patterns() -> &'static [PrecisionPattern] {
    static PATTERNS: OnceLock<Vec<PrecisionPattern>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let desc = [Precision::Eight, Precision::Four, Precision::Two, Precision::One];
        let mut out = Vec::with_capacity(PATTERN_COUNT);
        for a in 0..4 {
            for b in a..4 {
                for c in b..4 {
                    for d in c..4 {
                        out.push(PrecisionPattern([desc[a], desc[b], desc[c], desc[d]]));
                    }
                }
            }
        }
        out
    })
}

/// One instruction on the GPU compute unit: unit `i` runs `vmac_Pn` at
/// `pattern[i]`.
pub fn vmac_pn_gpu(operands: &[(VReg128, VReg128); GPU_UNITS], pattern_index: usize) -> Result<[WideVec; GPU_UNITS]> {
    let pattern = PrecisionPattern::from_index(pattern_index)?;
    let mut out = [WideVec::default(); GPU_UNITS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = vmac_pn_cpu(&operands[i].0, &operands[i].1, pattern.0[i]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Cpu,
    Gpu,
}

impl std::str::FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu" => Ok(Target::Cpu),
            "gpu" => Ok(Target::Gpu),
            _ => Err(Error::Config(format!("unknown target {s:?}"))),
        }
    }
}

/// Instruction counts by class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrCount {
    /// CPU `vmac_Pn`, indexed by `Precision::index`.
    pub vmac_cpu: [u64; 4],
    /// GPU `vmac_Pn`, indexed by pattern.
    pub vmac_gpu: Vec<u64>,
    pub vpadd: u64,
    pub vaddv: u64,
    /// Native GPU reduction over all unit outputs.
    pub gpu_reduce: u64,
}

impl Default for InstrCount {
    fn default() -> Self {
        Self { vmac_cpu: [0; 4], vmac_gpu: vec![0; PATTERN_COUNT], vpadd: 0, vaddv: 0, gpu_reduce: 0 }
    }
}

impl InstrCount {
    pub fn vmac_total(&self) -> u64 {
        self.vmac_cpu.iter().sum::<u64>() + self.vmac_gpu.iter().sum::<u64>()
    }

    pub fn reduce_total(&self) -> u64 {
        self.vpadd + self.vaddv + self.gpu_reduce
    }
}

impl AddAssign<&InstrCount> for InstrCount {
    fn add_assign(&mut self, o: &InstrCount) {
        for (a, b) in self.vmac_cpu.iter_mut().zip(o.vmac_cpu) {
            *a += b;
        }
        for (a, b) in self.vmac_gpu.iter_mut().zip(&o.vmac_gpu) {
            *a += b;
        }
        self.vpadd += o.vpadd;
        self.vaddv += o.vaddv;
        self.gpu_reduce += o.gpu_reduce;
    }
}

impl Add for InstrCount {
    type Output = InstrCount;
    fn add(mut self, o: InstrCount) -> InstrCount {
        self += &o;
        self
    }
}

/// One issued instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceRecord {
    VmacCpu { precision: Precision, group: usize },
    VmacGpu { pattern: usize, groups: [usize; GPU_UNITS] },
    Vpadd,
    Vaddv,
    GpuReduce,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceRecord::VmacCpu { precision, group } => {
                write!(f, "class=vmac_cpu pn={} p={precision} group={group}", encode_pn_cpu(*precision))
            }
            TraceRecord::VmacGpu { pattern, groups } => {
                let pat = PrecisionPattern::from_index(*pattern).expect("issued pattern is valid");
                let g: Vec<String> = groups.iter().map(|&g| if g == usize::MAX { "-".to_string() } else { g.to_string() }).collect();
                write!(f, "class=vmac_gpu pn={pattern} pattern={pat} group={}", g.join(","))
            }
            TraceRecord::Vpadd => write!(f, "class=vpadd"),
            TraceRecord::Vaddv => write!(f, "class=vaddv"),
            TraceRecord::GpuReduce => write!(f, "class=gpu_reduce"),
        }
    }
}

/// Counts (and optionally traces) instructions. Single owner.
#[derive(Debug, Clone, Default)]
pub struct ExecContext {
    pub counts: InstrCount,
    trace: Option<Vec<TraceRecord>>,
}

impl ExecContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_trace() -> Self {
        Self { counts: InstrCount::default(), trace: Some(Vec::new()) }
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn trace_text(&self) -> String {
        self.trace().iter().map(|r| format!("{r}\n")).collect()
    }

    fn record(&mut self, r: TraceRecord) {
        if let Some(t) = &mut self.trace {
            t.push(r);
        }
    }

    pub fn vmac_cpu(&mut self, acc: &mut WideVec, qn: &VReg128, qm: &VReg128, p: Precision, group: usize) -> Result<()> {
        self.counts.vmac_cpu[p.index()] += 1;
        self.record(TraceRecord::VmacCpu { precision: p, group });
        acc.accumulate(&vmac_pn_cpu(qn, qm, p))
    }

    pub fn vmac_gpu(
        &mut self,
        acc: &mut [WideVec; GPU_UNITS],
        operands: &[(VReg128, VReg128); GPU_UNITS],
        pattern: usize,
        groups: [usize; GPU_UNITS],
        active: usize,
    ) -> Result<()> {
        let out = vmac_pn_gpu(operands, pattern)?;
        self.counts.vmac_gpu[pattern] += 1;
        self.record(TraceRecord::VmacGpu { pattern, groups });
        // units past `active` are masked and write nothing
        for (a, o) in acc.iter_mut().zip(out.iter()).take(active) {
            a.accumulate(o)?;
        }
        Ok(())
    }

    pub fn vpadd(&mut self, v: &WideVec) -> Result<[i32; LANES / 2]> {
        self.counts.vpadd += 1;
        self.record(TraceRecord::Vpadd);
        vpadd_widen(v)
    }

    pub fn vaddv(&mut self, parts: &[i32]) -> Result<i32> {
        self.counts.vaddv += 1;
        self.record(TraceRecord::Vaddv);
        vaddv(parts)
    }

    pub fn gpu_reduce(&mut self, acc: &[WideVec; GPU_UNITS]) -> Result<i32> {
        self.counts.gpu_reduce += 1;
        self.record(TraceRecord::GpuReduce);
        acc.iter().flat_map(|v| v.0).try_fold(0i32, |s, x| s.checked_add(x)).ok_or(Error::Saturation("gpu reduce"))
    }
}

/// A run of elements at one precision inside a reduction stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamGroup {
    pub precision: Precision,
    pub codes: Vec<QCode>,
}

/// One operand of a dot product, laid out as precision groups.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReductionStream {
    pub groups: Vec<StreamGroup>,
}

impl ReductionStream {
    pub fn uniform(codes: Vec<QCode>, precision: Precision) -> Self {
        Self { groups: vec![StreamGroup { precision, codes }] }
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.codes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exact dot product of decoded values.
    pub fn exact_dot(&self, other: &ReductionStream) -> Rational64 {
        self.groups.iter().zip(&other.groups).flat_map(|(a, b)| a.codes.iter().zip(&b.codes)).map(|(x, y)| x.value() * y.value()).sum()
    }
}

/// Result of one compensated reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DotResult {
    /// What the hardware reduction produced, six fractional bits.
    pub raw: i64,
    /// Pad element pairs issued.
    pub pad_pairs: u64,
    /// 8-bit lanes touched (each may round once).
    pub lanes_p8: u64,
    /// Compensated dot product with `DOT_FRAC_BITS` fractional bits.
    pub value: i64,
}

impl DotResult {
    pub fn to_f64(&self) -> f64 {
        self.value as f64 / (1i64 << DOT_FRAC_BITS) as f64
    }

    pub fn to_ratio(&self) -> Rational64 {
        Rational64::new(self.value, 1 << DOT_FRAC_BITS)
    }
}

/// Contribution of one pad pair, `(2 − 2^(1−p))²`, at `DOT_FRAC_BITS`.
fn pad_contribution(p: Precision) -> i64 {
    let g = p.max_int();
    (g * g) << (DOT_FRAC_BITS - (2 * p.bits() - 2))
}

struct VectorJob {
    precision: Precision,
    group: usize,
    a: VReg128,
    b: VReg128,
}

fn vector_jobs(a: &ReductionStream, b: &ReductionStream) -> Result<(Vec<VectorJob>, i64, u64)> {
    if a.groups.len() != b.groups.len() {
        return Err(Error::StreamMismatch(format!("{} vs {} precision groups", a.groups.len(), b.groups.len())));
    }
    let mut jobs = Vec::new();
    let mut comp = 0i64;
    let mut pads = 0u64;
    for (gi, (ga, gb)) in a.groups.iter().zip(&b.groups).enumerate() {
        if ga.precision != gb.precision || ga.codes.len() != gb.codes.len() {
            return Err(Error::StreamMismatch(format!(
                "group {gi}: {}x{}b vs {}x{}b",
                ga.codes.len(),
                ga.precision,
                gb.codes.len(),
                gb.precision
            )));
        }
        let p = ga.precision;
        let cap = vector_capacity(p);
        for (ca, cb) in ga.codes.chunks(cap).zip(gb.codes.chunks(cap)) {
            let (va, pad) = VReg128::pack_padded(ca, p)?;
            let (vb, _) = VReg128::pack_padded(cb, p)?;
            pads += pad as u64;
            comp += pad as i64 * pad_contribution(p);
            jobs.push(VectorJob { precision: p, group: gi, a: va, b: vb });
        }
    }
    Ok((jobs, comp, pads))
}

/// Dot product of two aligned streams through the vector units. Partial
/// vectors are padded with the all-ones code on both sides and the known pad
/// contribution is removed afterwards.
pub fn reduce_dot(a: &ReductionStream, b: &ReductionStream, target: Target, ctx: &mut ExecContext) -> Result<DotResult> {
    let (jobs, comp, pad_pairs) = vector_jobs(a, b)?;
    let lanes_p8 = jobs.iter().filter(|j| j.precision == Precision::Eight).count() as u64 * LANES as u64;
    let raw = if jobs.is_empty() {
        0
    } else {
        match target {
            Target::Cpu => {
                let mut acc = WideVec::default();
                for j in &jobs {
                    ctx.vmac_cpu(&mut acc, &j.a, &j.b, j.precision, j.group)?;
                }
                let halves = ctx.vpadd(&acc)?;
                ctx.vaddv(&halves)?
            }
            Target::Gpu => {
                let mut acc = [WideVec::default(); GPU_UNITS];
                for batch in jobs.chunks(GPU_UNITS) {
                    let (pattern, operands, groups) = gpu_batch(batch);
                    ctx.vmac_gpu(&mut acc, &operands, pattern, groups, batch.len())?;
                }
                ctx.gpu_reduce(&acc)?
            }
        }
    };
    let raw = i64::from(raw);
    Ok(DotResult { raw, pad_pairs, lanes_p8, value: (raw << (DOT_FRAC_BITS - ACC_FRAC_BITS)) - comp })
}

/// Units left over in a partial batch are masked; they take the lowest active
/// precision so the pattern stays canonical.
fn gpu_batch(batch: &[VectorJob]) -> (usize, [(VReg128, VReg128); GPU_UNITS], [usize; GPU_UNITS]) {
    let mut order: Vec<&VectorJob> = batch.iter().collect();
    order.sort_by_key(|j| std::cmp::Reverse(j.precision));
    let lowest = order.last().expect("non-empty batch").precision;
    let mut units = [lowest; GPU_UNITS];
    let mut operands = [(VReg128::default(), VReg128::default()); GPU_UNITS];
    let mut groups = [usize::MAX; GPU_UNITS];
    for (i, j) in order.iter().enumerate() {
        units[i] = j.precision;
        operands[i] = (j.a, j.b);
        groups[i] = j.group;
    }
    let pattern = PrecisionPattern(units).index().expect("sorted units form a canonical pattern");
    (pattern, operands, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Signed;
    use proptest::prelude::*;

    fn full(bits: u8, p: Precision) -> VReg128 {
        let c = QCode::new(bits, p).unwrap();
        VReg128::pack_padded(&vec![c; vector_capacity(p)], p).unwrap().0
    }

    #[test]
    fn cpu_vmac_examples() {
        let ones = VReg128([Lane16(0xFFFF); LANES]);
        assert_eq!(vmac_pn_cpu(&ones, &ones, Precision::One).to_f64(), [16.0; 8]);
        let v = full(0b10, Precision::Two);
        assert_eq!(vmac_pn_cpu(&v, &v, Precision::Two).to_f64(), [2.0; 8]);
        assert_eq!(vmac_pn_cpu(&ones, &ones, Precision::Eight).to_f64(), [7.9375; 8]);
    }

    #[test]
    fn pn_field() {
        for p in Precision::ALL {
            assert_eq!(decode_pn_cpu(encode_pn_cpu(p)).unwrap(), p);
        }
        assert!(decode_pn_cpu(4).is_err());
    }

    #[test]
    fn reductions() {
        let v = WideVec::from_values([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let h = vpadd_widen(&v).unwrap();
        assert_eq!(h, [3, 7, 11, 15].map(|x| x << ACC_FRAC_BITS));
        assert_eq!(vaddv(&h).unwrap(), 36 << ACC_FRAC_BITS);
        assert_eq!(vpadd_widen(&WideVec::default()).unwrap(), [0; 4]);
        assert_eq!(vaddv(&[0; 4]).unwrap(), 0);
        let m = WideVec::from_values([16.0; 8]);
        assert_eq!(vpadd_widen(&m).unwrap(), [32 << ACC_FRAC_BITS; 4]);
        let l = full(0b1101, Precision::Four);
        let out = vmac_pn_cpu(&l, &l, Precision::Four);
        assert_eq!(vaddv(&out.0).unwrap(), 8 * 484);
        assert_eq!(f64::from(vaddv(&out.0).unwrap()) / 64.0, 60.5);
    }

    #[test]
    fn saturation_is_reported() {
        let v = WideVec([i32::MAX, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(vpadd_widen(&v), Err(Error::Saturation("vpadd")));
        assert!(vaddv(&[i32::MAX, 1]).is_err());
    }

    #[test]
    fn patterns() {
        let pats = enumerate_gpu_patterns();
        assert_eq!(pats.len(), PATTERN_COUNT);
        assert_eq!(pats[0].0, [Precision::Eight; 4]);
        assert_eq!(pats[34].0, [Precision::One; 4]);
        let target = PrecisionPattern([Precision::Eight, Precision::Four, Precision::Two, Precision::One]);
        assert_eq!(pats.iter().filter(|p| **p == target).count(), 1);
        for (i, p) in pats.iter().enumerate() {
            assert!(p.is_canonical());
            assert_eq!(p.index(), Some(i));
        }
        for w in pats.windows(2) {
            assert!(w[0] > w[1]);
        }
        let p = PrecisionPattern([Precision::Four, Precision::Four, Precision::Two, Precision::One]);
        assert_eq!(p.capacity(), 256);
        assert_eq!(PrecisionPattern::from_index(35), Err(Error::PatternIndex(35)));
        const { assert!(PATTERN_COUNT <= 64, "fits a 6-bit field") };
    }

    #[test]
    fn gpu_uniform_pattern_is_four_cpu_vmacs() {
        let a = full(0xA7, Precision::Eight);
        let b = full(0x3C, Precision::Eight);
        let out = vmac_pn_gpu(&[(a, b); 4], 0).unwrap();
        for o in out {
            assert_eq!(o, vmac_pn_cpu(&a, &b, Precision::Eight));
        }
        assert_eq!(vmac_pn_gpu(&[(a, b); 4], 35), Err(Error::PatternIndex(35)));
    }

    fn codes(p: Precision, n: usize, seed: u64) -> Vec<QCode> {
        (0..n)
            .map(|i| {
                let x = (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407))) >> 33;
                QCode::new((x as u8) & p.max_int() as u8, p).unwrap()
            })
            .collect()
    }

    #[test]
    fn reduce_dot_examples() {
        let p1 = Precision::One;
        let a = ReductionStream::uniform(codes(p1, 128, 1), p1);
        let b = ReductionStream::uniform(codes(p1, 128, 2), p1);
        let mut ctx = ExecContext::new();
        let r = reduce_dot(&a, &b, Target::Cpu, &mut ctx).unwrap();
        assert_eq!(r.to_ratio(), a.exact_dot(&b));
        assert_eq!(ctx.counts.vmac_cpu, [1, 0, 0, 0]);
        assert_eq!((ctx.counts.vpadd, ctx.counts.vaddv), (1, 1));

        let c = QCode::parse("10", Precision::Two).unwrap();
        let one = ReductionStream::uniform(vec![c], Precision::Two);
        let r = reduce_dot(&one, &one, Target::Cpu, &mut ExecContext::new()).unwrap();
        assert_eq!(r.raw, 142 << ACC_FRAC_BITS);
        assert_eq!(r.pad_pairs, 63);
        assert_eq!(r.to_f64(), 0.25);

        let p8 = Precision::Eight;
        let a = ReductionStream::uniform(codes(p8, 256, 3), p8);
        let mut ctx = ExecContext::new();
        reduce_dot(&a, &a, Target::Cpu, &mut ctx).unwrap();
        assert_eq!(ctx.counts.vmac_cpu[p8.index()], 16);
    }

    #[test]
    fn reduce_dot_mismatch() {
        let p = Precision::Two;
        let a = ReductionStream::uniform(codes(p, 3, 1), p);
        let b = ReductionStream::uniform(codes(p, 4, 1), p);
        assert!(matches!(reduce_dot(&a, &b, Target::Cpu, &mut ExecContext::new()), Err(Error::StreamMismatch(_))));
        let c = ReductionStream::uniform(codes(Precision::Four, 3, 1), Precision::Four);
        assert!(reduce_dot(&a, &c, Target::Gpu, &mut ExecContext::new()).is_err());
    }

    #[test]
    fn empty_stream_issues_nothing() {
        let mut ctx = ExecContext::new();
        let e = ReductionStream::default();
        let r = reduce_dot(&e, &e, Target::Cpu, &mut ctx).unwrap();
        assert_eq!(r.value, 0);
        assert_eq!(ctx.counts, InstrCount::default());
    }

    #[test]
    fn trace_lines() {
        let p = Precision::Four;
        let a = ReductionStream::uniform(codes(p, 40, 9), p);
        let mut ctx = ExecContext::with_trace();
        reduce_dot(&a, &a, Target::Cpu, &mut ctx).unwrap();
        assert_eq!(ctx.trace_text(), "class=vmac_cpu pn=2 p=4 group=0\nclass=vmac_cpu pn=2 p=4 group=0\nclass=vpadd\nclass=vaddv\n");
        let mut ctx = ExecContext::with_trace();
        reduce_dot(&a, &a, Target::Gpu, &mut ctx).unwrap();
        assert_eq!(ctx.trace_text(), "class=vmac_gpu pn=20 pattern=(4,4,4,4) group=0,0,-,-\nclass=gpu_reduce\n");
    }

    fn mixed_streams(sizes: [usize; 4], seed: u64) -> (ReductionStream, ReductionStream) {
        let desc = [Precision::Eight, Precision::Four, Precision::Two, Precision::One];
        let mut a = ReductionStream::default();
        let mut b = ReductionStream::default();
        for (i, (&n, &p)) in sizes.iter().zip(&desc).enumerate() {
            if n == 0 {
                continue;
            }
            a.groups.push(StreamGroup { precision: p, codes: codes(p, n, seed + i as u64) });
            b.groups.push(StreamGroup { precision: p, codes: codes(p, n, seed + 17 + i as u64) });
        }
        (a, b)
    }

    proptest! {
        #[test]
        fn low_precision_reduction_is_exact(n4 in 0usize..80, n2 in 0usize..150, n1 in 0usize..300, seed in 0u64..1000, gpu in any::<bool>()) {
            let (a, b) = mixed_streams([0, n4, n2, n1], seed);
            let target = if gpu { Target::Gpu } else { Target::Cpu };
            let r = reduce_dot(&a, &b, target, &mut ExecContext::new()).unwrap();
            prop_assert_eq!(r.to_ratio(), a.exact_dot(&b));
        }

        #[test]
        fn eight_bit_error_bound(n8 in 1usize..60, n4 in 0usize..40, seed in 0u64..1000, gpu in any::<bool>()) {
            let (a, b) = mixed_streams([n8, n4, 0, 0], seed);
            let target = if gpu { Target::Gpu } else { Target::Cpu };
            let r = reduce_dot(&a, &b, target, &mut ExecContext::new()).unwrap();
            let err = (r.to_ratio() - a.exact_dot(&b)).abs();
            prop_assert!(err <= Rational64::new(r.lanes_p8 as i64, 128));
        }

        #[test]
        fn cpu_vmac_count_closed_form(n in 0usize..2000, p in prop::sample::select(Precision::ALL.to_vec())) {
            let a = ReductionStream::uniform(codes(p, n, 5), p);
            let mut ctx = ExecContext::new();
            reduce_dot(&a, &a, Target::Cpu, &mut ctx).unwrap();
            prop_assert_eq!(ctx.counts.vmac_cpu[p.index()] as usize, n.div_ceil(vector_capacity(p)));
        }
    }
}
