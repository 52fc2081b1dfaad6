//! Throughput-only instruction and cycle model, mirroring what the kernels
//! issue, plus Bpp / compression / speedup reporting against a uniform 8-bit
//! twin of the same architecture.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::LayerShape;
use crate::pack::file::PackedModel;
use crate::qformat::{bpp_of_layer, compression_ratio, LayerPrecisionMap, Precision};
use crate::vexec::{vector_capacity, InstrCount, PrecisionPattern, Target, GPU_UNITS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub vmac_cycles: f64,
    pub reduce_cycles: f64,
    pub target: Target,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { vmac_cycles: 1.0, reduce_cycles: 1.0, target: Target::Cpu }
    }
}

impl CostConfig {
    pub fn new(vmac_cycles: f64, reduce_cycles: f64, target: Target) -> Result<Self> {
        for c in [vmac_cycles, reduce_cycles] {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("cycle weight {c} must be positive")));
            }
        }
        Ok(Self { vmac_cycles, reduce_cycles, target })
    }

    pub fn cycles(&self, counts: &InstrCount) -> f64 {
        counts.vmac_total() as f64 * self.vmac_cycles + counts.reduce_total() as f64 * self.reduce_cycles
    }
}

/// Adds the instructions of one reduction with the given group lengths,
/// highest precision first.
pub fn count_reduction(groups: &[(Precision, usize)], target: Target, counts: &mut InstrCount) {
    let jobs: Vec<Precision> = groups.iter().flat_map(|&(p, n)| std::iter::repeat_n(p, n.div_ceil(vector_capacity(p)))).collect();
    if jobs.is_empty() {
        return;
    }
    match target {
        Target::Cpu => {
            for p in &jobs {
                counts.vmac_cpu[p.index()] += 1;
            }
            counts.vpadd += 1;
            counts.vaddv += 1;
        }
        Target::Gpu => {
            for batch in jobs.chunks(GPU_UNITS) {
                let mut units = [*batch.last().expect("non-empty"); GPU_UNITS];
                units[..batch.len()].copy_from_slice(batch);
                let idx = PrecisionPattern::canonical(units).index().expect("canonical");
                counts.vmac_gpu[idx] += 1;
            }
            counts.gpu_reduce += 1;
        }
    }
}

/// Channel counts per distinct precision, highest first.
fn grouped(precisions: &[Precision]) -> Vec<(Precision, usize)> {
    let mut out = Vec::new();
    for p in Precision::ALL.iter().rev() {
        let n = precisions.iter().filter(|&&q| q == *p).count();
        if n > 0 {
            out.push((*p, n));
        }
    }
    out
}

/// Instructions for `batch` samples through one layer with the given
/// per-input-channel precisions.
pub fn predict_layer_counts(shape: &LayerShape, precisions: &[Precision], batch: usize, target: Target) -> Result<InstrCount> {
    if precisions.len() != shape.in_channels() {
        return Err(Error::MapMismatch(format!("{} channel precisions for {} input channels", precisions.len(), shape.in_channels())));
    }
    let groups = grouped(precisions);
    let mut per_sample = InstrCount::default();
    let mut positions: Vec<(usize, usize)> = Vec::new();
    match shape {
        LayerShape::Dense { outputs, .. } => positions.push((1, *outputs)),
        LayerShape::Conv(c) => {
            for oh in 0..c.out_h() {
                for ow in 0..c.out_w() {
                    positions.push((c.valid_taps(oh, ow), c.out_channels));
                }
            }
        }
    }
    for (taps, repeat) in positions {
        let lens: Vec<(Precision, usize)> = groups.iter().map(|&(p, n)| (p, n * taps)).collect();
        let mut one = InstrCount::default();
        count_reduction(&lens, target, &mut one);
        for _ in 0..repeat {
            per_sample += &one;
        }
    }
    let mut total = InstrCount::default();
    for _ in 0..batch {
        total += &per_sample;
    }
    Ok(total)
}

pub fn predict_counts(shapes: &[LayerShape], maps: &[LayerPrecisionMap], batch: usize, target: Target) -> Result<InstrCount> {
    if shapes.len() != maps.len() {
        return Err(Error::ShapeMismatch(format!("{} shapes, {} maps", shapes.len(), maps.len())));
    }
    let mut total = InstrCount::default();
    for (s, m) in shapes.iter().zip(maps) {
        total += &predict_layer_counts(s, m.precisions(), batch, target)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: String,
    pub counts: InstrCount,
    pub cycles: f64,
    pub bpp: f64,
    pub baseline_cycles: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config_hash: String,
    pub seed: u64,
    pub precision_set: [u32; 3],
    pub cost: CostConfig,
    pub layers: Vec<LayerCost>,
    pub counts: InstrCount,
    pub cycles: f64,
    pub baseline_counts: InstrCount,
    pub baseline_cycles: f64,
    pub bpp: f64,
    pub compression_ratio: f64,
    pub speedup: f64,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,vmacs,reductions,cycles,bpp,baseline_cycles,speedup\n");
        for l in &self.layers {
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                l.index,
                l.kind,
                l.counts.vmac_total(),
                l.counts.reduce_total(),
                l.cycles,
                l.bpp,
                l.baseline_cycles,
                l.speedup
            );
        }
        s += &format!(
            "total,,{},{},{},{},{},{}\n",
            self.counts.vmac_total(),
            self.counts.reduce_total(),
            self.cycles,
            self.bpp,
            self.baseline_cycles,
            self.speedup
        );
        s
    }
}

/// Cost of one inference of `model` against the same architecture with every
/// channel at 8 bits.
pub fn speedup_report(model: &PackedModel, cfg: &CostConfig) -> Result<CostReport> {
    let maps = model.maps()?;
    let mut layers = Vec::new();
    let mut counts = InstrCount::default();
    let mut baseline_counts = InstrCount::default();
    for (i, (layer, map)) in model.layers.iter().zip(&maps).enumerate() {
        let c = predict_layer_counts(&layer.shape, map.precisions(), 1, cfg.target)?;
        let b = predict_layer_counts(&layer.shape, &vec![Precision::Eight; map.channels()], 1, cfg.target)?;
        let (cycles, baseline_cycles) = (cfg.cycles(&c), cfg.cycles(&b));
        layers.push(LayerCost {
            index: i,
            kind: match layer.shape {
                LayerShape::Dense { .. } => "dense".into(),
                LayerShape::Conv(_) => "conv".into(),
            },
            cycles,
            bpp: bpp_of_layer(map)?,
            baseline_cycles,
            speedup: baseline_cycles / cycles,
            counts: c.clone(),
        });
        counts += &c;
        baseline_counts += &b;
    }
    let bpp = model.bpp()?;
    let cycles = cfg.cycles(&counts);
    let baseline_cycles = cfg.cycles(&baseline_counts);
    Ok(CostReport {
        config_hash: hex::encode(model.config_hash),
        seed: model.seed,
        precision_set: maps.first().map_or([0; 3], |m| m.set().into()),
        cost: *cfg,
        layers,
        counts,
        cycles,
        baseline_counts,
        baseline_cycles,
        bpp,
        compression_ratio: compression_ratio(bpp),
        speedup: baseline_cycles / cycles,
    })
}
