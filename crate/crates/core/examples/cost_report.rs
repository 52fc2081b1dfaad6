//! Closed-form instruction counts and the speedup against a uniform 8-bit twin
//! for a conv model whose reductions span several vectors.

use sysmol::cost::{predict_counts, CostConfig};
use sysmol::kernels::{ConvSpec, LayerShape};
use sysmol::qformat::{LayerPrecisionMap, Precision, PrecisionSet};
use sysmol::vexec::Target;

fn main() -> sysmol::Result<()> {
    let set = PrecisionSet::g124();
    let shapes = [LayerShape::Conv(ConvSpec::new(32, 8, 8, 32, 3, 3, 1, 1)?), LayerShape::Dense { inputs: 256, outputs: 10 }];
    let mixed = |hi: usize, mid: usize, n: usize, per: usize| {
        let ps = (0..n)
            .map(|c| {
                if c < hi {
                    Precision::Four
                } else if c < hi + mid {
                    Precision::Two
                } else {
                    Precision::One
                }
            })
            .collect();
        LayerPrecisionMap::new(set, ps, vec![per; n])
    };
    let maps = [mixed(8, 16, 32, 288)?, mixed(64, 96, 256, 10)?];
    let g8 = PrecisionSet::g128();
    let uniform = [
        LayerPrecisionMap::uniform(g8, Precision::Eight, vec![288; 32])?,
        LayerPrecisionMap::uniform(g8, Precision::Eight, vec![10; 256])?,
    ];
    for target in [Target::Cpu, Target::Gpu] {
        let cfg = CostConfig::new(1.0, 1.0, target)?;
        let a = predict_counts(&shapes, &maps, 1, target)?;
        let b = predict_counts(&shapes, &uniform, 1, target)?;
        println!(
            "{target:?}: mixed {} vmacs / {} cycles, uniform-8 {} vmacs / {} cycles, speedup {:.2}",
            a.vmac_total(),
            cfg.cycles(&a),
            b.vmac_total(),
            cfg.cycles(&b),
            cfg.cycles(&b) / cfg.cycles(&a)
        );
    }
    Ok(())
}
