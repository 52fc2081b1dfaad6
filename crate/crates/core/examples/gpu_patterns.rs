//! The 35 four-unit precision patterns and how a mixed reduction batches onto
//! them.

use sysmol::cost::count_reduction;
use sysmol::qformat::Precision;
use sysmol::vexec::{enumerate_gpu_patterns, InstrCount, PrecisionPattern, Target};

fn main() -> sysmol::Result<()> {
    for (i, p) in enumerate_gpu_patterns().iter().enumerate() {
        print!("{i:>2} {p} {:>4}   ", p.capacity());
        if i % 4 == 3 {
            println!();
        }
    }
    println!();

    let groups = [(Precision::Four, 96), (Precision::Two, 64), (Precision::One, 128)];
    for target in [Target::Cpu, Target::Gpu] {
        let mut c = InstrCount::default();
        count_reduction(&groups, target, &mut c);
        println!("\n{target:?}: {} vmacs, {} reductions", c.vmac_total(), c.reduce_total());
        for (i, n) in c.vmac_gpu.iter().enumerate().filter(|(_, &n)| n > 0) {
            println!("  pattern {i} {}: {n}", PrecisionPattern::from_index(i)?);
        }
    }
    Ok(())
}
