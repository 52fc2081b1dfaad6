//! One 16-bit lane at each precision, with the Booth recoding of a 4-bit
//! multiplier and the adder-tree trace.

use sysmol::mac::{booth_recode, fourbit_product, lane_mac_exact, lane_mac_traced, Lane16};
use sysmol::qformat::{Precision, QCode};

fn main() -> sysmol::Result<()> {
    let (n, m) = (QCode::parse("1101", Precision::Four)?, QCode::parse("0110", Precision::Four)?);
    println!("{} x {} = {}", n.value(), m.value(), n.value() * m.value());
    for (i, d) in booth_recode(m.bits()).iter().enumerate() {
        println!("  digit {i}: {d:?} ({})", d.value());
    }
    println!("  fourbit_product = {} / 64", fourbit_product(n.bits(), m.bits()));

    for p in Precision::ALL {
        let k = p.lane_elems();
        let a: Vec<QCode> = (0..k).map(|i| QCode::new((i as u8 * 3) & p.max_int() as u8, p)).collect::<Result<_, _>>()?;
        let b: Vec<QCode> = (0..k).map(|i| QCode::new((i as u8 * 5 + 1) & p.max_int() as u8, p)).collect::<Result<_, _>>()?;
        let (la, lb) = (Lane16::pack(&a, p)?, Lane16::pack(&b, p)?);
        let (acc, trace) = lane_mac_traced(la, lb, p);
        println!("\n{p}: {k} products, lane {:#06x} . {:#06x}", la.0, lb.0);
        println!("  16.6 output {acc}  exact {}", lane_mac_exact(la, lb, p));
        println!("  {trace:?}");
    }
    Ok(())
}
