//! Snapping raw precisions to hardware levels, grouping channels, filling
//! partial vectors and packing a tensor.

use sysmol::pack::{group_channels, map2hardware, pack_tensor, promote_to_fill, QuantScale};
use sysmol::qformat::{LayerPrecisionMap, PrecisionSet};
use sysmol::vexec::vector_capacity;

fn main() -> sysmol::Result<()> {
    let set = PrecisionSet::g124();
    let raw = [3.0, 1.2, 2.0, 5.7, 1.0, 2.4, 1.6, 4.0];
    let snapped = map2hardware(&raw, &set.levels())?;
    println!("raw {raw:?}\nsnapped {:?}", snapped.iter().map(|p| p.bits()).collect::<Vec<_>>());

    let elems = 12;
    let map = LayerPrecisionMap::new(set, snapped, vec![elems; raw.len()])?;
    let (filled, report) = promote_to_fill(&map, &vec![elems; raw.len()], vector_capacity)?;
    println!("promotions {:?}\npads {:?}", report.promoted, report.pads);

    let (perm, bounds) = group_channels(&filled);
    println!("order {:?}, boundaries {:?}", perm.order(), bounds.present());

    let values: Vec<Vec<f64>> = (0..raw.len())
        .map(|c| {
            let g = filled.precision(c).grid_max();
            (0..elems).map(|i| if i % 2 == 0 { g } else { -g } * 0.25).collect()
        })
        .collect();
    let quant = QuantScale::scale_only(0.25)?;
    let t = pack_tensor(&values, &filled, &perm, quant)?;
    println!("{} lanes, pads per group {:?}", t.lanes.len(), t.pads);
    assert_eq!(t.unpack_values(), values);
    println!("unpack round trip ok");
    Ok(())
}
