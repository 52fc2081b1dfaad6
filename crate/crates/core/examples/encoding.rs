//! Code decoding, the noise-scale mapping and Bpp of a channel map.

use sysmol::qformat::{
    bpp_of_layer, compression_ratio, precision_from_s, quantize_value, s_from_precision, sigmoid, LayerPrecisionMap, Precision,
    PrecisionSet, QCode,
};

fn main() -> sysmol::Result<()> {
    for (bits, p) in [("1101", Precision::Four), ("10", Precision::Two), ("0", Precision::One), ("1", Precision::One)] {
        let c = QCode::parse(bits, p)?;
        println!("{bits:>4} @ {p}: k = {:>3}, value = {}", c.integer(), c.value());
    }

    println!("\n p   s(p)      sigma(s)  p(s)");
    for p in Precision::ALL {
        let s = s_from_precision(p);
        println!("{:>2}  {s:>8.4}  {:>8.5}  {}", p.bits(), sigmoid(s), precision_from_s(s));
    }

    let w = 0.6;
    for p in Precision::ALL {
        let q = quantize_value(w, p)?;
        println!("quantize({w}) at {p}: {} -> {}", q, q.value_f64());
    }

    let set = PrecisionSet::g124();
    let map = LayerPrecisionMap::new(set, vec![Precision::Four, Precision::Two, Precision::Two, Precision::One], vec![16; 4])?;
    let bpp = bpp_of_layer(&map)?;
    println!("\n{} map {:?}: {bpp} Bpp, {:.1}x vs fp32", set.name(), map.precisions(), compression_ratio(bpp));
    Ok(())
}
