//! A padded mixed-precision conv with folded batch norm, checked against the
//! exact reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sysmol::kernels::{conv2d_quantized, fold_batchnorm, pack_activations, reference_conv, ConvSpec, PostOps};
use sysmol::pack::{group_channels, pack_codes, QuantScale};
use sysmol::qformat::{LayerPrecisionMap, Precision, PrecisionSet, QCode};
use sysmol::vexec::{ExecContext, Target};

fn main() -> sysmol::Result<()> {
    let spec = ConvSpec::new(4, 5, 5, 2, 3, 3, 1, 1)?;
    let ps = vec![Precision::Two, Precision::Four, Precision::One, Precision::Four];
    let per_w = spec.out_channels * spec.kh * spec.kw;
    let map = LayerPrecisionMap::new(PrecisionSet::g124(), ps, vec![per_w; 4])?;
    let (perm, bounds) = group_channels(&map);
    println!("channel order {:?}, boundaries {:?}", perm.order(), bounds.present());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut code = |p: Precision| QCode::new(rng.random_range(0..=p.max_int()) as u8, p);
    let wc: Vec<Vec<QCode>> = (0..4).map(|c| (0..per_w).map(|_| code(map.precision(c))).collect()).collect::<Result<_, _>>()?;
    let hw = spec.in_h * spec.in_w;
    let acts: Vec<QCode> = (0..4 * hw).map(|i| code(map.precision(i / hw))).collect::<Result<_, _>>()?;
    let mut wref = vec![QCode::max(Precision::One); spec.weight_len()];
    for (c, codes) in wc.iter().enumerate() {
        for k in 0..spec.out_channels {
            for t in 0..9 {
                wref[(k * 4 + c) * 9 + t] = codes[k * 9 + t];
            }
        }
    }

    let (wq, aq) = (QuantScale::scale_only(0.1)?, QuantScale::new(0.5, 0.25)?);
    let post = PostOps { affine: fold_batchnorm(&[1.0, 0.5], &[0.1, -0.2], &[0.3, 0.0], &[2.0, 0.5], 1e-5)?, relu: true, requant: None };
    let w = pack_codes(&wc, &map, &perm, wq)?;
    let a = pack_activations(&acts, hw, &w, aq)?;
    let mut ctx = ExecContext::new();
    for target in [Target::Cpu, Target::Gpu] {
        let got = conv2d_quantized(&spec, &w, &a, &post, target, &mut ctx)?;
        let want = reference_conv(&spec, &wref, &acts, wq, aq, &post)?;
        let same = got.outputs.iter().zip(&want.outputs).all(|(x, y)| x.to_bits() == y.to_bits());
        println!("{target:?}: {} outputs, bit-identical {same}, {} vmacs", got.outputs.len(), got.counts.vmac_total());
        println!("  first row {:?}", &got.outputs[..spec.out_w()]);
    }
    Ok(())
}
