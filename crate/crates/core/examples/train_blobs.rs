//! Trains the 2-16-16-2 blobs model in memory and prints the trajectory.

use sysmol::experiment::ExperimentConfig;
use sysmol::train::run_training;

const CONFIG: &str = r#"
[experiment]
precision_set = "G124"
seed = 7

[dataset]
kind = "blobs"
"#;

fn main() -> sysmol::Result<()> {
    let cfg = ExperimentConfig::parse(CONFIG)?;
    let (train, test) = cfg.splits()?;
    let out = run_training(&cfg.job()?, &train, &test, cfg.hash())?;
    let r = &out.report;
    for e in r.epochs.iter().step_by(5) {
        let tau = e.tau.map_or("-".to_string(), |t| format!("{t:.2}"));
        println!("{:>2} {:<8} tau {tau:>7} loss {:.4} reg {:>7.3} acc {:.3}", e.epoch, e.phase, e.loss, e.regularizer, e.test_accuracy);
    }
    println!("point mass: {:.1}% of channels", 100.0 * r.point_mass.fraction);
    for (l, p) in r.precisions.iter().enumerate() {
        println!("layer {l}: {p:?}");
    }
    println!("accuracy {:.4} (float {:.4}), {:.3} Bpp", r.final_accuracy, r.baseline_accuracy, r.bpp);
    Ok(())
}
