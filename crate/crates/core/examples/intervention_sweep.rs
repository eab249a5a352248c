//! Trains briefly, then sweeps correct and incorrect concept interventions
//! over the test split and writes the curve as CSV and SVG.
//!
//! ```text
//! cargo run --release --example intervention_sweep -- [epochs] [out_dir]
//! ```

use disentangled_cbm::eval::{
    curve_csv, curve_svg, intervention_curve, true_concept_accuracy, InterventionMode, InterventionPolicy,
    DEFAULT_REPETITIONS,
};
use disentangled_cbm::synth::{generate, DatasetSpec};
use disentangled_cbm::trainer::{train, TrainConfig};
use disentangled_cbm::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(10, |a| a.parse().expect("epochs"));
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "target/example-intervention".into()));

    let data = generate(&DatasetSpec::default())?;
    let outcome = train(&TrainConfig { epochs, ..TrainConfig::default() }, &data)?;
    println!("trained {epochs} epochs: test A_acc {:.4}", outcome.test_metrics.a_acc);
    println!(
        "class head on ground-truth concepts: {:.4}",
        true_concept_accuracy(&outcome.model.class_head, &data.test)?
    );

    let rows = intervention_curve(
        &outcome.model,
        &data.test,
        &data.spec,
        &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        &[InterventionMode::Correct, InterventionMode::Incorrect],
        &InterventionPolicy::per_concept(InterventionMode::Correct, 0.0, 0),
        DEFAULT_REPETITIONS,
    )?;
    std::fs::create_dir_all(&out).expect("output directory");
    std::fs::write(out.join("curve.csv"), curve_csv(&rows)).expect("write csv");
    std::fs::write(out.join("curve.svg"), curve_svg(&rows)).expect("write svg");
    for r in &rows {
        println!("{:<9} rate {:.1}  A_acc {:.4}", r.mode.as_str(), r.rate, r.a_acc);
    }
    println!("wrote {}", out.display());
    Ok(())
}
