//! Trains the model on a generated dataset and reports per-epoch progress.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [epochs] [seed] [lambda_g]
//! ```

use std::time::Instant;

use disentangled_cbm::synth::{generate, DatasetSpec};
use disentangled_cbm::trainer::{train_with, TrainConfig, TrainEvent};

fn main() -> disentangled_cbm::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(50, |a| a.parse().expect("epochs"));
    let seed = args.next().map_or(0, |a| a.parse().expect("seed"));
    let lambda_g = args.next().map_or(TrainConfig::default().lambda_g, |a| a.parse().expect("lambda_g"));

    let data = generate(&DatasetSpec { seed, ..DatasetSpec::default() })?;
    let config = TrainConfig { epochs, seed, lambda_g, ..TrainConfig::default() };
    let start = Instant::now();
    let outcome = train_with(&config, &data, |event| {
        match event {
            TrainEvent::Reclustered(r) => {
                println!("epoch {:>3}  re-clustered, gap {:.3}, groups {:?}", r.epoch, r.gap, r.assignment.sizes())
            }
            TrainEvent::EpochEnd { record: r, .. } => println!(
                "epoch {:>3}  loss {:.4} (y {:.4} c {:.4} g {:.4})  val C_acc {:.3} A_acc {:.3}  [{:.1}s]",
                r.epoch,
                r.mean_l_total,
                r.mean_l_y,
                r.mean_l_c,
                r.mean_l_g,
                r.val_c_acc,
                r.val_a_acc,
                start.elapsed().as_secs_f64()
            ),
        }
        Ok(())
    })?;
    let t = &outcome.test_metrics;
    println!(
        "test C_acc {:.4}  A_acc {:.4}  final gap {:.4}  ({:.1}s)",
        t.c_acc,
        t.a_acc,
        outcome.final_grouping.gap,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
