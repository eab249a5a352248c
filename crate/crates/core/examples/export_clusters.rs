//! Trains a short run and exports each grouped filter's id, group and
//! reference-batch responses as CSV, ready for an external t-SNE.

use disentangled_cbm::eval::{export_cluster_embeddings, DEFAULT_REFERENCE_SIZE};
use disentangled_cbm::synth::{generate, DatasetSpec};
use disentangled_cbm::trainer::{train, TrainConfig};
use disentangled_cbm::Result;

fn main() -> Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/clusters.csv".into());
    let data = generate(&DatasetSpec { train_size: 512, ..DatasetSpec::default() })?;
    let outcome = train(&TrainConfig { epochs: 6, ..TrainConfig::default() }, &data)?;
    let csv = export_cluster_embeddings(&outcome.model, &data.train, &data.spec, 0, DEFAULT_REFERENCE_SIZE)?;
    std::fs::write(&out, &csv).expect("write csv");
    println!("group sizes {:?}, gap {:.4}", outcome.model.assignment.sizes(), outcome.final_grouping.gap);
    println!("wrote {} rows to {out}", csv.lines().count() - 1);
    Ok(())
}
