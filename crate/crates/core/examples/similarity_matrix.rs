//! Pooled filter responses of an untrained backbone on generated images and
//! their shifted Pearson similarity matrix, printed as a coarse heat map.

use disentangled_cbm::backbone::{Backbone, BackboneConfig};
use disentangled_cbm::autodiff::Tape;
use disentangled_cbm::filter_stats::{global_average_response, similarity_matrix};
use disentangled_cbm::synth::{generate, DatasetSpec};
use disentangled_cbm::Result;

fn main() -> Result<()> {
    let data = generate(&DatasetSpec { train_size: 64, val_size: 2, test_size: 2, ..DatasetSpec::default() })?;
    let config = BackboneConfig::default();
    let backbone = Backbone::init(&config, 0);
    let idx: Vec<usize> = (0..64).collect();

    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, false);
    let x = tape.constant(data.train.images_tensor(&idx, &data.spec));
    let fm = bound.extract_features(&mut tape, x)?;
    let r = global_average_response(tape.value(fm.activations))?;
    let s = similarity_matrix(&r)?;

    println!("{} samples x {} filters; shade = similarity in [0, 2]", r.batch_size(), r.filters());
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for i in 0..s.size() {
        let line: String = (0..s.size()).map(|j| shades[((s.get(i, j) / 2.0) * 9.0).round().clamp(0.0, 9.0) as usize]).collect();
        println!("{i:>3} |{line}|");
    }
    Ok(())
}
