//! Generates a dataset bundle, saves it, and prints its layout plus one
//! sample drawn as ASCII art.
//!
//! ```text
//! cargo run --release --example synthetic_dataset -- [out_dir]
//! ```

use disentangled_cbm::synth::{self, DatasetSpec};
use disentangled_cbm::Result;

fn main() -> Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-data".into());
    let spec = DatasetSpec::default();
    let bundle = synth::generate(&spec)?;
    let manifest = synth::save(&bundle, out.as_ref())?;
    for s in &manifest.splits {
        println!("{:<5} {:>5} samples  images sha256 {}", s.name, s.count, &s.images.sha256[..16]);
    }
    println!("codebook:");
    for (k, row) in bundle.codebook.iter().enumerate() {
        println!("  class {k}: {row:?}");
    }
    for (p, concepts) in bundle.part_table().iter().enumerate() {
        println!("part {p} box {:?} owns concepts {concepts:?}", bundle.part_boxes[p]);
    }

    let sample = bundle.sample(&bundle.train, 0);
    println!("sample 0: concepts {:?}, class {}", sample.concepts, sample.label);
    for y in 0..spec.height {
        let line: String = (0..spec.width)
            .map(|x| {
                let px = &sample.image[(y * spec.width + x) * spec.channels..][..spec.channels];
                let v = px.iter().copied().fold(0.0f32, f32::max);
                if v > 0.6 { '#' } else if v > 0.35 { '+' } else { '.' }
            })
            .collect();
        println!("  {line}");
    }
    Ok(())
}
