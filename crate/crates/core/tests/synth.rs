mod common;

use std::fs;

use disentangled_cbm::synth::{self, class_rule, render_clean, DatasetSpec};
use disentangled_cbm::Error;

fn small(seed: u64, noise: f64) -> DatasetSpec {
    DatasetSpec {
        train_size: 200,
        val_size: 40,
        test_size: 40,
        noise,
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn same_seed_gives_identical_bundles() {
    let a = synth::generate(&small(3, 0.05)).unwrap();
    let b = synth::generate(&small(3, 0.05)).unwrap();
    assert_eq!(a, b);
    let c = synth::generate(&small(4, 0.05)).unwrap();
    assert_ne!(a.train.images, c.train.images);
}

#[test]
fn pixels_stay_in_unit_interval() {
    let b = synth::generate(&small(5, 0.2)).unwrap();
    assert!(b.train.images.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn labels_follow_the_nearest_prototype() {
    let b = synth::generate(&small(6, 0.05)).unwrap();
    for split in [&b.train, &b.val, &b.test] {
        for i in 0..split.labels.len() {
            let c = split.concepts_of(i);
            let dist: Vec<usize> = b.codebook.iter().map(|r| r.iter().zip(c).filter(|(x, y)| x != y).count()).collect();
            let best = *dist.iter().min().unwrap();
            let want = dist.iter().position(|&d| d == best).unwrap();
            assert_eq!(split.label(i), want);
        }
    }
}

#[test]
fn class_rule_breaks_ties_towards_lower_ids() {
    let codebook = vec![vec![1, 1, 0, 0], vec![0, 0, 1, 1], vec![1, 0, 1, 0]];
    assert_eq!(class_rule(&[1, 1, 1, 1], &codebook), 0);
    assert_eq!(class_rule(&[0, 0, 1, 1], &codebook), 1);
    assert_eq!(class_rule(&[1, 0, 1, 1], &codebook), 1);
}

#[test]
fn training_classes_are_balanced() {
    for seed in 0..5 {
        let spec = DatasetSpec {
            seed,
            ..DatasetSpec::default()
        };
        let b = synth::generate(&spec).unwrap();
        let mut counts = [0usize; 4];
        b.train.labels.iter().for_each(|&l| counts[l as usize] += 1);
        for c in counts {
            assert!((c as f64 - 500.0).abs() <= 150.0, "seed {seed}: {counts:?}");
        }
    }
}

#[test]
fn blank_concepts_render_background_only() {
    let spec = small(0, 0.0);
    let boxes = synth::part_boxes(&spec);
    let img = render_clean(&spec, &boxes, &[0; 8]);
    let first = img[0];
    assert!(img.iter().all(|&v| v == first));
}

#[test]
fn active_patterns_stay_inside_their_part_box() {
    let spec = small(0, 0.0);
    let boxes = synth::part_boxes(&spec);
    let blank = render_clean(&spec, &boxes, &[0; 8]);
    for i in 0..8 {
        let mut bits = [0u8; 8];
        bits[i] = 1;
        let img = render_clean(&spec, &boxes, &bits);
        let b = boxes[spec.part_of_concept(i)];
        let mut inked = 0;
        for y in 0..spec.height {
            for x in 0..spec.width {
                let px = (y * spec.width + x) * spec.channels;
                let changed = (0..spec.channels).any(|c| img[px + c] != blank[px + c]);
                if changed {
                    assert!(b.contains(x, y), "concept {i} inks ({x},{y}) outside {b:?}");
                    inked += 1;
                }
            }
        }
        assert!(inked > 0, "concept {i} draws nothing");
    }
}

/// Without noise, matching each part box against all renderings of that
/// part's concept combinations recovers every bit.
#[test]
fn template_matching_recovers_every_concept_without_noise() {
    let spec = small(9, 0.0);
    let b = synth::generate(&spec).unwrap();
    let per = spec.concepts_per_part();
    let templates: Vec<Vec<(Vec<u8>, Vec<f32>)>> = (0..spec.parts)
        .map(|p| {
            (0..1usize << per)
                .map(|combo| {
                    let mut bits = vec![0u8; spec.concepts];
                    for j in 0..per {
                        bits[p * per + j] = u8::from(combo >> j & 1 == 1);
                    }
                    let img = render_clean(&spec, &b.part_boxes, &bits);
                    (bits[p * per..(p + 1) * per].to_vec(), crop(&spec, &b.part_boxes[p], &img))
                })
                .collect()
        })
        .collect();
    for split in [&b.train, &b.test] {
        for i in 0..split.labels.len() {
            let img = split.image(i);
            let mut recovered = Vec::new();
            for (p, options) in templates.iter().enumerate() {
                let patch = crop(&spec, &b.part_boxes[p], img);
                let hits: Vec<&Vec<u8>> = options.iter().filter(|(_, t)| *t == patch).map(|(bits, _)| bits).collect();
                assert_eq!(hits.len(), 1, "part {p} of sample {i} matches {} templates", hits.len());
                recovered.extend_from_slice(hits[0]);
            }
            assert_eq!(recovered, split.concepts_of(i));
        }
    }
}

fn crop(spec: &DatasetSpec, b: &synth::PartBox, img: &[f32]) -> Vec<f32> {
    let mut out = Vec::new();
    for y in b.y0..b.y0 + b.height {
        for x in b.x0..b.x0 + b.width {
            let px = (y * spec.width + x) * spec.channels;
            out.extend_from_slice(&img[px..px + spec.channels]);
        }
    }
    out
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth::generate(&small(11, 0.05)).unwrap();
    let manifest = synth::save(&b, dir.path()).unwrap();
    assert_eq!(synth::load(dir.path()).unwrap(), b);
    assert_eq!(synth::read_manifest(dir.path()).unwrap(), manifest);
}

#[test]
fn truncated_payload_fails_its_checksum() {
    let dir = tempfile::tempdir().unwrap();
    synth::save(&synth::generate(&small(12, 0.05)).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("val_images.f32");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(synth::load(dir.path()), Err(Error::Checksum { .. })));
}

fn edit_manifest(dir: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = dir.join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
}

#[test]
fn concept_count_disagreeing_with_payload_is_a_dimension_error() {
    let dir = tempfile::tempdir().unwrap();
    synth::save(&synth::generate(&small(13, 0.05)).unwrap(), dir.path()).unwrap();
    edit_manifest(dir.path(), |v| v["spec"]["concepts"] = 4.into());
    assert!(matches!(synth::load(dir.path()), Err(Error::Dimension(_))));
}

#[test]
fn unknown_version_and_malformed_manifest_are_distinct_failures() {
    let dir = tempfile::tempdir().unwrap();
    synth::save(&synth::generate(&small(14, 0.05)).unwrap(), dir.path()).unwrap();
    edit_manifest(dir.path(), |v| v["version"] = 99.into());
    assert!(matches!(synth::load(dir.path()), Err(Error::Version(_))));
    fs::write(dir.path().join("manifest.json"), b"{ not json").unwrap();
    assert!(matches!(synth::load(dir.path()), Err(Error::Manifest(_))));
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        DatasetSpec { concepts: 9, ..DatasetSpec::default() },
        DatasetSpec { concepts: 2, parts: 2, classes: 5, ..DatasetSpec::default() },
        DatasetSpec { noise: -0.1, ..DatasetSpec::default() },
        DatasetSpec { height: 8, ..DatasetSpec::default() },
    ];
    for spec in bad {
        assert!(matches!(synth::generate(&spec), Err(Error::Config(_))), "{spec:?}");
    }
}

#[test]
fn labels_csv_lists_every_sample() {
    let b = synth::generate(&small(15, 0.05)).unwrap();
    let csv = b.labels_csv(&b.test);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "sample_id,c0,c1,c2,c3,c4,c5,c6,c7,label");
    assert_eq!(lines.count(), 40);
}
