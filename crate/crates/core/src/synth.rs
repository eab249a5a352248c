//! Deterministic compositional image datasets with part-level concepts.
//!
//! The canvas is split into a grid of `P` slots; each slot holds one part box.
//! Concepts are owned by parts in contiguous runs of `M / P`, and every
//! concept toggles its own pattern (stripes, blob, ring, corner tick, ...)
//! drawn inside its part's box in its own color. The class of a sample is
//! the index of the nearest codebook row (Hamming distance, lowest id on
//! ties).
//!
//! # On-disk layout
//!
//! ```text
//! manifest.json             format, version, spec, part table, boxes, codebook,
//!                           and per split: count plus {file, bytes, sha256} of
//!                           each payload below
//! <split>_images.f32        N x H x W x C little-endian f32, row-major
//! <split>_concepts.u8       N x M bytes, each 0 or 1
//! <split>_labels.u32        N little-endian u32 class ids
//! ```
//!
//! Splits are `train`, `val`, `test`, in that order.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{read_file, sha256_hex, write_file};
use crate::rng::substream;
use crate::tensor::Tensor;

pub const FORMAT: &str = "dcbm-dataset";
pub const FORMAT_VERSION: u32 = 1;
const BACKGROUND: f32 = 0.15;
const INK: f32 = 0.9;
const CODEBOOK_ATTEMPTS: u64 = 256;
const BALANCE_TOLERANCE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub parts: usize,
    pub concepts: usize,
    pub classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            parts: 4,
            concepts: 8,
            classes: 4,
            train_size: 2000,
            val_size: 200,
            test_size: 200,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.parts == 0 || self.concepts == 0 {
            return fail("parts and concepts must be positive".into());
        }
        if self.concepts % self.parts != 0 {
            return fail(format!(
                "concept count {} is not divisible by part count {}",
                self.concepts, self.parts
            ));
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.concepts < 63 && self.classes as u64 > 1u64 << self.concepts {
            return fail(format!(
                "{} classes cannot be realized from {} binary concepts",
                self.classes, self.concepts
            ));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        let (rows, cols) = grid(self.parts);
        if self.height / rows < 8 || self.width / cols < 8 {
            return fail(format!(
                "{}x{} canvas is too small for {} parts (slots need at least 8x8 pixels)",
                self.height, self.width, self.parts
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be a finite non-negative value, got {}", self.noise));
        }
        if self.train_size < 2 {
            return fail("the training split needs at least 2 samples".into());
        }
        Ok(())
    }

    pub fn concepts_per_part(&self) -> usize {
        self.concepts / self.parts
    }

    /// Part that owns concept `i`.
    pub fn part_of_concept(&self, i: usize) -> usize {
        i / self.concepts_per_part()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

fn grid(parts: usize) -> (usize, usize) {
    let cols = (parts as f64).sqrt().ceil() as usize;
    (parts.div_ceil(cols), cols)
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl PartBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }
}

/// Fixed canvas slots, one per part, row-major over the grid.
pub fn part_boxes(spec: &DatasetSpec) -> Vec<PartBox> {
    let (rows, cols) = grid(spec.parts);
    let (ch, cw) = (spec.height / rows, spec.width / cols);
    (0..spec.parts)
        .map(|p| PartBox {
            x0: (p % cols) * cw + 1,
            y0: (p / cols) * ch + 1,
            width: cw - 2,
            height: ch - 2,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    HorizontalStripes,
    VerticalStripes,
    Blob,
    Ring,
    CornerTick,
    Diagonal,
    Checker,
    Cross,
}

const PATTERNS: [Pattern; 8] = [
    Pattern::HorizontalStripes,
    Pattern::VerticalStripes,
    Pattern::Blob,
    Pattern::Ring,
    Pattern::CornerTick,
    Pattern::Diagonal,
    Pattern::Checker,
    Pattern::Cross,
];

const PALETTE: [[f32; 3]; 6] = [
    [INK, BACKGROUND, BACKGROUND],
    [BACKGROUND, INK, BACKGROUND],
    [BACKGROUND, BACKGROUND, INK],
    [INK, INK, BACKGROUND],
    [INK, BACKGROUND, INK],
    [BACKGROUND, INK, INK],
];

impl Pattern {
    /// Whether local pixel `(x, y)` of a `w x h` box is inked.
    fn covers(self, x: usize, y: usize, w: usize, h: usize) -> bool {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        let half = w.min(h) as f64 / 2.0;
        match self {
            Pattern::HorizontalStripes => y % 4 < 2,
            Pattern::VerticalStripes => x % 4 < 2,
            Pattern::Blob => r <= half * 0.4,
            Pattern::Ring => r >= half * 0.65 && r <= half * 0.95,
            Pattern::CornerTick => (x < 3 && y < h * 2 / 3) || (y < 3 && x < w * 2 / 3),
            Pattern::Diagonal => (x * h).abs_diff(y * w) < 2 * w.max(h),
            Pattern::Checker => (x / 2 + y / 2) % 2 == 0,
            Pattern::Cross => x.abs_diff(w / 2) < 2 || y.abs_diff(h / 2) < 2,
        }
    }
}

/// Noise-free rendering of a concept vector.
pub fn render_clean(spec: &DatasetSpec, boxes: &[PartBox], concepts: &[u8]) -> Vec<f32> {
    let c = spec.channels;
    let mut img = vec![BACKGROUND; spec.pixels()];
    for (i, _) in concepts.iter().enumerate().filter(|(_, &b)| b == 1) {
        let part = spec.part_of_concept(i);
        let b = boxes[part];
        let pattern = PATTERNS[i % PATTERNS.len()];
        let color = PALETTE[i % PALETTE.len()];
        for y in 0..b.height {
            for x in 0..b.width {
                if !pattern.covers(x, y, b.width, b.height) {
                    continue;
                }
                let px = ((b.y0 + y) * spec.width + b.x0 + x) * c;
                for ch in 0..c {
                    img[px + ch] = img[px + ch].max(color[ch % 3]);
                }
            }
        }
    }
    img
}

/// Nearest codebook row by Hamming distance; lowest id on ties.
pub fn class_rule(concepts: &[u8], codebook: &[Vec<u8>]) -> usize {
    let mut best = (0, usize::MAX);
    for (k, row) in codebook.iter().enumerate() {
        let d = row.iter().zip(concepts).filter(|(a, b)| a != b).count();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// One split's payloads, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Vec<f32>,
    pub concepts: Vec<u8>,
    pub labels: Vec<u32>,
    pixels: usize,
    width: usize,
}

/// Borrowed view of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub image: &'a [f32],
    pub concepts: &'a [u8],
    pub label: usize,
    pub part_boxes: &'a [PartBox],
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concept_count(&self) -> usize {
        self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.pixels..(i + 1) * self.pixels]
    }

    pub fn concepts_of(&self, i: usize) -> &[u8] {
        &self.concepts[i * self.width..(i + 1) * self.width]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// `n x H x W x C` image tensor for the given sample indices.
    pub fn images_tensor(&self, indices: &[usize], spec: &DatasetSpec) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.pixels);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| f64::from(v)));
        }
        Tensor::new(vec![indices.len(), spec.height, spec.width, spec.channels], data)
            .expect("image tensor shape")
    }

    /// `n x M` concept tensor of 0.0 / 1.0.
    pub fn concepts_tensor(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.width);
        for &i in indices {
            data.extend(self.concepts_of(i).iter().map(|&v| f64::from(v)));
        }
        Tensor::new(vec![indices.len(), self.width], data).expect("concept tensor shape")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub spec: DatasetSpec,
    pub part_boxes: Vec<PartBox>,
    pub codebook: Vec<Vec<u8>>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl DatasetBundle {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }

    pub fn sample<'a>(&'a self, split: &'a Split, i: usize) -> Sample<'a> {
        Sample {
            image: split.image(i),
            concepts: split.concepts_of(i),
            label: split.label(i),
            part_boxes: &self.part_boxes,
        }
    }

    /// Concept ids grouped by owning part.
    pub fn part_table(&self) -> Vec<Vec<usize>> {
        let per = self.spec.concepts_per_part();
        (0..self.spec.parts).map(|p| (p * per..(p + 1) * per).collect()).collect()
    }

    /// `sample_id,c0..c{M-1},label` rows for one split.
    pub fn labels_csv(&self, split: &Split) -> String {
        let mut out = String::from("sample_id");
        for i in 0..self.spec.concepts {
            let _ = write!(out, ",c{i}");
        }
        out.push_str(",label\n");
        for n in 0..split.len() {
            let _ = write!(out, "{n}");
            for &c in split.concepts_of(n) {
                let _ = write!(out, ",{c}");
            }
            let _ = writeln!(out, ",{}", split.label(n));
        }
        out
    }
}

fn generate_split(spec: &DatasetSpec, boxes: &[PartBox], name: &str, count: usize) -> Result<Split> {
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut images = Vec::with_capacity(count * spec.pixels());
    let mut concepts = Vec::with_capacity(count * spec.concepts);
    for i in 0..count {
        let mut rng = substream(spec.seed, &format!("sample-{name}"), i as u64);
        let bits: Vec<u8> = (0..spec.concepts).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let mut img = render_clean(spec, boxes, &bits);
        if spec.noise > 0.0 {
            for v in img.iter_mut() {
                *v = (f64::from(*v) + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        images.extend(img);
        concepts.extend(bits);
    }
    Ok(Split {
        images,
        concepts,
        labels: Vec::new(),
        pixels: spec.pixels(),
        width: spec.concepts,
    })
}

fn draw_codebook(spec: &DatasetSpec, attempt: u64) -> Vec<Vec<u8>> {
    let mut rng = substream(spec.seed, "codebook", attempt);
    let mut rows: Vec<Vec<u8>> = Vec::with_capacity(spec.classes);
    while rows.len() < spec.classes {
        let row: Vec<u8> = (0..spec.concepts).map(|_| u8::from(rng.random_bool(0.5))).collect();
        if !rows.contains(&row) {
            rows.push(row);
        }
    }
    rows
}

fn label_split(split: &mut Split, codebook: &[Vec<u8>]) {
    split.labels = (0..split.concepts.len() / split.width)
        .map(|i| class_rule(split.concepts_of(i), codebook) as u32)
        .collect();
}

fn balanced(labels: &[u32], classes: usize) -> bool {
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l as usize] += 1);
    let uniform = labels.len() as f64 / classes as f64;
    counts
        .iter()
        .all(|&c| (c as f64 - uniform).abs() <= BALANCE_TOLERANCE * uniform)
}

/// Generates all three splits; codebooks are re-drawn until the training
/// split's class frequencies are within 30% of uniform.
pub fn generate(spec: &DatasetSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let boxes = part_boxes(spec);
    let mut train = generate_split(spec, &boxes, "train", spec.train_size)?;
    let mut val = generate_split(spec, &boxes, "val", spec.val_size)?;
    let mut test = generate_split(spec, &boxes, "test", spec.test_size)?;
    let mut codebook = None;
    for attempt in 0..CODEBOOK_ATTEMPTS {
        let candidate = draw_codebook(spec, attempt);
        label_split(&mut train, &candidate);
        if balanced(&train.labels, spec.classes) {
            codebook = Some(candidate);
            break;
        }
    }
    let codebook = codebook.ok_or_else(|| {
        Error::Config(format!(
            "no codebook within {CODEBOOK_ATTEMPTS} draws balances {} classes over {} training samples",
            spec.classes, spec.train_size
        ))
    })?;
    label_split(&mut val, &codebook);
    label_split(&mut test, &codebook);
    Ok(DatasetBundle {
        spec: spec.clone(),
        part_boxes: boxes,
        codebook,
        train,
        val,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadRef {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub name: String,
    pub count: usize,
    pub images: PayloadRef,
    pub concepts: PayloadRef,
    pub labels: PayloadRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub spec: DatasetSpec,
    pub part_of_concept: Vec<usize>,
    pub part_boxes: Vec<PartBox>,
    pub codebook: Vec<Vec<u8>>,
    pub splits: Vec<SplitManifest>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Option<&SplitManifest> {
        self.splits.iter().find(|s| s.name == name)
    }
}

fn payload(file: String, bytes: &[u8]) -> PayloadRef {
    PayloadRef {
        file,
        bytes: bytes.len(),
        sha256: sha256_hex(bytes),
    }
}

/// Writes the manifest and payloads into `dir`; returns the manifest.
pub fn save(bundle: &DatasetBundle, dir: &Path) -> Result<DatasetManifest> {
    let mut splits = Vec::new();
    for (name, split) in SPLIT_NAMES.iter().zip([&bundle.train, &bundle.val, &bundle.test]) {
        let images: Vec<u8> = split.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        let labels: Vec<u8> = split.labels.iter().flat_map(|v| v.to_le_bytes()).collect();
        let files = [
            (format!("{name}_images.f32"), images),
            (format!("{name}_concepts.u8"), split.concepts.clone()),
            (format!("{name}_labels.u32"), labels),
        ];
        for (file, bytes) in &files {
            write_file(&dir.join(file), bytes)?;
        }
        let [im, co, la] = files;
        splits.push(SplitManifest {
            name: name.to_string(),
            count: split.len(),
            images: payload(im.0, &im.1),
            concepts: payload(co.0, &co.1),
            labels: payload(la.0, &la.1),
        });
    }
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        spec: bundle.spec.clone(),
        part_of_concept: (0..bundle.spec.concepts).map(|i| bundle.spec.part_of_concept(i)).collect(),
        part_boxes: bundle.part_boxes.clone(),
        codebook: bundle.codebook.clone(),
        splits,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = read_file(&path)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Manifest(format!("unexpected format `{}`", manifest.format)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "dataset format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

fn read_checked(dir: &Path, r: &PayloadRef) -> Result<Vec<u8>> {
    let bytes = read_file(&dir.join(&r.file))?;
    let found = sha256_hex(&bytes);
    if found != r.sha256 {
        return Err(Error::Checksum {
            file: r.file.clone(),
            expected: r.sha256.clone(),
            found,
        });
    }
    Ok(bytes)
}

fn expect_len(what: &str, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::Dimension(format!(
            "{what} payload holds {found} bytes, manifest implies {expected}"
        )));
    }
    Ok(())
}

/// Loads a bundle written by [`save`], verifying checksums, then dimensions.
pub fn load(dir: &Path) -> Result<DatasetBundle> {
    let manifest = read_manifest(dir)?;
    let spec = manifest.spec.clone();
    spec.validate()?;
    if manifest.codebook.len() != spec.classes
        || manifest.codebook.iter().any(|r| r.len() != spec.concepts)
    {
        return Err(Error::Dimension(format!(
            "codebook does not match {} classes x {} concepts",
            spec.classes, spec.concepts
        )));
    }
    let mut splits = Vec::new();
    for name in SPLIT_NAMES {
        let sm = manifest
            .split(name)
            .ok_or_else(|| Error::Manifest(format!("split `{name}` missing")))?;
        let images = read_checked(dir, &sm.images)?;
        let concepts = read_checked(dir, &sm.concepts)?;
        let labels = read_checked(dir, &sm.labels)?;
        expect_len(&format!("{name} images"), images.len(), sm.count * spec.pixels() * 4)?;
        expect_len(&format!("{name} concepts"), concepts.len(), sm.count * spec.concepts)?;
        expect_len(&format!("{name} labels"), labels.len(), sm.count * 4)?;
        let labels: Vec<u32> = labels
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= spec.classes) {
            return Err(Error::Invalid(format!("{name}: label {bad} outside [0, {})", spec.classes)));
        }
        if concepts.iter().any(|&c| c > 1) {
            return Err(Error::Invalid(format!("{name}: concept bytes must be 0 or 1")));
        }
        splits.push(Split {
            images: images
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            concepts,
            labels,
            pixels: spec.pixels(),
            width: spec.concepts,
        });
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(DatasetBundle {
        part_boxes: manifest.part_boxes,
        codebook: manifest.codebook,
        spec,
        train,
        val,
        test,
    })
}
