//! Accuracy metrics, test-time concept interventions, and the exports built
//! on them.
//!
//! CSV schemas:
//!
//! ```text
//! intervention curve   mode,rate,a_acc          rows sorted by mode, then rate
//! cluster embeddings   filter_id,group_id,r0,...,r{B-1}
//! ```
//!
//! Floats are written with 17 significant digits.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_stats::fmt_f64;
use crate::heads::ClassHead;
use crate::model::Model;
use crate::rng::substream;
use crate::synth::{DatasetSpec, Split};
use crate::tensor::Tensor;

pub const DEFAULT_REPETITIONS: usize = 5;
pub const DEFAULT_REFERENCE_SIZE: usize = 128;

/// Hard concept prediction: `p >= 0.5` predicts 1.
pub fn binarize(p: f64) -> f64 {
    if p >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Fraction of correct `(sample, concept)` pairs over `N * M`.
pub fn concept_accuracy(probs: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape("concept_accuracy", probs, truth)?;
    let correct = probs
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(&p, &c)| binarize(p) == c)
        .count();
    Ok(correct as f64 / probs.len() as f64)
}

fn class_hits(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Shape {
            op: "class_accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    Ok((0..labels.len()).filter(|&n| argmax(logits.row(n)) == labels[n]).count())
}

/// Fraction of samples whose argmax logit is the label.
pub fn class_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(class_hits(logits, labels)? as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub c_acc: f64,
    pub a_acc: f64,
    pub per_concept: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn compute(probs: &Tensor, truth: &Tensor, logits: &Tensor, labels: &[usize]) -> Result<Self> {
        same_shape("metrics", probs, truth)?;
        let (n, m) = (probs.shape()[0], probs.shape()[1]);
        let classes = logits.shape().get(1).copied().unwrap_or(0);
        let mut hits = vec![0usize; m];
        for s in 0..n {
            for (i, h) in hits.iter_mut().enumerate() {
                if binarize(probs.at2(s, i)) == truth.at2(s, i) {
                    *h += 1;
                }
            }
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        let a_hits = class_hits(logits, labels)?;
        for (s, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Invalid(format!("label {y} outside [0, {classes})")));
            }
            confusion[y][argmax(logits.row(s))] += 1;
        }
        let total: usize = hits.iter().sum();
        Ok(Self {
            samples: n,
            c_acc: total as f64 / (n * m) as f64,
            a_acc: a_hits as f64 / n as f64,
            per_concept: hits.iter().map(|&h| h as f64 / n as f64).collect(),
            confusion,
        })
    }
}

fn all_indices(split: &Split) -> Vec<usize> {
    (0..split.len()).collect()
}

/// Metrics of `model` over a whole split.
pub fn evaluate(model: &Model, split: &Split, spec: &DatasetSpec) -> Result<MetricsReport> {
    let idx = all_indices(split);
    let pred = model.predict(&split.images_tensor(&idx, spec))?;
    MetricsReport::compute(&pred.concept_probs, &split.concepts_tensor(&idx), &pred.logits, &split.labels_of(&idx))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    Correct,
    Incorrect,
}

impl InterventionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InterventionMode::Correct => "correct",
            InterventionMode::Incorrect => "incorrect",
        }
    }
}

impl std::str::FromStr for InterventionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "correct" => Ok(Self::Correct),
            "incorrect" => Ok(Self::Incorrect),
            other => Err(Error::Config(format!("unknown intervention mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionUnit {
    PerConcept,
    PerConceptGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionPolicy {
    pub mode: InterventionMode,
    pub rate: f64,
    pub unit: InterventionUnit,
    pub concept_groups: Option<Vec<Vec<usize>>>,
    pub seed: u64,
}

impl InterventionPolicy {
    pub fn per_concept(mode: InterventionMode, rate: f64, seed: u64) -> Self {
        Self {
            mode,
            rate,
            unit: InterventionUnit::PerConcept,
            concept_groups: None,
            seed,
        }
    }

    /// Intervention units: singleton concepts or the configured groups.
    pub fn units(&self, concepts: usize) -> Result<Vec<Vec<usize>>> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Invalid(format!("intervention rate {} outside [0, 1]", self.rate)));
        }
        match self.unit {
            InterventionUnit::PerConcept => Ok((0..concepts).map(|i| vec![i]).collect()),
            InterventionUnit::PerConceptGroup => {
                let groups = self
                    .concept_groups
                    .clone()
                    .ok_or_else(|| Error::Invalid("per-group intervention needs concept groups".into()))?;
                let mut seen = vec![false; concepts];
                for &i in groups.iter().flatten() {
                    if i >= concepts || std::mem::replace(&mut seen[i], true) {
                        return Err(Error::Invalid(format!(
                            "concept groups must partition 0..{concepts}; concept {i} is out of range or repeated"
                        )));
                    }
                }
                if seen.iter().any(|s| !s) || groups.iter().any(Vec::is_empty) {
                    return Err(Error::Invalid(format!("concept groups must partition 0..{concepts}")));
                }
                Ok(groups)
            }
        }
    }
}

/// Replaces a seeded fraction of each sample's intervention units with the
/// ground truth (correct mode) or its complement (incorrect mode).
///
/// Each sample draws one permutation of the units from `(seed, sample)` and
/// takes its first `round(rate * units)` entries, so selections are nested
/// across rates.
pub fn intervene(probs: &Tensor, truth: &Tensor, policy: &InterventionPolicy) -> Result<Tensor> {
    same_shape("intervene", probs, truth)?;
    let (n, m) = (probs.shape()[0], probs.shape()[1]);
    let units = policy.units(m)?;
    let take = (policy.rate * units.len() as f64).round() as usize;
    let mut out = probs.clone();
    let mut order: Vec<usize> = (0..units.len()).collect();
    for s in 0..n {
        order.sort_unstable();
        order.shuffle(&mut substream(policy.seed, "intervention", s as u64));
        for &u in &order[..take] {
            for &i in &units[u] {
                let c = truth.at2(s, i);
                out.data_mut()[s * m + i] = match policy.mode {
                    InterventionMode::Correct => c,
                    InterventionMode::Incorrect => 1.0 - c,
                };
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub mode: InterventionMode,
    pub rate: f64,
    pub a_acc: f64,
}

/// Class accuracy after intervention for every mode and rate, pooled over
/// `repetitions` seeded draws. `template` supplies the unit, groups and base
/// seed; its mode and rate are ignored.
pub fn intervention_curve(
    model: &Model,
    split: &Split,
    spec: &DatasetSpec,
    rates: &[f64],
    modes: &[InterventionMode],
    template: &InterventionPolicy,
    repetitions: usize,
) -> Result<Vec<CurveRow>> {
    if repetitions == 0 {
        return Err(Error::Invalid("at least one repetition is required".into()));
    }
    let idx = all_indices(split);
    let pred = model.predict(&split.images_tensor(&idx, spec))?;
    let truth = split.concepts_tensor(&idx);
    let labels = split.labels_of(&idx);
    let mut modes = modes.to_vec();
    modes.sort_unstable();
    modes.dedup();
    let mut rates = rates.to_vec();
    rates.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    for &mode in &modes {
        for &rate in &rates {
            let mut hits = 0usize;
            for r in 0..repetitions {
                let policy = InterventionPolicy {
                    mode,
                    rate,
                    seed: repetition_seed(template.seed, r),
                    ..template.clone()
                };
                let c = intervene(&pred.concept_probs, &truth, &policy)?;
                hits += class_hits(&model.class_head.logits(&c)?, &labels)?;
            }
            rows.push(CurveRow {
                mode,
                rate,
                a_acc: hits as f64 / (repetitions * labels.len()) as f64,
            });
        }
    }
    Ok(rows)
}

fn repetition_seed(seed: u64, r: usize) -> u64 {
    use rand::RngCore;
    substream(seed, "intervention-repetition", r as u64).next_u64()
}

/// Class accuracy of the class head fed the ground-truth concepts.
pub fn true_concept_accuracy(head: &ClassHead, split: &Split) -> Result<f64> {
    let idx = all_indices(split);
    class_accuracy(&head.logits(&split.concepts_tensor(&idx))?, &split.labels_of(&idx))
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("mode,rate,a_acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.mode.as_str(), fmt_f64(r.rate), fmt_f64(r.a_acc));
    }
    out
}

/// Line chart of the curve, one polyline per mode.
pub fn curve_svg(rows: &[CurveRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let x = |r: f64| pad + r * (w - 2.0 * pad);
    let y = |a: f64| h - pad - a * (h - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{t}\" text-anchor=\"middle\" font-size=\"12\">intervention rate</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {cy})\">class accuracy</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        cy = h / 2.0,
        t = h - 12.0,
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{tick}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{tick}</text>",
            x(tick),
            h - pad + 14.0,
            pad - 4.0,
            y(tick) + 3.0
        );
    }
    for (mode, color) in [(InterventionMode::Correct, "#1f77b4"), (InterventionMode::Incorrect, "#d62728")] {
        let points: Vec<String> = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| format!("{:.2},{:.2}", x(r.rate), y(r.a_acc)))
            .collect();
        if points.is_empty() {
            continue;
        }
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let ly = if mode == InterventionMode::Correct { pad } else { pad + 16.0 };
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{ly}\" font-size=\"11\" fill=\"{color}\">{}</text>",
            w - pad - 60.0,
            mode.as_str()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Seeded reference subset of a split: the first `size` entries of a
/// shuffled index order.
pub fn reference_indices(len: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut substream(seed, "reference-batch", 0));
    idx.truncate(size.min(len));
    idx
}

/// One row per grouped-stage filter: its group and its pooled responses over
/// a seeded reference batch.
pub fn export_cluster_embeddings(
    model: &Model,
    split: &Split,
    spec: &DatasetSpec,
    seed: u64,
    reference_size: usize,
) -> Result<String> {
    let idx = reference_indices(split.len(), reference_size, seed);
    let r = model.responses(&split.images_tensor(&idx, spec))?;
    let mut out = String::from("filter_id,group_id");
    for b in 0..idx.len() {
        let _ = write!(out, ",r{b}");
    }
    out.push('\n');
    for (f, &g) in model.assignment.group_of().iter().enumerate() {
        let _ = write!(out, "{f},{g}");
        for b in 0..idx.len() {
            let _ = write!(out, ",{}", fmt_f64(r.at2(b, f)));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn concept_accuracy_cases() {
        let truth = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(concept_accuracy(&t(&[vec![0.9, 0.1], vec![0.2, 0.5]]), &truth).unwrap(), 1.0);
        assert_eq!(concept_accuracy(&t(&[vec![0.1, 0.9], vec![0.7, 0.4]]), &truth).unwrap(), 0.0);
        assert_eq!(concept_accuracy(&t(&[vec![0.9, 0.9], vec![0.1, 0.1]]), &truth).unwrap(), 0.5);
        assert!(concept_accuracy(&t(&[vec![0.9]]), &truth).is_err());
    }

    #[test]
    fn class_accuracy_cases() {
        let logits = t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 1.0], vec![0.5, 0.5]]);
        assert_eq!(class_accuracy(&logits, &[0, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(class_accuracy(&logits, &[1, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(class_accuracy(&logits, &[0, 1, 0, 1]).unwrap(), 0.75);
    }

    #[test]
    fn report_c_acc_is_mean_of_per_concept() {
        let probs = t(&[vec![0.9, 0.2, 0.6], vec![0.4, 0.7, 0.1], vec![0.5, 0.5, 0.5]]);
        let truth = t(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]]);
        let logits = t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let r = MetricsReport::compute(&probs, &truth, &logits, &[0, 0, 1]).unwrap();
        let mean = r.per_concept.iter().sum::<f64>() / 3.0;
        assert!((r.c_acc - mean).abs() <= 1e-12);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![1, 0]]);
    }

    #[test]
    fn intervention_extremes() {
        let probs = t(&[vec![0.3, 0.8, 0.6], vec![0.1, 0.4, 0.9]]);
        let truth = t(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]);
        let p = |mode, rate| InterventionPolicy::per_concept(mode, rate, 5);
        assert_eq!(intervene(&probs, &truth, &p(InterventionMode::Correct, 0.0)).unwrap(), probs);
        assert_eq!(intervene(&probs, &truth, &p(InterventionMode::Correct, 1.0)).unwrap(), truth);
        let flipped = intervene(&probs, &truth, &p(InterventionMode::Incorrect, 1.0)).unwrap();
        assert!(flipped.data().iter().zip(truth.data()).all(|(a, b)| *a == 1.0 - b));
        assert!(intervene(&probs, &truth, &p(InterventionMode::Correct, 1.5)).is_err());
    }

    #[test]
    fn group_units_must_partition() {
        let mut p = InterventionPolicy::per_concept(InterventionMode::Correct, 0.5, 0);
        p.unit = InterventionUnit::PerConceptGroup;
        p.concept_groups = Some(vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(p.units(4).unwrap().len(), 2);
        p.concept_groups = Some(vec![vec![0, 1], vec![1, 3]]);
        assert!(p.units(4).is_err());
        p.concept_groups = None;
        assert!(p.units(4).is_err());
    }

    #[test]
    fn spearman_reference_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), None);
        // Average ranks for ties: x ranks (1,2,3,4), y ranks (1,2.5,2.5,4).
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((rho - 0.9486832980505138).abs() < 1e-15);
    }

    #[test]
    fn svg_has_two_series() {
        let rows = vec![
            CurveRow { mode: InterventionMode::Correct, rate: 0.0, a_acc: 0.5 },
            CurveRow { mode: InterventionMode::Correct, rate: 1.0, a_acc: 1.0 },
            CurveRow { mode: InterventionMode::Incorrect, rate: 0.0, a_acc: 0.5 },
            CurveRow { mode: InterventionMode::Incorrect, rate: 1.0, a_acc: 0.0 },
        ];
        let svg = curve_svg(&rows);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(curve_csv(&rows).starts_with("mode,rate,a_acc\ncorrect,0.0000000000000000e0,"));
    }
}
