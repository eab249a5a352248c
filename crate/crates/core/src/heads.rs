//! Concept heads over grouped filter responses, the linear class head over
//! predicted concepts, and the three-term training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::filter_stats::ResponseMatrix;
use crate::grouping::GroupAssignment;
use crate::rng::substream;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// One logistic head per concept, each reading only the pooled responses of
/// the filters in its assigned group (ascending filter order).
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptHeads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<f64>,
    pub concept_to_group: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BoundConceptHeads {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl ConceptHeads {
    /// Glorot-uniform weights sized to the current groups, zero biases.
    pub fn init(concept_to_group: Vec<usize>, assignment: &GroupAssignment, seed: u64) -> Result<Self> {
        let sizes = assignment.sizes();
        let mut rng = substream(seed, "concept-head-init", 0);
        let mut weights = Vec::with_capacity(concept_to_group.len());
        for (i, &g) in concept_to_group.iter().enumerate() {
            let size = *sizes.get(g).ok_or_else(|| {
                Error::Config(format!("concept {i} maps to group {g}, but only {} groups exist", sizes.len()))
            })?;
            let a = (6.0 / (size as f64 + 1.0)).sqrt();
            weights.push(Tensor::from_vec((0..size).map(|_| rng.random_range(-a..a)).collect()));
        }
        Ok(Self {
            biases: vec![0.0; concept_to_group.len()],
            weights,
            concept_to_group,
        })
    }

    pub fn len(&self) -> usize {
        self.concept_to_group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concept_to_group.is_empty()
    }

    /// Fails unless every head's width matches its group's current size.
    pub fn check_sync(&self, assignment: &GroupAssignment) -> Result<()> {
        let sizes = assignment.sizes();
        for (i, (&g, w)) in self.concept_to_group.iter().zip(&self.weights).enumerate() {
            match sizes.get(g) {
                Some(&size) if size == w.len() => {}
                Some(&size) => {
                    return Err(Error::Desync(format!(
                        "concept {i} head has {} weights but group {g} now has {size} filters; \
                         re-sync the heads after re-clustering",
                        w.len()
                    )))
                }
                None => {
                    return Err(Error::Desync(format!(
                        "concept {i} maps to group {g}, outside the {} current groups",
                        sizes.len()
                    )))
                }
            }
        }
        Ok(())
    }

    /// Re-sizes head weights after the grouping changed from `old` to `new`.
    /// Filters that stay in a concept's group keep their weight, newcomers
    /// start at zero. `extra` tensors shaped like the weights (optimizer
    /// state) are re-sized the same way.
    pub fn resync(&mut self, old: &GroupAssignment, new: &GroupAssignment, extra: &mut [&mut Vec<Tensor>]) {
        for (i, &g) in self.concept_to_group.iter().enumerate() {
            let before = old.members(g);
            let after = new.members(g);
            let remap = |t: &Tensor| {
                Tensor::from_vec(
                    after
                        .iter()
                        .map(|f| before.iter().position(|b| b == f).map_or(0.0, |p| t.data()[p]))
                        .collect(),
                )
            };
            self.weights[i] = remap(&self.weights[i]);
            for e in extra.iter_mut() {
                e[i] = remap(&e[i]);
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundConceptHeads {
        let weights = self
            .weights
            .iter()
            .map(|w| {
                let row = w.clone().reshape(vec![1, w.len()]).expect("row shape");
                tape.leaf(row, requires_grad)
            })
            .collect();
        let biases = self
            .biases
            .iter()
            .map(|&b| tape.leaf(Tensor::from_vec(vec![b]), requires_grad))
            .collect();
        BoundConceptHeads { weights, biases }
    }

    /// `sigmoid(w_i . z_i + b_i)` for plain per-concept activation vectors.
    pub fn predict_sample(&self, z: &[Vec<f64>]) -> Result<Vec<f64>> {
        if z.len() != self.len() {
            return Err(Error::Dimension(format!("{} activation vectors for {} concepts", z.len(), self.len())));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut probs = Vec::with_capacity(z.len());
        for (i, zi) in z.iter().enumerate() {
            if zi.len() != self.weights[i].len() {
                return Err(Error::Desync(format!(
                    "concept {i}: {} activations for a head of width {}",
                    zi.len(),
                    self.weights[i].len()
                )));
            }
            let x = tape.constant(Tensor::new(vec![1, zi.len()], zi.clone())?);
            let logit = tape.linear(x, bound.weights[i], bound.biases[i])?;
            let p = tape.sigmoid(logit);
            probs.push(tape.value(p).data()[0]);
        }
        Ok(probs)
    }
}

impl BoundConceptHeads {
    /// Concept probabilities `N x M` from pooled responses `N x C_l`.
    pub fn predict(
        &self,
        tape: &mut Tape,
        responses: Var,
        heads: &ConceptHeads,
        assignment: &GroupAssignment,
    ) -> Result<Var> {
        heads.check_sync(assignment)?;
        let mut logits = Vec::with_capacity(heads.len());
        for (i, &g) in heads.concept_to_group.iter().enumerate() {
            let z = tape.select_columns(responses, &assignment.members(g))?;
            logits.push(tape.linear(z, self.weights[i], self.biases[i])?);
        }
        let all = tape.concat_columns(&logits)?;
        Ok(tape.sigmoid(all))
    }
}

/// Activation vector of each concept's group for sample `n`.
pub fn aggregate_group_activation(
    r: &ResponseMatrix,
    assignment: &GroupAssignment,
    heads: &ConceptHeads,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    heads.check_sync(assignment)?;
    Ok(heads
        .concept_to_group
        .iter()
        .map(|&g| assignment.members(g).iter().map(|&j| r.values.at2(n, j)).collect())
        .collect())
}

/// Linear map from concept values (`M`) to class logits (`Y`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHead {
    /// `Y x M`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundClassHead {
    pub weight: Var,
    pub bias: Var,
}

impl ClassHead {
    pub fn init(concepts: usize, classes: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "class-head-init", 0);
        let a = (6.0 / (concepts + classes) as f64).sqrt();
        let data = (0..concepts * classes).map(|_| rng.random_range(-a..a)).collect();
        Self {
            weight: Tensor::new(vec![classes, concepts], data).expect("class head shape"),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn concepts(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundClassHead {
        BoundClassHead {
            weight: tape.leaf(self.weight.clone(), requires_grad),
            bias: tape.leaf(self.bias.clone(), requires_grad),
        }
    }

    /// Logits for concept values `N x M` (probabilities or hard 0/1).
    pub fn logits(&self, concepts: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let c = tape.constant(concepts.clone());
        let y = bound.predict(&mut tape, c)?;
        Ok(tape.value(y).clone())
    }
}

impl BoundClassHead {
    pub fn predict(&self, tape: &mut Tape, concepts: Var) -> Result<Var> {
        tape.linear(concepts, self.weight, self.bias)
    }
}

/// Mean binary cross-entropy over all `(sample, concept)` pairs.
pub fn concept_loss(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    if shape != targets.shape() {
        return Err(Error::Shape {
            op: "concept_loss",
            lhs: shape,
            rhs: targets.shape().to_vec(),
        });
    }
    if let Some(bad) = targets.data().iter().find(|&&c| c != 0.0 && c != 1.0) {
        return Err(Error::Invalid(format!("concept labels must be 0 or 1, found {bad}")));
    }
    let p = tape.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = tape.log(p)?;
    let neg_p = tape.neg(p);
    let q = tape.add_scalar(neg_p, 1.0);
    let log_q = tape.log(q)?;
    let c = tape.constant(targets.clone());
    let not_c = tape.constant(Tensor::new(
        targets.shape().to_vec(),
        targets.data().iter().map(|v| 1.0 - v).collect(),
    )?);
    let pos = tape.mul(c, log_p)?;
    let neg = tape.mul(not_c, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll);
    Ok(tape.neg(mean))
}

/// Mean softmax cross-entropy of `N x Y` logits against class ids.
pub fn class_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.value(logits).shape().get(1).copied().unwrap_or(0);
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Invalid(format!("class id {bad} outside [0, {classes})")));
    }
    let log_probs = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(log_probs, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.neg(mean))
}

/// Components of one step's objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_y: f64,
    pub l_c: f64,
    pub l_g: f64,
    pub lambda_c: f64,
    pub lambda_g: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// `l_y + lambda_c * l_c + lambda_g * l_g`, evaluated in that order.
    pub fn recompute(&self) -> f64 {
        self.l_y + self.lambda_c * self.l_c + self.lambda_g * self.l_g
    }
}

fn check_lambdas(lambda_c: f64, lambda_g: f64) -> Result<()> {
    if !(lambda_c >= 0.0 && lambda_g >= 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got lambda_c = {lambda_c}, lambda_g = {lambda_g}"
        )));
    }
    Ok(())
}

pub fn total_loss(l_y: f64, l_c: f64, l_g: f64, lambda_c: f64, lambda_g: f64) -> Result<LossBreakdown> {
    check_lambdas(lambda_c, lambda_g)?;
    let mut b = LossBreakdown {
        l_y,
        l_c,
        l_g,
        lambda_c,
        lambda_g,
        l_total: 0.0,
    };
    b.l_total = b.recompute();
    Ok(b)
}

/// Differentiable weighted sum; `l_g = None` omits the grouping term.
pub fn total_loss_var(
    tape: &mut Tape,
    l_y: Var,
    l_c: Var,
    l_g: Option<Var>,
    lambda_c: f64,
    lambda_g: f64,
) -> Result<Var> {
    check_lambdas(lambda_c, lambda_g)?;
    let wc = tape.mul_scalar(l_c, lambda_c);
    let mut total = tape.add(l_y, wc)?;
    if let Some(l_g) = l_g {
        let wg = tape.mul_scalar(l_g, lambda_g);
        total = tape.add(total, wg)?;
    }
    Ok(total)
}
