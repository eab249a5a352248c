//! Joint training loop: SGD with momentum over the three-term objective, with
//! spectral re-clustering of the grouped stage every `recluster_period`
//! epochs.
//!
//! Schedule, per 0-based epoch `e`:
//!
//! 1. shuffle the training split from the `shuffle` stream of `(seed, e)`;
//! 2. if grouping is enabled, `e > 0` and `e % recluster_period == 0`:
//!    cluster the similarity of the first `reference_batch` shuffled samples,
//!    rename groups to overlap the previous ones, re-size head weights;
//! 3. one SGD step per batch; `lambda_g` is zero for the first
//!    `warmup_epochs` epochs. A trailing batch with fewer than 2 samples is
//!    dropped (the similarity needs two).

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::filter_stats::{fmt_f64, similarity_matrix, ResponseMatrix, SimilarityMatrix, SIMILARITY_EPS};
use crate::grouping::{disentanglement_gap, spectral_cluster, GroupAssignment};
use crate::heads::{total_loss, LossBreakdown};
use crate::model::{BoundModel, Checkpoint, DatasetDims, Model, Objective};
use crate::rng::substream;
use crate::synth::{DatasetBundle, DatasetSpec};
use crate::tensor::Tensor;

/// How concepts are tied to filter groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptGroupPolicy {
    /// Concept `i` reads group `i mod K`.
    Modulo,
    /// Concepts of part `p` read group `p mod K`.
    Parts,
    /// One group id per concept.
    Explicit(Vec<usize>),
}

impl ConceptGroupPolicy {
    pub fn resolve(&self, spec: &DatasetSpec, k: usize) -> Result<Vec<usize>> {
        let m = spec.concepts;
        let table = match self {
            ConceptGroupPolicy::Modulo => (0..m).map(|i| i % k).collect(),
            ConceptGroupPolicy::Parts => (0..m).map(|i| spec.part_of_concept(i) % k).collect(),
            ConceptGroupPolicy::Explicit(t) => t.clone(),
        };
        if table.len() != m {
            return Err(Error::Config(format!("concept_to_group has {} entries for {m} concepts", table.len())));
        }
        if let Some(g) = table.iter().find(|&&g| g >= k) {
            return Err(Error::Config(format!("concept_to_group names group {g}, but K = {k}")));
        }
        Ok(table)
    }
}

/// Per-epoch multiplier of the base learning rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 at epoch 0 towards 0 at `epochs`.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base step size, scaled per epoch by `lr_schedule`.
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    /// Gradients whose global L2 norm exceeds this are rescaled to it
    /// (0 disables clipping).
    pub grad_clip: f64,
    pub lambda_c: f64,
    pub lambda_g: f64,
    /// Number of filter groups `K`.
    pub k: usize,
    /// Re-cluster every this many epochs.
    pub recluster_period: usize,
    /// Leading epochs trained with `lambda_g = 0`.
    pub warmup_epochs: usize,
    /// Samples in the re-clustering reference batch.
    pub reference_batch: usize,
    /// When false the similarity, grouping loss and clustering are never
    /// computed.
    pub grouping: bool,
    /// Emit a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub concept_to_group: ConceptGroupPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.1,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            grad_clip: 5.0,
            lambda_c: 1.0,
            lambda_g: 0.01,
            k: 4,
            recluster_period: 2,
            warmup_epochs: 2,
            reference_batch: 128,
            grouping: true,
            checkpoint_every: 0,
            seed: 0,
            backbone: BackboneConfig::default(),
            concept_to_group: ConceptGroupPolicy::Parts,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.recluster_period == 0 {
            return fail("recluster_period must be at least 1");
        }
        if self.k == 0 {
            return fail("K must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return fail("grad_clip must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.lambda_c >= 0.0 && self.lambda_g >= 0.0) {
            return fail("lambda_c and lambda_g must be non-negative");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if self.reference_batch < 2 {
            return fail("reference_batch must be at least 2");
        }
        if !self.grouping && self.lambda_g != 0.0 {
            return fail("lambda_g must be 0 when grouping is disabled");
        }
        self.backbone.validate(self.k)
    }
}

/// Baseline configuration: no grouping loss, no clustering, one group.
pub fn vanilla_cbm_mode(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        lambda_g: 0.0,
        k: 1,
        grouping: false,
        ..config.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Global L2 norm of the gradient before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_l_y: f64,
    pub mean_l_c: f64,
    pub mean_l_g: f64,
    pub mean_l_total: f64,
    pub val_c_acc: f64,
    pub val_a_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReclusterEvent {
    pub epoch: usize,
    /// Index of the first step run under the new grouping.
    pub step: usize,
    pub assignment: GroupAssignment,
    pub gap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub reclusters: Vec<ReclusterEvent>,
}

impl TrainLog {
    /// `step,epoch,l_y,l_c,l_g,l_total`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,l_y,l_c,l_g,l_total\n");
        for s in &self.steps {
            let l = &s.loss;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.step,
                s.epoch,
                fmt_f64(l.l_y),
                fmt_f64(l.l_c),
                fmt_f64(l.l_g),
                fmt_f64(l.l_total)
            );
        }
        out
    }

    /// Rows of [`Self::to_csv`] for epochs below `epochs`, header included.
    pub fn csv_prefix(&self, epochs: usize) -> String {
        let keep = self.steps.iter().take_while(|s| s.epoch < epochs).count();
        TrainLog {
            steps: self.steps[..keep].to_vec(),
            ..TrainLog::default()
        }
        .to_csv()
    }
}

/// Similarity statistics of the final model on a reference batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalGrouping {
    pub assignment: GroupAssignment,
    /// Mean off-diagonal same-group similarity minus mean cross-group similarity.
    pub gap: f64,
    pub similarity: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub final_grouping: FinalGrouping,
    pub test_metrics: MetricsReport,
    /// Number of spectral clustering runs performed.
    pub spectral_calls: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self, data: &DatasetBundle, epochs: usize) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            dataset: DatasetDims::from(&data.spec),
            epoch: epochs,
        }
    }
}

/// Callback points of [`train_with`].
pub enum TrainEvent<'a> {
    /// After epoch `epoch` (0-based) finished; `checkpoint_due` follows
    /// `checkpoint_every`.
    EpochEnd {
        epoch: usize,
        model: &'a Model,
        record: &'a EpochRecord,
        checkpoint_due: bool,
    },
    Reclustered(&'a ReclusterEvent),
}

/// Momentum buffers, laid out like the model parameters.
#[derive(Clone, Debug)]
struct Velocity {
    backbone_w: Vec<Tensor>,
    backbone_b: Vec<Tensor>,
    head_w: Vec<Tensor>,
    head_b: Vec<f64>,
    class_w: Tensor,
    class_b: Tensor,
}

impl Velocity {
    fn zeros(m: &Model) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            backbone_w: m.backbone.weights.iter().map(z).collect(),
            backbone_b: m.backbone.biases.iter().map(z).collect(),
            head_w: m.concept_heads.weights.iter().map(z).collect(),
            head_b: vec![0.0; m.concept_heads.len()],
            class_w: z(&m.class_head.weight),
            class_b: z(&m.class_head.bias),
        }
    }
}

/// Global L2 norm of the gradient, summed in update order.
fn gradient_norm(grads: &Gradients, bound: &BoundModel) -> f64 {
    bound
        .vars()
        .into_iter()
        .flat_map(|v| grads.wrt(v).data().to_vec())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Multiplier that brings a gradient of norm `norm` within `clip`.
fn clip_factor(norm: f64, clip: f64) -> Option<f64> {
    (clip > 0.0 && norm > clip).then(|| clip / norm)
}

fn sgd(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, mu: f64, scale: Option<f64>) {
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v + scale.map_or(g, |s| s * g);
        *p -= lr * *v;
    }
}

fn apply_update(
    model: &mut Model,
    vel: &mut Velocity,
    grads: &Gradients,
    bound: &BoundModel,
    lr: f64,
    mu: f64,
    scale: Option<f64>,
) {
    let sgd = |p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, mu: f64| sgd(p, v, g, lr, mu, scale);
    for i in 0..model.backbone.weights.len() {
        let g = grads.wrt(bound.backbone.weights[i]);
        sgd(model.backbone.weights[i].data_mut(), vel.backbone_w[i].data_mut(), g.data(), lr, mu);
        let g = grads.wrt(bound.backbone.biases[i]);
        sgd(model.backbone.biases[i].data_mut(), vel.backbone_b[i].data_mut(), g.data(), lr, mu);
    }
    for i in 0..model.concept_heads.len() {
        let g = grads.wrt(bound.concept_heads.weights[i]);
        sgd(model.concept_heads.weights[i].data_mut(), vel.head_w[i].data_mut(), g.data(), lr, mu);
        let g = grads.wrt(bound.concept_heads.biases[i]);
        sgd(
            std::slice::from_mut(&mut model.concept_heads.biases[i]),
            std::slice::from_mut(&mut vel.head_b[i]),
            g.data(),
            lr,
            mu,
        );
    }
    let g = grads.wrt(bound.class_head.weight);
    sgd(model.class_head.weight.data_mut(), vel.class_w.data_mut(), g.data(), lr, mu);
    let g = grads.wrt(bound.class_head.bias);
    sgd(model.class_head.bias.data_mut(), vel.class_b.data_mut(), g.data(), lr, mu);
}

/// Shuffled training order of epoch `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "shuffle", epoch as u64));
    idx
}

/// Training state: model, optimizer buffers and log.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a DatasetBundle,
    model: Model,
    velocity: Velocity,
    learning_rate: f64,
    log: TrainLog,
    spectral_calls: usize,
    next_step: usize,
}

impl<'a> Trainer<'a> {
    /// Validates `config` against `data` and initializes a fresh model.
    pub fn new(config: &TrainConfig, data: &'a DatasetBundle) -> Result<Self> {
        config.validate()?;
        let spec = &data.spec;
        let bb = &config.backbone;
        if (bb.input_height, bb.input_width, bb.input_channels) != (spec.height, spec.width, spec.channels) {
            return Err(Error::Dimension(format!(
                "backbone expects {}x{}x{} images, dataset has {}x{}x{}",
                bb.input_height, bb.input_width, bb.input_channels, spec.height, spec.width, spec.channels
            )));
        }
        let concept_to_group = config.concept_to_group.resolve(spec, config.k)?;
        let model = Model::init(bb, concept_to_group, config.k, spec.classes, config.seed)?;
        Ok(Self {
            velocity: Velocity::zeros(&model),
            model,
            learning_rate: config.learning_rate,
            config: config.clone(),
            data,
            log: TrainLog::default(),
            spectral_calls: 0,
            next_step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn spectral_calls(&self) -> usize {
        self.spectral_calls
    }

    /// Step size used during `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.config.lr_schedule.factor(epoch, self.config.epochs)
    }

    /// Overrides the base step size for subsequent steps; zero freezes the
    /// parameters.
    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        self.learning_rate = lr;
        Ok(())
    }

    /// `lambda_g` in effect during `epoch`.
    pub fn lambda_g_at(&self, epoch: usize) -> f64 {
        if epoch < self.config.warmup_epochs {
            0.0
        } else {
            self.config.lambda_g
        }
    }

    /// Whether the schedule re-clusters at the start of `epoch`. A single
    /// group never re-clusters.
    pub fn reclusters_at(&self, epoch: usize) -> bool {
        self.config.grouping && self.config.k > 1 && epoch > 0 && epoch % self.config.recluster_period == 0
    }

    /// Similarity matrix of the current model over training samples `idx`.
    pub fn reference_similarity(&self, idx: &[usize]) -> Result<Tensor> {
        let r = self.model.responses(&self.data.train.images_tensor(idx, &self.data.spec))?;
        Ok(similarity_matrix(&ResponseMatrix::from_values(r)?)?.s)
    }

    /// Re-clusters the grouped stage on reference samples `idx` and re-syncs
    /// the heads.
    pub fn recluster(&mut self, epoch: usize, idx: &[usize]) -> Result<&ReclusterEvent> {
        let s = self.reference_similarity(idx)?;
        let seed = substream(self.config.seed, "clustering", epoch as u64).next_u64();
        let sim = SimilarityMatrix {
            s,
            epsilon: SIMILARITY_EPS,
        };
        let fresh = spectral_cluster(&sim, self.config.k, seed)?;
        self.spectral_calls += 1;
        let next = fresh.aligned_to(&self.model.assignment);
        let previous = std::mem::replace(&mut self.model.assignment, next);
        self.model
            .concept_heads
            .resync(&previous, &self.model.assignment, &mut [&mut self.velocity.head_w]);
        self.log.reclusters.push(ReclusterEvent {
            epoch,
            step: self.next_step,
            gap: disentanglement_gap(&sim.s, &self.model.assignment),
            assignment: self.model.assignment.clone(),
        });
        Ok(self.log.reclusters.last().expect("just pushed"))
    }

    /// One SGD step on training samples `batch`; logs and returns the loss of
    /// the pre-update parameters.
    pub fn step(&mut self, epoch: usize, batch: &[usize]) -> Result<LossBreakdown> {
        let (data, config) = (self.data, &self.config);
        let lambda_g = self.lambda_g_at(epoch);
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let Objective { l_y, l_c, l_g, total, .. } = self.model.objective(
            &bound,
            &mut tape,
            &data.train.images_tensor(batch, &data.spec),
            &data.train.concepts_tensor(batch),
            &data.train.labels_of(batch),
            config.lambda_c,
            config.grouping.then_some(lambda_g),
        )
        .map_err(|e| match e {
            Error::Numeric { op, detail } => Error::Numeric {
                op,
                detail: format!("{detail} (step {}, epoch {epoch})", self.next_step),
            },
            other => other,
        })?;
        let value = |v| tape.value(v).data()[0];
        let loss = LossBreakdown {
            l_total: value(total),
            ..total_loss(value(l_y), value(l_c), l_g.map_or(0.0, value), config.lambda_c, lambda_g)?
        };
        if ![loss.l_y, loss.l_c, loss.l_g, loss.l_total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.next_step,
                epoch,
                breakdown: loss,
            });
        }
        let grads = tape.backward(total)?;
        let grad_norm = gradient_norm(&grads, &bound);
        let lr = self.learning_rate_at(epoch);
        apply_update(
            &mut self.model,
            &mut self.velocity,
            &grads,
            &bound,
            lr,
            config.momentum,
            clip_factor(grad_norm, config.grad_clip),
        );
        self.log.steps.push(StepRecord {
            step: self.next_step,
            epoch,
            loss,
            grad_norm,
        });
        self.next_step += 1;
        Ok(loss)
    }

    /// Runs epoch `epoch` per the schedule: optional re-clustering, then one
    /// step per batch, then validation metrics.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<&EpochRecord> {
        let n = self.data.train.len();
        let order = epoch_order(n, self.config.seed, epoch);
        if self.reclusters_at(epoch) {
            self.recluster(epoch, &order[..self.config.reference_batch.min(n)])?;
        }
        let assignment_at_start = self.model.assignment.clone();
        let first = self.log.steps.len();
        for batch in order.chunks(self.config.batch_size).filter(|b| b.len() >= 2) {
            self.step(epoch, batch)?;
            debug_assert_eq!(self.model.assignment, assignment_at_start);
        }
        let steps = &self.log.steps[first..];
        let mean = |f: fn(&LossBreakdown) -> f64| {
            steps.iter().map(|s| f(&s.loss)).sum::<f64>() / steps.len().max(1) as f64
        };
        let val = evaluate(&self.model, &self.data.val, &self.data.spec)?;
        let record = EpochRecord {
            epoch,
            mean_l_y: mean(|l| l.l_y),
            mean_l_c: mean(|l| l.l_c),
            mean_l_g: mean(|l| l.l_g),
            mean_l_total: mean(|l| l.l_total),
            val_c_acc: val.c_acc,
            val_a_acc: val.a_acc,
        };
        self.log.epochs.push(record);
        Ok(self.log.epochs.last().expect("just pushed"))
    }

    /// Final similarity statistics and test metrics.
    pub fn finish(self) -> Result<TrainOutcome> {
        let n = self.data.train.len();
        let reference = epoch_order(n, self.config.seed, self.config.epochs);
        let s = self.reference_similarity(&reference[..self.config.reference_batch.min(n)])?;
        let final_grouping = FinalGrouping {
            gap: disentanglement_gap(&s, &self.model.assignment),
            assignment: self.model.assignment.clone(),
            similarity: s,
        };
        let test_metrics = evaluate(&self.model, &self.data.test, &self.data.spec)?;
        Ok(TrainOutcome {
            model: self.model,
            log: self.log,
            final_grouping,
            test_metrics,
            spectral_calls: self.spectral_calls,
        })
    }
}

/// Trains a fresh model on `data.train` for `config.epochs` epochs.
pub fn train(config: &TrainConfig, data: &DatasetBundle) -> Result<TrainOutcome> {
    train_with(config, data, |_| Ok(()))
}

/// [`train`] with a callback after every re-clustering and epoch.
pub fn train_with<F>(config: &TrainConfig, data: &DatasetBundle, mut on_event: F) -> Result<TrainOutcome>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    let mut trainer = Trainer::new(config, data)?;
    for epoch in 0..config.epochs {
        let reclusters_before = trainer.log.reclusters.len();
        trainer.run_epoch(epoch)?;
        if let Some(event) = trainer.log.reclusters.get(reclusters_before) {
            on_event(TrainEvent::Reclustered(event))?;
        }
        let due = config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0;
        on_event(TrainEvent::EpochEnd {
            epoch,
            model: &trainer.model,
            record: trainer.log.epochs.last().expect("epoch recorded"),
            checkpoint_due: due,
        })?;
    }
    trainer.finish()
}

/// Compact JSON-serializable summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub steps: usize,
    pub spectral_calls: usize,
    pub recluster_epochs: Vec<usize>,
    pub final_assignment: GroupAssignment,
    pub final_gap: f64,
    pub final_epoch: Option<EpochRecord>,
    pub test: MetricsReport,
}

impl From<&TrainOutcome> for RunSummary {
    fn from(o: &TrainOutcome) -> Self {
        Self {
            epochs: o.log.epochs.len(),
            steps: o.log.steps.len(),
            spectral_calls: o.spectral_calls,
            recluster_epochs: o.log.reclusters.iter().map(|r| r.epoch).collect(),
            final_assignment: o.final_grouping.assignment.clone(),
            final_gap: o.final_grouping.gap,
            final_epoch: o.log.epochs.last().cloned(),
            test: o.test_metrics.clone(),
        }
    }
}
