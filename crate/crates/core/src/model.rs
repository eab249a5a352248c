//! The assembled concept-bottleneck model and its checkpoint files.
//!
//! # Checkpoint layout
//!
//! ```text
//! <name>.json  {
//!   "format": "dcbm-checkpoint", "version": 1,
//!   "payload": "<name>.bin", "sha256": "<hex of payload>",
//!   "params": [{"name": "backbone.stage0.weight", "shape": [3,3,3,32]}, ...],
//!   "backbone": {...}, "concepts": M, "classes": Y, "k": K,
//!   "group_of": [...], "concept_to_group": [...],
//!   "dataset": {"height", "width", "channels", "concepts", "classes"},
//!   "epoch": E
//! }
//! <name>.bin   every parameter as little-endian f64, in "params" order
//! ```
//!
//! Parameter names: `backbone.stage{i}.weight` (`k x k x Cin x Cout`),
//! `backbone.stage{i}.bias`, `concept.{i}.weight` (group size),
//! `concept.{i}.bias` (`[1]`), `class.weight` (`Y x M`), `class.bias` (`Y`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, BoundBackbone};
use crate::error::{Error, Result};
use crate::filter_stats::{pooled_responses, similarity, SIMILARITY_EPS};
use crate::grouping::{grouping_loss, GroupAssignment, GROUPING_EPS};
use crate::heads::{class_loss, concept_loss, total_loss_var, BoundClassHead, BoundConceptHeads, ClassHead, ConceptHeads};
use crate::params::{decode_payload, encode_payload, payload_path, read_file, sha256_hex, write_file, ParamEntry, ParamSet};
use crate::synth::DatasetSpec;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "dcbm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREDICT_CHUNK: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub concept_heads: ConceptHeads,
    pub class_head: ClassHead,
    pub assignment: GroupAssignment,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub concept_heads: BoundConceptHeads,
    pub class_head: BoundClassHead,
}

impl BoundModel {
    /// Parameter handles, in checkpoint order.
    pub fn vars(&self) -> Vec<Var> {
        let mut vars = Vec::new();
        for (&w, &b) in self.backbone.weights.iter().zip(&self.backbone.biases) {
            vars.extend([w, b]);
        }
        for (&w, &b) in self.concept_heads.weights.iter().zip(&self.concept_heads.biases) {
            vars.extend([w, b]);
        }
        vars.extend([self.class_head.weight, self.class_head.bias]);
        vars
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub feature_map: Var,
    pub responses: Var,
    pub concept_probs: Var,
    pub logits: Var,
}

/// Loss terms of one batch as recorded on a tape. `l_g` is `None` when the
/// grouping term was not built.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub forward: Forward,
    pub l_y: Var,
    pub l_c: Var,
    pub l_g: Option<Var>,
    pub total: Var,
}

/// Concrete outputs of [`Model::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `N x C_l` pooled responses of the grouped stage.
    pub responses: Tensor,
    /// `N x M`.
    pub concept_probs: Tensor,
    /// `N x Y`.
    pub logits: Tensor,
}

impl Model {
    /// Fresh model with contiguous initial groups. Every component draws from
    /// its own named stream of `seed`.
    pub fn init(
        backbone: &BackboneConfig,
        concept_to_group: Vec<usize>,
        k: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        backbone.validate(k)?;
        let assignment = GroupAssignment::contiguous(backbone.grouped_filters(), k)?;
        let concepts = concept_to_group.len();
        Ok(Self {
            backbone: Backbone::init(backbone, seed),
            concept_heads: ConceptHeads::init(concept_to_group, &assignment, seed)?,
            class_head: ClassHead::init(concepts, classes, seed),
            assignment,
        })
    }

    pub fn concepts(&self) -> usize {
        self.concept_heads.len()
    }

    pub fn classes(&self) -> usize {
        self.class_head.classes()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundModel {
        BoundModel {
            backbone: self.backbone.bind(tape, requires_grad),
            concept_heads: self.concept_heads.bind(tape, requires_grad),
            class_head: self.class_head.bind(tape, requires_grad),
        }
    }

    pub fn forward(&self, bound: &BoundModel, tape: &mut Tape, images: Var) -> Result<Forward> {
        let fm = bound.backbone.extract_features(tape, images)?;
        let responses = tape.global_avg_pool(fm.activations)?;
        let concept_probs = bound
            .concept_heads
            .predict(tape, responses, &self.concept_heads, &self.assignment)?;
        let logits = bound.class_head.predict(tape, concept_probs)?;
        Ok(Forward {
            feature_map: fm.activations,
            responses,
            concept_probs,
            logits,
        })
    }

    /// `L_y + lambda_c L_c + lambda_g L_g` on one batch. With `lambda_g` set
    /// to `None` the similarity and grouping terms are never computed.
    #[allow(clippy::too_many_arguments)]
    pub fn objective(
        &self,
        bound: &BoundModel,
        tape: &mut Tape,
        images: &Tensor,
        concepts: &Tensor,
        labels: &[usize],
        lambda_c: f64,
        lambda_g: Option<f64>,
    ) -> Result<Objective> {
        let x = tape.constant(images.clone());
        let forward = self.forward(bound, tape, x)?;
        let l_y = class_loss(tape, forward.logits, labels)?;
        let l_c = concept_loss(tape, forward.concept_probs, concepts)?;
        let l_g = match lambda_g {
            Some(_) => {
                let s = similarity(tape, forward.responses, SIMILARITY_EPS)?;
                Some(grouping_loss(tape, s, &self.assignment, GROUPING_EPS)?)
            }
            None => None,
        };
        let total = total_loss_var(tape, l_y, l_c, l_g, lambda_c, lambda_g.unwrap_or(0.0))?;
        Ok(Objective {
            forward,
            l_y,
            l_c,
            l_g,
            total,
        })
    }

    /// Every parameter tensor, in checkpoint order.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.to_params().iter().map(|(_, t)| t.clone()).collect()
    }

    /// Copy of this model with parameters replaced, in checkpoint order.
    pub fn with_parameters(&self, params: &[Tensor]) -> Result<Self> {
        let mine = self.to_params();
        if params.len() != mine.len() {
            return Err(Error::Dimension(format!("{} tensors for {} parameters", params.len(), mine.len())));
        }
        for ((name, t), p) in mine.iter().zip(params) {
            if t.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "parameter `{name}` has shape {:?}, got {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
        }
        let mut next = self.clone();
        let mut it = params.iter().cloned();
        for i in 0..next.backbone.weights.len() {
            next.backbone.weights[i] = it.next().expect("counted");
            next.backbone.biases[i] = it.next().expect("counted");
        }
        for i in 0..next.concept_heads.len() {
            next.concept_heads.weights[i] = it.next().expect("counted");
            next.concept_heads.biases[i] = it.next().expect("counted").data()[0];
        }
        next.class_head.weight = it.next().expect("counted");
        next.class_head.bias = it.next().expect("counted");
        Ok(next)
    }

    /// Inference over `N x H x W x C` images, in fixed-size chunks.
    pub fn predict(&self, images: &Tensor) -> Result<Prediction> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!("expected N x H x W x C images, got {shape:?}")));
        }
        let n = shape[0];
        let per = shape[1..].iter().product::<usize>();
        let mut responses = Vec::new();
        let mut probs = Vec::new();
        let mut logits = Vec::new();
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let mut chunk_shape = shape.to_vec();
            chunk_shape[0] = end - start;
            let chunk = Tensor::new(chunk_shape, images.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let x = tape.constant(chunk);
            let out = self.forward(&bound, &mut tape, x)?;
            responses.extend_from_slice(tape.value(out.responses).data());
            probs.extend_from_slice(tape.value(out.concept_probs).data());
            logits.extend_from_slice(tape.value(out.logits).data());
        }
        Ok(Prediction {
            responses: Tensor::new(vec![n, self.backbone.config.grouped_filters()], responses)?,
            concept_probs: Tensor::new(vec![n, self.concepts()], probs)?,
            logits: Tensor::new(vec![n, self.classes()], logits)?,
        })
    }

    /// Pooled responses of the grouped stage only.
    pub fn responses(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bb = self.backbone.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let fm = bb.extract_features(&mut tape, x)?;
        let r = pooled_responses(&mut tape, fm.activations)?;
        Ok(tape.value(r).clone())
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, (w, b)) in self.backbone.weights.iter().zip(&self.backbone.biases).enumerate() {
            p.push(format!("backbone.stage{i}.weight"), w.clone());
            p.push(format!("backbone.stage{i}.bias"), b.clone());
        }
        for (i, (w, &b)) in self.concept_heads.weights.iter().zip(&self.concept_heads.biases).enumerate() {
            p.push(format!("concept.{i}.weight"), w.clone());
            p.push(format!("concept.{i}.bias"), Tensor::from_vec(vec![b]));
        }
        p.push("class.weight", self.class_head.weight.clone());
        p.push("class.bias", self.class_head.bias.clone());
        p
    }
}

/// Dimensions of the data a checkpoint was trained on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub concepts: usize,
    pub classes: usize,
}

impl From<&DatasetSpec> for DatasetDims {
    fn from(s: &DatasetSpec) -> Self {
        Self {
            height: s.height,
            width: s.width,
            channels: s.channels,
            concepts: s.concepts,
            classes: s.classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub payload: String,
    pub sha256: String,
    pub params: Vec<ParamEntry>,
    pub backbone: BackboneConfig,
    pub concepts: usize,
    pub classes: usize,
    pub k: usize,
    pub group_of: Vec<usize>,
    pub concept_to_group: Vec<usize>,
    pub dataset: DatasetDims,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub dataset: DatasetDims,
    /// Completed training epochs.
    pub epoch: usize,
}

impl Checkpoint {
    /// Writes `path` (manifest) and its sibling `.bin` payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (params, bytes) = encode_payload(&self.model.to_params());
        let payload = payload_path(path);
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            payload: payload
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: sha256_hex(&bytes),
            params,
            backbone: self.model.backbone.config.clone(),
            concepts: self.model.concepts(),
            classes: self.model.classes(),
            k: self.model.assignment.k(),
            group_of: self.model.assignment.group_of().to_vec(),
            concept_to_group: self.model.concept_heads.concept_to_group.clone(),
            dataset: self.dataset.clone(),
            epoch: self.epoch,
        };
        write_file(&payload, &bytes)?;
        write_file(path, serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let m: CheckpointManifest = serde_json::from_slice(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Manifest(format!("unexpected format `{}`", m.format)));
        }
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
                m.version
            )));
        }
        let dir = path.parent().unwrap_or_else(|| Path::new(""));
        let bytes = read_file(&dir.join(&m.payload))?;
        let found = sha256_hex(&bytes);
        if found != m.sha256 {
            return Err(Error::Checksum {
                file: m.payload.clone(),
                expected: m.sha256.clone(),
                found,
            });
        }
        let mut params = decode_payload(&m.params, &bytes)?;
        m.backbone.validate(m.k)?;
        if m.concept_to_group.len() != m.concepts {
            return Err(Error::Dimension(format!(
                "{} concept-to-group entries for {} concepts",
                m.concept_to_group.len(),
                m.concepts
            )));
        }
        if m.group_of.len() != m.backbone.grouped_filters() {
            return Err(Error::Dimension(format!(
                "group assignment covers {} filters, grouped stage has {}",
                m.group_of.len(),
                m.backbone.grouped_filters()
            )));
        }
        let assignment = GroupAssignment::new(m.group_of.clone(), m.k)?;

        let mut bb = Backbone::init(&m.backbone, 0);
        for i in 0..bb.weights.len() {
            bb.weights[i] = take_shaped(&mut params, &format!("backbone.stage{i}.weight"), bb.weights[i].shape())?;
            bb.biases[i] = take_shaped(&mut params, &format!("backbone.stage{i}.bias"), bb.biases[i].shape())?;
        }
        let sizes = assignment.sizes();
        let mut heads = ConceptHeads {
            weights: Vec::with_capacity(m.concepts),
            biases: Vec::with_capacity(m.concepts),
            concept_to_group: m.concept_to_group.clone(),
        };
        for (i, &g) in m.concept_to_group.iter().enumerate() {
            let size = *sizes
                .get(g)
                .ok_or_else(|| Error::Dimension(format!("concept {i} maps to missing group {g}")))?;
            heads.weights.push(take_shaped(&mut params, &format!("concept.{i}.weight"), &[size])?);
            heads.biases.push(take_shaped(&mut params, &format!("concept.{i}.bias"), &[1])?.data()[0]);
        }
        let class_head = ClassHead {
            weight: take_shaped(&mut params, "class.weight", &[m.classes, m.concepts])?,
            bias: take_shaped(&mut params, "class.bias", &[m.classes])?,
        };
        if let Some((name, _)) = params.iter().next() {
            return Err(Error::Manifest(format!("unexpected parameter `{name}`")));
        }
        Ok(Self {
            model: Model {
                backbone: bb,
                concept_heads: heads,
                class_head,
                assignment,
            },
            dataset: m.dataset,
            epoch: m.epoch,
        })
    }

    /// Fails unless `spec` has the dimensions this checkpoint was trained on.
    pub fn check_dataset(&self, spec: &DatasetSpec) -> Result<()> {
        let found = DatasetDims::from(spec);
        if found != self.dataset {
            return Err(Error::Dimension(format!(
                "checkpoint expects data {:?}, dataset provides {:?}",
                self.dataset, found
            )));
        }
        Ok(())
    }
}

fn take_shaped(params: &mut ParamSet, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = params.take(name)?;
    if t.shape() != shape {
        return Err(Error::Dimension(format!(
            "parameter `{name}` has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}
