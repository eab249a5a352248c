//! Small convolutional feature extractor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

/// One convolution stage: `kernel x kernel`, `padding = kernel / 2`, ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl StageConfig {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding: self.kernel / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Stage whose output is grouped and pooled for the concept heads.
    pub grouped_layer_index: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |filters| StageConfig {
            filters,
            kernel: 3,
            stride: 2,
        };
        Self {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            stages: vec![stage(32), stage(32), stage(32)],
            grouped_layer_index: 2,
        }
    }
}

fn out_dim(input: usize, stage: &StageConfig) -> usize {
    let g = stage.geometry();
    (input + 2 * g.padding - stage.kernel) / stage.stride + 1
}

impl BackboneConfig {
    /// Checks the stage list and that the grouped stage can host `k` groups.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::Config("backbone input dimensions must be positive".into()));
        }
        if self.grouped_layer_index >= self.stages.len() {
            return Err(Error::Config(format!(
                "grouped_layer_index {} addresses no stage ({} stages)",
                self.grouped_layer_index,
                self.stages.len()
            )));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (i, s) in self.stages.iter().enumerate() {
            if s.filters == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::Config(format!("stage {i} has a zero filter count, kernel or stride")));
            }
            if h + 2 * (s.kernel / 2) < s.kernel || w + 2 * (s.kernel / 2) < s.kernel {
                return Err(Error::Config(format!("stage {i} kernel exceeds its {h}x{w} input")));
            }
            h = out_dim(h, s);
            w = out_dim(w, s);
        }
        let filters = self.grouped_filters();
        if k > filters {
            return Err(Error::Config(format!(
                "{k} groups requested but the grouped stage has only {filters} filters"
            )));
        }
        Ok(())
    }

    /// `C_l`, the filter count of the grouped stage.
    pub fn grouped_filters(&self) -> usize {
        self.stages[self.grouped_layer_index].filters
    }

    /// `(H_l, W_l, C_l)` of the grouped stage's output.
    pub fn grouped_dims(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for s in &self.stages[..=self.grouped_layer_index] {
            h = out_dim(h, s);
            w = out_dim(w, s);
        }
        (h, w, self.grouped_filters())
    }

    fn stage_inputs(&self) -> impl Iterator<Item = (usize, &StageConfig)> {
        let mut cin = self.input_channels;
        self.stages[..=self.grouped_layer_index].iter().map(move |s| {
            let c = cin;
            cin = s.filters;
            (c, s)
        })
    }
}

/// Convolution weights (`k x k x Cin x Cout`) and biases per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// A backbone's parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    geometries: Vec<ConvGeometry>,
    dims: (usize, usize, usize),
    config_input: (usize, usize, usize),
    layer_index: usize,
}

/// Activations `N x H_l x W_l x C_l` of the grouped stage.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMapBatch {
    pub activations: Var,
    pub layer_index: usize,
}

impl Backbone {
    /// Glorot-uniform weights from the `backbone-init` stream, zero biases.
    pub fn init(config: &BackboneConfig, seed: u64) -> Self {
        let mut rng = substream(seed, "backbone-init", 0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (cin, s) in config.stage_inputs() {
            let fan_in = (s.kernel * s.kernel * cin) as f64;
            let fan_out = (s.kernel * s.kernel * s.filters) as f64;
            let a = (6.0 / (fan_in + fan_out)).sqrt();
            let n = s.kernel * s.kernel * cin * s.filters;
            let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
            weights.push(
                Tensor::new(vec![s.kernel, s.kernel, cin, s.filters], data).expect("kernel shape"),
            );
            biases.push(Tensor::zeros(&[s.filters]));
        }
        Self {
            config: config.clone(),
            weights,
            biases,
        }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundBackbone {
        let weights = self.weights.iter().map(|w| tape.leaf(w.clone(), requires_grad)).collect();
        let biases = self.biases.iter().map(|b| tape.leaf(b.clone(), requires_grad)).collect();
        BoundBackbone {
            weights,
            biases,
            geometries: self
                .config
                .stage_inputs()
                .map(|(_, s)| s.geometry())
                .collect(),
            dims: self.config.grouped_dims(),
            config_input: (
                self.config.input_height,
                self.config.input_width,
                self.config.input_channels,
            ),
            layer_index: self.config.grouped_layer_index,
        }
    }
}

impl BoundBackbone {
    /// Runs `images` (`N x H x W x Cin`) through every stage up to the grouped one.
    pub fn extract_features(&self, tape: &mut Tape, images: Var) -> Result<FeatureMapBatch> {
        let shape = tape.value(images).shape().to_vec();
        let (h, w, c) = self.config_input;
        if shape.len() != 4 || shape[1..] != [h, w, c] {
            return Err(Error::Dimension(format!(
                "backbone expects N x {h} x {w} x {c} images, got {shape:?}"
            )));
        }
        let mut x = images;
        for ((&wv, &bv), &geom) in self.weights.iter().zip(&self.biases).zip(&self.geometries) {
            let z = tape.conv2d(x, wv, bv, geom)?;
            x = tape.relu(z);
        }
        debug_assert_eq!(
            tape.value(x).shape()[1..],
            [self.dims.0, self.dims.1, self.dims.2]
        );
        Ok(FeatureMapBatch {
            activations: x,
            layer_index: self.layer_index,
        })
    }
}
