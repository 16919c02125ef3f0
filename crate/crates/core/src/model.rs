//! Plain convolutional teacher/student networks with activation taps.
//!
//! Layout: a 3×3 stem convolution, three stages of `depth_blocks` 3×3
//! conv+ReLU layers at widths `base·k`, `2·base·k`, `4·base·k` (the first conv
//! of stages 2 and 3 has stride 2), global average pooling and a linear
//! classifier.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::similarity::{Taps, LAST_CONV};
use crate::tensor::{Float, Tensor};

pub const STAGES: usize = 3;
pub const INPUT_CHANNELS: usize = 3;
const KERNEL: usize = 3;

fn default_input_size() -> usize {
    32
}

fn default_base_width() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvNetSpec {
    /// Conv layers per stage.
    pub depth_blocks: usize,
    /// Width multiplier `k`.
    pub width: usize,
    pub num_classes: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Channels of the stem and of stage 1 at `k = 1`.
    #[serde(default = "default_base_width")]
    pub base_width: usize,
}

impl ConvNetSpec {
    pub fn new(depth_blocks: usize, width: usize, num_classes: usize) -> Self {
        ConvNetSpec {
            depth_blocks,
            width,
            num_classes,
            input_size: default_input_size(),
            base_width: default_base_width(),
        }
    }

    pub fn default_teacher() -> Self {
        Self::new(4, 4, 10)
    }

    pub fn default_student() -> Self {
        Self::new(2, 1, 10)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth_blocks", self.depth_blocks),
            ("width", self.width),
            ("num_classes", self.num_classes),
            ("base_width", self.base_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("network {name} must be positive")));
            }
        }
        if self.input_size < 4 || !self.input_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of 4, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        (self.base_width * self.width) << (stage - 1)
    }

    /// Spatial extent of stage `stage` (1-based) output.
    pub fn stage_size(&self, stage: usize) -> usize {
        self.input_size >> (stage - 1)
    }

    /// `(name, c_out, c_in, stride)` for every conv layer in forward order.
    fn conv_layers(&self) -> Vec<(String, usize, usize, usize)> {
        let mut layers = vec![("stem".to_string(), self.base_width, INPUT_CHANNELS, 1)];
        let mut c_in = self.base_width;
        for s in 1..=STAGES {
            let c_out = self.stage_width(s);
            for j in 0..self.depth_blocks {
                let stride = if s > 1 && j == 0 { 2 } else { 1 };
                layers.push((format!("stage{s}.conv{j}"), c_out, c_in, stride));
                c_in = c_out;
            }
        }
        layers
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, c_out, c_in, _) in self.conv_layers() {
            out.push((format!("{name}.weight"), vec![c_out, c_in, KERNEL, KERNEL]));
            out.push((format!("{name}.bias"), vec![c_out]));
        }
        let feat = self.stage_width(STAGES);
        out.push(("fc.weight".into(), vec![feat, self.num_classes]));
        out.push(("fc.bias".into(), vec![self.num_classes]));
        out
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let conv = |c_out: usize, c_in: usize| c_out * c_in * KERNEL * KERNEL + c_out;
        let mut total = conv(self.base_width, INPUT_CHANNELS);
        let mut c_in = self.base_width;
        for s in 1..=STAGES {
            let w = self.stage_width(s);
            total += conv(w, c_in) + (self.depth_blocks - 1) * conv(w, w);
            c_in = w;
        }
        total + c_in * self.num_classes + self.num_classes
    }

    /// Tap ids in forward order; aliases follow the layer they name.
    pub fn tap_ids(&self) -> Vec<String> {
        let mut ids = vec!["stem".to_string()];
        for s in 1..=STAGES {
            for j in 0..self.depth_blocks {
                ids.push(format!("stage{s}.conv{j}"));
            }
            ids.push(format!("stage{s}.last"));
        }
        ids.push(LAST_CONV.to_string());
        ids
    }

    /// Shape of a tapped map for batch size `b`.
    pub fn tap_shape(&self, id: &str, b: usize) -> Option<Vec<usize>> {
        if id == "stem" {
            return Some(vec![b, self.base_width, self.input_size, self.input_size]);
        }
        if id == LAST_CONV {
            return self.tap_shape(&format!("stage{STAGES}.last"), b);
        }
        let (stage, rest) = id.strip_prefix("stage")?.split_once('.')?;
        let s: usize = stage.parse().ok().filter(|s| (1..=STAGES).contains(s))?;
        let valid = rest == "last"
            || rest
                .strip_prefix("conv")
                .and_then(|j| j.parse::<usize>().ok())
                .is_some_and(|j| j < self.depth_blocks);
        valid.then(|| vec![b, self.stage_width(s), self.stage_size(s), self.stage_size(s)])
    }

    /// Hash of the canonical JSON text, stored in checkpoints.
    pub fn fingerprint(&self) -> u32 {
        crc32fast::hash(self.to_json().as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

/// Captured activation maps by tap id, outside any graph.
pub type TapValues<T> = BTreeMap<String, Tensor<T>>;

/// Logits plus the requested activation maps of one forward pass.
pub struct ForwardOutput<'g, T: Float> {
    pub logits: Var<'g, T>,
    pub taps: Taps<'g, T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: ConvNetSpec,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Float> Network<T> {
    /// Deterministic initialization: He-normal conv weights, `1/√fan_in`
    /// normal classifier weights, zero biases.
    pub fn build(spec: &ConvNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in spec.parameter_shapes() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if name == "fc.weight" { shape[0] } else { shape[1..].iter().product() };
                let gain = if name == "fc.weight" { 1.0 } else { 2.0 };
                let std = (gain / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::from_f64(z * std)
                    })
                    .collect();
                Tensor::new(&shape, data)?
            };
            names.push(name);
            params.push(tensor);
        }
        Ok(Network {
            spec: spec.clone(),
            names,
            params,
        })
    }

    /// Assemble from named tensors, checking them against the spec.
    pub fn from_parts(spec: &ConvNetSpec, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if expected.len() != named.len() {
            return Err(Error::Version(format!(
                "spec expects {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((en, es), (name, t)) in expected.into_iter().zip(named) {
            if en != name || es != t.shape() {
                return Err(Error::Version(format!(
                    "expected parameter {en} {es:?}, found {name} {:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Network {
            spec: spec.clone(),
            names,
            params,
        })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn tap_ids(&self) -> Vec<String> {
        self.spec.tap_ids()
    }

    pub fn cast<U: Float>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Register parameters in `graph`: trainable leaves or frozen constants.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Vec<Var<'g, T>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.clone())
                } else {
                    graph.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass recording into `params`' graph.
    ///
    /// Each returned tap is the very node fed to the next layer.
    pub fn forward<'g>(&self, params: &[Var<'g, T>], x: Var<'g, T>, tap_ids: &[String]) -> Result<ForwardOutput<'g, T>> {
        let known = self.spec.tap_ids();
        if let Some(bad) = tap_ids.iter().find(|id| !known.contains(id)) {
            return Err(Error::Config(format!("unknown tap id {bad:?}")));
        }
        let shape = x.shape();
        let s = self.spec.input_size;
        if shape.len() != 4 || shape[1..] != [INPUT_CHANNELS, s, s] {
            return Err(Error::Shape(format!("network expects b×{INPUT_CHANNELS}×{s}×{s} input, got {shape:?}")));
        }
        let mut taps = Taps::new();
        let mut record = |id: &str, v: Var<'g, T>| {
            if tap_ids.iter().any(|t| t == id) {
                taps.insert(id.to_string(), v);
            }
        };
        let mut h = x;
        let mut p = 0;
        for (name, _, _, stride) in self.spec.conv_layers() {
            h = h.conv2d(&params[p], stride, 1)?.add_channel_bias(&params[p + 1])?.relu();
            p += 2;
            record(&name, h);
            if let Some(stage) = name.strip_prefix("stage") {
                let (s, j) = stage.split_once(".conv").expect("layer names are stage{s}.conv{j}");
                if j.parse::<usize>().ok() == Some(self.spec.depth_blocks - 1) {
                    record(&format!("stage{s}.last"), h);
                    if s.parse::<usize>().ok() == Some(STAGES) {
                        record(LAST_CONV, h);
                    }
                }
            }
        }
        let pooled = h.global_avg_pool()?;
        let logits = pooled.matmul(&params[p])?.add_channel_bias(&params[p + 1])?;
        Ok(ForwardOutput { logits, taps })
    }

    /// Gradient-free forward returning plain tensors.
    pub fn infer(&self, x: &Tensor<T>, tap_ids: &[String]) -> Result<(Tensor<T>, TapValues<T>)> {
        let graph = Graph::new();
        let params = self.bind(&graph, false);
        let out = self.forward(&params, graph.constant(x.clone()), tap_ids)?;
        let taps = out.taps.iter().map(|(k, v)| (k.clone(), (*v.value()).clone())).collect();
        Ok(((*out.logits.value()).clone(), taps))
    }
}
