//! The three cascaded sub-networks and their task heads.
//!
//! Each stage runs a truncated VGG-16 convolutional body on its pyramid
//! level and globally average-pools the result. S_Net's pooled output is
//! its shared feature. M_Net and L_Net project theirs through a fully
//! connected layer and concatenate the previous stage's shared feature, so
//! gradients of the later stages reach every earlier body.
//!
//! Every stage carries four task towers (two hidden layers as wide as the
//! shared feature, then an output layer) and a dynamic-weight head. In
//! S_Net these are 1x1 convolutions over the `[C,1,1]` feature; in M_Net
//! and L_Net they are fully connected layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig, VGG_BLOCKS};
use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};
use crate::weighting;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageId {
    Small,
    Medium,
    Large,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::Small, StageId::Medium, StageId::Large];

    pub fn name(self) -> &'static str {
        match self {
            StageId::Small => "snet",
            StageId::Medium => "mnet",
            StageId::Large => "lnet",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn num_blocks(self) -> usize {
        self.index() + 3
    }
}

/// Weight and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: T,
    pub bias: T,
}

/// Two hidden layers and an output layer feeding one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower<T> {
    pub hidden1: Layer<T>,
    pub hidden2: Layer<T>,
    pub out: Layer<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Cls,
    Bbox,
    Landmark,
    Attr,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Cls, HeadKind::Bbox, HeadKind::Landmark, HeadKind::Attr];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Cls => "cls",
            HeadKind::Bbox => "bbox",
            HeadKind::Landmark => "landmark",
            HeadKind::Attr => "attr",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    pub convs: Vec<Layer<T>>,
    /// Projection of the pooled body output; absent in S_Net.
    pub fc: Option<Layer<T>>,
    pub cls: Tower<T>,
    pub bbox: Tower<T>,
    pub landmark: Tower<T>,
    pub attr: Tower<T>,
    pub dyn_weight: Layer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub snet: Stage<T>,
    pub mnet: Stage<T>,
    pub lnet: Stage<T>,
}

impl<T> Layer<T> {
    fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Layer<U> {
        Layer {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut impl FnMut(String, &'s mut T)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> Tower<T> {
    fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Tower<U> {
        Tower {
            hidden1: self.hidden1.map(f),
            hidden2: self.hidden2.map(f),
            out: self.out.map(f),
        }
    }

    fn layers(&self) -> [(&'static str, &Layer<T>); 3] {
        [
            ("hidden1", &self.hidden1),
            ("hidden2", &self.hidden2),
            ("out", &self.out),
        ]
    }
}

impl<T> Stage<T> {
    pub fn tower(&self, kind: HeadKind) -> &Tower<T> {
        match kind {
            HeadKind::Cls => &self.cls,
            HeadKind::Bbox => &self.bbox,
            HeadKind::Landmark => &self.landmark,
            HeadKind::Attr => &self.attr,
        }
    }

    fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Stage<U> {
        Stage {
            convs: self.convs.iter().map(|l| l.map(f)).collect(),
            fc: self.fc.as_ref().map(|l| l.map(f)),
            cls: self.cls.map(f),
            bbox: self.bbox.map(f),
            landmark: self.landmark.map(f),
            attr: self.attr.map(f),
            dyn_weight: self.dyn_weight.map(f),
        }
    }

    fn visit<'s>(&'s self, stage: &str, f: &mut impl FnMut(String, &'s T)) {
        for (name, layer) in conv_names(self.convs.len()).iter().zip(&self.convs) {
            layer.visit(&format!("{stage}.{name}"), f);
        }
        if let Some(fc) = &self.fc {
            fc.visit(&format!("{stage}.fc"), f);
        }
        for kind in HeadKind::ALL {
            for (lname, layer) in self.tower(kind).layers() {
                layer.visit(&format!("{stage}.{}.{lname}", kind.name()), f);
            }
        }
        self.dyn_weight.visit(&format!("{stage}.dyn"), f);
    }

    fn visit_mut<'s>(&'s mut self, stage: &str, f: &mut impl FnMut(String, &'s mut T)) {
        let Stage {
            convs,
            fc,
            cls,
            bbox,
            landmark,
            attr,
            dyn_weight,
        } = self;
        let names = conv_names(convs.len());
        for (name, layer) in names.iter().zip(convs.iter_mut()) {
            layer.visit_mut(&format!("{stage}.{name}"), f);
        }
        if let Some(fc) = fc {
            fc.visit_mut(&format!("{stage}.fc"), f);
        }
        for (kind, tower) in [
            (HeadKind::Cls, cls),
            (HeadKind::Bbox, bbox),
            (HeadKind::Landmark, landmark),
            (HeadKind::Attr, attr),
        ] {
            let k = kind.name();
            let Tower { hidden1, hidden2, out } = tower;
            hidden1.visit_mut(&format!("{stage}.{k}.hidden1"), f);
            hidden2.visit_mut(&format!("{stage}.{k}.hidden2"), f);
            out.visit_mut(&format!("{stage}.{k}.out"), f);
        }
        dyn_weight.visit_mut(&format!("{stage}.dyn"), f);
    }
}

/// VGG layer names (`conv1_1`, `conv1_2`, `conv2_1`, ...) for the first
/// `n` convolutions.
fn conv_names(n: usize) -> Vec<String> {
    VGG_BLOCKS
        .iter()
        .enumerate()
        .flat_map(|(b, &(_, reps))| (1..=reps).map(move |i| format!("conv{}_{}", b + 1, i)))
        .take(n)
        .collect()
}

impl<T> Network<T> {
    pub fn stage(&self, id: StageId) -> &Stage<T> {
        match id {
            StageId::Small => &self.snet,
            StageId::Medium => &self.mnet,
            StageId::Large => &self.lnet,
        }
    }

    pub fn stage_mut(&mut self, id: StageId) -> &mut Stage<T> {
        match id {
            StageId::Small => &mut self.snet,
            StageId::Medium => &mut self.mnet,
            StageId::Large => &mut self.lnet,
        }
    }

    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> Network<U> {
        Network {
            snet: self.snet.map(&mut f),
            mnet: self.mnet.map(&mut f),
            lnet: self.lnet.map(&mut f),
        }
    }

    /// Visits every parameter in canonical order with its dotted name.
    pub fn visit<'s>(&'s self, mut f: impl FnMut(String, &'s T)) {
        for id in StageId::ALL {
            self.stage(id).visit(id.name(), &mut f);
        }
    }

    pub fn visit_mut<'s>(&'s mut self, mut f: impl FnMut(String, &'s mut T)) {
        let Network { snet, mnet, lnet } = self;
        snet.visit_mut(StageId::Small.name(), &mut f);
        mnet.visit_mut(StageId::Medium.name(), &mut f);
        lnet.visit_mut(StageId::Large.name(), &mut f);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(|n, t| out.push((n, t)));
        out
    }
}

/// Parameter group of a canonical parameter name: `<stage>.body`,
/// `<stage>.<task>` or `<stage>.dyn`.
pub fn param_group(name: &str) -> String {
    let mut parts = name.split('.');
    let stage = parts.next().unwrap_or_default();
    let part = parts.next().unwrap_or_default();
    if part.starts_with("conv") || part == "fc" {
        format!("{stage}.body")
    } else {
        format!("{stage}.{part}")
    }
}

/// All learnable parameters plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct McfaModel {
    pub config: ModelConfig,
    pub params: Network<Tensor>,
}

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl McfaModel {
    /// Weights drawn from N(0, 2/fan_in), zero biases, zero dynamic-weight
    /// heads.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = config.shared_lengths();
        let d = config.num_attributes;
        let head_outputs = |kind: HeadKind| match kind {
            HeadKind::Cls => 2,
            HeadKind::Bbox => 4,
            HeadKind::Landmark => 2 * config.num_landmarks,
            HeadKind::Attr => 2 * d,
        };
        let make_stage = |id: StageId, rng: &mut ChaCha8Rng| -> Stage<Tensor> {
            let mut convs = Vec::new();
            let mut c_in = config.channels;
            for &(base, reps) in &VGG_BLOCKS[..id.num_blocks()] {
                let c_out = config.width(base);
                for _ in 0..reps {
                    convs.push(Layer {
                        weight: he_normal(vec![c_out, c_in, 3, 3], c_in * 9, rng),
                        bias: Tensor::zeros(vec![c_out]),
                    });
                    c_in = c_out;
                }
            }
            let fc = (id != StageId::Small).then(|| {
                let w = config.fc_width();
                Layer {
                    weight: he_normal(vec![c_in, w], c_in, rng),
                    bias: Tensor::zeros(vec![w]),
                }
            });
            let width = shared[id.index()];
            let pointwise = id == StageId::Small;
            let dense = |d_in: usize, d_out: usize, rng: &mut ChaCha8Rng| {
                let shape = if pointwise {
                    vec![d_out, d_in, 1, 1]
                } else {
                    vec![d_in, d_out]
                };
                Layer {
                    weight: he_normal(shape, d_in, rng),
                    bias: Tensor::zeros(vec![d_out]),
                }
            };
            let tower = |kind: HeadKind, rng: &mut ChaCha8Rng| Tower {
                hidden1: dense(width, width, rng),
                hidden2: dense(width, width, rng),
                out: dense(width, head_outputs(kind), rng),
            };
            let cls = tower(HeadKind::Cls, rng);
            let bbox = tower(HeadKind::Bbox, rng);
            let landmark = tower(HeadKind::Landmark, rng);
            let attr = tower(HeadKind::Attr, rng);
            let dyn_shape = if pointwise {
                vec![d, width, 1, 1]
            } else {
                vec![width, d]
            };
            Stage {
                convs,
                fc,
                cls,
                bbox,
                landmark,
                attr,
                dyn_weight: Layer {
                    weight: Tensor::zeros(dyn_shape),
                    bias: Tensor::zeros(vec![d]),
                },
            }
        };
        let snet = make_stage(StageId::Small, &mut rng);
        let mnet = make_stage(StageId::Medium, &mut rng);
        let lnet = make_stage(StageId::Large, &mut rng);
        Ok(McfaModel {
            config,
            params: Network { snet, mnet, lnet },
        })
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.params.visit(|_, t| n += t.len());
        n
    }

    /// Parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.params.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.params.visit_mut(|_, t| out.push(t));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.named().into_iter().map(|(n, _)| n).collect()
    }
}

/// Predictions of one stage, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs {
    pub face_prob: f64,
    pub bbox: Vec<f64>,
    pub landmarks: Vec<f64>,
    /// `(negative, positive)` logit per attribute.
    pub attr_logits: Vec<[f64; 2]>,
    /// Probability that each attribute is present.
    pub attr_probs: Vec<f64>,
    pub dyn_weights: Vec<f64>,
}

/// Graph handles of one stage's predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageVars {
    pub shared: Var,
    /// `[p_nonface, p_face]`
    pub face_probs: Var,
    /// `[p_face]`
    pub face_prob: Var,
    pub bbox: Var,
    pub landmarks: Var,
    /// `[d, 2]`
    pub attr_logits: Var,
    /// `[d, 2]`
    pub attr_probs: Var,
    pub dyn_weights: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Pyramid {
    pub large: Var,
    pub medium: Var,
    pub small: Var,
}

/// A model bound into a fresh graph.
pub struct Session<'a> {
    pub graph: Graph<'a>,
    pub model: &'a McfaModel,
    params: Network<Var>,
}

impl<'a> Session<'a> {
    /// Parameters require gradients.
    pub fn new(model: &'a McfaModel) -> Self {
        Self::with_graph(model, Graph::new())
    }

    /// Parameters are constants; for prediction.
    pub fn inference(model: &'a McfaModel) -> Self {
        Self::with_graph(model, Graph::inference())
    }

    pub fn with_graph(model: &'a McfaModel, mut graph: Graph<'a>) -> Self {
        let params = model.params.map(|t| graph.param(t));
        Session { graph, model, params }
    }

    pub fn params(&self) -> &Network<Var> {
        &self.params
    }

    /// Adds an image `[C, side, side]` as a constant.
    pub fn image(&mut self, image: &Tensor) -> Var {
        self.graph.constant(image.clone())
    }

    pub fn build_pyramid(&mut self, image: Var) -> Result<Pyramid, ModelError> {
        let cfg = &self.model.config;
        let side = cfg.input_sides[0];
        match self.graph.shape(image) {
            &[c, h, w] if c == cfg.channels && h == side && w == side => {}
            s => {
                return Err(ModelError::Input(format!(
                    "expected image [{}, {side}, {side}], got {s:?}",
                    cfg.channels
                )));
            }
        }
        let medium = self.graph.avg_pool2d(image, 2, 2)?;
        let small = self.graph.avg_pool2d(medium, 2, 2)?;
        Ok(Pyramid {
            large: image,
            medium,
            small,
        })
    }

    fn check_side(&self, image: Var, id: StageId) -> Result<(), ModelError> {
        let cfg = &self.model.config;
        let side = cfg.input_sides[2 - id.index()];
        match self.graph.shape(image) {
            &[c, h, w] if c == cfg.channels && h == side && w == side => Ok(()),
            s => Err(ModelError::Input(format!(
                "{} expects [{}, {side}, {side}], got {s:?}",
                id.name(),
                cfg.channels
            ))),
        }
    }

    /// Convolutional body followed by global average pooling, `[C,1,1]`.
    fn body(&mut self, id: StageId, image: Var) -> Result<Var, ModelError> {
        let stage = self.params.stage(id).clone();
        let mut x = image;
        let mut layer = 0;
        let blocks = &VGG_BLOCKS[..id.num_blocks()];
        for (b, &(_, reps)) in blocks.iter().enumerate() {
            for _ in 0..reps {
                let l = &stage.convs[layer];
                x = self.graph.conv2d(x, l.weight, l.bias, 1, 1)?;
                x = self.graph.relu(x);
                layer += 1;
            }
            if b + 1 < blocks.len() {
                x = self.graph.max_pool2d(x, 2, 2)?;
            }
        }
        Ok(self.graph.global_avg_pool(x)?)
    }

    fn dense(&mut self, id: StageId, layer: &Layer<Var>, x: Var) -> Result<Var, ModelError> {
        Ok(if id == StageId::Small {
            self.graph.conv2d(x, layer.weight, layer.bias, 1, 0)?
        } else {
            self.graph.fully_connected(x, layer.weight, layer.bias)?
        })
    }

    fn tower(&mut self, id: StageId, tower: &Tower<Var>, shared: Var) -> Result<Var, ModelError> {
        let h = self.dense(id, &tower.hidden1, shared)?;
        let h = self.graph.relu(h);
        let h = self.dense(id, &tower.hidden2, h)?;
        let h = self.graph.relu(h);
        let out = self.dense(id, &tower.out, h)?;
        Ok(self.graph.flatten(out))
    }

    fn heads(&mut self, id: StageId, shared: Var) -> Result<StageVars, ModelError> {
        let stage = self.params.stage(id).clone();
        let d = self.model.config.num_attributes;

        let cls_logits = self.tower(id, &stage.cls, shared)?;
        let face_probs = self.graph.softmax(cls_logits)?;
        let face_prob = self.graph.gather(face_probs, vec![1])?;
        let bbox = self.tower(id, &stage.bbox, shared)?;
        let landmarks = self.tower(id, &stage.landmark, shared)?;
        let attr = self.tower(id, &stage.attr, shared)?;
        let attr_logits = self.graph.reshape(attr, vec![d, 2])?;
        let attr_probs = self.graph.softmax(attr_logits)?;
        let form = if id == StageId::Small {
            weighting::HeadForm::Pointwise
        } else {
            weighting::HeadForm::FullyConnected
        };
        let dyn_weights = weighting::dynamic_weights(&mut self.graph, shared, &stage.dyn_weight, form)?;
        Ok(StageVars {
            shared,
            face_probs,
            face_prob,
            bbox,
            landmarks,
            attr_logits,
            attr_probs,
            dyn_weights,
        })
    }

    /// S_Net on the small pyramid level. The shared feature is `[C,1,1]`.
    pub fn forward_snet(&mut self, small: Var) -> Result<StageVars, ModelError> {
        self.check_side(small, StageId::Small)?;
        let shared = self.body(StageId::Small, small)?;
        self.heads(StageId::Small, shared)
    }

    fn forward_cascaded(
        &mut self,
        id: StageId,
        image: Var,
        previous: Var,
        expected: usize,
    ) -> Result<StageVars, ModelError> {
        self.check_side(image, id)?;
        let prev_len = self.graph.value(previous).len();
        if prev_len != expected {
            return Err(ModelError::Input(format!(
                "{} expects a previous shared feature of length {expected}, got {prev_len}",
                id.name()
            )));
        }
        let pooled = self.body(id, image)?;
        let pooled = self.graph.flatten(pooled);
        let fc = self.params.stage(id).fc.clone().expect("cascaded stage has fc");
        let projected = self.graph.fully_connected(pooled, fc.weight, fc.bias)?;
        let projected = self.graph.relu(projected);
        let previous = self.graph.flatten(previous);
        let shared = self.graph.concat(projected, previous)?;
        self.heads(id, shared)
    }

    /// M_Net on the medium level; the shared feature concatenates the
    /// projected body output with flattened `shared_s`.
    pub fn forward_mnet(&mut self, medium: Var, shared_s: Var) -> Result<StageVars, ModelError> {
        let expected = self.model.config.shared_lengths()[0];
        self.forward_cascaded(StageId::Medium, medium, shared_s, expected)
    }

    pub fn forward_lnet(&mut self, large: Var, shared_m: Var) -> Result<StageVars, ModelError> {
        let expected = self.model.config.shared_lengths()[1];
        self.forward_cascaded(StageId::Large, large, shared_m, expected)
    }

    /// Training-mode forward through all stages, no gating.
    pub fn forward_full(&mut self, image: Var) -> Result<[StageVars; 3], ModelError> {
        let p = self.build_pyramid(image)?;
        let s = self.forward_snet(p.small)?;
        let m = self.forward_mnet(p.medium, s.shared)?;
        let l = self.forward_lnet(p.large, m.shared)?;
        Ok([s, m, l])
    }

    pub fn outputs(&self, v: &StageVars) -> StageOutputs {
        let g = &self.graph;
        let attr_probs: Vec<f64> = g.value(v.attr_probs).chunks(2).map(|p| p[1]).collect();
        StageOutputs {
            face_prob: g.scalar(v.face_prob),
            bbox: g.value(v.bbox).to_vec(),
            landmarks: g.value(v.landmarks).to_vec(),
            attr_logits: g.value(v.attr_logits).chunks(2).map(|p| [p[0], p[1]]).collect(),
            attr_probs,
            dyn_weights: g.value(v.dyn_weights).to_vec(),
        }
    }

    /// Gradients of every parameter in canonical order, zero-filled for
    /// parameters the last backward pass did not reach.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.params.visit(|_, &v| {
            out.push(
                self.graph
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.graph.value(v).len()]),
            );
        });
        out
    }
}
