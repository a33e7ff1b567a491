//! Per-sample attribute loss weights.
//!
//! A linear layer on a stage's shared feature followed by a softmax maps
//! every sample to a point on the probability simplex over the `d`
//! attributes: `mu = softmax(W^T x + b)`. The attribute loss is the
//! `mu`-weighted sum of the per-attribute cross-entropies, and gradients
//! flow through both factors.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::model::Layer;
use crate::tensor::{Tensor, TensorError};

/// How the head is applied to the shared feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadForm {
    /// 1x1 convolution over a `[D,1,1]` feature, weight `[d,D,1,1]`.
    Pointwise,
    /// Fully connected over a `[D]` feature, weight `[D,d]`.
    FullyConnected,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Learned per-sample weights.
    #[default]
    Dynamic,
    /// Constant `1/d` for every attribute.
    FixedUniform,
}

/// Records `softmax(W^T x + b)` on the graph.
pub fn dynamic_weights(g: &mut Graph<'_>, shared: Var, head: &Layer<Var>, form: HeadForm) -> Result<Var, TensorError> {
    let logits = match form {
        HeadForm::Pointwise => {
            let y = g.conv2d(shared, head.weight, head.bias, 1, 0)?;
            g.flatten(y)
        }
        HeadForm::FullyConnected => g.fully_connected(shared, head.weight, head.bias)?,
    };
    g.softmax(logits)
}

/// Uniform `1/d` weights as a graph constant.
pub fn uniform_weights(g: &mut Graph<'_>, d: usize) -> Var {
    g.constant(Tensor::full(vec![d], 1.0 / d as f64))
}

/// A dynamic-weight head as plain values: `omega` is `[D, d]`, `epsilon`
/// is `[d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicWeightHead {
    pub omega: Tensor,
    pub epsilon: Tensor,
}

impl DynamicWeightHead {
    pub fn new(omega: Tensor, epsilon: Tensor) -> Result<Self, TensorError> {
        match (omega.shape(), epsilon.shape()) {
            (&[_, d], &[e]) if d == e => Ok(DynamicWeightHead { omega, epsilon }),
            (o, e) => Err(TensorError::Shape {
                op: "DynamicWeightHead",
                detail: format!("omega {o:?} incompatible with epsilon {e:?}"),
            }),
        }
    }

    pub fn zeros(feature_len: usize, d: usize) -> Self {
        DynamicWeightHead {
            omega: Tensor::zeros(vec![feature_len, d]),
            epsilon: Tensor::zeros(vec![d]),
        }
    }

    pub fn feature_len(&self) -> usize {
        self.omega.shape()[0]
    }

    pub fn num_attributes(&self) -> usize {
        self.epsilon.len()
    }

    /// `softmax(omega^T x + epsilon)`.
    pub fn compute_weights(&self, x: &[f64]) -> Result<Vec<f64>, TensorError> {
        let mut g = Graph::inference();
        let xv = g.constant(Tensor::vector(x.to_vec()));
        let head = Layer {
            weight: g.param(&self.omega),
            bias: g.param(&self.epsilon),
        };
        let mu = dynamic_weights(&mut g, xv, &head, HeadForm::FullyConnected)?;
        Ok(g.value(mu).to_vec())
    }
}

/// Gradient of `mu . l` with respect to the head's logits, with the
/// per-attribute losses `l` held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureReport {
    /// `d (mu . l) / d logit_q`.
    pub logit_grads: Vec<f64>,
    /// `mu . l`.
    pub weighted_loss: f64,
    /// Whether a descent step on the weighted loss raises `mu_q`. True
    /// exactly for attributes whose loss is below the weighted mean.
    pub descent_raises_weight: Vec<bool>,
}

/// Differentiates `mu . l` through the softmax by running the engine on
/// logits `ln mu`, which reproduce `mu` exactly up to rounding.
pub fn weight_pressure_check(losses: &[f64], mu: &[f64]) -> Result<PressureReport, TensorError> {
    if losses.len() != mu.len() {
        return Err(TensorError::Shape {
            op: "weight_pressure_check",
            detail: format!("{} losses for {} weights", losses.len(), mu.len()),
        });
    }
    let mut g = Graph::new();
    let logits = g.variable(Tensor::vector(mu.iter().map(|m| m.ln()).collect()));
    let weights = g.softmax(logits)?;
    let l = g.constant(Tensor::vector(losses.to_vec()));
    let total = g.dot(weights, l)?;
    g.backward(total)?;
    let logit_grads = g
        .grad(logits)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; mu.len()]);
    Ok(PressureReport {
        descent_raises_weight: logit_grads.iter().map(|&v| v < 0.0).collect(),
        weighted_loss: g.scalar(total),
        logit_grads,
    })
}
