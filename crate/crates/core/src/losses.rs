//! Per-task losses and the three-stage joint loss.
//!
//! Each stage contributes a face-classification negative log-likelihood,
//! squared Euclidean box and landmark errors, and the weighted attribute
//! cross-entropy. Which of these a sample drives depends on its
//! annotation kind (see [`TaskSet::for_sample`]) intersected with the
//! training variant's task set. Masked tasks are never recorded on the
//! graph, so they contribute neither loss nor gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Sample, SampleKind};
use crate::graph::{Graph, Var};
use crate::model::StageVars;
use crate::tensor::{Tensor, TensorError};
use crate::weighting::{self, Weighting};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("length mismatch in {op}: {got} vs {expected}")]
    Length {
        op: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("attribute weights are not on the simplex (sum {sum}, min {min})")]
    NotSimplex { sum: f64, min: f64 },
    #[error("sample enables no task")]
    NoTask,
    #[error("{0} task enabled but its target is missing")]
    MissingTarget(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cls,
    Bbox,
    Landmark,
    Attr,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Cls, Task::Bbox, Task::Landmark, Task::Attr];

    pub fn name(self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Bbox => "bbox",
            Task::Landmark => "landmark",
            Task::Attr => "attr",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Which task losses are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskSet {
    pub cls: bool,
    pub bbox: bool,
    pub landmark: bool,
    pub attr: bool,
}

impl TaskSet {
    pub const ALL: TaskSet = TaskSet {
        cls: true,
        bbox: true,
        landmark: true,
        attr: true,
    };

    pub fn of(tasks: &[Task]) -> Self {
        let mut s = TaskSet::default();
        for &t in tasks {
            s.set(t, true);
        }
        s
    }

    pub fn contains(&self, t: Task) -> bool {
        match t {
            Task::Cls => self.cls,
            Task::Bbox => self.bbox,
            Task::Landmark => self.landmark,
            Task::Attr => self.attr,
        }
    }

    pub fn set(&mut self, t: Task, on: bool) {
        match t {
            Task::Cls => self.cls = on,
            Task::Bbox => self.bbox = on,
            Task::Landmark => self.landmark = on,
            Task::Attr => self.attr = on,
        }
    }

    pub fn intersect(self, other: TaskSet) -> TaskSet {
        TaskSet {
            cls: self.cls && other.cls,
            bbox: self.bbox && other.bbox,
            landmark: self.landmark && other.landmark,
            attr: self.attr && other.attr,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.cls || self.bbox || self.landmark || self.attr)
    }

    pub fn tasks(&self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|&t| self.contains(t)).collect()
    }

    /// Tasks an annotation kind drives: non-faces train classification
    /// only, faces add the box, landmark records add landmarks, and
    /// attribute records add attributes (and landmarks when present).
    pub fn for_sample(sample: &Sample) -> TaskSet {
        match sample.kind {
            SampleKind::NonFace => TaskSet::of(&[Task::Cls]),
            SampleKind::Face => TaskSet::of(&[Task::Cls, Task::Bbox]),
            SampleKind::Landmark => TaskSet::of(&[Task::Cls, Task::Bbox, Task::Landmark]),
            SampleKind::Attribute => TaskSet {
                cls: true,
                bbox: true,
                landmark: sample.landmarks.is_some(),
                attr: true,
            },
        }
    }
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped first.
pub fn face_cls_loss(p: f64, is_face: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if is_face {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn squared_distance(op: &'static str, pred: &[f64], truth: &[f64]) -> Result<f64, LossError> {
    if pred.len() != truth.len() {
        return Err(LossError::Length {
            op,
            got: pred.len(),
            expected: truth.len(),
        });
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Squared Euclidean distance between `(left, top, height, width)` vectors.
pub fn bbox_loss(pred: &[f64], truth: &[f64]) -> Result<f64, LossError> {
    if truth.len() != 4 {
        return Err(LossError::Length {
            op: "bbox_loss",
            got: truth.len(),
            expected: 4,
        });
    }
    squared_distance("bbox_loss", pred, truth)
}

pub fn landmark_loss(pred: &[f64], truth: &[f64]) -> Result<f64, LossError> {
    squared_distance("landmark_loss", pred, truth)
}

/// Nonnegative entries summing to one within [`SIMPLEX_TOL`]; vertices are
/// allowed.
pub fn check_simplex(mu: &[f64]) -> Result<(), LossError> {
    let sum: f64 = mu.iter().sum();
    let min = mu.iter().copied().fold(f64::INFINITY, f64::min);
    if min.is_nan() || min < 0.0 || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(LossError::NotSimplex { sum, min });
    }
    Ok(())
}

/// Two-way softmax cross-entropy of every attribute.
pub fn per_attribute_losses(logits: &[[f64; 2]], labels: &[bool]) -> Result<Vec<f64>, LossError> {
    if logits.len() != labels.len() {
        return Err(LossError::Length {
            op: "attr_loss",
            got: logits.len(),
            expected: labels.len(),
        });
    }
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&[neg, pos], &y)| {
            let m = neg.max(pos);
            let (en, ep) = ((neg - m).exp(), (pos - m).exp());
            let p = if y { ep / (en + ep) } else { en / (en + ep) };
            -p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
        })
        .collect())
}

/// `mu . l` where `l` are the per-attribute cross-entropies.
pub fn attr_loss(logits: &[[f64; 2]], labels: &[bool], mu: &[f64]) -> Result<f64, LossError> {
    check_simplex(mu)?;
    let l = per_attribute_losses(logits, labels)?;
    if mu.len() != l.len() {
        return Err(LossError::Length {
            op: "attr_loss",
            got: mu.len(),
            expected: l.len(),
        });
    }
    Ok(mu.iter().zip(&l).map(|(m, x)| m * x).sum())
}

/// Face-classification term on the graph from `[p_face]`.
pub fn face_cls_term(g: &mut Graph<'_>, face_prob: Var, is_face: bool) -> Var {
    let p = g.clamp(face_prob, PROB_EPS, 1.0 - PROB_EPS);
    let q = if is_face { p } else { g.affine(p, -1.0, 1.0) };
    let l = g.log(q);
    g.affine(l, -1.0, 0.0)
}

/// `||pred - truth||^2` on the graph.
pub fn squared_distance_term(g: &mut Graph<'_>, pred: Var, truth: &[f64]) -> Result<Var, LossError> {
    let n = g.value(pred).len();
    if n != truth.len() {
        return Err(LossError::Length {
            op: "squared_distance",
            got: n,
            expected: truth.len(),
        });
    }
    let t = g.constant(Tensor::vector(truth.to_vec()));
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum(sq))
}

/// Per-attribute cross-entropies `[d]` from `[d, 2]` probabilities.
pub fn per_attribute_term(g: &mut Graph<'_>, attr_probs: Var, labels: &[bool]) -> Result<Var, LossError> {
    let d = g.value(attr_probs).len() / 2;
    if d != labels.len() {
        return Err(LossError::Length {
            op: "attr_loss",
            got: d,
            expected: labels.len(),
        });
    }
    let idx = labels.iter().enumerate().map(|(q, &y)| 2 * q + y as usize).collect();
    let picked = g.gather(attr_probs, idx)?;
    let clamped = g.clamp(picked, PROB_EPS, 1.0 - PROB_EPS);
    let logs = g.log(clamped);
    Ok(g.affine(logs, -1.0, 0.0))
}

/// `mu . l` on the graph. Gradients reach both the attribute head and,
/// through `mu`, the dynamic-weight head.
pub fn attr_term(g: &mut Graph<'_>, attr_probs: Var, labels: &[bool], mu: Var) -> Result<Var, LossError> {
    check_simplex(g.value(mu))?;
    let l = per_attribute_term(g, attr_probs, labels)?;
    Ok(g.dot(mu, l)?)
}

/// Ground truth for one sample, in the model's normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub is_face: bool,
    pub bbox: Option<[f64; 4]>,
    pub landmarks: Option<Vec<f64>>,
    pub attributes: Option<Vec<bool>>,
}

impl From<&Sample> for Targets {
    fn from(s: &Sample) -> Self {
        Targets {
            is_face: s.is_face(),
            bbox: s.bbox.map(|b| b.to_array()),
            landmarks: s.landmarks.clone(),
            attributes: s.attributes.clone(),
        }
    }
}

/// Per-stage, per-task losses. `None` marks a masked task.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `entries[stage][task]`, tasks in [`Task::ALL`] order.
    pub entries: [[Option<f64>; 4]; 3],
    pub joint: f64,
}

impl LossBreakdown {
    pub fn get(&self, stage: usize, task: Task) -> Option<f64> {
        self.entries[stage][task.index()]
    }

    pub fn sum_of_entries(&self) -> f64 {
        self.entries.iter().flatten().flatten().sum()
    }

    /// Averages breakdowns; an entry is present if present in any input,
    /// with absent entries counted as zero.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        if items.is_empty() {
            return out;
        }
        let n = items.len() as f64;
        for s in 0..3 {
            for t in 0..4 {
                if items.iter().any(|b| b.entries[s][t].is_some()) {
                    let total: f64 = items.iter().filter_map(|b| b.entries[s][t]).sum();
                    out.entries[s][t] = Some(total / n);
                }
            }
        }
        out.joint = items.iter().map(|b| b.joint).sum::<f64>() / n;
        out
    }
}

/// Graph handles of a recorded joint loss.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub root: Var,
    pub terms: [[Option<Var>; 4]; 3],
    /// Weights used by each stage's attribute term.
    pub attr_weights: [Option<Var>; 3],
}

impl JointLoss {
    pub fn breakdown(&self, g: &Graph<'_>) -> LossBreakdown {
        let mut b = LossBreakdown {
            joint: g.scalar(self.root),
            ..Default::default()
        };
        for (s, row) in self.terms.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                b.entries[s][t] = v.map(|v| g.scalar(v));
            }
        }
        b
    }
}

/// Sums the enabled task losses over all three stages.
pub fn joint_loss(
    g: &mut Graph<'_>,
    stages: &[StageVars; 3],
    targets: &Targets,
    tasks: TaskSet,
    weighting: Weighting,
) -> Result<JointLoss, LossError> {
    if tasks.is_empty() {
        return Err(LossError::NoTask);
    }
    let mut terms = [[None; 4]; 3];
    let mut attr_weights = [None; 3];
    for (s, v) in stages.iter().enumerate() {
        if tasks.cls {
            terms[s][Task::Cls.index()] = Some(face_cls_term(g, v.face_prob, targets.is_face));
        }
        if tasks.bbox {
            let truth = targets.bbox.ok_or(LossError::MissingTarget("bbox"))?;
            terms[s][Task::Bbox.index()] = Some(squared_distance_term(g, v.bbox, &truth)?);
        }
        if tasks.landmark {
            let truth = targets
                .landmarks
                .as_deref()
                .ok_or(LossError::MissingTarget("landmark"))?;
            terms[s][Task::Landmark.index()] = Some(squared_distance_term(g, v.landmarks, truth)?);
        }
        if tasks.attr {
            let labels = targets.attributes.as_deref().ok_or(LossError::MissingTarget("attr"))?;
            let mu = match weighting {
                Weighting::Dynamic => v.dyn_weights,
                Weighting::FixedUniform => weighting::uniform_weights(g, labels.len()),
            };
            attr_weights[s] = Some(mu);
            terms[s][Task::Attr.index()] = Some(attr_term(g, v.attr_probs, labels, mu)?);
        }
    }
    let flat: Vec<Var> = terms.iter().flatten().flatten().copied().collect();
    let root = g.add_all(&flat)?;
    Ok(JointLoss {
        root,
        terms,
        attr_weights,
    })
}
