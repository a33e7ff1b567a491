//! Threshold-gated inference.
//!
//! S_Net sees the small pyramid level first. A proposal whose face score
//! falls below `t_s` is rejected there and neither later stage runs;
//! otherwise M_Net applies `t_m` the same way, and only survivors reach
//! L_Net, whose outputs are the final attribute decisions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::OpCounter;
use crate::model::{McfaModel, ModelError, Session, StageOutputs};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CascadeError {
    #[error("threshold {name} = {value} is outside [0, 1]")]
    Threshold { name: &'static str, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Minimum face probabilities to pass S_Net and M_Net.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeThresholds {
    pub t_s: f64,
    pub t_m: f64,
}

impl Default for CascadeThresholds {
    fn default() -> Self {
        CascadeThresholds { t_s: 0.5, t_m: 0.5 }
    }
}

impl CascadeThresholds {
    pub fn new(t_s: f64, t_m: f64) -> Result<Self, CascadeError> {
        let t = CascadeThresholds { t_s, t_m };
        t.validate()?;
        Ok(t)
    }

    /// Lets every proposal through.
    pub fn open() -> Self {
        CascadeThresholds { t_s: 0.0, t_m: 0.0 }
    }

    pub fn validate(&self) -> Result<(), CascadeError> {
        for (name, value) in [("t_s", self.t_s), ("t_m", self.t_m)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(CascadeError::Threshold { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionStatus {
    RejectedAtS,
    RejectedAtM,
    Accepted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDecision {
    pub prob: f64,
    pub positive: bool,
}

/// Attribute `q` is positive iff its probability exceeds one half; exact
/// ties are negative.
pub fn decide(prob: f64) -> bool {
    prob > 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub status: PredictionStatus,
    pub p_s: f64,
    pub p_m: Option<f64>,
    pub p_l: Option<f64>,
    pub attributes: Option<Vec<AttributeDecision>>,
    pub bbox: Option<Vec<f64>>,
    pub landmarks: Option<Vec<f64>>,
    pub dyn_weights: Option<Vec<f64>>,
    /// Work recorded by each stage; the pyramid is charged to S_Net.
    #[serde(skip)]
    pub stage_ops: [OpCounter; 3],
    /// Everything the graph recorded for this prediction.
    #[serde(skip)]
    pub total_ops: OpCounter,
    /// Full L_Net outputs of an accepted proposal.
    #[serde(skip)]
    pub final_outputs: Option<StageOutputs>,
}

impl PredictionResult {
    pub fn is_accepted(&self) -> bool {
        self.status == PredictionStatus::Accepted
    }

    /// Binary decisions, all negative for a rejected proposal.
    pub fn decisions(&self, d: usize) -> Vec<bool> {
        match &self.attributes {
            Some(a) => a.iter().map(|x| x.positive).collect(),
            None => vec![false; d],
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("prediction serializes")
    }
}

/// Runs the cascade on one `[C, side, side]` image.
pub fn predict(
    model: &McfaModel,
    image: &Tensor,
    thresholds: CascadeThresholds,
) -> Result<PredictionResult, CascadeError> {
    thresholds.validate()?;
    let mut s = Session::inference(model);
    let x = s.image(image);
    let start = s.graph.counter();
    let pyramid = s.build_pyramid(x)?;
    let vs = s.forward_snet(pyramid.small)?;
    let after_s = s.graph.counter();
    let p_s = s.graph.scalar(vs.face_prob);
    let mut result = PredictionResult {
        status: PredictionStatus::RejectedAtS,
        p_s,
        p_m: None,
        p_l: None,
        attributes: None,
        bbox: None,
        landmarks: None,
        dyn_weights: None,
        stage_ops: [after_s.since(start), OpCounter::default(), OpCounter::default()],
        total_ops: after_s.since(start),
        final_outputs: None,
    };
    if p_s < thresholds.t_s {
        return Ok(result);
    }
    let vm = s.forward_mnet(pyramid.medium, vs.shared)?;
    let after_m = s.graph.counter();
    result.stage_ops[1] = after_m.since(after_s);
    let p_m = s.graph.scalar(vm.face_prob);
    result.p_m = Some(p_m);
    result.total_ops = after_m.since(start);
    if p_m < thresholds.t_m {
        result.status = PredictionStatus::RejectedAtM;
        return Ok(result);
    }
    let vl = s.forward_lnet(pyramid.large, vm.shared)?;
    result.stage_ops[2] = s.graph.counter().since(after_m);
    result.total_ops = s.graph.counter().since(start);
    let out = s.outputs(&vl);
    result.status = PredictionStatus::Accepted;
    result.p_l = Some(out.face_prob);
    result.attributes = Some(
        out.attr_probs
            .iter()
            .map(|&prob| AttributeDecision {
                prob,
                positive: decide(prob),
            })
            .collect(),
    );
    result.bbox = Some(out.bbox.clone());
    result.landmarks = Some(out.landmarks.clone());
    result.dyn_weights = Some(out.dyn_weights.clone());
    result.final_outputs = Some(out);
    Ok(result)
}

/// Funnel counts over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CascadeStats {
    pub samples: usize,
    pub pass_s: usize,
    pub reject_s: usize,
    pub pass_m: usize,
    pub reject_m: usize,
    /// How many times each stage ran.
    pub evaluated: [usize; 3],
    /// Arithmetic performed by each stage.
    pub flops: [u64; 3],
}

impl CascadeStats {
    pub fn accepted(&self) -> usize {
        self.pass_m
    }

    pub fn rejection_rate_s(&self) -> f64 {
        ratio(self.reject_s, self.samples)
    }

    pub fn rejection_rate_m(&self) -> f64 {
        ratio(self.reject_m, self.pass_s)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn batch_predict(
    model: &McfaModel,
    images: &[&Tensor],
    thresholds: CascadeThresholds,
    exec: Execution,
) -> Result<(Vec<PredictionResult>, CascadeStats), CascadeError> {
    thresholds.validate()?;
    let results = par::map(images, exec, |img| predict(model, img, thresholds))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut stats = CascadeStats {
        samples: results.len(),
        ..Default::default()
    };
    for r in &results {
        stats.evaluated[0] += 1;
        match r.status {
            PredictionStatus::RejectedAtS => stats.reject_s += 1,
            PredictionStatus::RejectedAtM => {
                stats.pass_s += 1;
                stats.reject_m += 1;
                stats.evaluated[1] += 1;
            }
            PredictionStatus::Accepted => {
                stats.pass_s += 1;
                stats.pass_m += 1;
                stats.evaluated[1] += 1;
                stats.evaluated[2] += 1;
            }
        }
        for (f, ops) in stats.flops.iter_mut().zip(&r.stage_ops) {
            *f += ops.flops;
        }
    }
    Ok((results, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn model() -> McfaModel {
        let cfg = ModelConfig {
            channel_scale: 1.0 / 16.0,
            ..ModelConfig::default().with_side(32)
        };
        McfaModel::new(cfg, 5).unwrap()
    }

    fn image(v: f64) -> Tensor {
        Tensor::full(vec![1, 32, 32], v)
    }

    #[test]
    fn open_thresholds_accept_everything() {
        let m = model();
        let r = predict(&m, &image(0.4), CascadeThresholds::open()).unwrap();
        assert!(r.is_accepted());
        assert_eq!(r.attributes.as_ref().unwrap().len(), 4);
        assert!(r.p_m.is_some() && r.p_l.is_some());
        assert!(r.stage_ops.iter().all(|o| o.ops > 0));
    }

    #[test]
    fn unattainable_threshold_rejects_at_s() {
        let m = model();
        let r = predict(&m, &image(0.4), CascadeThresholds::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(r.status, PredictionStatus::RejectedAtS);
        assert!(r.p_m.is_none() && r.p_l.is_none() && r.attributes.is_none());
        assert_eq!(r.stage_ops[1], OpCounter::default());
        assert_eq!(r.stage_ops[2], OpCounter::default());
        assert_eq!(r.decisions(4), vec![false; 4]);
    }

    #[test]
    fn invalid_thresholds() {
        assert!(CascadeThresholds::new(1.5, 0.0).is_err());
        assert!(CascadeThresholds::new(0.5, -0.1).is_err());
        let m = model();
        let bad = CascadeThresholds { t_s: 2.0, t_m: 0.0 };
        assert!(predict(&m, &image(0.1), bad).is_err());
    }

    #[test]
    fn tie_is_negative() {
        assert!(!decide(0.5));
        assert!(decide(0.5 + 1e-12));
    }

    #[test]
    fn batch_stats_partition() {
        let m = model();
        let imgs: Vec<Tensor> = (0..6).map(|i| image(i as f64 / 6.0)).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let (res, stats) = batch_predict(&m, &refs, CascadeThresholds::open(), Execution::Sequential).unwrap();
        assert_eq!(res.len(), 6);
        assert_eq!(stats.evaluated, [6, 6, 6]);
        assert_eq!(stats.pass_s + stats.reject_s, 6);
        let (_, closed) = batch_predict(
            &m,
            &refs,
            CascadeThresholds::new(1.0, 1.0).unwrap(),
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(closed.evaluated, [6, 0, 0]);
        assert_eq!(closed.flops[1], 0);
        assert_eq!(closed.rejection_rate_s(), 1.0);
    }

    #[test]
    fn json_line_is_single_line() {
        let m = model();
        let r = predict(&m, &image(0.2), CascadeThresholds::open()).unwrap();
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        let back: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(back["status"], "accepted");
    }
}
