//! Joint training, evaluation and the variant ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{batch_predict, CascadeError, CascadeStats, CascadeThresholds};
use crate::checkpoint::{self, CheckpointError};
use crate::config::ModelConfig;
use crate::data::{load_manifest, load_samples, make_batches, Arity, DataError, Sample};
use crate::losses::{joint_loss, LossBreakdown, LossError, Targets, Task, TaskSet};
use crate::model::{param_group, McfaModel, ModelError, Session};
use crate::par::{self, Execution};
use crate::tensor::TensorError;
use crate::weighting::Weighting;

/// Task combinations compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MCFA")]
    Mcfa,
    #[serde(rename = "MCFA_FD_FAC")]
    McfaFdFac,
    #[serde(rename = "MCFA_FLL_FAC")]
    McfaFllFac,
    #[serde(rename = "MCFA_FAC")]
    McfaFac,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mcfa, Variant::McfaFdFac, Variant::McfaFllFac, Variant::McfaFac];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mcfa => "MCFA",
            Variant::McfaFdFac => "MCFA_FD_FAC",
            Variant::McfaFllFac => "MCFA_FLL_FAC",
            Variant::McfaFac => "MCFA_FAC",
        }
    }

    pub fn tasks(self) -> TaskSet {
        match self {
            Variant::Mcfa => TaskSet::ALL,
            Variant::McfaFdFac => TaskSet::of(&[Task::Cls, Task::Bbox, Task::Attr]),
            Variant::McfaFllFac => TaskSet::of(&[Task::Cls, Task::Landmark, Task::Attr]),
            Variant::McfaFac => TaskSet::of(&[Task::Attr]),
        }
    }

    /// Thresholds to evaluate with. A variant that never trains the face
    /// classifier has meaningless gates, so they are opened.
    pub fn eval_thresholds(self, configured: CascadeThresholds) -> CascadeThresholds {
        if self.tasks().cls {
            configured
        } else {
            CascadeThresholds::open()
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Learning-rate multiplier applied at each milestone.
    pub lr_decay: f64,
    /// Fractions of `epochs` at which the learning rate decays.
    pub lr_milestones: Vec<f64>,
    pub model: ModelConfig,
    pub thresholds: CascadeThresholds,
    pub weighting: Weighting,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Mcfa,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 8,
            rng_seed: 0,
            lr_decay: 0.1,
            lr_milestones: vec![0.6, 0.85],
            model: ModelConfig::default(),
            thresholds: CascadeThresholds::default(),
            weighting: Weighting::Dynamic,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad(format!(
                "lr_milestones must be fractions in [0, 1], got {:?}",
                self.lr_milestones
            ));
        }
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.thresholds.validate()?;
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{variant} trains the {task} task but no record carries its annotation")]
    MissingAnnotations { variant: &'static str, task: &'static str },
    #[error("no record carries attribute labels")]
    NoAttributeLabels,
    #[error("loss diverged at epoch {epoch}, batch {batch} (value {value})")]
    Divergence { epoch: usize, batch: usize, value: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Gradient of one sample's masked joint loss.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    /// Per parameter, canonical order.
    pub grads: Vec<Vec<f64>>,
    pub loss: LossBreakdown,
    /// Attribute weights used by each stage, if the attribute task ran.
    pub weights: [Option<Vec<f64>>; 3],
}

/// Returns `None` when the sample enables none of `tasks`.
pub fn sample_gradient(
    model: &McfaModel,
    sample: &Sample,
    tasks: TaskSet,
    weighting: Weighting,
) -> Result<Option<SampleGrad>, TrainError> {
    let tasks = tasks.intersect(TaskSet::for_sample(sample));
    if tasks.is_empty() {
        return Ok(None);
    }
    let mut s = Session::new(model);
    let x = s.image(&sample.image);
    let stages = s.forward_full(x)?;
    let jl = joint_loss(&mut s.graph, &stages, &Targets::from(sample), tasks, weighting)?;
    s.graph.backward(jl.root)?;
    let weights = jl.attr_weights.map(|w| w.map(|v| s.graph.value(v).to_vec()));
    Ok(Some(SampleGrad {
        grads: s.param_grads(),
        loss: jl.breakdown(&s.graph),
        weights,
    }))
}

/// Mean gradient over a batch, plus the per-sample results that had an
/// active task. Samples are reduced in batch order whatever `exec` is, so
/// the result does not depend on threading.
pub fn batch_gradient(
    model: &McfaModel,
    batch: &[&Sample],
    tasks: TaskSet,
    weighting: Weighting,
    exec: Execution,
) -> Result<(Vec<Vec<f64>>, Vec<SampleGrad>), TrainError> {
    let results = par::map(batch, exec, |s| sample_gradient(model, s, tasks, weighting));
    let mut total: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut kept = Vec::with_capacity(results.len());
    for r in results {
        if let Some(sg) = r? {
            for (acc, g) in total.iter_mut().zip(&sg.grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            kept.push(sg);
        }
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    for v in total.iter_mut().flatten() {
        *v *= scale;
    }
    Ok((total, kept))
}

/// SGD with classical momentum: `v = m v + g`, `p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &McfaModel, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut McfaModel, grads: &[Vec<f64>], lr: f64) {
        for ((t, v), g) in model.tensors_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *p -= lr * *vi;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over samples with at least one active task.
    pub loss: LossBreakdown,
    /// Mean attribute weights per stage.
    pub mean_weights: [Option<Vec<f64>>; 3],
    /// Whether every attribute weight seen this epoch was on the simplex.
    pub weights_on_simplex: bool,
    /// Largest absolute batch-mean gradient per parameter group.
    pub group_grad_max: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss.joint).collect()
    }

    pub fn weight_trace(&self) -> Vec<[Option<Vec<f64>>; 3]> {
        self.epochs.iter().map(|e| e.mean_weights.clone()).collect()
    }

    /// Largest gradient a group saw over the whole run.
    pub fn group_grad_max(&self, group: &str) -> f64 {
        self.epochs
            .iter()
            .filter_map(|e| e.group_grad_max.get(group))
            .fold(0.0, |a, &b| a.max(b))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: McfaModel,
    pub history: TrainHistory,
    /// Evaluation on the training samples after the last epoch.
    pub metrics: Metrics,
}

pub const LATEST_CHECKPOINT: &str = "latest.mcfa";
pub const FINAL_CHECKPOINT: &str = "model.mcfa";
pub const HISTORY_FILE: &str = "history.json";
pub const METRICS_FILE: &str = "metrics.json";

fn check_annotations(variant: Variant, samples: &[Sample]) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for task in variant.tasks().tasks() {
        if !samples.iter().any(|s| TaskSet::for_sample(s).contains(task)) {
            return Err(TrainError::MissingAnnotations {
                variant: variant.name(),
                task: task.name(),
            });
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn train(config: &TrainConfig, samples: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    train_with_progress(config, samples, out_dir, &mut |_| {})
}

/// Trains from scratch. With `out_dir`, the model is checkpointed after
/// every epoch and the history and final metrics are written at the end.
pub fn train_with_progress(
    config: &TrainConfig,
    samples: &[Sample],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_annotations(config.variant, samples)?;
    let (d, k) = (config.model.num_attributes, config.model.num_landmarks);
    for s in samples {
        s.validate(d, k)?;
        if s.image.shape()
            != [
                config.model.channels,
                config.model.input_sides[0],
                config.model.input_sides[0],
            ]
        {
            return Err(TrainError::Data(DataError::Invalid(format!(
                "image shape {:?} does not match the model input",
                s.image.shape()
            ))));
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let mut model = McfaModel::new(config.model.clone(), config.rng_seed)?;
    let groups: Vec<String> = model.param_names().iter().map(|n| param_group(n)).collect();
    let mut opt = Sgd::new(&model, config.momentum);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x5eed_ba7c);
    let tasks = config.variant.tasks();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut losses = Vec::with_capacity(samples.len());
        let mut weight_sums: [Option<(Vec<f64>, usize)>; 3] = Default::default();
        let mut on_simplex = true;
        let mut group_max: BTreeMap<String, f64> = groups.iter().map(|g| (g.clone(), 0.0)).collect();
        for (b, batch) in make_batches(samples, config.batch_size, shuffle_rng.random())?.enumerate() {
            let diverged = |value: f64| TrainError::Divergence {
                epoch: epoch + 1,
                batch: b + 1,
                value,
            };
            let (grads, per_sample) = match batch_gradient(&model, &batch, tasks, config.weighting, config.execution) {
                Err(TrainError::Loss(LossError::NotSimplex { sum, .. })) if !sum.is_finite() => {
                    return Err(diverged(sum))
                }
                r => r?,
            };
            for sg in &per_sample {
                if !sg.loss.joint.is_finite() {
                    return Err(diverged(sg.loss.joint));
                }
            }
            if let Some(bad) = grads.iter().flatten().find(|v| !v.is_finite()) {
                return Err(diverged(*bad));
            }
            for sg in per_sample {
                for (slot, w) in weight_sums.iter_mut().zip(&sg.weights) {
                    if let Some(w) = w {
                        let sum: f64 = w.iter().sum();
                        on_simplex &= w.iter().all(|&x| x > 0.0) && (sum - 1.0).abs() <= 1e-6;
                        let (acc, n) = slot.get_or_insert_with(|| (vec![0.0; w.len()], 0));
                        acc.iter_mut().zip(w).for_each(|(a, x)| *a += x);
                        *n += 1;
                    }
                }
                losses.push(sg.loss);
            }
            for (g, name) in grads.iter().zip(&groups) {
                let m = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let e = group_max.get_mut(name).expect("known group");
                *e = e.max(m);
            }
            opt.step(&mut model, &grads, lr);
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            loss: LossBreakdown::mean(&losses),
            mean_weights: weight_sums.map(|s| s.map(|(acc, n)| acc.into_iter().map(|a| a / n as f64).collect())),
            weights_on_simplex: on_simplex,
            group_grad_max: group_max,
        };
        progress(&record);
        history.epochs.push(record);
        if let Some(dir) = out_dir {
            checkpoint::save(&model, &dir.join(LATEST_CHECKPOINT))?;
        }
    }

    let thresholds = config.variant.eval_thresholds(config.thresholds);
    let metrics = evaluate(&model, samples, thresholds, config.execution)?;
    if let Some(dir) = out_dir {
        checkpoint::save(&model, &dir.join(FINAL_CHECKPOINT))?;
        write_json(&dir.join(HISTORY_FILE), &history)?;
        write_json(&dir.join(METRICS_FILE), &metrics)?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, config.to_toml()).map_err(|source| TrainError::Io {
            path: cfg_path.display().to_string(),
            source,
        })?;
    }
    Ok(TrainOutcome {
        model,
        history,
        metrics,
    })
}

/// Loads and decodes every record of a manifest for `config`.
pub fn load_dataset(manifest: &Path, config: &ModelConfig) -> Result<Vec<Sample>, TrainError> {
    let m = load_manifest(manifest, Arity::from(config))?;
    if m.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(load_samples(&m, config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_attribute_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    /// Samples with attribute labels.
    pub evaluated: usize,
    /// How many of those the cascade rejected; they score as all-negative.
    pub rejected: usize,
    pub thresholds: CascadeThresholds,
    pub cascade: CascadeStats,
}

impl Metrics {
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        for (q, a) in self.per_attribute_accuracy.iter().enumerate() {
            let _ = writeln!(out, "accuracy.{q}={a}");
        }
        let _ = writeln!(out, "average_accuracy={}", self.average_accuracy);
        let _ = writeln!(out, "evaluated={}", self.evaluated);
        let _ = writeln!(out, "rejected={}", self.rejected);
        let _ = writeln!(out, "t_s={}", self.thresholds.t_s);
        let _ = writeln!(out, "t_m={}", self.thresholds.t_m);
        let _ = writeln!(out, "rejected_at_s={}", self.cascade.reject_s);
        let _ = writeln!(out, "rejected_at_m={}", self.cascade.reject_m);
        out
    }

    /// Human-readable table; `names` label the attribute rows.
    pub fn table(&self, names: &[&str]) -> String {
        let mut out = String::from("attribute        accuracy\n");
        for (q, a) in self.per_attribute_accuracy.iter().enumerate() {
            let label = names.get(q).map_or_else(|| format!("attr{q}"), |n| n.to_string());
            let _ = writeln!(out, "{label:<16} {:>7.2}%", 100.0 * a);
        }
        let _ = writeln!(out, "{:<16} {:>7.2}%", "average", 100.0 * self.average_accuracy);
        let _ = writeln!(
            out,
            "{} samples, {} rejected (t_s={}, t_m={})",
            self.evaluated, self.rejected, self.thresholds.t_s, self.thresholds.t_m
        );
        out
    }
}

/// Attribute accuracy of the cascade on every labeled sample.
pub fn evaluate(
    model: &McfaModel,
    samples: &[Sample],
    thresholds: CascadeThresholds,
    exec: Execution,
) -> Result<Metrics, TrainError> {
    let labeled: Vec<&Sample> = samples.iter().filter(|s| s.attributes.is_some()).collect();
    if labeled.is_empty() {
        return Err(TrainError::NoAttributeLabels);
    }
    let d = model.config.num_attributes;
    let images: Vec<_> = labeled.iter().map(|s| &s.image).collect();
    let (results, stats) = batch_predict(model, &images, thresholds, exec)?;
    let mut correct = vec![0usize; d];
    let mut rejected = 0;
    for (s, r) in labeled.iter().zip(&results) {
        if !r.is_accepted() {
            rejected += 1;
        }
        let truth = s.attributes.as_ref().expect("filtered");
        if truth.len() != d {
            return Err(DataError::Invalid(format!("{} attribute labels, model predicts {d}", truth.len())).into());
        }
        for ((c, p), t) in correct.iter_mut().zip(r.decisions(d)).zip(truth) {
            *c += usize::from(p == *t);
        }
    }
    let n = labeled.len() as f64;
    let per_attribute_accuracy: Vec<f64> = correct.iter().map(|&c| c as f64 / n).collect();
    let average_accuracy = per_attribute_accuracy.iter().sum::<f64>() / d as f64;
    Ok(Metrics {
        per_attribute_accuracy,
        average_accuracy,
        evaluated: labeled.len(),
        rejected,
        thresholds,
        cascade: stats,
    })
}

#[derive(Debug, Clone)]
pub struct VariantReport {
    pub variant: Variant,
    pub metrics: Metrics,
    pub history: TrainHistory,
    pub model: McfaModel,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub variants: Vec<VariantReport>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>4} {:>4} {:>4} {:>4} {:>12} {:>10}\n",
            "variant", "cls", "bbox", "lmk", "attr", "final loss", "avg acc"
        );
        for v in &self.variants {
            let t = v.variant.tasks();
            let mark = |on: bool| if on { "x" } else { "-" };
            let _ = writeln!(
                out,
                "{:<14} {:>4} {:>4} {:>4} {:>4} {:>12.6} {:>9.2}%",
                v.variant.name(),
                mark(t.cls),
                mark(t.bbox),
                mark(t.landmark),
                mark(t.attr),
                v.history.loss_trace().last().copied().unwrap_or(f64::NAN),
                100.0 * v.metrics.average_accuracy
            );
        }
        out
    }
}

/// Trains every variant with the same seed and hyper-parameters. With
/// `out_dir`, each variant gets a subdirectory and the table is written
/// to `comparison.txt`.
pub fn ablate(base: &TrainConfig, samples: &[Sample], out_dir: Option<&Path>) -> Result<AblationReport, TrainError> {
    ablate_with_progress(base, samples, out_dir, &mut |_, _| {})
}

pub fn ablate_with_progress(
    base: &TrainConfig,
    samples: &[Sample],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(Variant, &EpochRecord),
) -> Result<AblationReport, TrainError> {
    let mut variants = Vec::with_capacity(4);
    for variant in Variant::ALL {
        let config = TrainConfig {
            variant,
            ..base.clone()
        };
        let dir: Option<PathBuf> = out_dir.map(|d| d.join(variant.name()));
        let outcome = train_with_progress(&config, samples, dir.as_deref(), &mut |r| progress(variant, r))?;
        variants.push(VariantReport {
            variant,
            metrics: outcome.metrics,
            history: outcome.history,
            model: outcome.model,
        });
    }
    let report = AblationReport { variants };
    if let Some(dir) = out_dir {
        let p = dir.join("comparison.txt");
        fs::write(&p, report.table()).map_err(|source| TrainError::Io {
            path: p.display().to_string(),
            source,
        })?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthOptions};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 3,
            execution: Execution::Sequential,
            model: ModelConfig {
                channel_scale: 1.0 / 16.0,
                num_attributes: 3,
                ..ModelConfig::default().with_side(32)
            },
            ..Default::default()
        }
    }

    fn data(cfg: &TrainConfig, n: usize, opts: SynthOptions) -> Vec<Sample> {
        let opts = SynthOptions {
            num_attributes: cfg.model.num_attributes,
            ..opts
        };
        synth::to_samples(&synth::generate(n, 7, &opts).unwrap(), &cfg.model)
    }

    #[test]
    fn variant_table() {
        assert_eq!(Variant::McfaFac.tasks(), TaskSet::of(&[Task::Attr]));
        assert_eq!(
            Variant::McfaFdFac.tasks(),
            TaskSet::of(&[Task::Cls, Task::Bbox, Task::Attr])
        );
        assert_eq!(
            Variant::McfaFllFac.tasks(),
            TaskSet::of(&[Task::Cls, Task::Landmark, Task::Attr])
        );
        assert_eq!(Variant::Mcfa.tasks(), TaskSet::ALL);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("MCFA_X".parse::<Variant>().is_err());
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig {
            epochs: 100,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(59), 0.01);
        assert!((c.lr_at(60) - 0.001).abs() < 1e-18);
        assert!((c.lr_at(85) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn config_validation_and_toml() {
        let c = tiny_config();
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let partial =
            TrainConfig::from_toml("variant = \"MCFA_FAC\"\nepochs = 3\n[model]\nnum_attributes = 2\n").unwrap();
        assert_eq!(partial.variant, Variant::McfaFac);
        assert_eq!(partial.model.num_attributes, 2);
        assert!(TrainConfig::from_toml("momentum = 1.0").is_err());
        assert!(TrainConfig::from_toml("learning_rate = 0.0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn empty_and_missing_annotations() {
        let c = tiny_config();
        assert!(matches!(train(&c, &[], None), Err(TrainError::EmptyDataset)));
        let faces = data(
            &c,
            4,
            SynthOptions {
                mixture: [0.5, 0.5, 0.0, 0.0],
                ..Default::default()
            },
        );
        assert!(matches!(
            train(&c, &faces, None),
            Err(TrainError::MissingAnnotations { .. })
        ));
    }

    #[test]
    fn divergence_names_epoch_and_batch() {
        let c = TrainConfig {
            learning_rate: 1e200,
            ..tiny_config()
        };
        let samples = data(&c, 6, SynthOptions::default());
        match train(&c, &samples, None) {
            Err(TrainError::Divergence { epoch, batch, .. }) => assert!(epoch >= 1 && batch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn fac_only_leaves_box_and_landmark_heads_untouched() {
        let c = TrainConfig {
            variant: Variant::McfaFac,
            ..tiny_config()
        };
        let samples = data(&c, 6, SynthOptions::default());
        let out = train(&c, &samples, None).unwrap();
        let init = McfaModel::new(c.model.clone(), c.rng_seed).unwrap();
        for stage in ["snet", "mnet", "lnet"] {
            for head in ["bbox", "landmark", "cls"] {
                assert_eq!(out.history.group_grad_max(&format!("{stage}.{head}")), 0.0);
            }
            assert!(out.history.group_grad_max(&format!("{stage}.attr")) > 0.0);
        }
        for ((name, a), b) in init.param_names().iter().zip(init.tensors()).zip(out.model.tensors()) {
            if name.contains(".bbox.") || name.contains(".landmark.") {
                assert_eq!(a, b, "{name} moved");
            }
        }
        assert_eq!(out.metrics.thresholds, CascadeThresholds::open());
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let c = tiny_config();
        let samples = data(&c, 5, SynthOptions::default());
        let a = train(&c, &samples, None).unwrap();
        let b = train(
            &TrainConfig {
                execution: Execution::Parallel,
                ..c.clone()
            },
            &samples,
            None,
        )
        .unwrap();
        assert_eq!(checkpoint::to_bytes(&a.model), checkpoint::to_bytes(&b.model));
        assert_eq!(a.history, b.history);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn zero_head_evaluation_counts_negatives() {
        let c = tiny_config();
        let mut model = McfaModel::new(c.model.clone(), 1).unwrap();
        // zero every attribute output layer: all probabilities become 1/2
        let names = model.param_names();
        for (n, t) in names.iter().zip(model.tensors_mut()) {
            if n.starts_with("lnet.attr.out") {
                t.data_mut().fill(0.0);
            }
        }
        let samples = data(&c, 9, SynthOptions::attributes_only(3));
        let m = evaluate(&model, &samples, CascadeThresholds::open(), Execution::Sequential).unwrap();
        for q in 0..3 {
            let neg = samples.iter().filter(|s| !s.attributes.as_ref().unwrap()[q]).count();
            assert_eq!(m.per_attribute_accuracy[q], neg as f64 / 9.0);
        }
        let mean = m.per_attribute_accuracy.iter().sum::<f64>() / 3.0;
        assert!((m.average_accuracy - mean).abs() < 1e-9);
        assert!(m.key_values().contains("average_accuracy="));
        assert!(m.table(&synth::ATTRIBUTE_NAMES).contains("pale"));
    }

    #[test]
    fn evaluate_requires_labels() {
        let c = tiny_config();
        let model = McfaModel::new(c.model.clone(), 1).unwrap();
        let samples = data(
            &c,
            3,
            SynthOptions {
                mixture: [1.0, 0.0, 0.0, 0.0],
                ..Default::default()
            },
        );
        assert!(matches!(
            evaluate(&model, &samples, CascadeThresholds::open(), Execution::Sequential),
            Err(TrainError::NoAttributeLabels)
        ));
    }

    #[test]
    fn writes_checkpoints_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config();
        let samples = data(&c, 4, SynthOptions::default());
        let out = train(&c, &samples, Some(dir.path())).unwrap();
        for f in [
            LATEST_CHECKPOINT,
            FINAL_CHECKPOINT,
            HISTORY_FILE,
            METRICS_FILE,
            "config.toml",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        let m = evaluate(&back, &samples, out.metrics.thresholds, Execution::Sequential).unwrap();
        assert_eq!(m, out.metrics);
    }
}
