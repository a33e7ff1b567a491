//! Finite-difference verification of the analytic gradients.
//!
//! A handful of parameters is drawn from every parameter group (each
//! stage's body, each of its four task heads and its dynamic-weight head)
//! and the backward pass is compared against the central difference
//! `(L(p + h) - L(p - h)) / 2h`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::graph::{Graph, OpKind, Var};
use crate::losses::{joint_loss, Targets, TaskSet};
use crate::model::{param_group, McfaModel, Session};
use crate::synth::{self, SynthOptions};
use crate::trainer::TrainError;
use crate::weighting::Weighting;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub model: ModelConfig,
    pub seed: u64,
    /// Parameters sampled from each group.
    pub per_group: usize,
    /// Finite-difference half step.
    pub step: f64,
    pub tolerance: f64,
    /// Gradients below this magnitude are compared absolutely.
    pub floor: f64,
    /// Deliberately break one backward rule in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            model: ModelConfig {
                channel_scale: 1.0 / 16.0,
                ..ModelConfig::default().with_side(32)
            },
            seed: 0,
            per_group: 3,
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter entry with the largest error, as `name[index]`.
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&GroupReport> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error.is_nan() || g.max_rel_error >= self.tolerance)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().fold(0.0, |a, g| a.max(g.max_rel_error))
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:>7} {:>12}  {}\n", "group", "checked", "max rel err", "worst");
        for g in &self.groups {
            let flag = if g.max_rel_error < self.tolerance { "" } else { "  FAIL" };
            let _ = writeln!(
                out,
                "{:<14} {:>7} {:>12.3e}  {}{flag}",
                g.group, g.checked, g.max_rel_error, g.worst
            );
        }
        out
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A model with random dynamic-weight heads, so the check runs away from
/// the uniform point where zero-initialized heads start.
pub fn check_model(config: &ModelConfig, seed: u64) -> Result<McfaModel, TrainError> {
    let mut model = McfaModel::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1a);
    let normal = Normal::new(0.0, 0.3).expect("finite std");
    let names = model.param_names();
    for (n, t) in names.iter().zip(model.tensors_mut()) {
        if n.contains(".dyn.") {
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    Ok(model)
}

/// Checks the full joint loss with every task active on one synthetic
/// attribute sample.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, TrainError> {
    let model = check_model(&opts.model, opts.seed)?;
    let synth_opts = SynthOptions {
        num_attributes: opts.model.num_attributes.min(synth::ATTRIBUTE_NAMES.len()),
        ..SynthOptions::attributes_only(1)
    };
    let item = synth::generate(1, opts.seed, &synth_opts)?;
    let mut sample = synth::to_samples(&item, &opts.model).remove(0);
    if let Some(a) = &mut sample.attributes {
        // pad when the model has more attributes than the generator draws
        while a.len() < opts.model.num_attributes {
            let flip = a.len() % 2 == 0;
            a.push(flip);
        }
    }
    let targets = Targets::from(&sample);
    let image = sample.image.clone();
    gradcheck_with(&model, opts, |s| {
        let x = s.image(&image);
        let stages = s.forward_full(x)?;
        Ok(joint_loss(&mut s.graph, &stages, &targets, TaskSet::ALL, Weighting::Dynamic)?.root)
    })
}

/// Checks the gradient of whatever scalar `build` records.
pub fn gradcheck_with(
    model: &McfaModel,
    opts: &GradcheckOptions,
    build: impl Fn(&mut Session<'_>) -> Result<Var, TrainError>,
) -> Result<GradcheckReport, TrainError> {
    let mut graph = Graph::new();
    if let Some(kind) = opts.fault {
        graph.corrupt_backward(kind);
    }
    let mut s = Session::with_graph(model, graph);
    let root = build(&mut s)?;
    s.graph.backward(root)?;
    let analytic = s.param_grads();
    drop(s);

    let names = model.param_names();
    let mut groups: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (ti, t) in model.tensors().iter().enumerate() {
        let g = groups.entry(param_group(&names[ti])).or_default();
        g.extend((0..t.len()).map(|i| (ti, i)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9c);
    let mut probe = model.clone();
    let eval = |probe: &McfaModel| -> Result<f64, TrainError> {
        let mut s = Session::inference(probe);
        let root = build(&mut s)?;
        Ok(s.graph.scalar(root))
    };
    let mut reports = Vec::with_capacity(groups.len());
    for (group, mut entries) in groups {
        entries.shuffle(&mut rng);
        // prefer entries the loss actually reaches, keep others as fallback
        let (live, dead): (Vec<_>, Vec<_>) = entries.into_iter().partition(|&(t, i)| analytic[t][i] != 0.0);
        let chosen: Vec<_> = live.into_iter().chain(dead).take(opts.per_group).collect();
        let mut report = GroupReport {
            group,
            checked: 0,
            max_rel_error: 0.0,
            worst: String::new(),
        };
        for (t, i) in chosen {
            let orig = probe.tensors()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.tensors_mut()[t].data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.tensors_mut()[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[t][i], numeric, opts.floor);
            report.checked += 1;
            // NaN sticks once seen
            if report.worst.is_empty() || err.is_nan() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{}[{i}]", names[t]);
            }
        }
        reports.push(report);
    }
    Ok(GradcheckReport {
        groups: reports,
        tolerance: opts.tolerance,
    })
}
