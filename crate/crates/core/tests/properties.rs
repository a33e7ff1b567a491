//! Property tests for the engine, model, losses, weighting, data and
//! cascade invariants.

mod common;

use common::{max_abs_diff, numeric_grad, rng};
use mcfa::cascade::CascadeThresholds;
use mcfa::data::{compute_iou, generate_nonface_crops, BoundingBox, SampleKind};
use mcfa::losses::{self, joint_loss, Targets, TaskSet};
use mcfa::model::param_group;
use mcfa::synth::{self, SynthOptions};
use mcfa::weighting::{self, DynamicWeightHead, HeadForm};
use mcfa::{predict, Graph, McfaModel, ModelConfig, PredictionStatus, Session, Tensor, Weighting};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x6d63_6661),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        channel_scale: 1.0 / 16.0,
        num_attributes: 3,
        ..ModelConfig::default().with_side(32)
    }
}

/// Model with random dynamic heads so weights are not uniform.
fn generic_model(seed: u64) -> McfaModel {
    mcfa::gradcheck::check_model(&tiny(), seed).unwrap()
}

fn random_image(r: &mut ChaCha8Rng, cfg: &ModelConfig) -> Tensor {
    let side = cfg.input_sides[0];
    let n = cfg.channels * side * side;
    Tensor::new(
        vec![cfg.channels, side, side],
        (0..n).map(|_| r.random::<f64>()).collect(),
    )
    .unwrap()
}

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, n)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Random composition of engine ops over one input vector. Returns the
/// scalar output and the input handle.
fn random_graph<'a>(g: &mut Graph<'a>, x: &[f64], ops: &[u8], consts: &[f64]) -> (mcfa::Var, mcfa::Var) {
    let n = x.len();
    let input = g.variable(Tensor::vector(x.to_vec()));
    let mut cur = input;
    let mut ci = 0;
    let mut next = |k: usize| {
        let v: Vec<f64> = (0..k).map(|i| consts[(ci + i) % consts.len()]).collect();
        ci += k;
        v
    };
    for &op in ops {
        let len = g.value(cur).len();
        cur = match op % 7 {
            0 => {
                let out = 1 + (op as usize / 7) % 4;
                let w = g.constant(Tensor::new(vec![len, out], next(len * out)).unwrap());
                let b = g.constant(Tensor::vector(next(out)));
                g.fully_connected(cur, w, b).unwrap()
            }
            1 => {
                let s = g.softmax(cur).unwrap();
                g.affine(s, 2.0, -0.5)
            }
            2 => {
                let c = g.constant(Tensor::vector(next(len)));
                g.mul(cur, c).unwrap()
            }
            3 => {
                // both operands come from `cur`: a fan-out
                let sq = g.mul(cur, cur).unwrap();
                g.add(sq, cur).unwrap()
            }
            4 => {
                let sq = g.mul(cur, cur).unwrap();
                let pos = g.affine(sq, 1.0, 1.0);
                g.log(pos)
            }
            5 => {
                let c = g.constant(Tensor::vector(next(len)));
                g.concat(cur, c).unwrap()
            }
            _ => {
                let s = g.sum(cur);
                let tail = g.gather(input, vec![0, n - 1]).unwrap();
                let tail = g.sum(tail);
                let both = g.add(s, tail).unwrap();
                g.affine(both, 0.5, 0.0)
            }
        };
    }
    (g.sum(cur), input)
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn softmax_on_simplex_and_shift_invariant(row in prop::collection::vec(-20.0..20.0f64, 1..12), c in -50.0..50.0f64) {
        let mut g = Graph::inference();
        let a = g.constant(Tensor::vector(row.clone()));
        let s = g.softmax(a).unwrap();
        let shifted = g.constant(Tensor::vector(row.iter().map(|v| v + c).collect()));
        let t = g.softmax(shifted).unwrap();
        let p = g.value(s);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(max_abs_diff(p, g.value(t)) < 1e-12);
    }

    #[test]
    fn random_graph_gradients_match_differences(
        x in unit_vec(5),
        ops in prop::collection::vec(any::<u8>(), 1..6),
        consts in unit_vec(17),
    ) {
        let f = |x: &[f64]| {
            let mut g = Graph::new();
            let (y, _) = random_graph(&mut g, x, &ops, &consts);
            g.scalar(y)
        };
        let mut g = Graph::new();
        let (y, input) = random_graph(&mut g, &x, &ops, &consts);
        g.backward(y).unwrap();
        let analytic = g.grad(input).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        let numeric = numeric_grad(&x, 1e-6, f);
        for (a, n) in analytic.iter().zip(&numeric) {
            prop_assert!(rel_err(*a, *n) < 1e-4, "analytic {a} numeric {n} ops {ops:?}");
        }
    }

    #[test]
    fn fan_out_sums_path_gradients(x in unit_vec(4), w1 in unit_vec(4), w2 in unit_vec(4)) {
        let mut g = Graph::new();
        let v = g.variable(Tensor::vector(x.clone()));
        let a = g.constant(Tensor::vector(w1.clone()));
        let b = g.constant(Tensor::vector(w2.clone()));
        let p = g.dot(v, a).unwrap();
        let q = g.dot(v, b).unwrap();
        let r = g.add(p, q).unwrap();
        g.backward(r).unwrap();
        let want: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        prop_assert_eq!(g.grad(v).unwrap(), &want[..]);
    }

    #[test]
    fn iou_symmetric_bounded_and_one_on_identity(
        a in (0.0..10.0f64, 0.0..10.0f64, 0.01..10.0f64, 0.01..10.0f64),
        b in (0.0..10.0f64, 0.0..10.0f64, 0.01..10.0f64, 0.01..10.0f64),
    ) {
        let a = BoundingBox::new(a.0, a.1, a.2, a.3);
        let b = BoundingBox::new(b.0, b.1, b.2, b.3);
        let ab = compute_iou(&a, &b);
        prop_assert_eq!(ab, compute_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(compute_iou(&a, &a), 1.0);
        if a != b {
            prop_assert!(ab < 1.0);
        }
    }

    #[test]
    fn regression_losses_symmetric_and_zero_only_at_truth(p in unit_vec(10), t in unit_vec(10)) {
        let l = losses::landmark_loss(&p, &t).unwrap();
        prop_assert_eq!(l, losses::landmark_loss(&t, &p).unwrap());
        prop_assert_eq!(losses::landmark_loss(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(l == 0.0, p == t);
        let b = losses::bbox_loss(&p[..4], &t[..4]).unwrap();
        prop_assert_eq!(b, losses::bbox_loss(&t[..4], &p[..4]).unwrap());
        prop_assert_eq!(b == 0.0, p[..4] == t[..4]);
    }

    #[test]
    fn attr_loss_within_convex_bounds(
        logits in prop::collection::vec((-8.0..8.0f64, -8.0..8.0f64), 1..10),
        eps in prop::collection::vec(-6.0..6.0f64, 10),
        seed in any::<u64>(),
    ) {
        let d = logits.len();
        let logits: Vec<[f64; 2]> = logits.into_iter().map(|(a, b)| [a, b]).collect();
        let mut r = rng(seed);
        let labels: Vec<bool> = (0..d).map(|_| r.random()).collect();
        let mu = DynamicWeightHead::new(Tensor::zeros(vec![1, d]), Tensor::vector(eps[..d].to_vec()))
            .unwrap()
            .compute_weights(&[0.0])
            .unwrap();
        let l = losses::per_attribute_losses(&logits, &labels).unwrap();
        let v = losses::attr_loss(&logits, &labels, &mu).unwrap();
        let lo = l.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-9 <= v && v <= hi + 1e-9);
    }

    #[test]
    fn dynamic_weights_shift_invariant(x in unit_vec(6), omega in unit_vec(18), eps in unit_vec(3), c in -30.0..30.0f64) {
        let head = DynamicWeightHead::new(Tensor::new(vec![6, 3], omega.clone()).unwrap(), Tensor::vector(eps.clone())).unwrap();
        let shifted = DynamicWeightHead::new(
            Tensor::new(vec![6, 3], omega).unwrap(),
            Tensor::vector(eps.iter().map(|e| e + c).collect()),
        ).unwrap();
        let a = head.compute_weights(&x).unwrap();
        let b = shifted.compute_weights(&x).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-12);
        prop_assert!(a.iter().all(|&m| m > 0.0));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dynamic_weights_vary_per_sample(omega in unit_vec(12), eps in unit_vec(3), x in unit_vec(4), dx in unit_vec(4)) {
        prop_assume!(omega.iter().any(|&w| w.abs() > 1e-3));
        // move x along a direction the head can see
        let w = Tensor::new(vec![4, 3], omega.clone()).unwrap();
        let col = |q: usize| -> Vec<f64> { (0..4).map(|i| omega[i * 3 + q]).collect() };
        let contrast: Vec<f64> = col(0).iter().zip(col(1)).map(|(a, b)| a - b).collect();
        prop_assume!(contrast.iter().any(|c| c.abs() > 1e-3));
        let y: Vec<f64> = x.iter().zip(&contrast).zip(&dx).map(|((x, c), d)| x + c + 0.01 * d).collect();
        let head = DynamicWeightHead::new(w, Tensor::vector(eps)).unwrap();
        prop_assert_ne!(head.compute_weights(&x).unwrap(), head.compute_weights(&y).unwrap());
    }

    #[test]
    fn attr_gradient_through_weight_head(x in unit_vec(5), omega in unit_vec(15), eps in unit_vec(3), probs in prop::collection::vec(0.05..0.95f64, 3), labels in prop::collection::vec(any::<bool>(), 3)) {
        let pairs: Vec<f64> = probs.iter().flat_map(|&p| [1.0 - p, p]).collect();
        let build = |g: &mut Graph<'_>, om: &[f64]| {
            let feature = g.constant(Tensor::vector(x.clone()));
            let head = mcfa::model::Layer {
                weight: g.variable(Tensor::new(vec![5, 3], om.to_vec()).unwrap()),
                bias: g.constant(Tensor::vector(eps.clone())),
            };
            let mu = weighting::dynamic_weights(g, feature, &head, HeadForm::FullyConnected).unwrap();
            let p = g.constant(Tensor::new(vec![3, 2], pairs.clone()).unwrap());
            (losses::attr_term(g, p, &labels, mu).unwrap(), head.weight)
        };
        let mut g = Graph::new();
        let (root, w) = build(&mut g, &omega);
        g.backward(root).unwrap();
        let analytic = g.grad(w).unwrap().to_vec();
        let numeric = numeric_grad(&omega, 1e-6, |om| {
            let mut g = Graph::inference();
            let (root, _) = build(&mut g, om);
            g.scalar(root)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            prop_assert!(rel_err(*a, *n) < 1e-4, "analytic {a} numeric {n}");
        }
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn joint_equals_sum_of_entries(seed in any::<u64>(), weighting in prop::sample::select(vec![Weighting::Dynamic, Weighting::FixedUniform])) {
        let model = generic_model(seed);
        let opts = SynthOptions { num_attributes: 3, ..SynthOptions::default() };
        for sample in synth::to_samples(&synth::generate(4, seed, &opts).unwrap(), &model.config) {
            let mut s = Session::new(&model);
            let x = s.image(&sample.image);
            let stages = s.forward_full(x).unwrap();
            let tasks = TaskSet::for_sample(&sample);
            let jl = joint_loss(&mut s.graph, &stages, &Targets::from(&sample), tasks, weighting).unwrap();
            let b = jl.breakdown(&s.graph);
            prop_assert!((b.joint - b.sum_of_entries()).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_tasks_get_zero_gradient(seed in any::<u64>()) {
        let model = generic_model(seed);
        let opts = SynthOptions { num_attributes: 3, ..SynthOptions::default() };
        let names = model.param_names();
        for sample in synth::to_samples(&synth::generate(4, seed, &opts).unwrap(), &model.config) {
            let tasks = TaskSet::for_sample(&sample);
            let mut s = Session::new(&model);
            let x = s.image(&sample.image);
            let stages = s.forward_full(x).unwrap();
            let jl = joint_loss(&mut s.graph, &stages, &Targets::from(&sample), tasks, Weighting::Dynamic).unwrap();
            s.graph.backward(jl.root).unwrap();
            for (name, grad) in names.iter().zip(s.param_grads()) {
                let group = param_group(name);
                let masked = (group.ends_with(".bbox") && !tasks.bbox)
                    || (group.ends_with(".landmark") && !tasks.landmark)
                    || ((group.ends_with(".attr") || group.ends_with(".dyn")) && !tasks.attr);
                if masked {
                    prop_assert!(grad.iter().all(|&v| v == 0.0), "{name} reached under {:?}", sample.kind);
                }
            }
        }
    }

    #[test]
    fn dynamic_weights_on_simplex_for_every_stage(seed in any::<u64>()) {
        let model = generic_model(seed);
        let mut r = rng(seed);
        let img = random_image(&mut r, &model.config);
        let mut s = Session::inference(&model);
        let x = s.image(&img);
        for v in s.forward_full(x).unwrap() {
            let mu = s.outputs(&v).dyn_weights;
            prop_assert!(mu.iter().all(|&m| m > 0.0));
            prop_assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroing_shared_s_changes_later_stages(seed in any::<u64>()) {
        let model = generic_model(seed);
        let img = random_image(&mut rng(seed), &model.config);
        let run = |zero: bool| {
            let mut s = Session::inference(&model);
            let x = s.image(&img);
            let p = s.build_pyramid(x).unwrap();
            let sv = s.forward_snet(p.small).unwrap();
            let shared = if zero {
                let shape = s.graph.shape(sv.shared).to_vec();
                s.graph.constant(Tensor::zeros(shape))
            } else {
                sv.shared
            };
            let m = s.forward_mnet(p.medium, shared).unwrap();
            let l = s.forward_lnet(p.large, m.shared).unwrap();
            (s.outputs(&m), s.outputs(&l))
        };
        let (m0, l0) = run(false);
        let (m1, l1) = run(true);
        prop_assert_ne!(m0, m1);
        prop_assert_ne!(l0, l1);
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let model = generic_model(seed);
        let img = random_image(&mut rng(seed), &model.config);
        let run = || {
            let mut s = Session::inference(&model);
            let x = s.image(&img);
            let out = s.forward_full(x).unwrap();
            out.iter().map(|v| s.outputs(v)).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        let bits = |o: &Vec<mcfa::model::StageOutputs>| -> Vec<u64> {
            o.iter().flat_map(|s| s.bbox.iter().chain(&s.landmarks).chain(&s.attr_probs).chain(&s.dyn_weights).chain([&s.face_prob]).map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
        };
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn shared_lengths_scale_linearly(k in 0u32..5) {
        let s = 1.0 / f64::from(1u32 << k);
        let cfg = ModelConfig { channel_scale: s, ..ModelConfig::default() };
        let [a, b, c] = cfg.shared_lengths();
        prop_assert_eq!(a as f64, 256.0 * s);
        prop_assert_eq!(b as f64, 1280.0 * s);
        prop_assert_eq!(c as f64, 1024.0 * s + 1280.0 * s);
    }

    #[test]
    fn served_samples_are_normalized_and_well_formed(seed in any::<u64>(), n in 1usize..12) {
        let cfg = tiny();
        let opts = SynthOptions { num_attributes: 3, source_side: 32, ..SynthOptions::default() };
        for sample in synth::to_samples(&synth::generate(n, seed, &opts).unwrap(), &cfg) {
            prop_assert!(sample.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(sample.validate(3, 5).is_ok());
        }
    }

    #[test]
    fn nonface_crops_clear_the_face(seed in any::<u64>(), left in 0u32..40, top in 0u32..40, side in 8u32..24) {
        let img = image::DynamicImage::new_luma8(64, 64);
        let face = BoundingBox::new(left as f64, top as f64, side as f64, side as f64);
        let crops = generate_nonface_crops(&img, &face, 4, seed, &tiny()).unwrap();
        for c in crops {
            // independent overlap computation
            let r = c.region;
            let ix = (r.left + r.width).min(face.left + face.width) - r.left.max(face.left);
            let iy = (r.top + r.height).min(face.top + face.height) - r.top.max(face.top);
            let inter = ix.max(0.0) * iy.max(0.0);
            let iou = inter / (r.width * r.height + face.width * face.height - inter);
            prop_assert!(iou < 0.001);
            prop_assert_eq!(c.sample.kind, SampleKind::NonFace);
        }
    }

    #[test]
    fn accepted_prediction_matches_training_forward(seed in any::<u64>()) {
        let model = generic_model(seed);
        let img = random_image(&mut rng(seed), &model.config);
        let res = predict(&model, &img, CascadeThresholds::open()).unwrap();
        prop_assert_eq!(res.status, PredictionStatus::Accepted);
        let mut s = Session::inference(&model);
        let x = s.image(&img);
        let full = s.forward_full(x).unwrap();
        let want = s.outputs(&full[2]);
        let got = res.final_outputs.unwrap();
        let bits = |o: &mcfa::model::StageOutputs| -> Vec<u64> {
            o.bbox.iter().chain(&o.landmarks).chain(&o.attr_probs).chain(&o.dyn_weights).chain([&o.face_prob]).map(|v| v.to_bits()).collect()
        };
        prop_assert_eq!(bits(&got), bits(&want));
    }
}

#[test]
fn zero_heads_give_uniform_weights() {
    let head = DynamicWeightHead::zeros(7, 4);
    let mu = head.compute_weights(&[0.3, -1.0, 2.0, 0.0, 5.0, 1.0, -4.0]).unwrap();
    assert!(mu.iter().all(|m| (m - 0.25).abs() < 1e-12));
}
