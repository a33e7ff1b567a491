//! Gradient checking with injected faults, and the train, checkpoint and
//! evaluate round trip through files on disk.

use mcfa::checkpoint;
use mcfa::gradcheck::{gradcheck, GradcheckOptions};
use mcfa::synth::{self, SynthOptions};
use mcfa::trainer::{self, ablate, load_dataset, FINAL_CHECKPOINT};
use mcfa::{evaluate, Execution, ModelConfig, OpKind, TrainConfig, Variant};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        model: ModelConfig {
            channel_scale: 1.0 / 16.0,
            ..ModelConfig::default().with_side(32)
        },
        execution: Execution::Sequential,
        ..TrainConfig::default()
    }
}

#[test]
fn healthy_gradients_pass() {
    let report = gradcheck(&GradcheckOptions::default()).unwrap();
    assert!(report.passed(), "{}", report.table());
    assert_eq!(report.groups.len(), 18);
}

#[test]
fn injected_faults_are_caught() {
    for kind in [
        OpKind::Conv2d,
        OpKind::Softmax,
        OpKind::FullyConnected,
        OpKind::Concat,
        OpKind::Relu,
    ] {
        let opts = GradcheckOptions {
            fault: Some(kind),
            ..GradcheckOptions::default()
        };
        let report = gradcheck(&opts).unwrap();
        assert!(!report.passed(), "{kind:?} fault went unnoticed:\n{}", report.table());
    }
}

#[test]
fn manifest_train_checkpoint_evaluate() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions {
        source_side: 48,
        ..SynthOptions::default()
    };
    let items = synth::generate(24, 9, &opts).unwrap();
    let manifest = synth::write(&items, &dir.path().join("data"), &opts).unwrap();
    let samples = load_dataset(&manifest, &cfg.model).unwrap();
    assert_eq!(samples.len(), 24);

    let out = dir.path().join("run");
    let trained = trainer::train(&cfg, &samples, Some(&out)).unwrap();
    assert_eq!(trained.history.epochs.len(), 3);
    assert!(trained.history.epochs.iter().all(|e| e.weights_on_simplex));

    let loaded = checkpoint::load(&out.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(loaded, trained.model);
    let again = evaluate(&loaded, &samples, cfg.thresholds, Execution::Parallel).unwrap();
    assert_eq!(again, trained.metrics);
    let mean = again.per_attribute_accuracy.iter().sum::<f64>() / again.per_attribute_accuracy.len() as f64;
    assert!((again.average_accuracy - mean).abs() < 1e-9);
}

#[test]
fn ablation_variants_train_differently() {
    let cfg = tiny_config();
    let items = synth::generate(16, 4, &SynthOptions::default()).unwrap();
    let samples = synth::to_samples(&items, &cfg.model);
    let report = ablate(&cfg, &samples, None).unwrap();
    let names: Vec<_> = report.variants.iter().map(|v| v.variant).collect();
    assert_eq!(names, Variant::ALL.to_vec());
    let traces: Vec<Vec<f64>> = report.variants.iter().map(|v| v.history.loss_trace()).collect();
    for i in 0..traces.len() {
        for j in i + 1..traces.len() {
            assert_ne!(traces[i], traces[j], "{:?} and {:?}", names[i], names[j]);
        }
    }
    assert!(report.table().contains("MCFA_FAC"));
}
