//! Protocol-level behavior of the training harness on small worlds.

use sicl_core::harness::{self, EncoderStack, LossKind, RunConfig, SplitSpec};
use sicl_core::model::EncoderParams;
use sicl_core::numerics::Tensor;
use sicl_core::rng::{stream, Domain};
use sicl_core::synthgen::{self, Modality, SensorWindow, WorldSpec};

fn tiny_config(loss: LossKind, seed: u64) -> RunConfig {
    RunConfig {
        loss,
        pretrain_epochs: 5,
        linear_epochs: 10,
        batch_size: 8,
        seed,
        world: WorldSpec {
            num_subjects: 4,
            num_activities: 2,
            windows_per_pair: 8,
            subject_nuisance_strength: 0.6,
            noise_sigma: 0.05,
            rng_seed: seed,
        },
        split: SplitSpec {
            train_subjects: vec![0, 1, 2],
            test_subjects: vec![3],
        },
        ..RunConfig::default()
    }
}

#[test]
fn raw_windows_leak_subject_identity() {
    // default world, nuisance 0.8: a linear probe on raw flattened windows
    // identifies seen subjects far above the 1-in-12 chance level
    let world = WorldSpec::default();
    let windows = synthgen::generate(&world).unwrap();
    let inertial: Vec<&SensorWindow> = windows
        .iter()
        .filter(|w| w.modality == Modality::Inertial)
        .collect();
    let dim = 6 * synthgen::T_STEPS;
    // hold out every fourth window of each subject
    let train: Vec<&&SensorWindow> = inertial.iter().enumerate().filter(|(i, _)| i % 4 != 0).map(|(_, w)| w).collect();
    let held: Vec<&&SensorWindow> = inertial.iter().enumerate().filter(|(i, _)| i % 4 == 0).map(|(_, w)| w).collect();
    let flatten = |set: &[&&SensorWindow]| {
        let mut x = Tensor::zeros(&[set.len(), dim]);
        let mut labels = Vec::new();
        for (i, w) in set.iter().enumerate() {
            x.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(w.values.data());
            labels.push(w.subject_id);
        }
        (x, labels)
    };
    let (x_train, y_train) = flatten(&train);
    let (x_held, y_held) = flatten(&held);
    let probe = harness::train_linear_probe(&x_train, &y_train, 12, 30, 0.001, 64, 0).unwrap();
    let acc = harness::probe_accuracy(&probe, &x_held, &y_held).unwrap();
    assert!(
        acc > 0.6,
        "subject leakage probe reached only {acc:.3} (chance 0.083)"
    );
}

#[test]
fn pretraining_loss_descends_on_tiny_world() {
    for loss in [LossKind::Nce, LossKind::Sicl] {
        let config = tiny_config(loss, 11);
        let windows = synthgen::generate(&config.world).unwrap();
        let out = harness::pretrain(&config, &windows).unwrap();
        let first = out.loss_curve.first().unwrap();
        let last = out.loss_curve.last().unwrap();
        assert!(last < first, "{loss}: {first} -> {last} did not descend");
    }
}

#[test]
fn finetune_beats_linear_eval_in_median_over_three_seeds() {
    let mut diffs = Vec::new();
    for seed in 0..3 {
        let config = tiny_config(LossKind::Nce, seed);
        let windows = synthgen::generate(&config.world).unwrap();
        let pre = harness::pretrain(&config, &windows).unwrap();
        let linear = harness::linear_eval(&pre.encoders, &config, &windows).unwrap();
        let tuned = harness::finetune(Some(&pre.encoders), &config, &windows).unwrap();
        diffs.push(tuned.mean_class_accuracy - linear.mean_class_accuracy);
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(
        diffs[1] >= 0.0,
        "median finetune-minus-linear gain {diffs:?} is negative"
    );
}

#[test]
fn finetune_from_pretrained_and_random_init_both_report() {
    let config = tiny_config(LossKind::Nce, 5);
    let windows = synthgen::generate(&config.world).unwrap();
    let pre = harness::pretrain(&config, &windows).unwrap();
    let from_pretrained = harness::finetune(Some(&pre.encoders), &config, &windows).unwrap();
    let from_random = harness::finetune(None, &config, &windows).unwrap();
    for report in [&from_pretrained, &from_random] {
        assert!((0.0..=1.0).contains(&report.mean_class_accuracy));
        assert!(!report.per_class_accuracy.is_empty());
    }
}

#[test]
fn subject_clustered_embeddings_show_a_large_gap() {
    // constructed clusters: each subject's windows collapse to its own
    // orthogonal direction, so intra-subject similarity is 1 and the
    // all-pairs mean is far below it
    let analysis = {
        let windows: Vec<SensorWindow> = (0..4u16)
            .flat_map(|subject| {
                (0..3).map(move |_| {
                    let mut data = vec![0.0; 6 * synthgen::T_STEPS];
                    for (i, v) in data.iter_mut().enumerate() {
                        // one distinct constant channel pattern per subject
                        if i / synthgen::T_STEPS == subject as usize {
                            *v = 1.0;
                        }
                    }
                    SensorWindow {
                        values: Tensor::from_vec(vec![6, synthgen::T_STEPS], data).unwrap(),
                        subject_id: subject,
                        activity_id: 0,
                        modality: Modality::Inertial,
                    }
                })
            })
            .collect();
        let stack = EncoderStack {
            entries: vec![(
                Modality::Inertial,
                EncoderParams::init(6, &mut stream(3, Domain::Init, 0)),
            )],
        };
        harness::analyze_similarities(&stack, &windows, 0).unwrap()
    };
    assert!(
        analysis.stats.mean_intra_subject > analysis.stats.mean_all,
        "intra {} vs all {}",
        analysis.stats.mean_intra_subject,
        analysis.stats.mean_all
    );
    assert!(analysis.stats.gap > 0.05, "gap {}", analysis.stats.gap);
    assert!((analysis.stats.mean_intra_subject - 1.0).abs() < 1e-6);
}

#[test]
fn identical_config_reproduces_report_numbers() {
    let config = tiny_config(LossKind::Sicl, 21);
    let windows = synthgen::generate(&config.world).unwrap();
    let a = harness::run_cell(&config).unwrap();
    let b = harness::run_cell(&config).unwrap();
    assert!(a.same_numbers(&b));
    // and the dataset regenerates byte-identically
    let again = synthgen::generate(&config.world).unwrap();
    assert_eq!(windows, again);
}

#[test]
fn cmc_pretraining_runs_and_evaluates_with_concatenated_features() {
    let config = tiny_config(LossKind::Cmc, 2);
    let windows = synthgen::generate(&config.world).unwrap();
    let pre = harness::pretrain(&config, &windows).unwrap();
    assert_eq!(pre.encoders.entries.len(), 2);
    assert_eq!(pre.encoders.repr_dim(), 128);
    let report = harness::linear_eval(&pre.encoders, &config, &windows).unwrap();
    assert!((0.0..=1.0).contains(&report.mean_class_accuracy));
}
