// Scratch diagnostics for world tuning. Not part of the deliverable surface.

use sicl_core::harness::{self, LossKind, RunConfig};
use sicl_core::synthgen;
use std::collections::BTreeSet;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: Vec<u64> = args
        .get(1)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0, 1]);
    let losses = [LossKind::Nce, LossKind::Sicl];

    for &seed in &seeds {
        let base = RunConfig::default();
        let config = harness::cell_config(&base, LossKind::Nce, seed);
        let windows = synthgen::generate(&config.world).unwrap();

        // subject leakage: raw-window probe predicting subject on seen data
        let (train, _) =
            synthgen::split(&windows, &config.split.train_set(), &config.split.test_set()).unwrap();
        let inertial: Vec<&synthgen::SensorWindow> = train
            .iter()
            .filter(|w| w.modality == synthgen::Modality::Inertial)
            .collect();
        let dim = 6 * synthgen::T_STEPS;
        let mut flat = sicl_core::numerics::Tensor::zeros(&[inertial.len(), dim]);
        let mut subj_labels = Vec::new();
        for (i, w) in inertial.iter().enumerate() {
            flat.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(w.values.data());
            subj_labels.push(w.subject_id);
        }
        let head = harness::train_linear_probe(&flat, &subj_labels, 12, 30, 0.001, 64, seed).unwrap();
        let leak = harness::probe_accuracy(&head, &flat, &subj_labels).unwrap();

        for loss in losses {
            let config = harness::cell_config(&base, loss, seed);
            let t0 = std::time::Instant::now();
            let pre = harness::pretrain(&config, &windows).unwrap();
            let pretrain_secs = t0.elapsed().as_secs_f64();
            let report = harness::linear_eval(&pre.encoders, &config, &windows).unwrap();

            // diagnostics: probe quality on seen subjects (train fit) and an
            // oracle probe trained directly on test features
            let (train, test) = synthgen::split(
                &windows,
                &config.split.train_set(),
                &config.split.test_set(),
            )
            .unwrap();
            let f_train = harness::extract_features(&pre.encoders, &train).unwrap();
            let f_test = harness::extract_features(&pre.encoders, &test).unwrap();
            let head = harness::train_linear_probe(
                &f_train.h, &f_train.labels, 6, config.linear_epochs, config.lr,
                config.batch_size, config.seed,
            )
            .unwrap();
            let train_fit = harness::probe_accuracy(&head, &f_train.h, &f_train.labels).unwrap();
            let cheat_head = harness::train_linear_probe(
                &f_test.h, &f_test.labels, 6, config.linear_epochs, config.lr,
                config.batch_size, config.seed,
            )
            .unwrap();
            let cheat = harness::probe_accuracy(&cheat_head, &f_test.h, &f_test.labels).unwrap();

            // subject probe on embeddings: how much subject info survives
            let subj_set: BTreeSet<u16> = f_test.subjects.iter().copied().collect();
            let remap: Vec<u16> = f_test
                .subjects
                .iter()
                .map(|s| subj_set.iter().position(|x| x == s).unwrap() as u16)
                .collect();
            let subj_head = harness::train_linear_probe(
                &f_test.h, &remap, subj_set.len(), config.linear_epochs, config.lr,
                config.batch_size, config.seed,
            )
            .unwrap();
            let subj_acc = harness::probe_accuracy(&subj_head, &f_test.h, &remap).unwrap();

            println!(
                "seed {seed} {loss}: test {:.3} | fit {train_fit:.3} cheat {cheat:.3} subj(z) {subj_acc:.3} leak(raw) {leak:.3} | gap {:.3} (all {:.3} intra {:.3}) | loss {:.3}->{:.3} | {pretrain_secs:.0}s",
                report.mean_class_accuracy,
                report.sim_stats.gap,
                report.sim_stats.mean_all,
                report.sim_stats.mean_intra_subject,
                pre.loss_curve.first().unwrap(),
                pre.loss_curve.last().unwrap(),
            );
        }
    }
}
