use fewshot_core::episodes::{episode_rng, sample_episode, split_base_novel, synth_task_domain, Item};
use fewshot_core::heads::{self, HeadKind, SupportSet};
use fewshot_core::numerics::{argmax, Tensor};
use fewshot_core::training::init_classifier;
use fewshot_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn separable_2d(per_class: usize) -> DatasetTable {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items = (0..2)
        .flat_map(|c| {
            let x0 = if c == 0 { -1.5 } else { 1.5 };
            (0..per_class)
                .map(|_| Item {
                    input: vec![x0 + rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0)],
                    label: c,
                    domain: "sep".into(),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    DatasetTable::new(items, vec!["neg".into(), "pos".into()], "sep", vec![2]).unwrap()
}

fn training_loss_and_accuracy(state: &HeadState, data: &DatasetTable) -> (f64, f64) {
    let cfg = HeadConfig::new(HeadKind::Baseline);
    let mut loss = 0.0;
    let mut correct = 0;
    for it in data.items() {
        let s = state.score(&it.input).unwrap();
        loss += heads::head_loss_value(&cfg, &s, it.label).unwrap();
        correct += usize::from(argmax(&s) == it.label);
    }
    (loss / data.len() as f64, correct as f64 / data.len() as f64)
}

#[test]
fn baseline_pretraining_fits_separable_data_and_descends() {
    let data = separable_2d(50);
    let backbone = build_backbone(BackboneConfig::Identity { dim: 2 }, 0).unwrap();
    let head = HeadConfig::new(HeadKind::Baseline);
    let schedule = TrainSchedule::pretrain(100, 3);
    let init = heads::HeadState::Linear {
        weight: init_classifier(HeadKind::Baseline, 2, 2, 3 ^ 0x5eed).unwrap().get("head.weight").unwrap().clone(),
        bias: init_classifier(HeadKind::Baseline, 2, 2, 3 ^ 0x5eed).unwrap().get("head.bias").unwrap().clone(),
    };
    let (_, state, log) = pretrain_baseline(backbone, &head, &data, &schedule).unwrap();
    let (loss0, _) = training_loss_and_accuracy(&init, &data);
    let (loss1, acc) = training_loss_and_accuracy(&state, &data);
    assert!(acc >= 0.99, "accuracy {acc}");
    assert!(loss1 < loss0, "{loss1} !< {loss0}");
    assert_eq!(log.records.len(), 100 * 13);
    assert!(log.records.last().unwrap().accuracy.unwrap() >= 0.99);
}

#[test]
fn pretraining_is_reproducible_and_logs_csv() {
    let data = separable_2d(10);
    let bb = build_backbone(BackboneConfig::Mlp { widths: vec![2, 4, 4] }, 2).unwrap();
    let head = HeadConfig::new(HeadKind::BaselinePp);
    let s = TrainSchedule::pretrain(3, 8);
    let (b1, h1, l1) = pretrain_baseline(bb.clone(), &head, &data, &s).unwrap();
    let (b2, h2, l2) = pretrain_baseline(bb, &head, &data, &s).unwrap();
    assert_eq!(b1, b2);
    assert_eq!(h1, h2);
    assert!(l1.same_trajectory(&l2));
    let csv = l1.to_csv();
    assert!(csv.starts_with("step,loss,accuracy,seconds\n"));
    assert_eq!(csv.lines().count(), 1 + l1.records.len());
}

#[test]
fn checkpoints_are_written_at_the_interval() {
    let data = separable_2d(8);
    let bb = build_backbone(BackboneConfig::Mlp { widths: vec![2, 3] }, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut s = TrainSchedule::pretrain(4, 1);
    s.checkpoint_interval = Some(2);
    s.checkpoint_dir = Some(dir.path().to_path_buf());
    s.fingerprint = "abcd".into();
    let (trained, _, _) = pretrain_baseline(bb, &HeadConfig::new(HeadKind::Baseline), &data, &s).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 2);
    let last = Checkpoint::load(&files[1]).unwrap();
    assert_eq!(last.step, 4);
    assert_eq!(last.backbone.params.checksum(), trained.params.checksum());
}

#[test]
fn identity_backbone_meta_training_changes_nothing() {
    let src = synth_task_domain(&ShiftConfig {
        classes: 12,
        samples_per_class: 15,
        ..ShiftConfig::default()
    })
    .unwrap();
    let (base, novel) = split_base_novel(&src, &(0..6).collect::<Vec<_>>()).unwrap();
    let bb = build_backbone(BackboneConfig::Identity { dim: 16 }, 0).unwrap();
    let head = HeadConfig::new(HeadKind::Proto);
    let out = meta_train(&head, bb.clone(), &base, 5, 1, 4, &TrainSchedule::meta_train(20, 1)).unwrap();
    assert_eq!(out.backbone.params.checksum(), bb.params.checksum());
    assert!(out.relation.is_none());
    assert!(out.log.records.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
    let cfg = MetaTestConfig::new(5, 1, 4, 50, 9);
    let before = meta_test(&bb, &head, None, &novel, &cfg).unwrap();
    let after = meta_test(&out.backbone, &head, None, &novel, &cfg).unwrap();
    assert_eq!(before.mean_accuracy, after.mean_accuracy);
}

#[test]
fn every_meta_trainable_head_runs_with_finite_losses() {
    let src = synth_task_domain(&ShiftConfig {
        classes: 8,
        samples_per_class: 10,
        dim: 6,
        ..ShiftConfig::default()
    })
    .unwrap();
    let bb = build_backbone(BackboneConfig::Mlp { widths: vec![6, 8, 4] }, 5).unwrap();
    for kind in [HeadKind::Matching, HeadKind::Proto, HeadKind::Relation, HeadKind::Subspace] {
        let head = HeadConfig::new(kind);
        let out = meta_train(&head, bb.clone(), &src, 3, 2, 2, &TrainSchedule::meta_train(15, 2)).unwrap();
        assert!(out.log.records.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0), "{kind}");
        assert_ne!(out.backbone.params.checksum(), bb.params.checksum(), "{kind}");
        assert_eq!(out.relation.is_some(), kind == HeadKind::Relation);
        let r = meta_test(&out.backbone, &head, out.relation.as_ref(), &src, &MetaTestConfig::new(3, 2, 2, 5, 1)).unwrap();
        r.check_invariants(2).unwrap();
    }
}

#[test]
fn meta_train_propagates_capacity_errors() {
    let src = synth_task_domain(&ShiftConfig {
        classes: 4,
        samples_per_class: 3,
        ..ShiftConfig::default()
    })
    .unwrap();
    let bb = build_backbone(BackboneConfig::Identity { dim: 16 }, 0).unwrap();
    let err = meta_train(&HeadConfig::new(HeadKind::Proto), bb, &src, 5, 1, 1, &TrainSchedule::meta_train(5, 0)).unwrap_err();
    assert!(matches!(err, Error::Capacity(_)));
}

#[test]
fn fine_tuning_fits_separable_support_without_touching_the_backbone() {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for c in 0..5 {
        let angle = c as f64 * std::f64::consts::TAU / 5.0;
        for _ in 0..5 {
            rows.push(vec![3.0 * angle.cos() + rng.random_range(-0.3..0.3), 3.0 * angle.sin() + rng.random_range(-0.3..0.3)]);
            labels.push(c);
        }
    }
    let support = SupportSet::new(Tensor::from_rows(&rows).unwrap(), labels.clone(), 5).unwrap();
    let bb = build_backbone(BackboneConfig::Identity { dim: 2 }, 0).unwrap();
    let before = serde_json::to_vec(&bb).unwrap();
    for (kind, iterations) in [(HeadKind::Baseline, 100), (HeadKind::BaselinePp, 300)] {
        let mut head = HeadConfig::new(kind);
        head.cosine_scale = 10.0;
        let state = fine_tune(&bb, &head, &support, &TrainSchedule::fine_tune(iterations, 3)).unwrap();
        let acc = rows.iter().zip(&labels).filter(|(r, &l)| state.predict(r).unwrap() == l).count();
        assert_eq!(acc, 25, "{kind}");
    }
    assert_eq!(serde_json::to_vec(&bb).unwrap(), before);
}

#[test]
fn per_episode_accuracy_is_correct_over_queries() {
    let data = synth_task_domain(&ShiftConfig {
        classes: 6,
        samples_per_class: 20,
        ..ShiftConfig::default()
    })
    .unwrap();
    let bb = build_backbone(BackboneConfig::Identity { dim: 16 }, 0).unwrap();
    let head = HeadConfig::new(HeadKind::Proto);
    let cfg = MetaTestConfig::new(5, 5, 8, 30, 2);
    let report = meta_test(&bb, &head, None, &data, &cfg).unwrap();
    report.check_invariants(8).unwrap();
    for (i, &acc) in report.per_episode_accuracy.iter().enumerate() {
        let mut rng = episode_rng(2, i as u64);
        let ep = sample_episode(&data, 5, 5, 8, &mut rng).unwrap();
        let support = SupportSet::new(data.batch(&ep.support), ep.support_labels.clone(), 5).unwrap();
        let state = heads::fit(HeadKind::Proto, &support, None).unwrap();
        let correct = ep
            .query
            .iter()
            .zip(&ep.query_labels)
            .filter(|(&q, &l)| state.predict(&data.items()[q].input).unwrap() == l)
            .count();
        assert_eq!(acc, correct as f64 / 40.0);
    }
}
