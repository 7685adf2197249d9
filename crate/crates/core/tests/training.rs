//! Training protocol, checkpoints and evaluation across modules.

use featadv::checkpoint::{load_checkpoint, save_checkpoint};
use featadv::data::{generate_dataset, Dataset, DomainSpec};
use featadv::eval::{confusion, iou};
use featadv::losses::{LabelMap, IGNORE_LABEL};
use featadv::models::ModelConfig;
use featadv::perturb::{AttackMethod, PerturbConfig};
use featadv::train::{self, Components, Phase, TrainConfig};
use featadv::Error;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        encoder_channels: vec![4, 8, 8, 8],
        head_hidden: 8,
        disc_channels: vec![4, 4, 4],
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        lr: 2.5e-3,
        pretrain_iters: 6,
        max_iter: 4,
        batch_size: 2,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn data() -> (Dataset, Dataset) {
    let spec = DomainSpec {
        height: 32,
        width: 32,
        ..DomainSpec::default()
    };
    let target = DomainSpec {
        height: 32,
        width: 32,
        seed: 1,
        ..DomainSpec::target_default()
    };
    (
        generate_dataset(&spec, 6, "source").unwrap(),
        generate_dataset(&target, 6, "target").unwrap(),
    )
}

#[test]
fn adaptation_freezes_the_feature_extractor() {
    let (src, tgt) = data();
    let perturb = PerturbConfig::default();
    let base = train::pretrain_source(&src, &model_cfg(), &perturb, &train_cfg()).unwrap();
    let adapted = train::adapt(base.clone(), &src, &tgt, &perturb, &train_cfg()).unwrap();
    assert_eq!(adapted.phase, Phase::Adapt);
    assert_eq!(adapted.model.g_checksum(), base.model.g_checksum());
    assert_ne!(adapted.model.checksum(), base.model.checksum());
    assert_ne!(adapted.disc.checksum(), base.disc.checksum());
}

#[test]
fn adaptation_with_every_component_off_changes_nothing() {
    let (src, tgt) = data();
    let perturb = PerturbConfig::default();
    let base = train::pretrain_source(&src, &model_cfg(), &perturb, &train_cfg()).unwrap();
    let off = TrainConfig {
        components: Components {
            perturbation: false,
            lovasz: false,
            entropy: false,
        },
        ..train_cfg()
    };
    let adapted = train::adapt(base.clone(), &src, &tgt, &perturb, &off).unwrap();
    assert_eq!(adapted.model.checksum(), base.model.checksum());
}

#[test]
fn every_attack_method_trains_and_logs_intensities() {
    let (src, tgt) = data();
    let base = train::pretrain_source(&src, &model_cfg(), &PerturbConfig::default(), &train_cfg()).unwrap();
    for method in [
        AttackMethod::Fgspm,
        AttackMethod::IFgsm,
        AttackMethod::MiFgspm,
        AttackMethod::IFgspm,
    ] {
        let perturb = PerturbConfig {
            method,
            ..PerturbConfig::default()
        };
        let s = train::adapt(base.clone(), &src, &tgt, &perturb, &train_cfg()).unwrap();
        let steps = if method == AttackMethod::Fgspm { 1 } else { perturb.k };
        // One record per objective and step of each source generation.
        assert_eq!(s.intensities.len(), train_cfg().max_iter * steps * 3, "{method}");
        assert!(s.intensities.iter().all(|r| r.log10_l1_norm.is_finite()));
    }
}

#[test]
fn checkpoints_round_trip_exactly() {
    let (src, tgt) = data();
    let perturb = PerturbConfig::default();
    let base = train::pretrain_source(&src, &model_cfg(), &perturb, &train_cfg()).unwrap();
    let state = train::adapt(base, &src, &tgt, &perturb, &train_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&state, "abc", &path).unwrap();
    let (back, hash) = load_checkpoint(&path).unwrap();
    assert_eq!(hash, "abc");
    assert_eq!(back, state);
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    std::fs::write(&path, "{\"format\": \"something else\"}").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    let missing = dir.path().join("none.json");
    assert!(matches!(load_checkpoint(&missing), Err(Error::Missing { .. })));
}

#[test]
fn confusion_and_iou_match_a_hand_count() {
    // gt:   0 0 1 1 2 255
    // pred: 0 1 1 1 0 2
    let gt = LabelMap::new(1, 1, 6, vec![0, 0, 1, 1, 2, IGNORE_LABEL]).unwrap();
    let pred = LabelMap::new(1, 1, 6, vec![0, 1, 1, 1, 0, 2]).unwrap();
    let cm = confusion(&pred, &gt, 4).unwrap();
    assert_eq!(cm.total(), 5);
    assert_eq!(cm.get(0, 0), 1);
    assert_eq!(cm.get(0, 1), 1);
    assert_eq!(cm.get(2, 0), 1);
    let r = iou(&cm).unwrap();
    // class 0: tp 1, fp 1, fn 1; class 1: tp 2, fp 1; class 2: fn 1; class 3 absent.
    assert_eq!(r.per_class, vec![Some(1.0 / 3.0), Some(2.0 / 3.0), Some(0.0), None]);
    assert!((r.miou - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(r.subset_mean(&[2, 3]), Some(0.0));
}
