//! Regime contracts on a tiny trunk and 16x16 renders.

use mtct_core::checkpoint::Checkpoint;
use mtct_core::data::*;
use mtct_core::metrics::predict_attributes;
use mtct_core::model::{MtnModel, ParamGroup, TrunkConfig};
use mtct_core::trainer::*;
use mtct_core::AttributeSchema;

fn arch() -> ModelConfig {
    ModelConfig { trunk: TrunkConfig::with_widths(16, [6, 8, 8, 8, 8]).unwrap(), hidden: (12, 12) }
}

fn spec(seed: u64) -> DataSpec {
    DataSpec { n_source: 48, n_target: 24, n_pairs: 12, image_size: 16, seed, ..Default::default() }
}

fn hyper(seed: u64) -> Hyperparameters {
    Hyperparameters { batch_size: 8, lr_stage1: 0.01, lr_finetune: 0.005, epochs_stage1: 2, epochs_stage2: 2, seed, ..Default::default() }
}

fn datasets(seed: u64) -> (Dataset, Dataset) {
    let schema = AttributeSchema::desk_default();
    let train = generate_dataset(&schema, &spec(seed)).unwrap();
    let held = generate_heldout(&schema, &spec(seed), &HeldoutSpec { n_target: 12, n_pairs: 8 }).unwrap();
    (train, held)
}

fn bits(m: &MtnModel, keep: impl Fn(ParamGroup) -> bool) -> Vec<(String, Vec<u64>)> {
    m.params()
        .iter()
        .filter(|p| keep(p.group))
        .map(|p| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn below_conv5(g: ParamGroup) -> bool {
    matches!(g, ParamGroup::Trunk { block } if block < 5)
}

fn trunk(g: ParamGroup) -> bool {
    !g.is_fc()
}

#[test]
fn stage1_overfits_ten_samples() {
    let schema = AttributeSchema::desk_default();
    let mut data = generate_dataset(&schema, &DataSpec { n_source: 10, n_target: 0, n_pairs: 0, missing_rate: 0.0, ..spec(3) }).unwrap();
    data = data.domain_subset(Domain::Source);
    let a = ModelConfig { trunk: TrunkConfig::with_widths(16, [16; 5]).unwrap(), hidden: (32, 32) };
    let h = Hyperparameters { batch_size: 10, lr_stage1: 0.003, lr_finetune: 0.001, epochs_stage1: 400, ..hyper(3) };
    let s1 = run_stage1(&data, &a, &h).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let preds = predict_attributes(&s1.model, &data.images(&idx).unwrap(), 0.0).unwrap();
    let (mut right, mut total) = (0, 0);
    for (row, s) in preds.iter().zip(data.samples()) {
        for (p, label) in row.iter().zip(&s.labels) {
            total += 1;
            right += (p.value == *label) as usize;
        }
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.99, "train accuracy {acc}; losses {:?}", s1.record.series("softmax"));
}

#[test]
fn mtct_freezes_and_hands_off() {
    let (train, held) = datasets(5);
    let h = hyper(5);
    let data = TrainData { train: &train, heldout: Some(&held) };
    let s1 = run_stage1(&train, &arch(), &h).unwrap();
    let out = train_regime_with(TrainRegime::Mtct, &data, &arch(), &h, Some(&s1)).unwrap();

    let stages: Vec<&str> = out.record.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(stages, ["stage1", "stage2"]);
    let names: Vec<&str> = out.checkpoints.iter().map(|c| c.stage.as_str()).collect();
    assert_eq!(names, ["stage1", "final"]);
    assert_eq!(out.checkpoints[0].model, s1.model);

    let source = out.source_stream.as_ref().unwrap();
    assert_eq!(bits(&out.model, below_conv5), bits(&s1.model, below_conv5));
    assert_eq!(bits(source, trunk), bits(&s1.model, trunk));
    assert_ne!(bits(&out.model, |g| !below_conv5(g)), bits(&s1.model, |g| !below_conv5(g)));
    assert_ne!(bits(source, |g| g.is_fc()), bits(&s1.model, |g| g.is_fc()));

    let (before, after) = out.record.stages[1].triplet_satisfaction.unwrap();
    assert!((0.0..=100.0).contains(&before) && (0.0..=100.0).contains(&after));
}

#[test]
fn ftt_moves_only_fc_layers() {
    let (train, _) = datasets(6);
    let h = hyper(6);
    let s1 = run_stage1(&train, &arch(), &h).unwrap();
    let data = TrainData { train: &train, heldout: None };
    let out = train_regime_with(TrainRegime::Ftt, &data, &arch(), &h, Some(&s1)).unwrap();
    assert_eq!(bits(&out.model, trunk), bits(&s1.model, trunk));
    assert_ne!(bits(&out.model, |g| g.is_fc()), bits(&s1.model, |g| g.is_fc()));
    assert_eq!(out.checkpoints.len(), 2);
}

#[test]
fn noadpt_never_reads_target_images() {
    let (train, _) = datasets(7);
    let data = TrainData { train: &train, heldout: None };
    let before = train.reads(Domain::Target);
    let out = train_regime(TrainRegime::NoAdpt, &data, &arch(), &hyper(7)).unwrap();
    assert_eq!(train.reads(Domain::Target), before);
    assert!(train.reads(Domain::Source) > 0);
    assert_eq!(out.checkpoints.len(), 1);

    // and it runs on a source-only set
    let source_only = train.domain_subset(Domain::Source);
    let data = TrainData { train: &source_only, heldout: None };
    assert!(train_regime(TrainRegime::NoAdpt, &data, &arch(), &hyper(7)).is_ok());
}

#[test]
fn end2end_trains_every_tensor_of_both_streams() {
    let (train, _) = datasets(8);
    let h = hyper(8);
    let data = TrainData { train: &train, heldout: None };
    let out = train_regime(TrainRegime::End2End, &data, &arch(), &h).unwrap();
    assert_eq!(out.record.stages.len(), 1);
    let source = out.source_stream.as_ref().unwrap();
    for m in [&out.model, source] {
        assert!(m.params().iter().all(|p| !p.frozen));
    }
    // both streams were updated away from any shared start
    assert_ne!(bits(&out.model, trunk), bits(source, trunk));
}

#[test]
fn regimes_are_bit_reproducible() {
    let (train, held) = datasets(9);
    let data = TrainData { train: &train, heldout: Some(&held) };
    for regime in TrainRegime::ALL {
        let a = train_regime(regime, &data, &arch(), &hyper(9)).unwrap();
        let b = train_regime(regime, &data, &arch(), &hyper(9)).unwrap();
        let bytes = |o: &RegimeOutcome| o.checkpoints.iter().map(|c| c.to_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b), "{regime}");
        let strip = |o: &RegimeOutcome| o.record.stages.iter().map(|s| (s.series("total"), s.series("softmax"), s.triplet_satisfaction)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b), "{regime}");
    }
}

#[test]
fn regimes_needing_target_data_reject_source_only_sets() {
    let (train, _) = datasets(10);
    let source_only = train.domain_subset(Domain::Source);
    let data = TrainData { train: &source_only, heldout: None };
    for regime in [TrainRegime::Ftt, TrainRegime::Mtct, TrainRegime::End2End] {
        assert!(train_regime(regime, &data, &arch(), &hyper(10)).is_err(), "{regime}");
    }
}

#[test]
fn shared_stage1_must_match_the_configuration() {
    let (train, _) = datasets(11);
    let s1 = run_stage1(&train, &arch(), &hyper(11)).unwrap();
    let data = TrainData { train: &train, heldout: None };
    let other = Hyperparameters { lr_stage1: 0.02, ..hyper(11) };
    assert!(train_regime_with(TrainRegime::Ftt, &data, &arch(), &other, Some(&s1)).is_err());
    // later-stage settings may differ
    let later = Hyperparameters { lr_finetune: 0.001, epochs_stage2: 1, ..hyper(11) };
    assert!(train_regime_with(TrainRegime::Ftt, &data, &arch(), &later, Some(&s1)).is_ok());
}

#[test]
fn checkpoints_round_trip_through_files() {
    let (train, _) = datasets(12);
    let data = TrainData { train: &train, heldout: None };
    let out = train_regime(TrainRegime::NoAdpt, &data, &arch(), &hyper(12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.ckpt");
    out.checkpoints[0].save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model, out.model);
    assert_eq!(back.to_bytes(), out.checkpoints[0].to_bytes());
}
