use cdformer_core::augment::{composite_calls, AugmentConfig};
use cdformer_core::dataset::{synthesize_fleet, BatterySeries, NormalizationState, SynthParams, WindowedSample};
use cdformer_core::eval::{aggregate, rollout, RolloutMode};
use cdformer_core::model::{CdformerModel, ModelConfig, Variant};
use cdformer_core::training::{evaluate_loss, run_loocv, split_train_val, train_split, TrainConfig};

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        window_len: 8,
        cnn_channels: 4,
        drsn_blocks: 1,
        d_model: 8,
        heads: 2,
        d_ff: 8,
        encoder_layers: 1,
        reg_hidden: 4,
        variant,
        ..ModelConfig::default()
    }
}

fn fleet(n: usize, cycles: u32) -> Vec<BatterySeries> {
    synthesize_fleet(&SynthParams { n_cycles: cycles, ..SynthParams::default() }, n, 12).unwrap()
}

fn windows(batteries: &[BatterySeries], l: usize) -> (Vec<WindowedSample>, Vec<WindowedSample>) {
    let norm = NormalizationState::fit(batteries, batteries[0].profile.features()).unwrap();
    let refs: Vec<&BatterySeries> = batteries.iter().collect();
    split_train_val(&refs, &norm, l, 0.2).unwrap()
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let (train, val) = windows(&fleet(2, 60), 8);
    let model = CdformerModel::build(tiny(Variant::Cdformer), 1).unwrap();
    let cfg = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
    let out = train_split(model.clone(), &train, &val, &cfg).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.steps, 0);
    assert_eq!(out.model.params().to_records(), model.params().to_records());
}

#[test]
fn patience_one_stops_after_second_worse_epoch() {
    // training pulls predictions up while the validation targets sit far below
    let (mut train, mut val) = windows(&fleet(2, 60), 8);
    train.iter_mut().for_each(|w| w.target = 5.0);
    val.iter_mut().for_each(|w| w.target = -5.0);
    let model = CdformerModel::build(tiny(Variant::BaselineFc), 2).unwrap();
    let cfg = TrainConfig { patience: 1, lr: 1e-2, max_epochs: 50, ..TrainConfig::default() };
    let out = train_split(model, &train, &val, &cfg).unwrap();
    assert_eq!(out.history.len(), 2, "{:?}", out.history);
    assert!(out.history[1].val_loss > out.history[0].val_loss);
    assert_eq!(out.best_epoch, Some(1));
}

#[test]
fn identical_config_replays_bit_for_bit() {
    let (train, val) = windows(&fleet(2, 70), 8);
    let cfg = TrainConfig { max_epochs: 3, seed: 4, augment: Some(AugmentConfig::default()), ..TrainConfig::default() };
    let run = || {
        let model = CdformerModel::build(tiny(Variant::Cdformer), 4).unwrap();
        train_split(model, &train, &val, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params().to_records(), b.model.params().to_records());
}

#[test]
fn evaluation_never_augments() {
    let batteries = fleet(2, 60);
    let (train, val) = windows(&batteries, 8);
    let cfg = TrainConfig { max_epochs: 1, augment: Some(AugmentConfig::default()), ..TrainConfig::default() };
    let model = CdformerModel::build(tiny(Variant::Cdformer), 5).unwrap();
    let before = composite_calls();
    let out = train_split(model, &train, &val, &cfg).unwrap();
    assert_eq!(composite_calls() - before, train.len() as u64);

    let norm = NormalizationState::fit(&batteries, batteries[0].profile.features()).unwrap();
    let before = composite_calls();
    evaluate_loss(&out.model, &val, 1.0).unwrap();
    for mode in [RolloutMode::OneStep, RolloutMode::Recursive] {
        rollout(&out.model, &batteries[0], &norm, 8, mode).unwrap();
    }
    assert_eq!(composite_calls(), before);
}

#[test]
fn smoothed_training_loss_decreases() {
    let (train, val) = windows(&fleet(3, 120), 8);
    let model = CdformerModel::build(tiny(Variant::Cdformer), 6).unwrap();
    let cfg = TrainConfig { max_epochs: 12, patience: 100, ..TrainConfig::default() };
    let out = train_split(model, &train, &val, &cfg).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
    let head = losses[..3].iter().sum::<f64>() / 3.0;
    let tail = losses[losses.len() - 3..].iter().sum::<f64>() / 3.0;
    assert!(tail < head, "{losses:?}");
}

#[test]
fn loocv_aggregate_is_mean_of_splits() {
    let batteries = fleet(3, 60);
    let cfg = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let res = run_loocv(&batteries, &tiny(Variant::CnnFc), &cfg, RolloutMode::OneStep, 1).unwrap();
    let reports = res.reports();
    assert_eq!(reports.len(), 3);
    let agg = res.aggregate.unwrap();
    let mean = reports.iter().map(|r| r.rmse).sum::<f64>() / 3.0;
    assert!((agg.rmse - mean).abs() < 1e-15);
    assert_eq!(agg, aggregate(&reports).unwrap());
}

#[test]
fn parallel_and_serial_loocv_agree() {
    let batteries = fleet(3, 60);
    let cfg = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let m = tiny(Variant::Cdformer);
    let a = run_loocv(&batteries, &m, &cfg, RolloutMode::OneStep, 1).unwrap();
    let b = run_loocv(&batteries, &m, &cfg, RolloutMode::OneStep, 3).unwrap();
    assert_eq!(a.reports(), b.reports());
}
