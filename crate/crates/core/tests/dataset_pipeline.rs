use cdformer_core::dataset::{
    ingest_csv, make_loocv_splits, make_windows, synthesize_battery, synthesize_fleet, write_csv_file, NormalizationState,
    SynthParams,
};
use cdformer_core::eval::{find_eol, RolloutMode};
use cdformer_core::model::{ModelConfig, Variant};
use cdformer_core::training::{run_loocv, TrainConfig};

fn fleet(n: usize) -> Vec<cdformer_core::dataset::BatterySeries> {
    let base = SynthParams { n_cycles: 80, ..SynthParams::default() };
    synthesize_fleet(&base, n, 31).unwrap()
}

#[test]
fn normalizer_never_sees_the_held_out_battery() {
    let mut batteries = fleet(3);
    let model = ModelConfig { variant: Variant::BaselineFc, window_len: 8, d_model: 8, reg_hidden: 4, ..ModelConfig::default() };
    let train = TrainConfig { max_epochs: 1, ..TrainConfig::default() };
    let first = run_loocv(&batteries, &model, &train, RolloutMode::OneStep, 1).unwrap();

    // blow up the held-out battery of split 0; its normalizer must not move
    for r in &mut batteries[0].records {
        r.capacity *= 10.0;
        r.voltage_avg = r.voltage_avg.map(|v| v * 10.0);
    }
    let second = run_loocv(&batteries, &model, &train, RolloutMode::OneStep, 1).unwrap();

    for (i, split) in first.splits.iter().enumerate() {
        let (ckpt, _, _) = split.outcome.as_ref().unwrap();
        let norm = ckpt.normalizer.as_ref().unwrap();
        assert!(!norm.fitted_on.contains(&split.battery_id));
        assert_eq!(norm.fitted_on.len(), 2, "split {i}");
    }
    let n1 = first.splits[0].outcome.as_ref().unwrap().0.normalizer.clone();
    let n2 = second.splits[0].outcome.as_ref().unwrap().0.normalizer.clone();
    assert_eq!(n1, n2);
    let other = second.splits[1].outcome.as_ref().unwrap().0.normalizer.clone().unwrap();
    assert!(other.max[other.capacity_channel().unwrap()] > 5.0);
}

#[test]
fn window_counts_add_up_across_splits() {
    let batteries = fleet(4);
    let l = 10;
    let per: Vec<usize> = batteries.iter().map(|b| make_windows(b, l, None).unwrap().len()).collect();
    for (b, n) in batteries.iter().zip(&per) {
        assert_eq!(*n, b.len() - l);
    }
    for split in make_loocv_splits(&batteries).unwrap() {
        assert!(!split.train.contains(&split.test));
        let train: usize = split.train.iter().map(|&i| per[i]).sum();
        assert_eq!(train + per[split.test], per.iter().sum::<usize>());
    }
}

#[test]
fn noise_free_eol_matches_closed_form() {
    let p = SynthParams { noise_std: 0.0, ..SynthParams::default() };
    let s = synthesize_battery(&p).unwrap();
    // 0.3 of c0 is lost once r1·(k−1) + r2·(t−k) exceeds 0.3
    let r1 = p.fade_rate;
    let r2 = p.post_knee_factor * r1;
    let k = f64::from(p.knee_cycle);
    let lost_at_knee = r1 * (k - 1.0);
    assert!(lost_at_knee < 0.3);
    let expected = k as usize + ((0.3 - lost_at_knee) / r2).floor() as usize + 1;
    assert_eq!(find_eol(&s.capacities(), p.c0), Some(expected));
    assert_eq!(expected, 261);
}

#[test]
fn csv_round_trip_through_a_file() {
    let batteries = fleet(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fleet.csv");
    write_csv_file(&batteries, &path).unwrap();
    let back = ingest_csv(&path, batteries[0].profile).unwrap();
    assert_eq!(back, batteries);
}

#[test]
fn normalized_windows_live_in_unit_range_on_training_data() {
    let batteries = fleet(3);
    let norm = NormalizationState::fit(&batteries, batteries[0].profile.features()).unwrap();
    for b in &batteries {
        for w in make_windows(b, 12, Some(&norm)).unwrap() {
            assert!(w.features.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
            assert!((-1e-12..=1.0 + 1e-12).contains(&w.target));
        }
    }
}
