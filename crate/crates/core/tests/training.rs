use bimamba::data::{synth_dataset, Split, SynthConfig};
use bimamba::model::{checkpoint, BiMamba, ModelConfig, ModelParams};
use bimamba::train::{evaluate_auroc, read_history, train_loop, write_history, HistoryRow, TrainConfig};
use proptest::prelude::*;

fn bits(p: &ModelParams<f32>) -> Vec<u32> {
    let mut out = Vec::new();
    p.visit(|_, t| out.extend(t.data().iter().map(|v| v.to_bits())));
    out
}

fn quick(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr_init: lr,
        batch_size: 8,
        epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn toy_data() -> bimamba::data::Dataset {
    synth_dataset(7, 40, &SynthConfig::with_size(16, 16)).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let data = toy_data();
    let mut model = BiMamba::<f32>::new(ModelConfig::toy(), 1).unwrap();
    let before = bits(&model.params);
    let out = train_loop(&mut model, &data, &quick(0.0, 2), None, |_| {}).unwrap();
    assert_eq!(bits(&model.params), before);
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.history[0].val_auroc, out.history[1].val_auroc);
}

#[test]
fn same_seed_gives_identical_history() {
    let data = toy_data();
    let run = || {
        let mut model = BiMamba::<f32>::new(ModelConfig::toy(), 2).unwrap();
        let out = train_loop(&mut model, &data, &quick(1e-3, 3), None, |_| {}).unwrap();
        (out.history, bits(&model.params))
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    assert!(h1.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn checkpoint_reproduces_best_validation_auroc() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let data = toy_data();
    let mut model = BiMamba::<f32>::new(ModelConfig::toy(), 4).unwrap();
    let mut seen = Vec::new();
    let out = train_loop(&mut model, &data, &quick(1e-3, 3), Some(&path), |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, out.history);
    let best = out.history.iter().map(|r| r.val_auroc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_auroc, best);
    assert_eq!(out.history[out.best_epoch - 1].val_auroc, best);
    let loaded = checkpoint::load_matching::<f32>(&path, &ModelConfig::toy()).unwrap();
    assert_eq!(evaluate_auroc(&loaded, &data.split(Split::Val)).unwrap(), best);
}

#[test]
fn empty_validation_split_is_rejected() {
    let mut data = toy_data();
    data.manifest.val.clear();
    let mut model = BiMamba::<f32>::new(ModelConfig::toy(), 1).unwrap();
    assert!(train_loop(&mut model, &data, &quick(1e-3, 1), None, |_| {}).is_err());
}

#[test]
fn invalid_settings_are_rejected() {
    let data = toy_data();
    let mut model = BiMamba::<f32>::new(ModelConfig::toy(), 1).unwrap();
    for cfg in [
        TrainConfig { batch_size: 0, ..quick(1e-3, 1) },
        TrainConfig { lr_init: f64::NAN, ..quick(1e-3, 1) },
        TrainConfig { clip_norm: Some(0.0), ..quick(1e-3, 1) },
    ] {
        assert!(train_loop(&mut model, &data, &cfg, None, |_| {}).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn history_csv_round_trip(rows in prop::collection::vec((0.0f64..10.0, 0.0f64..=1.0, 0.0f64..1e-2), 0..20)) {
        let rows: Vec<HistoryRow> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (train_loss, val_auroc, lr))| HistoryRow { epoch: i + 1, train_loss, val_auroc, lr })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history(&path, &rows).unwrap();
        prop_assert_eq!(read_history(&path).unwrap(), rows);
    }
}

#[test]
fn toy_model_learns_the_planted_signal() {
    let data = synth_dataset(1, 400, &SynthConfig::with_size(16, 16)).unwrap();
    let mut model = BiMamba::<f32>::new(ModelConfig::toy(), 0).unwrap();
    let recipe = TrainConfig {
        lr_init: 3e-4,
        batch_size: 8,
        epochs: 30,
        ..TrainConfig::default()
    };
    let out = train_loop(&mut model, &data, &recipe, None, |_| {}).unwrap();
    let h = &out.history;
    let last = h.last().unwrap();
    assert!(last.val_auroc > 0.9, "{h:?}");
    let tail = h[h.len() - 3..].iter().map(|r| r.train_loss).sum::<f64>() / 3.0;
    assert!(tail < h[0].train_loss, "{h:?}");
}
