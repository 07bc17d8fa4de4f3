use macnet::data::{load_checkpoint, EncodedDataset, Vocab};
use macnet::gridworld::{generate_dataset, DatasetSpec};
use macnet::harness::{ablate, evaluate, most_frequent_baseline, train, RunConfig};
use macnet::mac::ParamSource;

fn data(seed: u64, count: usize) -> EncodedDataset {
    let raw = generate_dataset(&DatasetSpec { seed, count, ..DatasetSpec::default() }).unwrap();
    EncodedDataset::new(raw, &Vocab::standard(5)).unwrap()
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.d = 16;
    cfg.model.p = 2;
    cfg
}

#[test]
fn single_example_is_memorised() {
    let set = data(11, 1);
    let mut cfg = tiny();
    cfg.train.epochs = 200;
    cfg.train.batch_size = 1;
    cfg.train.use_ema = false;
    cfg.train.patience = 200;
    cfg.model.embed_keep = 1.0;
    cfg.model.kb_keep = 1.0;
    cfg.model.memory_keep = 1.0;
    let out = train(&cfg, &set, &set, None, |_| {}).unwrap();
    assert!(out.report.step_losses.len() <= 200);
    assert_eq!(out.best_eval.overall.accuracy, 1.0);
    let again = evaluate(&out.model, &out.model.params, ParamSource::Raw, &set, 8).unwrap();
    assert_eq!(again.overall.accuracy, 1.0);
}

#[test]
fn zero_epochs_keeps_initial_weights() {
    let (train_set, val) = (data(1, 20), data(2, 10));
    let mut cfg = tiny();
    cfg.train.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let out = train(&cfg, &train_set, &val, Some(&path), |_| {}).unwrap();
    assert!(out.report.epochs.is_empty() && out.report.step_losses.is_empty());
    assert_eq!(out.report.best_epoch, 0);
    let fresh = macnet::mac::MacModel::new(cfg.model.clone(), cfg.train.seed).unwrap();
    assert_eq!(load_checkpoint(&path, Some(&cfg.model)).unwrap().model.params, fresh.params);
}

#[test]
fn zero_decay_average_equals_raw_weights() {
    let (train_set, val) = (data(3, 64), data(4, 32));
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    cfg.train.ema_decay = 0.0;
    let out = train(&cfg, &train_set, &val, None, |_| {}).unwrap();
    let shadow = out.ema.as_ref().unwrap();
    let raw = evaluate(&out.model, &out.model.params, ParamSource::Raw, &val, 16).unwrap();
    let ema = evaluate(&out.model, shadow, ParamSource::Ema, &val, 16).unwrap();
    assert_eq!(raw.predictions, ema.predictions);
    assert_eq!((raw.source, ema.source), (ParamSource::Raw, ParamSource::Ema));
}

#[test]
fn report_is_consistent() {
    let (train_set, val) = (data(5, 96), data(6, 40));
    let mut cfg = tiny();
    cfg.train.epochs = 2;
    let out = train(&cfg, &train_set, &val, None, |_| {}).unwrap();
    let r = &out.report;
    assert_eq!(r.epochs.len(), 2);
    assert_eq!(r.step_losses.len(), 2 * 96usize.div_ceil(cfg.train.batch_size));
    assert_eq!(r.val_most_frequent, most_frequent_baseline(&val.answers));
    let mode = (0..100).map(|a| val.answers.iter().filter(|&&x| x == a).count()).max().unwrap();
    assert_eq!(r.val_most_frequent, mode as f64 / val.len() as f64);
    assert_eq!(RunConfig::from_text(&r.config).unwrap().to_text(), cfg.to_text());
    let e = &out.best_eval;
    assert_eq!(e.per_category.values().map(|t| t.n).sum::<usize>(), val.len());
    let correct = e.predictions.iter().zip(&val.answers).filter(|(p, a)| p == a).count();
    assert_eq!(correct, e.overall.correct);
    for rec in &r.epochs {
        assert!((0.0..=1.0).contains(&rec.val_accuracy));
    }
}

#[test]
fn ablation_runs_every_grid_point() {
    let (train_set, val) = (data(7, 32), data(8, 16));
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    let rows = ablate(&cfg, "gate_bias=-1,0,1;use_memory_gate=true", &train_set, &val, |_, _| {}).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(ablate(&cfg, "no_such_field=1", &train_set, &val, |_, _| {}).is_err());
}
