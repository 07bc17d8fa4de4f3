//! Training, evaluation, ablation grids and attention dumps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::{load_checkpoint, make_batches, save_checkpoint, DataError, EncodedDataset, Vocab};
use crate::gridworld::Category;
use crate::mac::{argmax, CellTrace, ConfigError, Example, MacConfig, MacModel, Mode, ModelError, ParamSource};
use crate::nn::ParamStore;
use crate::optim::{clip_gradients, Adam, AdamConfig, Ema, EarlyStopping, OptimError, StopDecision};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    /// Evaluate (and pick checkpoints) with the averaged weights.
    pub use_ema: bool,
    pub patience: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            clip_norm: 8.0,
            ema_decay: 0.999,
            use_ema: true,
            patience: 5,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 9] = [
        "seed",
        "epochs",
        "batch_size",
        "lr",
        "clip_norm",
        "ema_decay",
        "use_ema",
        "patience",
        "eval_batch_size",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
                reason: e.to_string(),
            })
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "ema_decay" => self.ema_decay = parse(key, value)?,
            "use_ema" => self.use_ema = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => format!("{:?}", self.lr),
            "clip_norm" => format!("{:?}", self.clip_norm),
            "ema_decay" => format!("{:?}", self.ema_decay),
            "use_ema" => self.use_ema.to_string(),
            "patience" => self.patience.to_string(),
            "eval_batch_size" => self.eval_batch_size.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("lr and clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }
}

/// Model and optimization settings, read from flat `key = value` text.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: MacConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.model.set(key, value) {
            Err(ConfigError::UnknownKey(_)) => self.train.set(key, value),
            other => other,
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.into(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = self.model.to_text();
        for k in TrainConfig::KEYS {
            let _ = writeln!(out, "{k} = {}", self.train.get(k).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.n += 1;
        self.correct += usize::from(ok);
        self.accuracy = self.correct as f64 / self.n as f64;
    }
}

/// Accuracy overall, per category and on questions with a relation hop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Tally,
    pub per_category: BTreeMap<String, Tally>,
    pub relational: Tally,
    /// `1 / number of answers`.
    pub chance: f64,
    /// Share of the most common gold answer.
    pub most_frequent: f64,
    pub predictions: Vec<usize>,
    pub source: ParamSource,
}

/// Frequency of the modal value of `answers`.
pub fn most_frequent_baseline(answers: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &a in answers {
        *counts.entry(a).or_default() += 1;
    }
    counts.values().max().map_or(0.0, |&m| m as f64 / answers.len() as f64)
}

/// Eval-mode accuracy of `model`'s architecture with parameters `values`.
pub fn evaluate(
    model: &MacModel,
    values: &ParamStore,
    source: ParamSource,
    data: &EncodedDataset,
    batch_size: usize,
) -> HarnessResult<EvalReport> {
    let mut predictions = Vec::with_capacity(data.len());
    for batch in make_batches(data, batch_size, 0, false) {
        predictions.extend(model.predict_with(values, &batch.examples(data))?);
    }
    let mut overall = Tally::default();
    let mut relational = Tally::default();
    let mut per_category: BTreeMap<String, Tally> = BTreeMap::new();
    for (i, &pred) in predictions.iter().enumerate() {
        let ok = pred == data.answers[i];
        overall.add(ok);
        per_category.entry(data.category(i).name().into()).or_default().add(ok);
        if data.instances[i].is_relational() {
            relational.add(ok);
        }
    }
    Ok(EvalReport {
        overall,
        per_category,
        relational,
        chance: 1.0 / model.config.num_answers as f64,
        most_frequent: most_frequent_baseline(&data.answers),
        predictions,
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_relational_accuracy: f64,
    pub val_per_category: BTreeMap<String, f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: String,
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
    /// 1-based epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub wall_seconds: f64,
    pub val_most_frequent: f64,
    pub val_chance: f64,
}

/// Result of [`train`]: the kept weights and the run's history.
pub struct TrainOutcome {
    pub model: MacModel,
    pub ema: Option<ParamStore>,
    pub report: RunReport,
    pub best_eval: EvalReport,
}

impl TrainOutcome {
    /// Weights used for evaluation.
    pub fn eval_params(&self) -> (&ParamStore, ParamSource) {
        match &self.ema {
            Some(e) => (e, ParamSource::Ema),
            None => (&self.model.params, ParamSource::Raw),
        }
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

/// Runs the training loop: shuffled minibatches, Adam, global-norm
/// clipping, weight averaging and per-epoch early stopping on validation
/// accuracy. With `checkpoint`, the best weights are written there after
/// each improvement (and the last good weights on a non-finite loss).
pub fn train(
    cfg: &RunConfig,
    train_data: &EncodedDataset,
    val_data: &EncodedDataset,
    checkpoint: Option<&Path>,
    mut log: impl FnMut(&EpochRecord),
) -> HarnessResult<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(HarnessError::Invalid("training and validation sets must be non-empty".into()));
    }
    let t = &cfg.train;
    let start = Instant::now();
    let mut model = MacModel::new(cfg.model.clone(), t.seed)?;
    let mut adam = Adam::new(AdamConfig { lr: t.lr, ..AdamConfig::default() }, &model.params);
    let mut ema = Ema::new(t.ema_decay, &model.params);
    let mut stopper = EarlyStopping::new(t.patience);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix(t.seed, 1));

    let eval_now = |model: &MacModel, ema: &Ema| -> HarnessResult<EvalReport> {
        if t.use_ema {
            evaluate(model, &ema.shadow, ParamSource::Ema, val_data, t.eval_batch_size)
        } else {
            evaluate(model, &model.params, ParamSource::Raw, val_data, t.eval_batch_size)
        }
    };
    let snapshot = |model: &MacModel, ema: &Ema| (model.params.clone(), t.use_ema.then(|| ema.shadow.clone()));
    let save = |model: &MacModel, ema: Option<&ParamStore>, epoch: usize| -> HarnessResult<()> {
        if let Some(path) = checkpoint {
            save_checkpoint(path, model, ema, serde_json::json!({ "epoch": epoch, "train": t }))?;
        }
        Ok(())
    };

    let mut best_eval = eval_now(&model, &ema)?;
    let mut best = snapshot(&model, &ema);
    let mut best_epoch = 0;
    save(&model, best.1.as_ref(), 0)?;
    let mut report = RunReport {
        config: cfg.to_text(),
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: best_eval.overall.accuracy,
        stopped_epoch: 0,
        early_stopped: false,
        wall_seconds: 0.0,
        val_most_frequent: best_eval.most_frequent,
        val_chance: best_eval.chance,
    };

    for epoch in 1..=t.epochs {
        let epoch_start = Instant::now();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (step, batch) in make_batches(train_data, t.batch_size, mix(t.seed, 1000 + epoch as u64), true)
            .iter()
            .enumerate()
        {
            let examples = batch.examples(train_data);
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let (loss, _) = model.loss(&mut tape, &bound, &examples, &batch.answers, Mode::Train(&mut dropout_rng))?;
            let value = tape.value(loss).item();
            let mut grads = match tape.backward(loss) {
                Ok(g) => bound.gradients(&g, &model.params),
                Err(e) => return Err(ModelError::from(e).into()),
            };
            if !value.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                save(&model, t.use_ema.then_some(&ema.shadow), epoch - 1)?;
                return Err(HarnessError::NonFiniteLoss { epoch, step });
            }
            clip_gradients(&mut grads, t.clip_norm);
            adam.step(&mut model.params, &grads)?;
            ema.update(&model.params);
            report.step_losses.push(value);
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let eval = eval_now(&model, &ema)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy: eval.overall.accuracy,
            val_relational_accuracy: eval.relational.accuracy,
            val_per_category: eval.per_category.iter().map(|(k, v)| (k.clone(), v.accuracy)).collect(),
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log(&record);
        report.epochs.push(record);
        report.stopped_epoch = epoch;
        let decision = stopper.observe(eval.overall.accuracy);
        if eval.overall.accuracy > best_eval.overall.accuracy || best_epoch == 0 && epoch == 1 {
            best_eval = eval;
            best = snapshot(&model, &ema);
            best_epoch = epoch;
            let mut kept = model.clone();
            kept.params = best.0.clone();
            save(&kept, best.1.as_ref(), epoch)?;
        }
        if let StopDecision::Stop { .. } = decision {
            report.early_stopped = true;
            break;
        }
    }
    model.params = best.0;
    report.best_epoch = best_epoch;
    report.best_val_accuracy = best_eval.overall.accuracy;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        ema: best.1,
        report,
        best_eval,
    })
}

/// Parses `field=v1,v2;field2=v3` into ordered `(field, values)` pairs.
pub fn parse_grid_spec(spec: &str) -> HarnessResult<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, vs) = part
            .split_once('=')
            .ok_or_else(|| HarnessError::Invalid(format!("grid entry `{part}` needs `field=values`")))?;
        let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(HarnessError::Invalid(format!("grid entry `{part}` has no values")));
        }
        out.push((k.trim().to_string(), values));
    }
    Ok(out)
}

/// Every combination of the grid's values, in odometer order.
pub fn expand_grid(grid: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vs) in grid {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                vs.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub overrides: Vec<(String, String)>,
    pub best_val_accuracy: f64,
    pub relational_accuracy: f64,
    pub per_category: BTreeMap<String, f64>,
    pub cell_params: usize,
    pub report: RunReport,
}

/// Trains one variant per grid point from `base`, all with the same seed.
pub fn ablate(
    base: &RunConfig,
    grid_spec: &str,
    train_data: &EncodedDataset,
    val_data: &EncodedDataset,
    mut log: impl FnMut(&[(String, String)], &EpochRecord),
) -> HarnessResult<Vec<AblationRow>> {
    let grid = parse_grid_spec(grid_spec)?;
    let combos = expand_grid(&grid);
    // Reject bad fields before spending time on training.
    for combo in &combos {
        let mut cfg = base.clone();
        for (k, v) in combo {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
    }
    let mut rows = Vec::new();
    for combo in combos {
        let mut cfg = base.clone();
        for (k, v) in &combo {
            cfg.set(k, v)?;
        }
        let out = train(&cfg, train_data, val_data, None, |r| log(&combo, r))?;
        rows.push(AblationRow {
            best_val_accuracy: out.best_eval.overall.accuracy,
            relational_accuracy: out.best_eval.relational.accuracy,
            per_category: out.best_eval.per_category.iter().map(|(k, v)| (k.clone(), v.accuracy)).collect(),
            cell_params: out.model.cell_param_count(),
            overrides: combo,
            report: out.report,
        });
    }
    Ok(rows)
}

/// Plain-text table of ablation results.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut cats: Vec<String> = Category::ALL.iter().map(|c| c.name().to_string()).collect();
    cats.retain(|c| rows.iter().any(|r| r.per_category.contains_key(c)));
    let mut out = String::new();
    let _ = write!(out, "{:<40} {:>8} {:>10}", "variant", "overall", "relational");
    for c in &cats {
        let _ = write!(out, " {:>17}", c);
    }
    out.push('\n');
    for r in rows {
        let name = r
            .overrides
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = write!(
            out,
            "{:<40} {:>8.3} {:>10.3}",
            name, r.best_val_accuracy, r.relational_accuracy
        );
        for c in &cats {
            let _ = write!(out, " {:>17.3}", r.per_category.get(c).copied().unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

/// Trace of one instance plus a human-readable rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub tokens: Vec<String>,
    pub answer: String,
    pub predicted: String,
    pub grid_size: usize,
    pub trace: CellTrace,
}

/// Runs `model` on one instance and records its attention.
pub fn dump_attention(
    model: &MacModel,
    values: &ParamStore,
    source: ParamSource,
    vocab: &Vocab,
    data: &EncodedDataset,
    index: usize,
) -> HarnessResult<AttentionDump> {
    if index >= data.len() {
        return Err(HarnessError::Invalid(format!(
            "instance {index} out of range for {} instances",
            data.len()
        )));
    }
    let ex: Example = data.example(index);
    let (logits, mut traces) = model.traces_with(values, source, &[ex])?;
    let trace = traces.pop().expect("one trace per example");
    if trace.steps.len() != model.config.p {
        return Err(HarnessError::Invalid(format!(
            "trace has {} steps, config says {}",
            trace.steps.len(),
            model.config.p
        )));
    }
    Ok(AttentionDump {
        tokens: data.instances[index].tokens.clone(),
        answer: data.instances[index].answer.word(),
        predicted: vocab.answer_word(argmax(logits.row(0)))?.to_string(),
        grid_size: model.config.grid_size,
        trace,
    })
}

const SHADES: [char; 5] = [' ', '.', ':', '*', '#'];

impl AttentionDump {
    /// Per step: top-3 attended words and an ASCII heat map of the grid.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "question: {}", self.tokens.join(" "));
        let _ = writeln!(out, "answer: {}  predicted: {}", self.answer, self.predicted);
        let g = self.grid_size;
        for (i, s) in self.trace.steps.iter().enumerate() {
            let _ = writeln!(out, "step {}", i + 1);
            if let Some(cv) = &s.cv {
                let mut order: Vec<usize> = (0..cv.len()).collect();
                order.sort_by(|&a, &b| cv[b].total_cmp(&cv[a]).then(a.cmp(&b)));
                let top: Vec<String> = order
                    .iter()
                    .take(3)
                    .map(|&j| format!("{} {:.2}", self.tokens[j], cv[j]))
                    .collect();
                let _ = writeln!(out, "  words: {}", top.join(", "));
            }
            if let Some(gv) = s.gate {
                let _ = writeln!(out, "  gate: {gv:.3}");
            }
            let max = s.rv.iter().cloned().fold(0.0, f64::max);
            for r in 0..g {
                out.push_str("  |");
                for c in 0..g {
                    let v = s.rv[r * g + c];
                    let level = if max > 0.0 { ((v / max) * 4.0).round() as usize } else { 0 };
                    out.push(SHADES[level.min(4)]);
                }
                out.push_str("|\n");
            }
        }
        out
    }
}

/// Loads a checkpoint and picks raw or averaged weights.
pub fn load_for_eval(path: &Path, use_ema: bool) -> HarnessResult<(MacModel, ParamStore, ParamSource)> {
    let ck = load_checkpoint(path, None)?;
    match (use_ema, ck.ema) {
        (true, Some(e)) => Ok((ck.model, e, ParamSource::Ema)),
        (true, None) => Err(HarnessError::Invalid(format!(
            "{} holds no averaged weights",
            path.display()
        ))),
        (false, _) => {
            let p = ck.model.params.clone();
            Ok((ck.model, p, ParamSource::Raw))
        }
    }
}

/// Logit tensor of the whole dataset, for comparisons in tests and tools.
pub fn dataset_logits(model: &MacModel, values: &ParamStore, data: &EncodedDataset, batch_size: usize) -> HarnessResult<Vec<Tensor>> {
    make_batches(data, batch_size, 0, false)
        .iter()
        .map(|b| Ok(model.logits_with(values, &b.examples(data))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{generate_dataset, DatasetSpec};

    fn tiny(n: usize, seed: u64) -> EncodedDataset {
        let spec = DatasetSpec {
            seed,
            count: n,
            grid_size: 3,
            min_objects: 2,
            max_objects: 4,
            ..DatasetSpec::default()
        };
        EncodedDataset::new(generate_dataset(&spec).unwrap(), &Vocab::standard(3)).unwrap()
    }

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d = 8;
        cfg.model.p = 2;
        cfg.model.grid_size = 3;
        cfg.model.num_answers = Vocab::standard(3).num_answers();
        cfg.train.epochs = 2;
        cfg.train.batch_size = 8;
        cfg
    }

    #[test]
    fn config_text_round_trips_and_rejects_unknown_keys() {
        let mut cfg = tiny_cfg();
        cfg.train.lr = 3e-4;
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let text = "# comment\np = 3  # trailing\nlr = 0.01\n";
        let parsed = RunConfig::from_text(text).unwrap();
        assert_eq!((parsed.model.p, parsed.train.lr), (3, 0.01));
        assert!(matches!(RunConfig::from_text("bogus = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::from_text("p 3"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn zero_epochs_gives_empty_history() {
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 0;
        let (tr, va) = (tiny(16, 1), tiny(8, 2));
        let out = train(&cfg, &tr, &va, None, |_| {}).unwrap();
        assert!(out.report.epochs.is_empty());
        assert_eq!(out.report.best_epoch, 0);
        assert_eq!(out.model.params, MacModel::new(cfg.model.clone(), cfg.train.seed).unwrap().params);
    }

    #[test]
    fn most_frequent_is_the_mode_share() {
        assert_eq!(most_frequent_baseline(&[1, 2, 2, 3]), 0.5);
        assert_eq!(most_frequent_baseline(&[]), 0.0);
    }

    #[test]
    fn eval_counts_add_up() {
        let cfg = tiny_cfg();
        let data = tiny(40, 3);
        let model = MacModel::new(cfg.model, 0).unwrap();
        let r = evaluate(&model, &model.params, ParamSource::Raw, &data, 16).unwrap();
        assert_eq!(r.overall.n, 40);
        assert_eq!(r.per_category.values().map(|t| t.n).sum::<usize>(), 40);
        let recomputed = r.predictions.iter().zip(&data.answers).filter(|(a, b)| a == b).count();
        assert_eq!(recomputed, r.overall.correct);
    }

    #[test]
    fn grid_spec_expansion() {
        let g = parse_grid_spec("gate_bias=-1,0,1; p=1,2").unwrap();
        let combos = expand_grid(&g);
        assert_eq!(combos.len(), 6);
        assert_eq!(combos[0], vec![("gate_bias".into(), "-1".into()), ("p".into(), "1".into())]);
        assert!(parse_grid_spec("gate_bias").is_err());
        let (tr, va) = (tiny(8, 1), tiny(4, 2));
        assert!(matches!(
            ablate(&tiny_cfg(), "depth=1,2", &tr, &va, |_, _| {}),
            Err(HarnessError::Config(ConfigError::UnknownKey(_)))
        ));
    }

    #[test]
    fn dump_renders_every_step() {
        let cfg = tiny_cfg();
        let data = tiny(4, 5);
        let model = MacModel::new(cfg.model, 0).unwrap();
        let d = dump_attention(&model, &model.params, ParamSource::Raw, &Vocab::standard(3), &data, 1).unwrap();
        let text = d.render();
        assert_eq!(text.matches("step ").count(), 2);
        assert_eq!(text.matches("  |").count(), 2 * 3);
        assert!(dump_attention(&model, &model.params, ParamSource::Raw, &Vocab::standard(3), &data, 9).is_err());
    }
}
