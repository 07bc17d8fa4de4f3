use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use macnet::data::{read_dataset, write_dataset, EncodedDataset, Vocab};
use macnet::gridworld::{generate_dataset, Category, DatasetSpec, QuestionOptions};
use macnet::harness::{ablate, ablation_table, dump_attention, evaluate, load_for_eval, train, RunConfig};

const OUT_DIR_ENV: &str = "MACNET_OUT_DIR";

#[derive(Parser)]
#[command(name = "macnet", version, about = "Train and inspect MAC networks on grid-world questions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val question sets and the vocabulary.
    Generate(GenerateArgs),
    /// Train a model and write its best checkpoint and run report.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset, with baselines.
    Eval(EvalArgs),
    /// Train one variant per point of a config grid.
    Ablate(AblateArgs),
    /// Write the attention trace of one instance.
    DumpAttention(DumpArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20_000)]
    train_n: usize,
    #[arg(long, default_value_t = 2_000)]
    val_n: usize,
    #[arg(long, default_value_t = 5)]
    grid: usize,
    /// Objects per scene, `N` or `MIN-MAX`.
    #[arg(long, default_value = "3-7")]
    objects: String,
    /// Vary wording with synonyms.
    #[arg(long)]
    paraphrase: bool,
    #[arg(long, default_value_t = 5)]
    max_depth: usize,
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set p=8` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL dataset.
    #[arg(long)]
    data: PathBuf,
    /// Use the averaged weights.
    #[arg(long)]
    use_ema: bool,
    /// Also list every prediction.
    #[arg(long)]
    predictions: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// `field=v1,v2;field2=v3,...`
    #[arg(long)]
    grid_spec: String,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Zero-based line of the dataset.
    #[arg(long)]
    instance: usize,
    #[arg(long)]
    use_ema: bool,
    /// Output JSON file.
    #[arg(long, default_value = "attention.json")]
    out: PathBuf,
}

/// `MACNET_OUT_DIR`, when set, replaces the output directory.
fn out_dir(flag: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => flag.to_path_buf(),
    }
}

/// Places a file-valued output under `MACNET_OUT_DIR` when set.
fn out_file(flag: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(flag.file_name().unwrap_or(flag.as_os_str())),
        _ => flag.to_path_buf(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn parse_objects(s: &str) -> Result<(usize, usize)> {
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| anyhow!("bad object count `{s}`"));
    match s.split_once('-') {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    if a.train_n == 0 || a.val_n == 0 {
        bail!("--train-n and --val-n must be at least 1");
    }
    let (min_objects, max_objects) = parse_objects(&a.objects)?;
    if min_objects < 2 || min_objects > max_objects || max_objects > a.grid * a.grid {
        bail!("object range {min_objects}-{max_objects} does not fit a {0}x{0} grid", a.grid);
    }
    let dir = out_dir(&a.out_dir);
    create_dir(&dir)?;
    let options = QuestionOptions {
        paraphrase: a.paraphrase,
        max_depth: a.max_depth,
        ..QuestionOptions::default()
    };
    let spec = |seed: u64, count: usize| DatasetSpec {
        seed,
        count,
        grid_size: a.grid,
        min_objects,
        max_objects,
        options: options.clone(),
        ..DatasetSpec::default()
    };
    // Separate streams so validation never repeats training instances.
    let train_set = generate_dataset(&spec(a.seed.wrapping_mul(2), a.train_n))?;
    let val_set = generate_dataset(&spec(a.seed.wrapping_mul(2).wrapping_add(1), a.val_n))?;
    write_dataset(&train_set, &dir.join("train.jsonl"))?;
    write_dataset(&val_set, &dir.join("val.jsonl"))?;
    Vocab::standard(a.grid).save(&dir.join("vocab.json"))?;
    let mut histogram: BTreeMap<&str, usize> = Category::ALL.iter().map(|c| (c.name(), 0)).collect();
    for q in &train_set {
        *histogram.entry(q.category.name()).or_default() += 1;
    }
    println!(
        "{}",
        json!({ "out_dir": dir, "train": train_set.len(), "val": val_set.len(), "train_categories": histogram })
    );
    Ok(())
}

fn load_vocab(dir: &Path, grid: usize) -> Result<Vocab> {
    let path = dir.join("vocab.json");
    if path.exists() {
        Ok(Vocab::load(&path)?)
    } else {
        Ok(Vocab::standard(grid))
    }
}

fn load_split(dir: &Path, name: &str, vocab: &Vocab) -> Result<EncodedDataset> {
    let instances = read_dataset(&dir.join(name))?;
    Ok(EncodedDataset::new(instances, vocab)?)
}

/// Config file, then flags, then task dimensions taken from the data.
fn run_config(o: &Overrides, train_set: &EncodedDataset, vocab: &Vocab) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &o.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = o.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = o.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(q) = train_set.instances.first() {
        cfg.model.grid_size = q.scene.grid_size;
    }
    cfg.model.vocab_size = vocab.num_words();
    cfg.model.num_answers = vocab.num_answers();
    cfg.validate()?;
    Ok(cfg)
}

fn data_for(dir: &Path) -> Result<(Vocab, EncodedDataset, EncodedDataset)> {
    let first = read_dataset(&dir.join("train.jsonl"))?;
    let grid = first.first().map_or(5, |q| q.scene.grid_size);
    let vocab = load_vocab(dir, grid)?;
    let train_set = EncodedDataset::new(first, &vocab)?;
    let val_set = load_split(dir, "val.jsonl", &vocab)?;
    Ok((vocab, train_set, val_set))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (vocab, train_set, val_set) = data_for(&a.data_dir)?;
    let cfg = run_config(&a.overrides, &train_set, &vocab)?;
    let dir = out_dir(&a.out);
    create_dir(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let ckpt = dir.join("model.ckpt");
    let out = train(&cfg, &train_set, &val_set, Some(&ckpt), |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val {:.4}  relational {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.val_accuracy, r.val_relational_accuracy, r.seconds
        );
    })?;
    write_json(&dir.join("report.json"), &out.report)?;
    println!(
        "{}",
        json!({
            "checkpoint": ckpt,
            "report": dir.join("report.json"),
            "best_epoch": out.report.best_epoch,
            "best_val_accuracy": out.report.best_val_accuracy,
            "val_most_frequent": out.report.val_most_frequent,
            "stopped_epoch": out.report.stopped_epoch,
        })
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, values, source) = load_for_eval(&a.checkpoint, a.use_ema)?;
    let dir = a.data.parent().unwrap_or(Path::new("."));
    let vocab = load_vocab(dir, model.config.grid_size)?;
    let data = EncodedDataset::new(read_dataset(&a.data)?, &vocab)?;
    let report = evaluate(&model, &values, source, &data, 256)?;
    let mut value = serde_json::to_value(&report)?;
    if !a.predictions {
        value.as_object_mut().expect("report is an object").remove("predictions");
    }
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let (vocab, train_set, val_set) = data_for(&a.data_dir)?;
    let base = run_config(&a.overrides, &train_set, &vocab)?;
    let dir = out_dir(&a.out);
    create_dir(&dir)?;
    let rows = ablate(&base, &a.grid_spec, &train_set, &val_set, |combo, r| {
        let name: Vec<String> = combo.iter().map(|(k, v)| format!("{k}={v}")).collect();
        eprintln!("[{}] epoch {:>3}  val {:.4}", name.join(" "), r.epoch, r.val_accuracy);
    })?;
    write_json(&dir.join("ablation.json"), &rows)?;
    let table = ablation_table(&rows);
    fs::write(dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_dump(a: DumpArgs) -> Result<()> {
    let (model, values, source) = load_for_eval(&a.checkpoint, a.use_ema)?;
    let dir = a.data.parent().unwrap_or(Path::new("."));
    let vocab = load_vocab(dir, model.config.grid_size)?;
    let data = EncodedDataset::new(read_dataset(&a.data)?, &vocab)?;
    let dump = dump_attention(&model, &values, source, &vocab, &data, a.instance)?;
    let path = out_file(&a.out);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&path, &dump)?;
    print!("{}", dump.render());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::DumpAttention(a) => cmd_dump(a),
    }
}

/// Error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().to_string(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail("runtime", describe(&e), 1),
    }
}
