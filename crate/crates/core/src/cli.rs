//! Command-line front end. [`dispatch`] parses arguments, runs one
//! subcommand under a [`RunManifest`] and maps its predicate to an exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::dataset::{self, Split};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{prepare_all, PreparedExample, ScenaFuseModel, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{self, MetricsRecord};
use crate::verify::{self, GradCheckOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PREDICATE: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "scenafuse", version, about = "Scenario-guided adapter for NLI on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Train one variant and save its best-dev checkpoint.
    Train(DataArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train every variant and tabulate test metrics.
    Ablate(DataArgs),
    /// Finite-difference check of every model gradient.
    GradCheck(GradArgs),
    /// Dump attention maps for one example as JSON.
    InspectAttention(InspectArgs),
    /// Time the adapter forward pass across widths and fit the growth exponent.
    BenchComplexity(BenchArgs),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that receives every artifact.
    #[arg(long, default_value = "scenafuse-out")]
    out: PathBuf,
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, value_parser = ["feature", "sequence"])]
    softmax_axis: Option<String>,
    /// Require all training values to lie on the fine-tuning grids.
    #[arg(long)]
    on_grid: bool,
    /// Extra `key=value` overrides, applied after the flags above.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// JSONL dataset; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Debug, Args)]
struct GradArgs {
    #[command(flatten)]
    common: Common,
    /// Uniform noise added to the initial parameters before checking.
    #[arg(long, default_value_t = 0.3)]
    spread: f64,
    #[arg(long, default_value_t = 3)]
    directions: usize,
    /// Coordinates sampled per tensor; 0 checks every coordinate.
    #[arg(long, default_value_t = 16)]
    coords: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 15)]
    reps: usize,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, default_value_t = 9)]
    blocks: usize,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| format!("unknown split {s:?}"))
}

/// Record of one invocation, written before work starts and replaced
/// atomically when it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub code_version: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: String,
    pub predicate: Option<bool>,
    pub outputs: Vec<PathBuf>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl RunManifest {
    fn save(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())
    }
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, out: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(out)?;
        let manifest = RunManifest {
            command: command.to_string(),
            config: cfg.to_kv(),
            seed: cfg.train.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            predicate: None,
            outputs: Vec::new(),
        };
        manifest.save(out)?;
        write_atomic(&out.join("config.txt"), cfg.to_kv().as_bytes())?;
        let mut run = Run {
            out: out.to_path_buf(),
            manifest,
        };
        run.manifest.outputs.push(out.join("config.txt"));
        Ok(run)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        if !self.manifest.outputs.contains(&p) {
            self.manifest.outputs.push(p.clone());
        }
        p
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, bytes)
    }

    fn finish(mut self, outcome: &Result<bool>) -> Result<()> {
        self.manifest.finished_unix = Some(now());
        match outcome {
            Ok(ok) => {
                self.manifest.status = "completed".into();
                self.manifest.predicate = Some(*ok);
            }
            Err(e) => self.manifest.status = format!("failed: {e}"),
        }
        self.manifest.save(&self.out)
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.apply_file(p)?;
    }
    let mut flags: Vec<(String, String)> = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k.to_string(), v));
        }
    };
    flag("seed", common.seed.map(|v| v.to_string()));
    flag("variant", common.variant.map(|v| v.to_string()));
    flag("epochs", common.epochs.map(|v| v.to_string()));
    flag("learning_rate", common.lr.map(|v| v.to_string()));
    flag("batch_size", common.batch_size.map(|v| v.to_string()));
    flag("dropout", common.dropout.map(|v| v.to_string()));
    flag("grad_clip", common.grad_clip.map(|v| v.to_string()));
    flag("softmax_axis", common.softmax_axis.clone());
    if common.on_grid {
        flag("allow_off_grid", Some("false".into()));
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in flags {
        cfg.set(&k, &v).map_err(Error::Config)?;
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match exec::with_threads(exec::thread_cap_from_env(), || run(cli.command)) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_PREDICATE,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn run(cmd: Command) -> Result<bool> {
    let (name, common) = match &cmd {
        Command::GenData(c) => ("gen-data", c),
        Command::Train(d) => ("train", &d.common),
        Command::Eval(a) => ("eval", &a.data.common),
        Command::Ablate(d) => ("ablate", &d.common),
        Command::GradCheck(a) => ("grad-check", &a.common),
        Command::InspectAttention(a) => ("inspect-attention", &a.data.common),
        Command::BenchComplexity(a) => ("bench-complexity", &a.common),
    };
    let cfg = resolve(common)?;
    let mut run = Run::start(name, &common.out, &cfg)?;
    let outcome = match &cmd {
        Command::GenData(_) => gen_data(&mut run, &cfg),
        Command::Train(d) => train_cmd(&mut run, &cfg, d.data.as_deref()),
        Command::Eval(a) => eval_cmd(&mut run, &cfg, a),
        Command::Ablate(d) => ablate_cmd(&mut run, &cfg, d.data.as_deref()),
        Command::GradCheck(a) => grad_check_cmd(&mut run, &cfg, a),
        Command::InspectAttention(a) => inspect_cmd(&mut run, &cfg, a),
        Command::BenchComplexity(a) => bench_cmd(&mut run, &cfg, a),
    };
    run.finish(&outcome)?;
    outcome
}

fn gen_data(run: &mut Run, cfg: &RunConfig) -> Result<bool> {
    let data = dataset::generate_dataset(&cfg.generator)?;
    let path = run.path("dataset.jsonl");
    dataset::write_dataset(&path, &data)?;
    run.write("vocab.txt", dataset::build_vocabulary().to_text().as_bytes())?;
    let ceiling = dataset::text_only_bayes_accuracy(&dataset::split_examples(&data, Split::Test));
    let back = dataset::read_dataset(&path)?;
    println!("wrote {} examples to {}", data.len(), path.display());
    println!("text-only ceiling (test): {ceiling:.4}");
    Ok(back == data)
}

fn load_data(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<dataset::ScenarioNliExample>> {
    match data {
        Some(p) => dataset::read_dataset(p),
        None => dataset::generate_dataset(&cfg.generator),
    }
}

struct Splits {
    train: Vec<PreparedExample>,
    dev: Vec<PreparedExample>,
    test: Vec<PreparedExample>,
}

fn prepare(cfg: &RunConfig, data: &[dataset::ScenarioNliExample]) -> Result<Splits> {
    let vocab = dataset::build_vocabulary();
    if vocab.len() > cfg.model.encoder.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} exceeds vocab_size {}",
            vocab.len(),
            cfg.model.encoder.vocab_size
        )));
    }
    let split = |s| prepare_all(&dataset::split_examples(data, s), &vocab, &cfg.model);
    Ok(Splits {
        train: split(Split::Train)?,
        dev: split(Split::Dev)?,
        test: split(Split::Test)?,
    })
}

fn metrics_lines(records: &[MetricsRecord]) -> String {
    records.iter().map(|r| r.to_json_line() + "\n").collect()
}

fn train_cmd(run: &mut Run, cfg: &RunConfig, data: Option<&Path>) -> Result<bool> {
    let data = load_data(cfg, data)?;
    let s = prepare(cfg, &data)?;
    let mut model = ScenaFuseModel::new(&cfg.model, cfg.variant, cfg.train.seed)?;
    let ckpt = run.path("checkpoint.scnf");
    let mut records = Vec::new();
    let outcome = train::train(&mut model, &s.train, &s.dev, &cfg.train, Some(&ckpt), |e| {
        println!(
            "epoch {:>3}  train loss {:.4}  dev loss {:.4}  dev acc {:.4}",
            e.epoch, e.train_loss, e.dev.loss, e.dev.metrics.accuracy
        );
        records.push(MetricsRecord::new(cfg.variant, "dev", e.epoch, &e.dev.metrics));
    })?;
    let test = train::evaluate(&model, &s.test)?;
    records.push(MetricsRecord::new(cfg.variant, "test", outcome.best_epoch, &test.metrics));
    run.write("metrics.jsonl", metrics_lines(&records).as_bytes())?;
    println!(
        "best epoch {}  test acc {:.4}  micro P {:.4}  micro R {:.4}",
        outcome.best_epoch, test.metrics.accuracy, test.metrics.micro_precision, test.metrics.micro_recall
    );
    Ok(test.metrics.micro_identity_holds())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<ScenaFuseModel> {
    let mut model = ScenaFuseModel::new(&cfg.model, cfg.variant, cfg.train.seed)?;
    model.store.load_values_from(&ParamStore::load(checkpoint)?)?;
    Ok(model)
}

fn eval_cmd(run: &mut Run, cfg: &RunConfig, a: &EvalArgs) -> Result<bool> {
    let data = load_data(cfg, a.data.data.as_deref())?;
    let vocab = dataset::build_vocabulary();
    let set = prepare_all(&dataset::split_examples(&data, a.split), &vocab, &cfg.model)?;
    let model = load_model(cfg, &a.checkpoint)?;
    let ev = train::evaluate(&model, &set)?;
    let rec = MetricsRecord::new(cfg.variant, a.split.name(), 0, &ev.metrics);
    run.write("eval.jsonl", metrics_lines(std::slice::from_ref(&rec)).as_bytes())?;
    println!("{}", rec.to_json_line());
    Ok(ev.metrics.micro_identity_holds())
}

/// Tolerance by which an ablation may beat the full model.
pub const ABLATION_TOLERANCE: f64 = 0.01;

fn ablate_cmd(run: &mut Run, cfg: &RunConfig, data: Option<&Path>) -> Result<bool> {
    let data = load_data(cfg, data)?;
    let s = prepare(cfg, &data)?;
    let mut records = Vec::new();
    let table = train::run_ablation(&cfg.model, &cfg.train, &s.train, &s.dev, &s.test, &Variant::ALL, |v, e| {
        println!("{:<8} epoch {:>3}  dev acc {:.4}", v.name(), e.epoch, e.dev.metrics.accuracy);
        records.push(MetricsRecord::new(v, "dev", e.epoch, &e.dev.metrics));
    })?;
    for row in &table.rows {
        records.push(MetricsRecord::new(row.variant, "test", row.best_epoch, &row.test));
    }
    run.write("metrics.jsonl", metrics_lines(&records).as_bytes())?;
    run.write("ablation.txt", table.to_text().as_bytes())?;
    let js = serde_json::to_string_pretty(&table).map_err(|e| Error::Format(e.to_string()))?;
    run.write("ablation.json", js.as_bytes())?;
    print!("{}", table.to_text());
    let full = table.row(Variant::Full).map(|r| r.test.accuracy).unwrap_or(0.0);
    Ok(table
        .rows
        .iter()
        .all(|r| r.test.accuracy <= full + ABLATION_TOLERANCE))
}

fn example_for(cfg: &RunConfig, data: Option<&Path>, split: Split, index: usize) -> Result<(dataset::ScenarioNliExample, PreparedExample)> {
    let data = load_data(cfg, data)?;
    let chosen = dataset::split_examples(&data, split);
    let ex = chosen
        .get(index)
        .cloned()
        .ok_or_else(|| Error::Value(format!("{split} split has {} examples, index {index}", chosen.len())))?;
    let prepared = PreparedExample::from_example(&ex, &dataset::build_vocabulary(), cfg.model.encoder.max_len, cfg.model.visual_dim)?;
    Ok((ex, prepared))
}

fn grad_check_cmd(run: &mut Run, cfg: &RunConfig, a: &GradArgs) -> Result<bool> {
    let data = dataset::generate_dataset(&cfg.generator)?;
    let ex = data
        .iter()
        .find(|e| e.ambiguous)
        .or(data.first())
        .ok_or_else(|| Error::Value("empty dataset".into()))?;
    let prepared = PreparedExample::from_example(ex, &dataset::build_vocabulary(), cfg.model.encoder.max_len, cfg.model.visual_dim)?;
    let mut model = ScenaFuseModel::new(&cfg.model, cfg.variant, cfg.train.seed)?;
    verify::perturb(&mut model.store, a.spread, cfg.train.seed);
    let opts = GradCheckOptions {
        directions: a.directions,
        coords_per_tensor: (a.coords > 0).then_some(a.coords),
        seed: cfg.train.seed,
        ..GradCheckOptions::default()
    };
    let report = verify::grad_check_model(&model, &prepared, &opts)?;
    for t in &report.tensors {
        println!(
            "{:<28} {:>6} entries  directional {:.2e}  coordinates {:>4} max {:.2e}",
            t.name, t.total, t.directional_error, t.coords_checked, t.coord_max_error
        );
    }
    let js = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    run.write("grad_check.json", js.as_bytes())?;
    println!(
        "max relative error {:.3e} over {} tensors ({} directions each), {:.1}s: {}",
        report.max_error,
        report.tensors.len(),
        report.directions,
        report.seconds,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(report.passed())
}

fn tensor_json(t: &Tensor) -> serde_json::Value {
    json!({ "shape": t.shape(), "data": t.data() })
}

/// Rows of the last two axes sum to one, and masked key columns carry
/// (almost) no weight.
fn attention_well_formed(t: &Tensor, key_mask: Option<&[bool]>) -> bool {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data().chunks(cols).all(|row| {
        let sum_ok = (row.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        let mask_ok = key_mask.is_none_or(|m| row.iter().zip(m).all(|(w, &keep)| keep || *w < 1e-8));
        sum_ok && mask_ok
    })
}

fn inspect_cmd(run: &mut Run, cfg: &RunConfig, a: &InspectArgs) -> Result<bool> {
    let (ex, prepared) = example_for(cfg, a.data.data.as_deref(), a.split, a.index)?;
    let model = match &a.checkpoint {
        Some(p) => load_model(cfg, p)?,
        None => ScenaFuseModel::new(&cfg.model, cfg.variant, cfg.train.seed)?,
    };
    let maps = model.attention_maps(&prepared)?;
    let vocab = dataset::build_vocabulary();
    let mask = &prepared.encoding.attention_mask;
    let tokens: Vec<&str> = prepared
        .encoding
        .token_ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("?"))
        .collect();
    let mut ok = true;
    for m in maps.encoder.iter().flatten() {
        ok &= attention_well_formed(m, Some(mask));
    }
    if let Some(m) = &maps.visual_over_text {
        ok &= attention_well_formed(m, Some(mask));
    }
    if let Some(m) = &maps.text_over_visual {
        ok &= attention_well_formed(m, None);
    }
    let value = json!({
        "variant": cfg.variant.name(),
        "split": a.split.name(),
        "index": a.index,
        "premise": ex.premise,
        "hypothesis": ex.hypothesis,
        "label": ex.label,
        "ambiguous": ex.ambiguous,
        "tokens": tokens,
        "mask": mask,
        "logits": maps.logits,
        "encoder": maps.encoder.iter().map(|m| m.as_ref().map(tensor_json)).collect::<Vec<_>>(),
        "visual_over_text": maps.visual_over_text.as_ref().map(tensor_json),
        "text_over_visual": maps.text_over_visual.as_ref().map(tensor_json),
    });
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Format(e.to_string()))?;
    run.write("attention.json", text.as_bytes())?;
    println!("{text}");
    Ok(ok)
}

fn bench_cmd(run: &mut Run, cfg: &RunConfig, a: &BenchArgs) -> Result<bool> {
    let report = verify::bench_complexity(&verify::BENCH_WIDTHS, a.seq_len, a.blocks, a.reps, cfg.train.seed)?;
    for p in &report.points {
        println!("t = {:>4}  {:.3e} s", p.width, p.seconds);
    }
    let js = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    run.write("complexity.json", js.as_bytes())?;
    println!(
        "fitted log-log slope {:.3} (accepted range {}..{}): {}",
        report.slope,
        verify::SLOPE_RANGE.0,
        verify::SLOPE_RANGE.1,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(report.passed())
}
