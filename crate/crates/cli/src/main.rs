//! `cable`: train, evaluate, compare and inspect positional-encoding models.
//!
//! Every command prints one JSON object on stdout. Failures print a JSON
//! `{"error": …, "message": …}` line on stderr and exit nonzero: 2 for
//! configuration errors, 3 for missing or unreadable checkpoints, 1 otherwise.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cable_core::data::Vocab;
use cable_core::evalx::{self, doubling_lengths, HeadSelector};
use cable_core::model::{Checkpoint, Model};
use cable_core::train::{train_loop, LoopOptions};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Checkpoint(String),
    Failed(String),
    Core(cable_core::Error),
}

impl From<cable_core::Error> for CliError {
    fn from(e: cable_core::Error) -> Self {
        match e {
            cable_core::Error::Config(m) => CliError::Config(m),
            cable_core::Error::Checkpoint { .. } => CliError::Checkpoint(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) => 3,
            _ => 1,
        }
    }

    fn line(&self) -> Value {
        let (kind, message) = match self {
            CliError::Config(m) => ("config", m.clone()),
            CliError::Checkpoint(m) => ("checkpoint", m.clone()),
            CliError::Failed(m) => ("failed", m.clone()),
            CliError::Core(e) => ("runtime", e.to_string()),
        };
        json!({ "error": kind, "message": message })
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "cable", version, about = "Positional-encoding experiments on a small decoder-only transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file with flat dotted keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Encoding selector: cable, cable-nw, kcable, alibi, kerple, fire, t5, rope, sinusoidal, learnable, nope.
    #[arg(long)]
    posenc: Option<String>,
    /// CABLE variant: full, nw or kernel.
    #[arg(long)]
    cable_variant: Option<String>,
    /// Parent directory for per-run outputs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let ov = Overrides {
            set: self.set.clone(),
            posenc: self.posenc.clone(),
            cable_variant: self.cable_variant.clone(),
            out_dir: self.out_dir.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &ov)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, loss.csv, config.json and vocab.txt.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Perplexity sweep over evaluation lengths.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated lengths; defaults to the run's `eval.lengths`.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long)]
        tag: Option<String>,
        /// Report path; defaults to `eval.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge eval reports into a CSV table (rows = lengths, columns = models).
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-head bias matrices of one layer for a text file.
    DumpBias {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Single head; all heads when omitted.
        #[arg(long)]
        head: Option<usize>,
        /// Defaults to `bias_layer{L}` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = evalx::DUMP_CAP)]
        cap: usize,
    },
    /// Throughput and memory for the configured model.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference gradient audit of the configured model in 64-bit.
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Command) -> CliResult<Value> {
    match cmd {
        Command::Train { cfg, resume } => cmd_train(cfg.resolve()?, resume.as_deref()),
        Command::Eval { checkpoint, lengths, tag, out } => cmd_eval(&checkpoint, &lengths, tag, out),
        Command::Compare { reports, out } => cmd_compare(&reports, out.as_deref()),
        Command::DumpBias { checkpoint, input, layer, head, out, cap } => {
            cmd_dump_bias(&checkpoint, &input, layer, head, out, cap)
        }
        Command::Bench { cfg } => cmd_bench(cfg.resolve()?),
        Command::Audit { cfg } => cmd_audit(cfg.resolve()?),
    }
}

fn prepare_run_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(dir)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

/// The run configuration stored in a checkpoint, or the defaults for foreign files.
fn stored_config(ck: &Checkpoint) -> CliResult<RunConfig> {
    let mut cfg = match ck.extra.get("run_config") {
        Some(Value::Object(map)) => {
            let flat = map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            RunConfig::from_flat(&flat)?
        }
        _ => RunConfig::default(),
    };
    cfg.model = ck.config.clone();
    Ok(cfg)
}

fn checkpoint_vocab(path: &Path) -> CliResult<Vocab> {
    let sidecar = path.parent().unwrap_or(Path::new(".")).join("vocab.txt");
    Ok(Vocab::load(&sidecar)?)
}

fn cmd_train(mut cfg: RunConfig, resume: Option<&Path>) -> CliResult<Value> {
    let resume = resume.map(load_checkpoint).transpose()?;
    let corpus = cfg.data.corpus()?;
    cfg.model.vocab_size = corpus.vocab.len();
    if let Some(ck) = &resume {
        if ck.config != cfg.model {
            return Err(CliError::Config("checkpoint was trained with a different model configuration".into()));
        }
    }
    let dir = prepare_run_dir(&cfg)?;
    corpus.vocab.save(dir.join("vocab.txt"))?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let opts = LoopOptions {
        out_dir: Some(dir.clone()),
        extra: json!({ "run_config": cfg.flat() }),
        log_every: cfg.log_every,
    };
    let outcome = train_loop(&mut model, &corpus, &cfg.train, &opts, resume.as_ref())?;
    Ok(json!({
        "run_dir": dir,
        "checkpoint": dir.join("final.ckpt"),
        "config_hash": cfg.hash(),
        "steps": outcome.checkpoint.step,
        "final_loss": outcome.trace.last().map(|r| r.loss),
        "parameters": model.param_count(),
    }))
}

fn cmd_eval(path: &Path, lengths: &[usize], tag: Option<String>, out: Option<PathBuf>) -> CliResult<Value> {
    let ck = load_checkpoint(path)?;
    let cfg = stored_config(&ck)?;
    let corpus = cfg.data.corpus_with(checkpoint_vocab(path)?)?;
    let lengths = if !lengths.is_empty() {
        lengths.to_vec()
    } else if !cfg.eval.lengths.is_empty() {
        cfg.eval.lengths.clone()
    } else {
        doubling_lengths(cfg.train.t_train)
    };
    let model: Model<f32> = ck.to_model()?;
    let tag = tag.unwrap_or_else(|| cfg.model_tag());
    let report = evalx::ppl_sweep(&model, corpus.eval(), &lengths, &tag)?;
    let out = out.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("eval.json"));
    fs::write(&out, report.to_json()?)?;
    Ok(json!({ "report": out, "rows": report.rows }))
}

fn cmd_compare(paths: &[PathBuf], out: Option<&Path>) -> CliResult<Value> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))?;
            evalx::EvalReport::from_json(&text).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let table = evalx::compare_table(&reports);
    if let Some(out) = out {
        fs::write(out, &table)?;
    }
    Ok(json!({ "table": table, "out": out }))
}

fn cmd_dump_bias(
    path: &Path,
    input: &Path,
    layer: usize,
    head: Option<usize>,
    out: Option<PathBuf>,
    cap: usize,
) -> CliResult<Value> {
    let ck = load_checkpoint(path)?;
    let vocab = checkpoint_vocab(path)?;
    let text = fs::read_to_string(input).map_err(|e| cable_core::Error::Ingest(format!("{}: {e}", input.display())))?;
    let ids = vocab.encode(&text)?;
    let model: Model<f64> = ck.to_model()?;
    let heads = head.map_or(HeadSelector::All, HeadSelector::One);
    let out = out.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join(format!("bias_layer{layer}")));
    let dump = evalx::dump_bias(&model, &ids, layer, heads, Some(&out), cap)?;
    Ok(json!({
        "out_dir": out,
        "layer": dump.layer,
        "content": dump.content,
        "heads": dump.heads.iter().map(|(h, _)| *h).collect::<Vec<_>>(),
        "tokens": ids.len(),
    }))
}

fn cmd_bench(cfg: RunConfig) -> CliResult<Value> {
    let dir = prepare_run_dir(&cfg)?;
    let b = &cfg.bench;
    let rows = b
        .modes
        .iter()
        .map(|&mode| evalx::bench(&cfg.model, mode, b.seq_len, b.batch_size, b.repetitions, cfg.train.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let body = json!({ "model_tag": cfg.model_tag(), "config_hash": cfg.hash(), "throughput": rows });
    fs::write(dir.join("bench.json"), serde_json::to_string_pretty(&body).expect("serializable"))?;
    Ok(json!({ "run_dir": dir, "throughput": body["throughput"] }))
}

fn cmd_audit(cfg: RunConfig) -> CliResult<Value> {
    let dir = prepare_run_dir(&cfg)?;
    let model = Model::<f64>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let ids: Vec<usize> = (0..=cfg.audit.seq_len).map(|_| rng.random_range(0..cfg.model.vocab_size)).collect();
    let report = evalx::grad_audit(&model, &ids, cfg.audit.threshold, cfg.audit.max_entries)?;
    let path = dir.join("audit.json");
    fs::write(&path, serde_json::to_string_pretty(&report).expect("serializable"))?;
    if !report.passed {
        return Err(CliError::Failed(format!(
            "gradient audit failed: max relative error {:.3e} above {:.1e}; see {}",
            report.max_rel_err,
            report.threshold,
            path.display()
        )));
    }
    Ok(json!({ "run_dir": dir, "passed": report.passed, "max_rel_err": report.max_rel_err, "groups": report.groups }))
}
