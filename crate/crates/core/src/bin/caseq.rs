use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use caseq::config::{ConfigError, RunConfig};
use caseq::data::{build_splits, parse_dataset, DataError};
use caseq::eval::{self, EvalError, Metric};
use caseq::model::{load_checkpoint, save_checkpoint, BaselineMode, CaseqConfig, CaseqParams, ModelError, CHECKPOINT_VERSION};
use caseq::par;
use caseq::scm::{context_labels_csv, sample_dataset, LengthDist, ScmError, ScmSpec, ScmSpecFile};
use caseq::train::{train, TrainError};
use caseq::verify::{self, Suite};

#[derive(Parser)]
#[command(name = "caseq", about = "Causally-adjusted sequential event prediction")]
struct Cli {
    /// Worker threads; 0 uses every core. `--threads 1` is bit-deterministic.
    #[arg(long, global = true, env = "CASEQ_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a structural causal model spec.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Sidecar CSV with the realized context of every position.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Sequence lengths as `LEN` or `MIN:MAX`; overrides the spec's `lengths`.
        #[arg(long)]
        lengths: Option<String>,
    },
    /// Write the train/valid/test role of every position as CSV.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gap_max: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and per-epoch history.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        gap_max: usize,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Overrides `model.baseline` (none, single, ensemble, gated).
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Evaluate a checkpoint per gap size.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gap_max: usize,
        /// Comma-separated gap sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        gaps: Vec<usize>,
        /// acc, hr[@k] or ndcg[@k] (k defaults to 10); repeatable or comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        metric: Vec<String>,
        /// Sampled negatives per example; 0 ranks against every event type.
        #[arg(long, default_value_t = 0)]
        negatives: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write diagnostic tables from a checkpoint.
    Dump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        what: What,
        #[arg(long)]
        out: PathBuf,
        /// Batch sizes for `--what timing`.
        #[arg(long, value_delimiter = ',', default_value = "1,16,64")]
        batch_sizes: Vec<usize>,
    },
    /// Run the built-in correctness checks.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum What {
    Contexts,
    Embeddings,
    Timing,
}

/// A failure together with its exit code: 1 I/O, 2 config or usage, 3 numeric.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn io(msg: impl Display) -> Self {
        Self { code: 1, msg: msg.to_string() }
    }
    fn config(msg: impl Display) -> Self {
        Self { code: 2, msg: msg.to_string() }
    }
    fn numeric(msg: impl Display) -> Self {
        Self { code: 3, msg: msg.to_string() }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Self::io(e),
            _ => Self::config(e),
        }
    }
}

impl From<ScmError> for Failure {
    fn from(e: ScmError) -> Self {
        match e {
            ScmError::Io { .. } => Self::io(e),
            _ => Self::config(e),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::io(e),
            ConfigError::Parse(_) => Self::config(e),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(caseq::tensor::TensorError::Numeric(_)) => Self::numeric(e),
            _ => Self::config(e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Objective(_) => Self::numeric(e),
            _ => Self::config(e),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let version = format!("{} (checkpoint format {CHECKPOINT_VERSION})", env!("CARGO_PKG_VERSION"));
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let threads = cli.threads;
    match par::with_threads(threads, move || run(cli.command, threads)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command, threads: usize) -> Outcome {
    let started = Instant::now();
    match command {
        Command::Simulate {
            spec,
            n,
            seed,
            out,
            labels,
            lengths,
        } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Failure::io(format!("{}: {e}", spec.display())))?;
            let model = ScmSpec::from_toml(&text)?;
            let lengths = match lengths {
                Some(s) => parse_lengths(&s)?,
                None => ScmSpecFile::lengths(&text).unwrap_or(LengthDist::fixed(50)),
            };
            let ds = sample_dataset(&model, n, lengths, seed)?;
            write_atomic(&out, ds.to_text().as_bytes())?;
            let mut outputs = vec![out.clone()];
            if let Some(path) = &labels {
                write_atomic(path, context_labels_csv(&ds).as_bytes())?;
                outputs.push(path.clone());
            }
            let manifest = Manifest::new("simulate", json!({"spec": model, "n": n, "lengths": lengths}), vec![seed], vec![spec], outputs, started, threads);
            manifest.write_all()
        }
        Command::Split { data, gap_max, out } => {
            let ds = parse_dataset(&data, None)?;
            let split = build_splits(&ds, gap_max);
            write_atomic(&out, split.summary_csv().as_bytes())?;
            Manifest::new("split", json!({"gap_max": gap_max}), vec![], vec![data], vec![out], started, threads).write_all()
        }
        Command::Train {
            data,
            config,
            gap_max,
            seed,
            out,
            log,
            baseline,
        } => {
            let mut run_cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                run_cfg.train.seed = s;
            }
            if let Some(b) = baseline {
                run_cfg.model.baseline = b.parse::<BaselineMode>().map_err(Failure::config)?;
            }
            let given = (run_cfg.model.event_types > 0).then_some(run_cfg.model.event_types);
            let ds = parse_dataset(&data, given)?;
            if given.is_none() {
                run_cfg.model.event_types = ds.num_types;
            }
            run_cfg.model.validate()?;
            let split = build_splits(&ds, gap_max);
            let (params, history) = match train(&ds, &split, &run_cfg.model, &run_cfg.train) {
                Ok(r) => r,
                Err(TrainError::Diverged { epoch, step, last_good }) => {
                    let rescue = out.with_extension("last-good");
                    write_atomic(&rescue, &save_checkpoint(&run_cfg.model, &last_good))?;
                    return Err(Failure::numeric(format!(
                        "training diverged at epoch {epoch}, step {step}; last finite parameters saved to {}",
                        rescue.display()
                    )));
                }
                Err(e @ TrainError::NonFinite(_)) => return Err(Failure::numeric(e)),
                Err(e @ TrainError::Objective(_)) => return Err(Failure::numeric(e)),
                Err(TrainError::Eval(e)) => return Err(e.into()),
                Err(TrainError::Model(e)) => return Err(e.into()),
                Err(e) => return Err(Failure::config(e)),
            };
            write_atomic(&out, &save_checkpoint(&run_cfg.model, &params))?;
            write_atomic(&log, history.to_csv().as_bytes())?;
            let cfg = json!({"run": run_cfg, "gap_max": gap_max, "best_epoch": history.best_epoch});
            let seed = run_cfg.train.seed;
            Manifest::new("train", cfg, vec![seed], vec![data, config], vec![out, log], started, threads).write_all()
        }
        Command::Eval {
            model,
            data,
            gap_max,
            gaps,
            metric,
            negatives,
            seed,
            out,
        } => {
            let metrics = metric
                .iter()
                .map(|m| m.parse::<Metric>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::config)?;
            if let Some(&g) = gaps.iter().find(|&&g| g > gap_max) {
                return Err(Failure::config(format!("gap {g} outside [0, {gap_max}]")));
            }
            let (config, params) = load_model(&model)?;
            let ds = parse_dataset(&data, Some(config.event_types))?;
            let split = build_splits(&ds, gap_max);
            let report = eval::evaluate_gaps(&params, &config, &ds, &split, &gaps, &metrics, negatives, seed)?;
            for r in &report.rows {
                match r.value {
                    Some(v) => log::info!("gap {} {}: {v:.4} (n={})", r.gap, r.metric.name(), r.n),
                    None => log::warn!("gap {} {}: no test examples", r.gap, r.metric.name()),
                }
            }
            write_atomic(&out, report.to_csv().as_bytes())?;
            let names: Vec<String> = metrics.iter().map(Metric::name).collect();
            let cfg = json!({"model": config, "gap_max": gap_max, "gaps": gaps, "metrics": names, "negatives": negatives});
            Manifest::new("eval", cfg, vec![seed], vec![model, data], vec![out], started, threads).write_all()
        }
        Command::Dump {
            model,
            data,
            what,
            out,
            batch_sizes,
        } => {
            let (config, params) = load_model(&model)?;
            let ds = parse_dataset(&data, Some(config.event_types))?;
            let text = match what {
                What::Contexts => eval::dump_context_probs(&params, &config, &ds)?,
                What::Embeddings => eval::dump_context_embeddings(&params),
                What::Timing => eval::timing_csv(&eval::time_forward(&params, &config, &ds, &batch_sizes)?),
            };
            write_atomic(&out, text.as_bytes())?;
            let cfg = json!({"model": config, "what": what, "batch_sizes": batch_sizes});
            Manifest::new("dump", cfg, vec![], vec![model, data], vec![out], started, threads).write_all()
        }
        Command::Verify { suite } => {
            let suite: Suite = suite.parse().map_err(Failure::config)?;
            let checks = verify::run(suite);
            let mut stdout = std::io::stdout().lock();
            for c in &checks {
                let _ = writeln!(stdout, "{c}");
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            if failed == 0 {
                let _ = writeln!(stdout, "all {} checks passed", checks.len());
                Ok(())
            } else {
                Err(Failure::numeric(format!("{failed} of {} checks failed", checks.len())))
            }
        }
    }
}

fn parse_lengths(s: &str) -> Result<LengthDist, Failure> {
    let bad = || Failure::config(format!("--lengths expects LEN or MIN:MAX, got `{s}`"));
    let (lo, hi) = s.split_once(':').unwrap_or((s, s));
    let min = lo.trim().parse().map_err(|_| bad())?;
    let max = hi.trim().parse().map_err(|_| bad())?;
    Ok(LengthDist { min, max })
}

fn load_model(path: &Path) -> Result<(CaseqConfig, CaseqParams), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Ok(load_checkpoint(&bytes)?)
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| Failure::io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config: Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    tool_version: String,
    checkpoint_format: u32,
    threads: usize,
    started_unix: u64,
    wall_clock_seconds: f64,
}

impl Manifest {
    fn new(command: &str, config: Value, seeds: Vec<u64>, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, started: Instant, threads: usize) -> Self {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let elapsed = started.elapsed();
        Self {
            command: command.to_string(),
            config,
            seeds,
            inputs,
            outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
            threads: if threads > 0 { threads } else { par::current_threads() },
            started_unix: now.saturating_sub(elapsed.as_secs()),
            wall_clock_seconds: elapsed.as_secs_f64(),
        }
    }

    /// One `<output>.manifest.json` next to every output file.
    fn write_all(&self) -> Outcome {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        for out in &self.outputs {
            let mut name = out.clone().into_os_string();
            name.push(".manifest.json");
            write_atomic(Path::new(&name), text.as_bytes())?;
        }
        Ok(())
    }
}
