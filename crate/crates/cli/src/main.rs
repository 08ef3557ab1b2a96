//! `lca`: command-line runner for the lca-core experiments.
//!
//! Every command resolves one configuration (file, then flags), writes its
//! CSV artifacts plus `config.resolved` and `manifest.json` into the output
//! directory, and on failure prints a one-line JSON error record to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lca_core::config::{DataSource, ExperimentConfig};
use lca_core::experiment::{
    ablate_merge, dataset_csv, diagnose, eval_robust, load_data, median, run, sweep_lambda,
    Artifact, Method,
};
use lca_core::features::{encode_features, FeatureDataset, SyntheticSpec};
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(
    name = "lca",
    version,
    about = "Feature-space class-incremental learning experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` with optional `[section]` headers)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several. Replaces the configured seeds.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Output directory
    #[arg(long, global = true, env = "LCA_OUT")]
    out: Option<PathBuf>,
    /// FCIL training file, or the only file when no test file is given
    #[arg(long, global = true, conflicts_with = "synth")]
    dataset: Option<PathBuf>,
    /// FCIL test file
    #[arg(long, global = true, requires = "dataset")]
    test_dataset: Option<PathBuf>,
    /// Synthetic benchmark, e.g. `tasks=10,classes=4,dim=32,sep=3`
    #[arg(long, global = true)]
    synth: Option<String>,
    /// Alignment λ for every command that aligns
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Im,
    ImCa,
    ImLca,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Im => Method::Im,
            MethodArg::ImCa => Method::ImCa,
            MethodArg::ImLca => Method::ImLca,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark of the first seed as train/test FCIL files
    Synth,
    /// Run the incremental pipeline on every seed
    Run {
        /// Override alignment: im (none), im-ca (λ = 0) or im-lca
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Save a checkpoint per seed after every task
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Continue from existing checkpoints (default dir: <out>/checkpoints)
        #[arg(long)]
        resume: bool,
    },
    /// Average accuracy for each alignment λ
    SweepLambda {
        /// Comma-separated λ values; replaces the configured list
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Merge operators crossed with IM, IM+CA and IM+LCA
    AblateMerge,
    /// Generalization and shift bound checks on the final state
    Diagnose,
    /// Corruption and perturbation accuracy of IM and IM+LCA
    EvalRobust,
    /// Dump the dataset of the first seed as CSV
    ExportCsv,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Run { .. } => "run",
            Command::SweepLambda { .. } => "sweep-lambda",
            Command::AblateMerge => "ablate-merge",
            Command::Diagnose => "diagnose",
            Command::EvalRobust => "eval-robust",
            Command::ExportCsv => "export-csv",
        }
    }
}

/// Failure reported as `{"error": {"kind", "message"}}`.
struct Failure {
    kind: String,
    message: String,
}

impl From<lca_core::Error> for Failure {
    fn from(e: lca_core::Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        kind: "io".into(),
        message: format!("{}: {e}", path.display()),
    }
}

/// Config file, then common flags, then command options.
fn resolve(common: &Common, command: &Command) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if !common.seeds.is_empty() {
        cfg.seeds = common.seeds.clone();
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    if let Some(spec) = &common.synth {
        cfg.data = DataSource::Synthetic(SyntheticSpec::parse(spec)?);
    }
    if let Some(train) = &common.dataset {
        cfg.data = DataSource::Files {
            train: train.clone(),
            test: common.test_dataset.clone(),
        };
    }
    if let Some(l) = common.lambda {
        cfg.pipeline.align.lca.lambda = l;
    }
    match command {
        Command::Run {
            method: Some(m), ..
        } => cfg.pipeline = Method::from(*m).apply(&cfg.pipeline),
        Command::SweepLambda { lambdas } if !lambdas.is_empty() => {
            cfg.sweep_lambdas = lambdas.clone()
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rows of `rows` as a dataset of their own, keeping the class table.
fn subset(data: &FeatureDataset, rows: &[usize]) -> Result<FeatureDataset, Failure> {
    let (x, y) = data.select(rows);
    let tasks = y.iter().map(|c| data.class_to_task[c]).collect();
    Ok(FeatureDataset::with_class_table(
        x,
        y,
        tasks,
        data.class_to_task.clone(),
    )?)
}

struct Output {
    text: Vec<Artifact>,
    binary: Vec<(String, Vec<u8>)>,
    summary: Vec<String>,
}

fn execute(command: &Command, cfg: &ExperimentConfig) -> Result<Output, Failure> {
    let mut out = Output {
        text: Vec::new(),
        binary: Vec::new(),
        summary: Vec::new(),
    };
    match command {
        Command::Synth => {
            if !matches!(cfg.data, DataSource::Synthetic(_)) {
                return Err(Failure {
                    kind: "argument".into(),
                    message: "synth needs a synthetic data source, not --dataset".into(),
                });
            }
            let (data, split) = load_data(cfg, cfg.seeds[0])?;
            for (name, test) in [("train.fcil", false), ("test.fcil", true)] {
                let rows: Vec<usize> = split
                    .tasks
                    .iter()
                    .flat_map(|p| if test { p.test.iter() } else { p.train.iter() })
                    .copied()
                    .collect();
                out.binary
                    .push((name.to_string(), encode_features(&subset(&data, &rows)?)?));
            }
            out.summary.push(format!(
                "{} rows, {} classes, {} tasks, dim {}",
                data.len(),
                data.class_count(),
                data.task_count(),
                data.dim()
            ));
        }
        Command::Run {
            checkpoint_dir,
            resume,
            ..
        } => {
            let dir = match (checkpoint_dir, resume) {
                (Some(d), _) => Some(d.clone()),
                (None, true) => Some(cfg.output.join("checkpoints")),
                (None, false) => None,
            };
            if let Some(d) = &dir {
                fs::create_dir_all(d).map_err(|e| io_failure(d, e))?;
            }
            let r = run(cfg, dir.as_deref(), *resume)?;
            for (seed, st) in &r.states {
                let acc = st.accuracy();
                out.summary.push(format!(
                    "seed {seed}: average accuracy {:.4}, final accuracy {:.4}",
                    acc.average_accuracy()?,
                    acc.last().unwrap_or(0.0)
                ));
            }
            out.text = r.artifacts;
        }
        Command::SweepLambda { .. } => {
            let r = sweep_lambda(cfg)?;
            for (l, v) in &r.rows {
                out.summary.push(format!(
                    "lambda {l}: median average accuracy {:.4}",
                    median(v)
                ));
            }
            out.text = r.artifacts;
        }
        Command::AblateMerge => {
            let r = ablate_merge(cfg)?;
            for (op, m, v) in &r.rows {
                out.summary.push(format!(
                    "{op} {}: median average accuracy {:.4}",
                    m.name(),
                    median(v)
                ));
            }
            out.text = r.artifacts;
        }
        Command::Diagnose => {
            let r = diagnose(cfg)?;
            for ((seed, b), (_, s)) in r.bounds.iter().zip(&r.shifts) {
                out.summary.push(format!(
                    "seed {seed}: bound {} (measured {:.4} <= {:.4}), shift bound {} (measured {:.4} <= {:.4}, TV {:.4})",
                    if b.holds { "holds" } else { "violated" },
                    b.measured,
                    b.rhs,
                    if s.holds { "holds" } else { "violated" },
                    s.measured,
                    s.rhs,
                    s.tv.tv
                ));
            }
            out.text = r.artifacts;
        }
        Command::EvalRobust => {
            let r = eval_robust(cfg)?;
            for (seed, im, lca) in &r.reports {
                out.summary.push(format!(
                    "seed {seed}: Acc_C {:.4} -> {:.4}, Acc_P {:.4} -> {:.4} (IM -> IM+LCA)",
                    im.acc_c, lca.acc_c, im.acc_p, lca.acc_p
                ));
            }
            out.text = r.artifacts;
        }
        Command::ExportCsv => {
            let (data, split) = load_data(cfg, cfg.seeds[0])?;
            out.text.push(Artifact {
                name: "dataset.csv".into(),
                contents: dataset_csv(&data, &split),
            });
            out.summary.push(format!("{} rows", data.len()));
        }
    }
    Ok(out)
}

fn write_outputs(command: &Command, cfg: &ExperimentConfig, out: &Output) -> Result<(), Failure> {
    let dir = &cfg.output;
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let echo = cfg.echo();
    let mut files: Vec<(String, &[u8])> = vec![("config.resolved".into(), echo.as_bytes())];
    files.extend(
        out.text
            .iter()
            .map(|a| (a.name.clone(), a.contents.as_bytes())),
    );
    files.extend(out.binary.iter().map(|(n, b)| (n.clone(), b.as_slice())));
    let mut entries = Vec::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| io_failure(&path, e))?;
        entries.push(json!({ "name": name, "bytes": bytes.len(), "sha256": sha256_hex(bytes) }));
    }
    let manifest = json!({
        "tool": "lca",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command.name(),
        "seeds": cfg.seeds,
        "config": echo,
        "config_sha256": sha256_hex(echo.as_bytes()),
        "artifacts": entries,
    });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| io_failure(&path, e))
}

fn report(f: &Failure) {
    eprintln!(
        "{}",
        json!({ "error": { "kind": f.kind, "message": f.message } })
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(&Failure {
                kind: "usage".into(),
                message: e
                    .to_string()
                    .lines()
                    .next()
                    .unwrap_or_default()
                    .trim_start_matches("error: ")
                    .to_string(),
            });
            return ExitCode::from(2);
        }
    };
    let started = Instant::now();
    let result = resolve(&cli.common, &cli.command).and_then(|cfg| {
        let out = execute(&cli.command, &cfg)?;
        write_outputs(&cli.command, &cfg, &out)?;
        for line in &out.summary {
            println!("{line}");
        }
        println!(
            "{} finished in {:.1}s; outputs in {}",
            cli.command.name(),
            started.elapsed().as_secs_f64(),
            cfg.output.display()
        );
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::FAILURE
        }
    }
}
