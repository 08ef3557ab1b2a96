//! Experiment configuration: sectioned `key = value` text.
//!
//! ```text
//! # comment
//! [train]
//! epochs = 10
//! [align]
//! lambda = 0.1
//! merge.operator = max_abs     # dotted keys work anywhere
//! ```
//!
//! Omitted keys keep their defaults, unknown keys are rejected with the
//! line number, and [`ExperimentConfig::echo`] writes a text that parses
//! back to an equal config.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::diagnostics::BoundConfig;
use crate::error::{Error, Result};
use crate::features::SyntheticSpec;
use crate::lca::{AlignMode, HeadSelector};
use crate::merge::MergeOperator;
use crate::pipeline::{AdapterKind, PipelineConfig};

pub const DEFAULT_SEEDS: [u64; 3] = [1993, 1994, 1995];
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.01, 0.1, 1.0, 10.0];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// FCIL files; without a test file the train file is split by
    /// `test_fraction`
    Files {
        train: PathBuf,
        test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub test_fraction: f64,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub pipeline: PipelineConfig,
    pub bounds: BoundConfig,
    pub sweep_lambdas: Vec<f64>,
    pub walk_steps: usize,
    pub walk_sigma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticSpec::default()),
            test_fraction: 0.2,
            seeds: DEFAULT_SEEDS.to_vec(),
            output: PathBuf::from("out"),
            pipeline: PipelineConfig::default(),
            bounds: BoundConfig::default(),
            sweep_lambdas: DEFAULT_LAMBDAS.to_vec(),
            walk_steps: 10,
            walk_sigma: 0.05,
        }
    }
}

const KEYS: &[&str] = &[
    "data.synth",
    "data.path",
    "data.test_path",
    "data.test_fraction",
    "run.seeds",
    "run.output",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.eta_min",
    "merge.operator",
    "merge.alpha",
    "align.enabled",
    "align.mode",
    "align.lambda",
    "align.samples_per_class",
    "align.epochs",
    "align.batch_size",
    "align.class_batch",
    "align.heads",
    "align.resample",
    "adapter.kind",
    "adapter.hidden",
    "adapter.scale",
    "adapter.init_std",
    "model.head_hidden",
    "model.shrinkage",
    "diagnostics.delta",
    "diagnostics.p_min",
    "diagnostics.test_per_class",
    "diagnostics.mc_per_class",
    "diagnostics.tv_samples",
    "sweep.lambdas",
    "robustness.walk_steps",
    "robustness.walk_sigma",
];

/// Bare keys accepted outside any section.
fn alias(key: &str) -> Option<&'static str> {
    Some(match key {
        "lambda" => "align.lambda",
        "seeds" => "run.seeds",
        "output" => "run.output",
        "synth" => "data.synth",
        "dataset" => "data.path",
        "test_dataset" => "data.test_path",
        "operator" => "merge.operator",
        _ => return None,
    })
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        err(
            line,
            format!(
                "{key}: cannot parse '{v}' as {}",
                std::any::type_name::<T>()
            ),
        )
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(err(
            line,
            format!("{key}: expected true or false, got '{v}'"),
        )),
    }
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    let inner = v.trim().trim_start_matches('[').trim_end_matches(']');
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(line, key, s))
        .collect()
}

fn parse_heads(line: usize, v: &str) -> Result<HeadSelector> {
    match v {
        "all" => Ok(HeadSelector::All),
        "recent_half" => Ok(HeadSelector::RecentHalf),
        _ => {
            if let Some(k) = v.strip_prefix("recent:") {
                return Ok(HeadSelector::Recent(parse_num(
                    line,
                    "align.heads",
                    k.trim(),
                )?));
            }
            let list: Vec<usize> = parse_list(line, "align.heads", v).map_err(|_| {
                err(
                    line,
                    format!(
                        "align.heads: expected all, recent_half, recent:K or a list, got '{v}'"
                    ),
                )
            })?;
            if list.is_empty() {
                return Err(err(line, "align.heads: empty head list"));
            }
            Ok(HeadSelector::Explicit(list))
        }
    }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2
        && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\'')))
    {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        let mut data_path: Option<PathBuf> = None;
        let mut test_path: Option<PathBuf> = None;
        let mut synth: Option<(usize, SyntheticSpec)> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, format!("malformed section header '{content}'")))?
                    .trim();
                if !KEYS.iter().any(|k| k.starts_with(&format!("{name}."))) {
                    return Err(err(line, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected 'key = value', got '{content}'")))?;
            let (k, v) = (k.trim(), unquote(v));
            let full = if k.contains('.') {
                k.to_string()
            } else if let Some(a) = alias(k).filter(|_| section.is_none()) {
                a.to_string()
            } else if let Some(s) = &section {
                format!("{s}.{k}")
            } else {
                k.to_string()
            };
            let full = if section.is_some() && !KEYS.contains(&full.as_str()) {
                alias(k).map(str::to_string).unwrap_or(full)
            } else {
                full
            };
            if !KEYS.contains(&full.as_str()) {
                return Err(err(line, format!("unknown key '{full}'")));
            }
            let p = &mut cfg.pipeline;
            match full.as_str() {
                "data.synth" => {
                    synth = Some((
                        line,
                        SyntheticSpec::parse(v).map_err(|e| err(line, e.to_string()))?,
                    ))
                }
                "data.path" => data_path = Some(PathBuf::from(v)),
                "data.test_path" => test_path = Some(PathBuf::from(v)),
                "data.test_fraction" => cfg.test_fraction = parse_num(line, &full, v)?,
                "run.seeds" => cfg.seeds = parse_list(line, &full, v)?,
                "run.output" => cfg.output = PathBuf::from(v),
                "train.epochs" => p.train.epochs = parse_num(line, &full, v)?,
                "train.batch_size" => p.train.batch_size = parse_num(line, &full, v)?,
                "train.lr" => p.train.sgd.lr = parse_num(line, &full, v)?,
                "train.momentum" => p.train.sgd.momentum = parse_num(line, &full, v)?,
                "train.weight_decay" => p.train.sgd.weight_decay = parse_num(line, &full, v)?,
                "train.eta_min" => p.train.sgd.eta_min = parse_num(line, &full, v)?,
                "merge.operator" => {
                    p.merge.operator = v
                        .parse::<MergeOperator>()
                        .map_err(|e| err(line, e.to_string()))?
                }
                "merge.alpha" => p.merge.alpha = parse_num(line, &full, v)?,
                "align.enabled" => p.align.enabled = parse_bool(line, &full, v)?,
                "align.mode" => {
                    p.align.mode = match v {
                        "every_task" => AlignMode::EveryTask,
                        "final_only" => AlignMode::FinalOnly,
                        _ => {
                            return Err(err(
                                line,
                                format!("align.mode: '{v}'; allowed: every_task, final_only"),
                            ))
                        }
                    }
                }
                "align.lambda" => p.align.lca.lambda = parse_num(line, &full, v)?,
                "align.samples_per_class" => {
                    p.align.lca.samples_per_class = parse_num(line, &full, v)?
                }
                "align.epochs" => p.align.lca.epochs = parse_num(line, &full, v)?,
                "align.batch_size" => p.align.lca.batch_size = parse_num(line, &full, v)?,
                "align.class_batch" => p.align.lca.class_batch = parse_num(line, &full, v)?,
                "align.heads" => p.align.lca.heads = parse_heads(line, v)?,
                "align.resample" => p.align.lca.resample = parse_bool(line, &full, v)?,
                "adapter.kind" => {
                    p.adapter.kind = v
                        .parse::<AdapterKind>()
                        .map_err(|e| err(line, e.to_string()))?
                }
                "adapter.hidden" => p.adapter.hidden = parse_num(line, &full, v)?,
                "adapter.scale" => p.adapter.scale = parse_num(line, &full, v)?,
                "adapter.init_std" => p.adapter.init_std = parse_num(line, &full, v)?,
                "model.head_hidden" => p.head_hidden = parse_list(line, &full, v)?,
                "model.shrinkage" => p.shrinkage = parse_num(line, &full, v)?,
                "diagnostics.delta" => cfg.bounds.delta = parse_num(line, &full, v)?,
                "diagnostics.p_min" => cfg.bounds.p_min = parse_num(line, &full, v)?,
                "diagnostics.test_per_class" => {
                    cfg.bounds.test_per_class = parse_num(line, &full, v)?
                }
                "diagnostics.mc_per_class" => cfg.bounds.mc_per_class = parse_num(line, &full, v)?,
                "diagnostics.tv_samples" => cfg.bounds.tv_samples = parse_num(line, &full, v)?,
                "sweep.lambdas" => cfg.sweep_lambdas = parse_list(line, &full, v)?,
                "robustness.walk_steps" => cfg.walk_steps = parse_num(line, &full, v)?,
                "robustness.walk_sigma" => cfg.walk_sigma = parse_num(line, &full, v)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        match (synth, data_path) {
            (Some((line, _)), Some(_)) => {
                return Err(err(line, "data.synth and data.path are mutually exclusive"));
            }
            (Some((_, spec)), None) => {
                if test_path.is_some() {
                    return Err(err(0, "data.test_path requires data.path"));
                }
                cfg.data = DataSource::Synthetic(spec);
            }
            (None, Some(train)) => {
                cfg.data = DataSource::Files {
                    train,
                    test: test_path,
                }
            }
            (None, None) => {
                if test_path.is_some() {
                    return Err(err(0, "data.test_path requires data.path"));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Invariants that are not per-key type checks. Errors carry line 0.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| err(0, e.to_string());
        let p = &self.pipeline;
        if self.seeds.is_empty() {
            return Err(err(0, "run.seeds is empty"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(err(
                0,
                format!("data.test_fraction {} outside [0, 1)", self.test_fraction),
            ));
        }
        if p.train.batch_size == 0 {
            return Err(err(0, "train.batch_size must be >= 1"));
        }
        if p.train.sgd.lr.is_nan()
            || p.train.sgd.lr <= 0.0
            || !(0.0..1.0).contains(&p.train.sgd.momentum)
        {
            return Err(err(0, "train.lr must be > 0 and train.momentum in [0, 1)"));
        }
        if p.train.sgd.weight_decay < 0.0 || p.train.sgd.eta_min < 0.0 {
            return Err(err(0, "train.weight_decay and train.eta_min must be >= 0"));
        }
        if !p.merge.alpha.is_finite() {
            return Err(err(0, "merge.alpha must be finite"));
        }
        p.align.lca.validate().map_err(wrap)?;
        p.adapter.spec(1).validate().map_err(wrap)?;
        if !(0.0..=1.0).contains(&p.shrinkage) {
            return Err(err(
                0,
                format!("model.shrinkage {} outside [0, 1]", p.shrinkage),
            ));
        }
        if p.head_hidden.contains(&0) {
            return Err(err(0, "model.head_hidden widths must be positive"));
        }
        let b = &self.bounds;
        if !(b.delta > 0.0 && b.delta < 1.0) || !(b.p_min > 0.0 && b.p_min < 1.0) {
            return Err(err(
                0,
                "diagnostics.delta and diagnostics.p_min must lie in (0, 1)",
            ));
        }
        if b.test_per_class == 0 || b.mc_per_class == 0 || b.tv_samples < 4 {
            return Err(err(0, "diagnostics sample counts too small"));
        }
        if self
            .sweep_lambdas
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            return Err(err(0, "sweep.lambdas must be finite and >= 0"));
        }
        if self.walk_steps == 0 || self.walk_sigma.is_nan() || self.walk_sigma < 0.0 {
            return Err(err(
                0,
                "robustness.walk_steps must be >= 1 and walk_sigma >= 0",
            ));
        }
        Ok(())
    }

    /// Full resolved config in the input syntax.
    pub fn echo(&self) -> String {
        let p = &self.pipeline;
        let mut s = String::new();
        s.push_str("[data]\n");
        match &self.data {
            DataSource::Synthetic(spec) => {
                writeln!(s, "synth = \"{}\"", spec.to_spec_string()).unwrap()
            }
            DataSource::Files { train, test } => {
                writeln!(s, "path = {}", train.display()).unwrap();
                if let Some(t) = test {
                    writeln!(s, "test_path = {}", t.display()).unwrap();
                }
            }
        }
        writeln!(s, "test_fraction = {}", self.test_fraction).unwrap();
        writeln!(
            s,
            "\n[run]\nseeds = {}\noutput = {}",
            fmt_list(&self.seeds),
            self.output.display()
        )
        .unwrap();
        let t = &p.train;
        writeln!(
            s,
            "\n[train]\nepochs = {}\nbatch_size = {}\nlr = {}\nmomentum = {}\nweight_decay = {}\neta_min = {}",
            t.epochs, t.batch_size, t.sgd.lr, t.sgd.momentum, t.sgd.weight_decay, t.sgd.eta_min
        )
        .unwrap();
        writeln!(
            s,
            "\n[merge]\noperator = {}\nalpha = {}",
            p.merge.operator, p.merge.alpha
        )
        .unwrap();
        let a = &p.align;
        writeln!(
            s,
            "\n[align]\nenabled = {}\nmode = {}\nlambda = {}\nsamples_per_class = {}\nepochs = {}\nbatch_size = {}\nclass_batch = {}\nheads = {}\nresample = {}",
            a.enabled,
            match a.mode {
                AlignMode::EveryTask => "every_task",
                AlignMode::FinalOnly => "final_only",
            },
            a.lca.lambda,
            a.lca.samples_per_class,
            a.lca.epochs,
            a.lca.batch_size,
            a.lca.class_batch,
            a.lca.heads.to_config_string(),
            a.lca.resample
        )
        .unwrap();
        let ad = &p.adapter;
        writeln!(
            s,
            "\n[adapter]\nkind = {}\nhidden = {}\nscale = {}\ninit_std = {}",
            ad.kind, ad.hidden, ad.scale, ad.init_std
        )
        .unwrap();
        writeln!(
            s,
            "\n[model]\nhead_hidden = [{}]\nshrinkage = {}",
            fmt_list(&p.head_hidden),
            p.shrinkage
        )
        .unwrap();
        let b = &self.bounds;
        writeln!(
            s,
            "\n[diagnostics]\ndelta = {}\np_min = {}\ntest_per_class = {}\nmc_per_class = {}\ntv_samples = {}",
            b.delta, b.p_min, b.test_per_class, b.mc_per_class, b.tv_samples
        )
        .unwrap();
        writeln!(s, "\n[sweep]\nlambdas = {}", fmt_list(&self.sweep_lambdas)).unwrap();
        writeln!(
            s,
            "\n[robustness]\nwalk_steps = {}\nwalk_sigma = {}",
            self.walk_steps, self.walk_sigma
        )
        .unwrap();
        s
    }
}
