//! Experiment drivers behind the CLI subcommands. Every driver returns its
//! result files as in-memory [`Artifact`]s; seeds and configuration variants
//! run in parallel but results are always assembled in a fixed order, so
//! the files are byte-identical across invocations.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig};
use crate::diagnostics::{
    bound_reports_csv, check_generalization_bound, check_shift_bound, shift_reports_csv,
    BoundReport, ShiftReport,
};
use crate::error::{Error, Result};
use crate::features::{
    generate_synthetic, read_features, FeatureDataset, PerturbationSpec, TaskSplit,
};
use crate::gaussian::{fit_class_stats, FitOptions};
use crate::lca::{align_log_csv, align_on_fixed_set};
use crate::merge::MergeOperator;
use crate::metrics::{evaluate_robustness, RobustnessReport, RobustnessSuite};
use crate::pipeline::{resume_sequence, PipelineConfig, PipelineState};
use crate::rng::RngStream;

const STREAM_DIAGNOSE: u64 = 0xd1a9;

/// One output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

impl Artifact {
    fn new(name: impl Into<String>, contents: String) -> Self {
        Self {
            name: name.into(),
            contents,
        }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Dataset and task split for one seed.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(FeatureDataset, TaskSplit)> {
    match &cfg.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec, seed),
        DataSource::Files { train, test } => {
            let train_set = read_features(train)?;
            match test {
                Some(t) => TaskSplit::from_train_test(&train_set, &read_features(t)?),
                None => {
                    let split = TaskSplit::holdout(&train_set, cfg.test_fraction, seed)?;
                    Ok((train_set, split))
                }
            }
        }
    }
}

/// The three methods compared throughout: no alignment, alignment with
/// λ = 0, and alignment with the configured λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Im,
    ImCa,
    ImLca,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Im, Method::ImCa, Method::ImLca];

    pub fn name(self) -> &'static str {
        match self {
            Method::Im => "IM",
            Method::ImCa => "IM+CA",
            Method::ImLca => "IM+LCA",
        }
    }

    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut p = base.clone();
        match self {
            Method::Im => p.align.enabled = false,
            Method::ImCa => {
                p.align.enabled = true;
                p.align.lca.lambda = 0.0;
            }
            Method::ImLca => p.align.enabled = true,
        }
        p
    }
}

/// Full sequence for one seed. With a checkpoint path the state is saved
/// after every task, and with `resume` an existing checkpoint is continued.
pub fn run_seed(
    data: &FeatureDataset,
    split: &TaskSplit,
    pipeline: &PipelineConfig,
    seed: u64,
    checkpoint: Option<&Path>,
    resume: bool,
) -> Result<PipelineState<f64>> {
    split.validate(data)?;
    let mut state = match checkpoint {
        Some(path) if resume && path.exists() => PipelineState::load(path)?,
        _ => PipelineState::new(pipeline, data.dim(), seed)?,
    };
    if state.adapter_spec().dim != data.dim() {
        return Err(Error::State(
            "checkpoint feature dimension differs from the data".into(),
        ));
    }
    match checkpoint {
        None => resume_sequence(state, data, split, pipeline, seed),
        Some(path) => {
            while state.task_cursor() < split.tasks.len() {
                state.run_task(data, split, pipeline, seed)?;
                state.save(path)?;
            }
            Ok(state)
        }
    }
}

fn summary_csv(rows: &[(u64, f64, f64)]) -> String {
    let mut s = String::from("seed,average_accuracy,final_accuracy\n");
    for (seed, aa, last) in rows {
        writeln!(s, "{seed},{aa:.6},{last:.6}").unwrap();
    }
    let aa: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let last: Vec<f64> = rows.iter().map(|r| r.2).collect();
    writeln!(s, "mean,{:.6},{:.6}", mean(&aa), mean(&last)).unwrap();
    writeln!(s, "std,{:.6},{:.6}", std_dev(&aa), std_dev(&last)).unwrap();
    s
}

pub struct RunOutcome {
    pub states: Vec<(u64, PipelineState<f64>)>,
    pub artifacts: Vec<Artifact>,
}

/// The configured pipeline over every seed: per-seed accuracy matrices and
/// alignment logs, a mean ± std summary and the mean `A_t` curve.
pub fn run(
    cfg: &ExperimentConfig,
    checkpoint_dir: Option<&Path>,
    resume: bool,
) -> Result<RunOutcome> {
    let states: Vec<(u64, PipelineState<f64>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (data, split) = load_data(cfg, seed)?;
            let ck = checkpoint_dir.map(|d| d.join(format!("checkpoint_seed{seed}.fckp")));
            Ok((
                seed,
                run_seed(&data, &split, &cfg.pipeline, seed, ck.as_deref(), resume)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut artifacts = Vec::new();
    let mut rows = Vec::new();
    for (seed, st) in &states {
        let acc = st.accuracy();
        artifacts.push(Artifact::new(
            format!("accuracy_seed{seed}.csv"),
            acc.to_csv(),
        ));
        artifacts.push(Artifact::new(
            format!("align_log_seed{seed}.csv"),
            align_log_csv(st.align_log()),
        ));
        rows.push((*seed, acc.average_accuracy()?, acc.last().unwrap_or(0.0)));
    }
    artifacts.push(Artifact::new("summary.csv", summary_csv(&rows)));
    let tasks = states
        .iter()
        .map(|s| s.1.accuracy().tasks())
        .min()
        .unwrap_or(0);
    let mut curve = String::from("after_task,mean_accuracy,std_accuracy\n");
    for t in 0..tasks {
        let v: Vec<f64> = states.iter().map(|s| s.1.accuracy().global()[t]).collect();
        writeln!(curve, "{t},{:.6},{:.6}", mean(&v), std_dev(&v)).unwrap();
    }
    artifacts.push(Artifact::new("curve.csv", curve));
    Ok(RunOutcome { states, artifacts })
}

/// Average accuracy of one configuration on every seed, in seed order.
fn average_accuracies(cfg: &ExperimentConfig, jobs: &[PipelineConfig]) -> Result<Vec<Vec<f64>>> {
    let pairs: Vec<(usize, u64)> = (0..jobs.len())
        .flat_map(|j| cfg.seeds.iter().map(move |&s| (j, s)))
        .collect();
    let results: Vec<f64> = pairs
        .par_iter()
        .map(|&(j, seed)| {
            let (data, split) = load_data(cfg, seed)?;
            let st = run_seed(&data, &split, &jobs[j], seed, None, false)?;
            st.accuracy().average_accuracy()
        })
        .collect::<Result<_>>()?;
    Ok(results
        .chunks(cfg.seeds.len())
        .map(<[f64]>::to_vec)
        .collect())
}

pub struct SweepOutcome {
    /// `(λ, per-seed AA)`
    pub rows: Vec<(f64, Vec<f64>)>,
    pub artifacts: Vec<Artifact>,
}

/// Alignment with every λ of `cfg.sweep_lambdas`.
pub fn sweep_lambda(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let jobs: Vec<PipelineConfig> = cfg
        .sweep_lambdas
        .iter()
        .map(|&l| {
            let mut p = Method::ImLca.apply(&cfg.pipeline);
            p.align.lca.lambda = l;
            p
        })
        .collect();
    let aa = average_accuracies(cfg, &jobs)?;
    let rows: Vec<(f64, Vec<f64>)> = cfg.sweep_lambdas.iter().copied().zip(aa).collect();
    let mut runs = String::from("lambda,seed,average_accuracy\n");
    let mut summary = String::from("lambda,mean_aa,std_aa,median_aa\n");
    for (l, v) in &rows {
        for (seed, a) in cfg.seeds.iter().zip(v) {
            writeln!(runs, "{l},{seed},{a:.6}").unwrap();
        }
        writeln!(
            summary,
            "{l},{:.6},{:.6},{:.6}",
            mean(v),
            std_dev(v),
            median(v)
        )
        .unwrap();
    }
    Ok(SweepOutcome {
        rows,
        artifacts: vec![
            Artifact::new("sweep_lambda_runs.csv", runs),
            Artifact::new("sweep_lambda.csv", summary),
        ],
    })
}

pub struct AblationOutcome {
    /// `(operator, method, per-seed AA)`, operators in `MergeOperator::ALL`
    /// order and methods in `Method::ALL` order
    pub rows: Vec<(MergeOperator, Method, Vec<f64>)>,
    pub artifacts: Vec<Artifact>,
}

/// Every merge operator crossed with IM, IM+CA and IM+LCA.
pub fn ablate_merge(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    let combos: Vec<(MergeOperator, Method)> = MergeOperator::ALL
        .iter()
        .flat_map(|&op| Method::ALL.iter().map(move |&m| (op, m)))
        .collect();
    let jobs: Vec<PipelineConfig> = combos
        .iter()
        .map(|&(op, m)| {
            let mut p = m.apply(&cfg.pipeline);
            p.merge.operator = op;
            p
        })
        .collect();
    let aa = average_accuracies(cfg, &jobs)?;
    let rows: Vec<(MergeOperator, Method, Vec<f64>)> = combos
        .into_iter()
        .zip(aa)
        .map(|((op, m), v)| (op, m, v))
        .collect();
    let mut runs = String::from("operator,method,seed,average_accuracy\n");
    let mut summary = String::from("operator,method,mean_aa,std_aa,median_aa\n");
    for (op, m, v) in &rows {
        for (seed, a) in cfg.seeds.iter().zip(v) {
            writeln!(runs, "{op},{},{seed},{a:.6}", m.name()).unwrap();
        }
        writeln!(
            summary,
            "{op},{},{:.6},{:.6},{:.6}",
            m.name(),
            mean(v),
            std_dev(v),
            median(v)
        )
        .unwrap();
    }
    Ok(AblationOutcome {
        rows,
        artifacts: vec![
            Artifact::new("ablate_merge_runs.csv", runs),
            Artifact::new("ablate_merge.csv", summary),
        ],
    })
}

pub struct DiagnoseOutcome {
    pub bounds: Vec<(u64, BoundReport)>,
    pub shifts: Vec<(u64, ShiftReport)>,
    pub artifacts: Vec<Artifact>,
}

/// Both bound checks on the final state of one seed's run.
///
/// The fixed set `D̂` holds `align.samples_per_class` draws per class from
/// the run's bank and the heads are realigned on it. The first check uses
/// the run's bank as the population; the second compares it against the
/// bank refitted on all seen training rows under the final adapter, which
/// is the population the stored prototypes have drifted from.
pub fn diagnose_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(BoundReport, ShiftReport)> {
    let (data, split) = load_data(cfg, seed)?;
    let state = run_seed(&data, &split, &cfg.pipeline, seed, None, false)?;
    let bank = state.bank();
    let mut rng = RngStream::derive(seed, &[STREAM_DIAGNOSE]);
    let (d, y) = bank.sample_alignment_set(cfg.pipeline.align.lca.samples_per_class, &mut rng)?;
    let mut h = state.classifier().clone();
    align_on_fixed_set(
        &mut h,
        d.view(),
        &y,
        &cfg.pipeline.align.lca,
        cfg.pipeline.train.sgd,
        &mut rng,
    )?;

    let generalization = check_generalization_bound(&h, bank, d.view(), &y, &cfg.bounds, &mut rng)?;

    let rows: Vec<usize> = split
        .tasks
        .iter()
        .flat_map(|p| p.train.iter().copied())
        .collect();
    let (x, labels) = data.select(&rows);
    let z = state.transform(x.view())?;
    let classes = bank.class_ids();
    let refit = fit_class_stats(
        z.view(),
        &labels,
        &classes,
        FitOptions {
            shrinkage: cfg.pipeline.shrinkage,
        },
    )?;
    let shift = check_shift_bound(&h, &refit, bank, d.view(), &y, &cfg.bounds, &mut rng)?;
    Ok((generalization, shift))
}

pub fn diagnose(cfg: &ExperimentConfig) -> Result<DiagnoseOutcome> {
    let reports: Vec<(BoundReport, ShiftReport)> = cfg
        .seeds
        .par_iter()
        .map(|&s| diagnose_seed(cfg, s))
        .collect::<Result<_>>()?;
    let bounds: Vec<(u64, BoundReport)> = cfg
        .seeds
        .iter()
        .copied()
        .zip(reports.iter().map(|r| r.0.clone()))
        .collect();
    let shifts: Vec<(u64, ShiftReport)> = cfg
        .seeds
        .iter()
        .copied()
        .zip(reports.into_iter().map(|r| r.1))
        .collect();
    let label = |v: &[(u64, BoundReport)]| {
        v.iter()
            .map(|(s, r)| (format!("seed{s}"), r.clone()))
            .collect::<Vec<_>>()
    };
    let shift_rows: Vec<(String, ShiftReport)> = shifts
        .iter()
        .map(|(s, r)| (format!("seed{s}"), r.clone()))
        .collect();
    let artifacts = vec![
        Artifact::new("bounds.csv", bound_reports_csv(&label(&bounds))),
        Artifact::new("shift.csv", shift_reports_csv(&shift_rows)),
    ];
    Ok(DiagnoseOutcome {
        bounds,
        shifts,
        artifacts,
    })
}

pub fn robustness_suite(cfg: &ExperimentConfig) -> RobustnessSuite {
    let mut suite = RobustnessSuite::default();
    suite.perturbations = suite
        .perturbations
        .iter()
        .map(|p| PerturbationSpec {
            kind: p.kind,
            steps: cfg.walk_steps,
            step_sigma: cfg.walk_sigma,
        })
        .collect();
    suite
}

pub struct RobustOutcome {
    /// `(seed, IM report, IM+LCA report)`
    pub reports: Vec<(u64, RobustnessReport, RobustnessReport)>,
    pub artifacts: Vec<Artifact>,
}

/// Corruption and perturbation accuracy of IM and IM+LCA on all test rows.
pub fn eval_robust(cfg: &ExperimentConfig) -> Result<RobustOutcome> {
    let suite = robustness_suite(cfg);
    let reports: Vec<(u64, RobustnessReport, RobustnessReport)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (data, split) = load_data(cfg, seed)?;
            let rows: Vec<usize> = split
                .tasks
                .iter()
                .flat_map(|p| p.test.iter().copied())
                .collect();
            let (x, y) = data.select(&rows);
            let mut out = Vec::with_capacity(2);
            for m in [Method::Im, Method::ImLca] {
                let st = run_seed(&data, &split, &m.apply(&cfg.pipeline), seed, None, false)?;
                out.push(evaluate_robustness(
                    |v| st.predict(v),
                    x.view(),
                    &y,
                    &suite,
                    seed,
                )?);
            }
            let lca = out.pop().unwrap();
            let im = out.pop().unwrap();
            Ok((seed, im, lca))
        })
        .collect::<Result<_>>()?;
    let mut artifacts = Vec::new();
    let mut summary = String::from("method,seed,clean,acc_c,acc_p,robustness,worst_severity\n");
    let mut line = |name: &str, seed: String, v: [f64; 5]| {
        writeln!(
            summary,
            "{name},{seed},{:.6},{:.6},{:.6},{:.6},{:.6}",
            v[0], v[1], v[2], v[3], v[4]
        )
        .unwrap();
    };
    let fields =
        |r: &RobustnessReport| [r.clean, r.acc_c, r.acc_p, r.robustness, r.worst_severity()];
    for (seed, im, lca) in &reports {
        artifacts.push(Artifact::new(
            format!("robustness_seed{seed}_im.csv"),
            im.to_csv(),
        ));
        artifacts.push(Artifact::new(
            format!("robustness_seed{seed}_im_lca.csv"),
            lca.to_csv(),
        ));
        line("IM", seed.to_string(), fields(im));
        line("IM+LCA", seed.to_string(), fields(lca));
    }
    for (name, pick) in [("IM", 0usize), ("IM+LCA", 1)] {
        let per: Vec<[f64; 5]> = reports
            .iter()
            .map(|r| fields(if pick == 0 { &r.1 } else { &r.2 }))
            .collect();
        let med: Vec<f64> = (0..5)
            .map(|k| median(&per.iter().map(|p| p[k]).collect::<Vec<_>>()))
            .collect();
        line(
            name,
            "median".into(),
            [med[0], med[1], med[2], med[3], med[4]],
        );
    }
    artifacts.push(Artifact::new("robustness.csv", summary));
    Ok(RobustOutcome { reports, artifacts })
}

/// Features as CSV: `split,task,label,f0,...`; train rows first per task.
pub fn dataset_csv(data: &FeatureDataset, split: &TaskSplit) -> String {
    let mut s = String::from("split,task,label");
    for j in 0..data.dim() {
        write!(s, ",f{j}").unwrap();
    }
    s.push('\n');
    for part in &split.tasks {
        for (name, rows) in [("train", &part.train), ("test", &part.test)] {
            for &r in rows.iter() {
                write!(s, "{name},{},{}", part.task, data.labels[r]).unwrap();
                for v in data.features.row(r) {
                    write!(s, ",{v}").unwrap();
                }
                s.push('\n');
            }
        }
    }
    s
}
