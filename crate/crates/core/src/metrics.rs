//! Accuracy bookkeeping and robustness scores.

use std::fmt::Write as _;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::features::{
    corrupt, perturb_walk, CorruptionKind, CorruptionSpec, PerturbationKind, PerturbationSpec,
};

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("predictions", truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::Argument("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `A[t][j]` for `j <= t`, plus the global accuracy over every seen test
/// row after each task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    /// test rows per task, used to weight per-task accuracies
    counts: Vec<usize>,
    global: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record the evaluation after one more task. `per_task[j]` is the
    /// accuracy on task `j`'s test rows and `counts[j]` their number.
    pub fn push(&mut self, per_task: Vec<f64>, counts: &[usize]) -> Result<()> {
        let t = self.rows.len();
        if per_task.len() != t + 1 || counts.len() != t + 1 {
            return Err(Error::shape("accuracy row", t + 1, per_task.len()));
        }
        if per_task.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Validation(format!(
                "accuracy outside [0, 1] after task {t}"
            )));
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Argument(format!("no test rows after task {t}")));
        }
        let global = per_task
            .iter()
            .zip(counts)
            .map(|(a, &n)| a * n as f64)
            .sum::<f64>()
            / total as f64;
        self.counts = counts.to_vec();
        self.rows.push(per_task);
        self.global.push(global);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `A_t` over all seen test rows.
    pub fn global(&self) -> &[f64] {
        &self.global
    }

    /// Unweighted mean of `A[t][j]` over `j <= t`.
    pub fn task_mean(&self, t: usize) -> Option<f64> {
        self.rows
            .get(t)
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
    }

    pub fn average_accuracy(&self) -> Result<f64> {
        average_accuracy(&self.global)
    }

    pub fn last(&self) -> Option<f64> {
        self.global.last().copied()
    }

    /// Columns `after_task,task,accuracy`, then one `after_task,all,A_t` line
    /// per task.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task,task,accuracy\n");
        for (t, row) in self.rows.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                writeln!(s, "{t},{j},{a:.6}").unwrap();
            }
            writeln!(s, "{t},all,{:.6}", self.global[t]).unwrap();
        }
        s
    }

    pub(crate) fn from_parts(rows: Vec<Vec<f64>>, counts: Vec<usize>, global: Vec<f64>) -> Self {
        Self {
            rows,
            counts,
            global,
        }
    }
}

/// `(1/T) Σ A_t`.
pub fn average_accuracy(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Argument("average accuracy of zero tasks".into()));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Mean over a full corruption × severity grid.
pub fn corruption_accuracy(grid: &[Vec<f64>]) -> Result<f64> {
    let width = grid.first().map(Vec::len).unwrap_or(0);
    if width == 0 {
        return Err(Error::Argument("empty corruption grid".into()));
    }
    for (i, row) in grid.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Validation(format!(
                "corruption grid row {i} has {} cells, expected {width}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "corruption grid cell ({i}, {j}) is missing"
            )));
        }
    }
    Ok(grid.iter().flatten().sum::<f64>() / (grid.len() * width) as f64)
}

/// `(1/|P|) Σ_p (1/N_p) Σ_i A_{p,i}`.
pub fn perturbation_accuracy(per_type: &[Vec<f64>]) -> Result<f64> {
    if per_type.is_empty() || per_type.iter().any(Vec::is_empty) {
        return Err(Error::Argument(
            "perturbation accuracy needs non-empty lists".into(),
        ));
    }
    let means: Vec<f64> = per_type
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

pub fn robustness(acc_c: f64, acc_p: f64) -> f64 {
    0.5 * (acc_c + acc_p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub clean: f64,
    /// corruption kind names, grid row order
    pub corruptions: Vec<String>,
    /// `grid[kind][severity - 1]`
    pub grid: Vec<Vec<f64>>,
    pub perturbations: Vec<String>,
    /// accuracy at each walk step, per perturbation kind
    pub walks: Vec<Vec<f64>>,
    pub acc_c: f64,
    pub acc_p: f64,
    pub robustness: f64,
}

impl RobustnessReport {
    pub fn from_parts(
        clean: f64,
        corruptions: Vec<String>,
        grid: Vec<Vec<f64>>,
        perturbations: Vec<String>,
        walks: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let acc_c = corruption_accuracy(&grid)?;
        let acc_p = perturbation_accuracy(&walks)?;
        Ok(Self {
            clean,
            corruptions,
            grid,
            perturbations,
            walks,
            acc_c,
            acc_p,
            robustness: robustness(acc_c, acc_p),
        })
    }

    /// Mean accuracy at the highest severity.
    pub fn worst_severity(&self) -> f64 {
        self.grid.iter().map(|r| *r.last().unwrap()).sum::<f64>() / self.grid.len() as f64
    }

    /// Columns `suite,kind,level,accuracy`; summary rows use kind `all`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("suite,kind,level,accuracy\n");
        writeln!(s, "clean,none,0,{:.6}", self.clean).unwrap();
        for (name, row) in self.corruptions.iter().zip(&self.grid) {
            for (k, a) in row.iter().enumerate() {
                writeln!(s, "corruption,{name},{},{a:.6}", k + 1).unwrap();
            }
        }
        for (name, row) in self.perturbations.iter().zip(&self.walks) {
            for (k, a) in row.iter().enumerate() {
                writeln!(s, "perturbation,{name},{},{a:.6}", k + 1).unwrap();
            }
        }
        writeln!(s, "summary,acc_c,all,{:.6}", self.acc_c).unwrap();
        writeln!(s, "summary,acc_p,all,{:.6}", self.acc_p).unwrap();
        writeln!(s, "summary,robustness,all,{:.6}", self.robustness).unwrap();
        s
    }
}

/// Corruption kinds with their severity tables, and perturbation walks.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessSuite {
    pub corruptions: Vec<(CorruptionKind, [f64; 5])>,
    pub perturbations: Vec<PerturbationSpec>,
}

impl Default for RobustnessSuite {
    fn default() -> Self {
        Self {
            corruptions: CorruptionKind::ALL
                .iter()
                .map(|&k| (k, k.default_magnitudes()))
                .collect(),
            perturbations: PerturbationKind::ALL
                .iter()
                .map(|&k| PerturbationSpec::new(k))
                .collect(),
        }
    }
}

impl RobustnessSuite {
    /// Every corruption magnitude and walk step set to zero.
    pub fn zero() -> Self {
        let mut s = Self::default();
        s.corruptions.iter_mut().for_each(|c| c.1 = [0.0; 5]);
        s.perturbations.iter_mut().for_each(|p| p.step_sigma = 0.0);
        s
    }
}

/// Accuracy of `predict` on clean, corrupted and perturbed copies of the
/// test set.
pub fn evaluate_robustness<F>(
    predict: F,
    features: ArrayView2<'_, f64>,
    labels: &[u32],
    suite: &RobustnessSuite,
    seed: u64,
) -> Result<RobustnessReport>
where
    F: Fn(ArrayView2<'_, f64>) -> Result<Vec<u32>>,
{
    let clean = accuracy(&predict(features)?, labels)?;
    let mut grid = Vec::with_capacity(suite.corruptions.len());
    for &(kind, table) in &suite.corruptions {
        let mut row = Vec::with_capacity(5);
        for severity in 1..=5u8 {
            let spec = CorruptionSpec::with_magnitudes(kind, severity, table)?;
            row.push(accuracy(
                &predict(corrupt(features, &spec, seed).view())?,
                labels,
            )?);
        }
        grid.push(row);
    }
    let mut walks = Vec::with_capacity(suite.perturbations.len());
    for p in &suite.perturbations {
        let steps = perturb_walk(features, p, seed);
        walks.push(
            steps
                .iter()
                .map(|x| accuracy(&predict(x.view())?, labels))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    RobustnessReport::from_parts(
        clean,
        suite
            .corruptions
            .iter()
            .map(|c| c.0.name().to_string())
            .collect(),
        grid,
        suite
            .perturbations
            .iter()
            .map(|p| p.kind.name().to_string())
            .collect(),
        walks,
    )
}
