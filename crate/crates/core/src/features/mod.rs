//! Feature datasets: the in-memory type, disjoint-label task splits, the
//! `FCIL` binary format, the synthetic benchmark and feature-space
//! corruptions.

mod corrupt;
mod format;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub use corrupt::{
    corrupt, perturb_walk, CorruptionKind, CorruptionSpec, PerturbationKind, PerturbationSpec,
};
pub use format::{
    decode_features, encode_features, read_features, write_features, FCIL_MAGIC, FCIL_VERSION,
};
pub use synth::{generate_synthetic, SyntheticSpec};

/// Labeled feature rows with a class → task assignment.
///
/// Features live in memory as `f64` and on disk as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    pub task_ids: Vec<u32>,
    pub class_to_task: BTreeMap<u32, u32>,
}

impl FeatureDataset {
    /// Build a dataset, deriving the class table from the rows.
    pub fn new(features: Array2<f64>, labels: Vec<u32>, task_ids: Vec<u32>) -> Result<Self> {
        let mut class_to_task = BTreeMap::new();
        for (&c, &t) in labels.iter().zip(&task_ids) {
            match class_to_task.insert(c, t) {
                Some(prev) if prev != t => {
                    return Err(Error::Validation(format!(
                    "class {c} appears in tasks {prev} and {t}; task label sets must be disjoint"
                )))
                }
                _ => {}
            }
        }
        Self::with_class_table(features, labels, task_ids, class_to_task)
    }

    pub fn with_class_table(
        features: Array2<f64>,
        labels: Vec<u32>,
        task_ids: Vec<u32>,
        class_to_task: BTreeMap<u32, u32>,
    ) -> Result<Self> {
        let d = Self {
            features,
            labels,
            task_ids,
            class_to_task,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if n == 0 {
            return Err(Error::Validation("dataset has no rows".into()));
        }
        if self.features.ncols() == 0 {
            return Err(Error::Validation(
                "feature dimension must be positive".into(),
            ));
        }
        if self.labels.len() != n || self.task_ids.len() != n {
            return Err(Error::shape(
                "label and task columns",
                n,
                self.labels.len().min(self.task_ids.len()),
            ));
        }
        for (i, row) in self.features.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "row {i} has a non-finite feature"
                )));
            }
        }
        for (i, (&c, &t)) in self.labels.iter().zip(&self.task_ids).enumerate() {
            match self.class_to_task.get(&c) {
                None => {
                    return Err(Error::Validation(format!(
                        "row {i}: class {c} missing from the class table"
                    )))
                }
                Some(&owner) if owner != t => {
                    return Err(Error::Validation(format!(
                    "class {c} appears in tasks {owner} and {t}; task label sets must be disjoint"
                )))
                }
                _ => {}
            }
        }
        let tasks: BTreeSet<u32> = self.class_to_task.values().copied().collect();
        if let Some((i, t)) = tasks.iter().enumerate().find(|(i, &t)| t as usize != *i) {
            return Err(Error::Validation(format!(
                "task ids must be contiguous from 0; found task {t} at position {i}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn task_count(&self) -> usize {
        self.class_to_task.values().collect::<BTreeSet<_>>().len()
    }

    pub fn class_count(&self) -> usize {
        self.class_to_task.len()
    }

    pub fn classes_of_task(&self, task: u32) -> Vec<u32> {
        self.class_to_task
            .iter()
            .filter(|(_, &t)| t == task)
            .map(|(&c, _)| c)
            .collect()
    }

    /// Copy the given rows out as `(features, labels)`.
    pub fn select(&self, rows: &[usize]) -> (Array2<f64>, Vec<u32>) {
        (
            self.features.select(Axis(0), rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    /// Plain-text listing of each task's classes.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# dim {} rows {} classes {}",
            self.dim(),
            self.len(),
            self.class_count()
        );
        for t in 0..self.task_count() as u32 {
            let classes: Vec<String> = self.classes_of_task(t).iter().map(u32::to_string).collect();
            let _ = writeln!(out, "task {t}: {}", classes.join(" "));
        }
        out
    }
}

/// One task's classes and its train/test row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskPart {
    pub task: u32,
    pub classes: Vec<u32>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Ordered task sequence over one [`FeatureDataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSplit {
    pub tasks: Vec<TaskPart>,
}

impl TaskSplit {
    /// Hold out `test_fraction` of every class (at least one train row per
    /// class is kept), chosen by a seeded shuffle.
    pub fn holdout(data: &FeatureDataset, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Argument(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &c) in data.labels.iter().enumerate() {
            by_class.entry(c).or_default().push(i);
        }
        let mut tasks = Vec::new();
        for t in 0..data.task_count() as u32 {
            let classes = data.classes_of_task(t);
            let mut part = TaskPart {
                task: t,
                classes: classes.clone(),
                train: Vec::new(),
                test: Vec::new(),
            };
            for c in classes {
                let mut rows = by_class.remove(&c).unwrap_or_default();
                let mut rng = RngStream::derive(seed, &[0x5e1d, c as u64]);
                rng.shuffle(&mut rows);
                let n_test = ((rows.len() as f64 * test_fraction).floor() as usize)
                    .min(rows.len().saturating_sub(1));
                let (train, test) = rows.split_at(rows.len() - n_test);
                part.train.extend_from_slice(train);
                part.test.extend_from_slice(test);
            }
            part.train.sort_unstable();
            part.test.sort_unstable();
            tasks.push(part);
        }
        let split = Self { tasks };
        split.validate(data)?;
        Ok(split)
    }

    /// Concatenate a train and a test dataset and mark rows accordingly.
    pub fn from_train_test(
        train: &FeatureDataset,
        test: &FeatureDataset,
    ) -> Result<(FeatureDataset, TaskSplit)> {
        if train.dim() != test.dim() {
            return Err(Error::shape(
                "test feature dimension",
                train.dim(),
                test.dim(),
            ));
        }
        let mut table = train.class_to_task.clone();
        for (&c, &t) in &test.class_to_task {
            if let Some(&owner) = table.get(&c) {
                if owner != t {
                    return Err(Error::Validation(format!(
                        "class {c} is in task {owner} for training but task {t} for testing"
                    )));
                }
            }
            table.insert(c, t);
        }
        let features =
            ndarray::concatenate(Axis(0), &[train.features.view(), test.features.view()])
                .expect("equal widths");
        let labels = train.labels.iter().chain(&test.labels).copied().collect();
        let task_ids = train
            .task_ids
            .iter()
            .chain(&test.task_ids)
            .copied()
            .collect();
        let data = FeatureDataset::with_class_table(features, labels, task_ids, table)?;
        let n_train = train.len();
        let tasks = (0..data.task_count() as u32)
            .map(|t| TaskPart {
                task: t,
                classes: data.classes_of_task(t),
                train: (0..n_train).filter(|&i| data.task_ids[i] == t).collect(),
                test: (n_train..data.len())
                    .filter(|&i| data.task_ids[i] == t)
                    .collect(),
            })
            .collect();
        let split = TaskSplit { tasks };
        split.validate(&data)?;
        Ok((data, split))
    }

    pub fn validate(&self, data: &FeatureDataset) -> Result<()> {
        let mut seen = BTreeSet::new();
        for part in &self.tasks {
            for &c in &part.classes {
                if !seen.insert(c) {
                    return Err(Error::Validation(format!(
                        "class {c} assigned to more than one task"
                    )));
                }
            }
            let train: BTreeSet<usize> = part.train.iter().copied().collect();
            if let Some(r) = part.test.iter().find(|r| train.contains(r)) {
                return Err(Error::Validation(format!(
                    "row {r} is in both train and test of task {}",
                    part.task
                )));
            }
            for &r in part.train.iter().chain(&part.test) {
                if r >= data.len() {
                    return Err(Error::Index {
                        context: format!("task {} row", part.task),
                        index: r,
                        bound: data.len(),
                    });
                }
                if !part.classes.contains(&data.labels[r]) {
                    return Err(Error::Validation(format!(
                        "row {r} (class {}) does not belong to task {}",
                        data.labels[r], part.task
                    )));
                }
            }
        }
        let all: BTreeSet<u32> = data.class_to_task.keys().copied().collect();
        if seen != all {
            return Err(Error::Validation(
                "task split does not cover every class exactly once".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}
