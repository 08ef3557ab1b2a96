//! Gaussian-mixture stand-in for backbone features.

use ndarray::{Array1, Array2};

use super::{FeatureDataset, TaskPart, TaskSplit};
use crate::error::{Error, Result};
use crate::linalg::cholesky;
use crate::rng::RngStream;

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub separation: f64,
    pub within_class_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tasks: 10,
            classes_per_task: 4,
            dim: 32,
            per_class_train: 200,
            per_class_test: 100,
            separation: 3.0,
            within_class_scale: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks < 1 || self.classes_per_task < 2 || self.dim < 2 {
            return Err(Error::Argument(
                "synthetic benchmark needs tasks >= 1, classes_per_task >= 2, dim >= 2".into(),
            ));
        }
        if self.per_class_train < 1 {
            return Err(Error::Argument("per_class_train must be >= 1".into()));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite())
            || !(self.within_class_scale >= 0.0 && self.within_class_scale.is_finite())
        {
            return Err(Error::Argument(
                "separation and scale must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Parse `key=value` pairs separated by commas, e.g.
    /// `tasks=10,classes=4,dim=32,train=200,test=100,sep=3,scale=1`.
    /// Omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| {
                Error::Argument(format!("synthetic spec item '{item}' is not key=value"))
            })?;
            let v = v.trim();
            let int = || {
                v.parse::<usize>().map_err(|_| {
                    Error::Argument(format!(
                        "synthetic spec '{k}' expects an integer, got '{v}'"
                    ))
                })
            };
            let real = || {
                v.parse::<f64>().map_err(|_| {
                    Error::Argument(format!("synthetic spec '{k}' expects a number, got '{v}'"))
                })
            };
            match k.trim() {
                "tasks" => spec.tasks = int()?,
                "classes" | "classes_per_task" => spec.classes_per_task = int()?,
                "dim" => spec.dim = int()?,
                "train" | "per_class_train" => spec.per_class_train = int()?,
                "test" | "per_class_test" => spec.per_class_test = int()?,
                "sep" | "separation" => spec.separation = real()?,
                "scale" | "within_class_scale" => spec.within_class_scale = real()?,
                other => {
                    return Err(Error::Argument(format!(
                        "unknown synthetic spec key '{other}'"
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_spec_string(&self) -> String {
        format!(
            "tasks={},classes={},dim={},train={},test={},sep={},scale={}",
            self.tasks,
            self.classes_per_task,
            self.dim,
            self.per_class_train,
            self.per_class_test,
            self.separation,
            self.within_class_scale
        )
    }
}

/// Unit directions from an additive recurrence with the generalized golden
/// ratio, pushed through Box-Muller so they spread evenly over the sphere.
fn class_directions(classes: usize, dim: usize, rng: &mut RngStream) -> Vec<Array1<f64>> {
    // phi_d is the positive root of x^(d+1) = x + 1
    let mut phi = 2.0f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
    }
    let alpha: Vec<f64> = (0..dim)
        .map(|j| (1.0 / phi).powi(j as i32 + 1).fract())
        .collect();
    let start: Vec<f64> = (0..dim).map(|_| rng.uniform()).collect();
    (0..classes)
        .map(|k| {
            let u: Vec<f64> = (0..dim)
                .map(|j| (start[j] + (k as f64 + 1.0) * alpha[j]).fract().max(1e-12))
                .collect();
            let mut g = Array1::<f64>::zeros(dim);
            let mut j = 0;
            while j < dim {
                let r = (-2.0 * u[j].ln()).sqrt();
                let angle_src = if j + 1 < dim { u[j + 1] } else { u[0] };
                let angle = 2.0 * std::f64::consts::PI * angle_src;
                g[j] = r * angle.cos();
                if j + 1 < dim {
                    g[j + 1] = r * angle.sin();
                }
                j += 2;
            }
            let norm = g.dot(&g).sqrt();
            g / norm
        })
        .collect()
}

/// Shared within-class shape: `G Gᵀ / dim + I / 2`, rescaled to trace `dim`.
fn shared_covariance(dim: usize, rng: &mut RngStream) -> Array2<f64> {
    let g = Array2::from_shape_fn((dim, dim), |_| rng.normal());
    let mut s = g.dot(&g.t()) / dim as f64;
    for i in 0..dim {
        s[[i, i]] += 0.5;
    }
    let trace: f64 = s.diag().sum();
    s * (dim as f64 / trace)
}

/// Draw the benchmark. Class `c` belongs to task `c / classes_per_task`;
/// rows are grouped by class with the train rows first.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(FeatureDataset, TaskSplit)> {
    spec.validate()?;
    let classes = spec.tasks * spec.classes_per_task;
    let per_class = spec.per_class_train + spec.per_class_test;
    let mut geometry = RngStream::derive(seed, &[0x5171, 0]);
    let dirs = class_directions(classes, spec.dim, &mut geometry);
    let shape = shared_covariance(spec.dim, &mut geometry);
    let l = cholesky(shape.view())
        .ok_or_else(|| Error::Numeric("synthetic covariance not SPD".into()))?;

    let n = classes * per_class;
    let mut features = Array2::<f64>::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    let mut task_ids = Vec::with_capacity(n);
    let mut parts: Vec<TaskPart> = (0..spec.tasks)
        .map(|t| TaskPart {
            task: t as u32,
            classes: ((t * spec.classes_per_task)..((t + 1) * spec.classes_per_task))
                .map(|c| c as u32)
                .collect(),
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    let mut z = Array1::<f64>::zeros(spec.dim);
    for (c, dir) in dirs.iter().enumerate() {
        let task = c / spec.classes_per_task;
        let mean = dir * spec.separation;
        let mut rng = RngStream::derive(seed, &[0x5171, 1 + c as u64]);
        for k in 0..per_class {
            let row = c * per_class + k;
            z.iter_mut().for_each(|v| *v = rng.normal());
            let x = &mean + &(l.dot(&z) * spec.within_class_scale);
            // stored at f32 precision so the dataset survives the file format unchanged
            features.row_mut(row).assign(&x.mapv(|v| v as f32 as f64));
            labels.push(c as u32);
            task_ids.push(task as u32);
            if k < spec.per_class_train {
                parts[task].train.push(row);
            } else {
                parts[task].test.push(row);
            }
        }
    }
    let data = FeatureDataset::new(features, labels, task_ids)?;
    let split = TaskSplit { tasks: parts };
    split.validate(&data)?;
    Ok((data, split))
}
