//! Per-class Gaussian statistics of adapted features and replay sampling.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det_from_cholesky, solve_lower};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Diagonal jitter tried in order until the Cholesky factorization succeeds.
pub const JITTER_LADDER: [f64; 6] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// Mean, biased covariance and Cholesky factor of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian<S> {
    pub class_id: u32,
    pub mean: Array1<S>,
    /// `(1/K) Σ (x - μ)(x - μ)ᵀ`, after optional shrinkage.
    pub cov: Array2<S>,
    /// `L Lᵀ = cov + jitter · I`.
    pub chol: Array2<S>,
    pub jitter: f64,
    pub count: usize,
}

impl<S: Scalar> ClassGaussian<S> {
    /// Factor `cov` with the jitter ladder.
    pub fn from_moments(
        class_id: u32,
        mean: Array1<S>,
        cov: Array2<S>,
        count: usize,
    ) -> Result<Self> {
        let dim = mean.len();
        if cov.dim() != (dim, dim) {
            return Err(Error::shape(
                format!("class {class_id} covariance"),
                dim * dim,
                cov.len(),
            ));
        }
        if count == 0 {
            return Err(Error::Argument(format!("class {class_id} has no samples")));
        }
        for &jitter in &JITTER_LADDER {
            let mut a = cov.clone();
            for i in 0..dim {
                a[[i, i]] += S::of(jitter);
            }
            if let Some(chol) = cholesky(a.view()) {
                return Ok(Self {
                    class_id,
                    mean,
                    cov,
                    chol,
                    jitter,
                    count,
                });
            }
        }
        Err(Error::Numeric(format!(
            "covariance of class {class_id} is not positive definite even with jitter {}",
            JITTER_LADDER[JITTER_LADDER.len() - 1]
        )))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `m` draws `μ + L z`, `z ~ N(0, I)`.
    pub fn sample(&self, m: usize, rng: &mut RngStream) -> Array2<S> {
        let dim = self.dim();
        let mut out = Array2::<S>::zeros((m, dim));
        let mut z = Array1::<S>::zeros(dim);
        for mut row in out.rows_mut() {
            z.iter_mut().for_each(|v| *v = S::of(rng.normal()));
            row.assign(&(&self.mean + &self.chol.dot(&z)));
        }
        out
    }
}

impl ClassGaussian<f64> {
    /// Log density under `N(μ, cov + jitter I)`.
    pub fn log_density(&self, z: ArrayView1<'_, f64>) -> f64 {
        let diff = &z - &self.mean;
        let w = solve_lower(self.chol.view(), diff.view());
        let d = self.dim() as f64;
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln()
            + log_det_from_cholesky(self.chol.view())
            + w.dot(&w))
    }

    /// Reject factors whose density would be numerically meaningless.
    pub fn check_density(&self) -> Result<()> {
        let diag = self.chol.diag();
        let max = diag.iter().copied().fold(0.0, f64::max);
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        if min.is_nan() || min <= 0.0 || !min.is_finite() || (max / min).powi(2) > 1e12 {
            return Err(Error::Numeric(format!(
                "covariance of class {} is numerically singular (condition > 1e12); refit with shrinkage > 0",
                self.class_id
            )));
        }
        Ok(())
    }
}

/// Ordered per-class Gaussians sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBank<S> {
    dim: usize,
    classes: BTreeMap<u32, ClassGaussian<S>>,
}

/// Covariance estimation knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// `Σ <- (1 - β) Σ + β tr(Σ)/dim · I`
    pub shrinkage: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { shrinkage: 0.0 }
    }
}

fn lex_cmp<S: Scalar>(a: ArrayView1<'_, S>, b: ArrayView1<'_, S>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.as_f64().total_cmp(&y.as_f64()) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn fit_one<S: Scalar>(
    features: ArrayView2<'_, S>,
    rows: &mut [usize],
    class_id: u32,
    opts: FitOptions,
) -> Result<ClassGaussian<S>> {
    if rows.is_empty() {
        return Err(Error::Argument(format!(
            "class {class_id} has no rows to fit"
        )));
    }
    // canonical order so the sums do not depend on row order
    rows.sort_by(|&a, &b| lex_cmp(features.row(a), features.row(b)));
    let dim = features.ncols();
    let k = S::of(rows.len() as f64);
    let mut mean = Array1::<S>::zeros(dim);
    for &r in rows.iter() {
        mean += &features.row(r);
    }
    mean.mapv_inplace(|v| v / k);
    let mut cov = Array2::<S>::zeros((dim, dim));
    for &r in rows.iter() {
        let d = &features.row(r) - &mean;
        for i in 0..dim {
            for j in 0..=i {
                cov[[i, j]] += d[i] * d[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..=i {
            let v = cov[[i, j]] / k;
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    if opts.shrinkage > 0.0 {
        let beta = S::of(opts.shrinkage);
        let target = cov.diag().sum() / S::of(dim as f64);
        cov.mapv_inplace(|v| (S::one() - beta) * v);
        for i in 0..dim {
            cov[[i, i]] += beta * target;
        }
    }
    ClassGaussian::from_moments(class_id, mean, cov, rows.len())
}

/// Empirical mean and `1/K` covariance of every requested class.
pub fn fit_class_stats<S: Scalar>(
    features: ArrayView2<'_, S>,
    labels: &[u32],
    classes: &[u32],
    opts: FitOptions,
) -> Result<GaussianBank<S>> {
    if labels.len() != features.nrows() {
        return Err(Error::shape(
            "labels per feature row",
            features.nrows(),
            labels.len(),
        ));
    }
    if !(0.0..=1.0).contains(&opts.shrinkage) {
        return Err(Error::Argument(format!(
            "shrinkage {} outside [0, 1]",
            opts.shrinkage
        )));
    }
    let mut rows_of: BTreeMap<u32, Vec<usize>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for (i, c) in labels.iter().enumerate() {
        if let Some(v) = rows_of.get_mut(c) {
            v.push(i);
        }
    }
    let fitted: Vec<Result<ClassGaussian<S>>> = rows_of
        .into_par_iter()
        .map(|(c, mut rows)| fit_one(features, &mut rows, c, opts))
        .collect();
    let mut bank = GaussianBank::new(features.ncols());
    for g in fitted {
        bank.insert(g?)?;
    }
    Ok(bank)
}

impl<S: Scalar> GaussianBank<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            classes: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn insert(&mut self, g: ClassGaussian<S>) -> Result<()> {
        if g.dim() != self.dim {
            return Err(Error::shape(
                format!("class {} dimension", g.class_id),
                self.dim,
                g.dim(),
            ));
        }
        if self.classes.contains_key(&g.class_id) {
            return Err(Error::Validation(format!(
                "class {} already in the bank",
                g.class_id
            )));
        }
        self.classes.insert(g.class_id, g);
        Ok(())
    }

    /// Add every class of `other`, rejecting duplicates.
    pub fn extend(&mut self, other: GaussianBank<S>) -> Result<()> {
        for (_, g) in other.classes {
            self.insert(g)?;
        }
        Ok(())
    }

    pub fn get(&self, class_id: u32) -> Option<&ClassGaussian<S>> {
        self.classes.get(&class_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassGaussian<S>> {
        self.classes.values()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }

    /// `m` draws per class in ascending class order, labeled with global ids.
    pub fn sample_alignment_set(
        &self,
        m: usize,
        rng: &mut RngStream,
    ) -> Result<(Array2<S>, Vec<u32>)> {
        if m < 2 {
            return Err(Error::Argument(format!(
                "alignment needs >= 2 samples per class, got {m}"
            )));
        }
        let mut blocks = Vec::with_capacity(self.len());
        let mut labels = Vec::with_capacity(self.len() * m);
        for g in self.iter() {
            blocks.push(g.sample(m, rng));
            labels.extend(std::iter::repeat_n(g.class_id, m));
        }
        if blocks.is_empty() {
            return Ok((Array2::zeros((0, self.dim)), labels));
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        Ok((
            ndarray::concatenate(Axis(0), &views).expect("equal widths"),
            labels,
        ))
    }

    /// Little-endian serialization: magic `FGBK`, version u32 = 1, dim u32,
    /// class count u32, then per class (id u32, K u64, mean f64 × dim,
    /// lower-triangular covariance f64 × dim(dim+1)/2, row-major).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"FGBK");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for g in self.iter() {
            out.extend_from_slice(&g.class_id.to_le_bytes());
            out.extend_from_slice(&(g.count as u64).to_le_bytes());
            for v in g.mean.iter() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
            for i in 0..self.dim {
                for j in 0..=i {
                    out.extend_from_slice(&g.cov[[i, j]].as_f64().to_le_bytes());
                }
            }
        }
        out
    }

    /// Inverse of [`GaussianBank::to_bytes`]; Cholesky factors are recomputed.
    /// Returns the bank and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = crate::checkpoint::Reader::new(bytes);
        r.magic(b"FGBK")?;
        r.version(1)?;
        let dim = r.u32("dim")? as usize;
        let n = r.u32("class count")? as usize;
        let mut bank = Self::new(dim);
        for _ in 0..n {
            let id = r.u32("class id")?;
            let count = r.u64("sample count")? as usize;
            let mut mean = Array1::<S>::zeros(dim);
            for v in mean.iter_mut() {
                *v = S::of(r.f64("mean")?);
            }
            let mut cov = Array2::<S>::zeros((dim, dim));
            for i in 0..dim {
                for j in 0..=i {
                    let v = S::of(r.f64("covariance")?);
                    cov[[i, j]] = v;
                    cov[[j, i]] = v;
                }
            }
            bank.insert(ClassGaussian::from_moments(id, mean, cov, count)?)?;
        }
        Ok((bank, r.pos()))
    }
}

impl GaussianBank<f64> {
    /// Log density of the equal-weight mixture of all classes.
    pub fn mixture_log_density(&self, z: ArrayView1<'_, f64>) -> f64 {
        let logs: Vec<f64> = self.iter().map(|g| g.log_density(z)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - (logs.len() as f64).ln()
    }
}
