//! Executable generalization-bound diagnostics for an aligned classifier
//! over Gaussian class models: clamped losses, class-wise robustness,
//! the uncertainty term, total variation between mixtures and the two
//! bound checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{ClassGaussian, GaussianBank};
use crate::linalg::{log_det_from_cholesky, spd_inverse_from_cholesky};
use crate::nn::softmax_xent_rows;
use crate::pipeline::ProgressiveClassifier;
use crate::rng::RngStream;

pub const DEFAULT_P_MIN: f64 = 1e-6;

const TV_CHUNK: usize = 1 << 14;

/// `-ln p_min`, the supremum of the clamped loss.
pub fn loss_max(p_min: f64) -> Result<f64> {
    if !(p_min > 0.0 && p_min < 1.0) {
        return Err(Error::Argument(format!("p_min {p_min} outside (0, 1)")));
    }
    Ok(-p_min.ln())
}

/// Cross-entropy with the true-class probability floored at `p_min`.
pub fn clamped_losses(
    h: &ProgressiveClassifier<f64>,
    z: ArrayView2<'_, f64>,
    labels: &[u32],
    p_min: f64,
) -> Result<Vec<f64>> {
    let lmax = loss_max(p_min)?;
    let columns = h.columns_for(labels)?;
    let logits = h.forward(z)?;
    let (losses, _) = softmax_xent_rows(logits.view(), &columns)?;
    Ok(losses.into_iter().map(|l| l.clamp(0.0, lmax)).collect())
}

pub fn clamped_loss(
    h: &ProgressiveClassifier<f64>,
    z: ArrayView1<'_, f64>,
    label: u32,
    p_min: f64,
) -> Result<f64> {
    let row = z.insert_axis(ndarray::Axis(0));
    Ok(clamped_losses(h, row, &[label], p_min)?[0])
}

/// Nearest-mean cells, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub class_ids: Vec<u32>,
    pub means: Array2<f64>,
}

impl Partition {
    pub fn from_bank(bank: &GaussianBank<f64>) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::Argument("partition of an empty bank".into()));
        }
        let mut means = Array2::zeros((bank.len(), bank.dim()));
        for (mut row, g) in means.rows_mut().into_iter().zip(bank.iter()) {
            row.assign(&g.mean);
        }
        Ok(Self {
            class_ids: bank.class_ids(),
            means,
        })
    }

    /// Index of the nearest mean; ties go to the lower index.
    pub fn cell(&self, z: ArrayView1<'_, f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, m) in self.means.rows().into_iter().enumerate() {
            let d: f64 = m.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn cell_class(&self, z: ArrayView1<'_, f64>) -> u32 {
        self.class_ids[self.cell(z)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRobustness {
    pub class_id: u32,
    /// samples of the class in the fixed set
    pub count: usize,
    /// `None` when no pair fell inside the class cell
    pub epsilon: Option<f64>,
    pub std_err: f64,
    /// fraction of (population, sample) pairs with both points in the cell
    pub retained: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessTerm {
    pub classes: Vec<ClassRobustness>,
    /// `Σ (n_i / n) ε̄_i`, missing classes counted as 0
    pub weighted: f64,
    pub missing: Vec<u32>,
}

/// Mean of `|a - s|` over `s` in `sorted`, using prefix sums.
fn mean_abs_diff(a: f64, sorted: &[f64], prefix: &[f64]) -> f64 {
    let k = sorted.partition_point(|&s| s < a);
    let n = sorted.len();
    let below = prefix[k];
    let above = prefix[n] - below;
    ((a * k as f64 - below + above - a * (n - k) as f64) / n as f64).max(0.0)
}

fn group_rows(labels: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut by: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by.entry(c).or_default().push(i);
    }
    by
}

/// Monte-Carlo `ε̄_i = E[|ℓ(z) - ℓ(s)| : z, s ∈ cell i]` with `z ~ N_i`
/// and `s` from the fixed set.
#[allow(clippy::too_many_arguments)]
pub fn empirical_robustness(
    h: &ProgressiveClassifier<f64>,
    bank: &GaussianBank<f64>,
    d_features: ArrayView2<'_, f64>,
    d_labels: &[u32],
    mc_per_class: usize,
    partition: &Partition,
    p_min: f64,
    rng: &mut RngStream,
) -> Result<RobustnessTerm> {
    if d_labels.len() != d_features.nrows() {
        return Err(Error::shape(
            "fixed-set labels",
            d_features.nrows(),
            d_labels.len(),
        ));
    }
    if mc_per_class == 0 {
        return Err(Error::Argument(
            "robustness needs >= 1 Monte-Carlo sample per class".into(),
        ));
    }
    let d_losses = clamped_losses(h, d_features, d_labels, p_min)?;
    let by_class = group_rows(d_labels);
    let n = d_labels.len() as f64;
    let mut classes = Vec::with_capacity(bank.len());
    let mut weighted = 0.0;
    let mut missing = Vec::new();
    for g in bank.iter() {
        let c = g.class_id;
        let rows = by_class
            .get(&c)
            .ok_or_else(|| Error::Data(format!("class {c} has no samples in the fixed set")))?;
        let cell = partition
            .class_ids
            .iter()
            .position(|&k| k == c)
            .ok_or_else(|| Error::Validation(format!("class {c} has no partition cell")))?;
        let mut s: Vec<f64> = rows
            .iter()
            .filter(|&&r| partition.cell(d_features.row(r)) == cell)
            .map(|&r| d_losses[r])
            .collect();
        s.sort_by(f64::total_cmp);
        let z = g.sample(mc_per_class, rng);
        let labels = vec![c; mc_per_class];
        let z_losses = clamped_losses(h, z.view(), &labels, p_min)?;
        let kept: Vec<f64> = z
            .rows()
            .into_iter()
            .zip(&z_losses)
            .filter(|(row, _)| partition.cell(*row) == cell)
            .map(|(_, &l)| l)
            .collect();
        let retained =
            (kept.len() as f64 / mc_per_class as f64) * (s.len() as f64 / rows.len() as f64);
        let (epsilon, std_err) = if kept.is_empty() || s.is_empty() {
            missing.push(c);
            (None, f64::NAN)
        } else {
            let mut prefix = vec![0.0; s.len() + 1];
            for (i, v) in s.iter().enumerate() {
                prefix[i + 1] = prefix[i] + v;
            }
            let per_z: Vec<f64> = kept
                .iter()
                .map(|&a| mean_abs_diff(a, &s, &prefix))
                .collect();
            let k = per_z.len() as f64;
            let mean = per_z.iter().sum::<f64>() / k;
            let var = if per_z.len() > 1 {
                per_z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            (Some(mean), (var / k).sqrt())
        };
        weighted += rows.len() as f64 / n * epsilon.unwrap_or(0.0);
        classes.push(ClassRobustness {
            class_id: c,
            count: rows.len(),
            epsilon,
            std_err,
            retained,
        });
    }
    Ok(RobustnessTerm {
        classes,
        weighted,
        missing,
    })
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Argument(format!("delta {delta} outside (0, 1)")));
    }
    Ok(())
}

/// `ℓ_max √((C ln 4 + 2 ln(1/δ)) / n)`.
pub fn uncertainty_term(classes: usize, n: usize, delta: f64, lmax: f64) -> Result<f64> {
    check_delta(delta)?;
    if n == 0 {
        return Err(Error::Argument("uncertainty term needs n >= 1".into()));
    }
    Ok(lmax * ((classes as f64 * 4f64.ln() + 2.0 * (1.0 / delta).ln()) / n as f64).sqrt())
}

/// Equal-count form `ℓ_max √(ln 4 / m + 2 ln(1/δ) / (m C))`.
pub fn uncertainty_term_equal_counts(
    classes: usize,
    m: usize,
    delta: f64,
    lmax: f64,
) -> Result<f64> {
    check_delta(delta)?;
    if m == 0 || classes == 0 {
        return Err(Error::Argument(
            "uncertainty term needs m >= 1 and C >= 1".into(),
        ));
    }
    let (m, c) = (m as f64, classes as f64);
    Ok(lmax * (4f64.ln() / m + 2.0 * (1.0 / delta).ln() / (m * c)).sqrt())
}

/// Settings shared by both bound checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConfig {
    pub delta: f64,
    pub p_min: f64,
    /// fresh population draws per class for the measured loss
    pub test_per_class: usize,
    /// population draws per class for the robustness term
    pub mc_per_class: usize,
    /// total draws of the TV estimator
    pub tv_samples: usize,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            p_min: DEFAULT_P_MIN,
            test_per_class: 2000,
            mc_per_class: 2000,
            tv_samples: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    /// Monte-Carlo loss over the population
    pub measured: f64,
    pub training: f64,
    pub robustness: f64,
    pub uncertainty: f64,
    pub loss_max: f64,
    pub delta: f64,
    pub classes: usize,
    pub n: usize,
    pub rhs: f64,
    pub holds: bool,
    pub missing_cells: Vec<u32>,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str =
        "measured,training,robustness,uncertainty,loss_max,delta,classes,n,rhs,holds,missing_cells";

    pub fn csv_row(&self) -> String {
        let missing: Vec<String> = self.missing_cells.iter().map(u32::to_string).collect();
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{:.6},{},{}",
            self.measured,
            self.training,
            self.robustness,
            self.uncertainty,
            self.loss_max,
            self.delta,
            self.classes,
            self.n,
            self.rhs,
            self.holds,
            missing.join(" ")
        )
    }
}

/// Population loss with class weights `n_i / n`, from fresh bank draws.
fn population_loss(
    h: &ProgressiveClassifier<f64>,
    bank: &GaussianBank<f64>,
    weights: &BTreeMap<u32, f64>,
    per_class: usize,
    p_min: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut total = 0.0;
    for g in bank.iter() {
        let z = g.sample(per_class, rng);
        let losses = clamped_losses(h, z.view(), &vec![g.class_id; per_class], p_min)?;
        total += weights[&g.class_id] * losses.iter().sum::<f64>() / per_class as f64;
    }
    Ok(total)
}

fn class_weights(bank: &GaussianBank<f64>, labels: &[u32]) -> Result<BTreeMap<u32, f64>> {
    let by = group_rows(labels);
    let ids = bank.class_ids();
    if by.keys().copied().collect::<Vec<_>>() != ids {
        return Err(Error::Validation(
            "the fixed sample set and the bank cover different classes".into(),
        ));
    }
    let n = labels.len() as f64;
    Ok(by
        .into_iter()
        .map(|(c, r)| (c, r.len() as f64 / n))
        .collect())
}

/// Right-hand side terms over a fixed set drawn from `bank`.
fn sample_terms(
    h: &ProgressiveClassifier<f64>,
    bank: &GaussianBank<f64>,
    d_features: ArrayView2<'_, f64>,
    d_labels: &[u32],
    cfg: &BoundConfig,
    rng: &mut RngStream,
) -> Result<(f64, RobustnessTerm, f64, f64)> {
    let lmax = loss_max(cfg.p_min)?;
    let training = clamped_losses(h, d_features, d_labels, cfg.p_min)?
        .iter()
        .sum::<f64>()
        / d_labels.len() as f64;
    let partition = Partition::from_bank(bank)?;
    let robustness = empirical_robustness(
        h,
        bank,
        d_features,
        d_labels,
        cfg.mc_per_class,
        &partition,
        cfg.p_min,
        rng,
    )?;
    let uncertainty = uncertainty_term(bank.len(), d_labels.len(), cfg.delta, lmax)?;
    Ok((training, robustness, uncertainty, lmax))
}

/// Measured population loss against training loss + robustness +
/// uncertainty, for `h` trained on the fixed set `D`.
pub fn check_generalization_bound(
    h: &ProgressiveClassifier<f64>,
    bank: &GaussianBank<f64>,
    d_features: ArrayView2<'_, f64>,
    d_labels: &[u32],
    cfg: &BoundConfig,
    rng: &mut RngStream,
) -> Result<BoundReport> {
    let weights = class_weights(bank, d_labels)?;
    let (training, robustness, uncertainty, lmax) =
        sample_terms(h, bank, d_features, d_labels, cfg, rng)?;
    let measured = population_loss(h, bank, &weights, cfg.test_per_class, cfg.p_min, rng)?;
    let rhs = training + robustness.weighted + uncertainty;
    Ok(BoundReport {
        measured,
        training,
        robustness: robustness.weighted,
        uncertainty,
        loss_max: lmax,
        delta: cfg.delta,
        classes: bank.len(),
        n: d_labels.len(),
        rhs,
        holds: measured <= rhs,
        missing_cells: robustness.missing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvEstimate {
    pub tv: f64,
    pub std_err: f64,
    /// `√(KL/2)` with the smaller KL direction, single-Gaussian banks only
    pub pinsker: Option<f64>,
}

/// Closed-form `KL(p ‖ q)` between two Gaussians, using the jittered
/// covariances the densities are evaluated with.
pub fn gaussian_kl(p: &ClassGaussian<f64>, q: &ClassGaussian<f64>) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::shape("KL dimension", p.dim(), q.dim()));
    }
    let k = p.dim() as f64;
    let q_inv = spd_inverse_from_cholesky(q.chol.view());
    let sigma_p = p.chol.dot(&p.chol.t());
    let trace: f64 = (0..p.dim())
        .map(|i| q_inv.row(i).dot(&sigma_p.column(i)))
        .sum();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&q_inv.dot(&diff));
    let kl = 0.5
        * (trace + maha - k + log_det_from_cholesky(q.chol.view())
            - log_det_from_cholesky(p.chol.view()));
    Ok(kl.max(0.0))
}

/// One stratum: mean and variance of `|tanh((ln p - ln q)/2)|` over draws
/// from `source`.
fn tv_stratum(
    source: &GaussianBank<f64>,
    p: &GaussianBank<f64>,
    q: &GaussianBank<f64>,
    draws: usize,
    base_seed: u64,
) -> (f64, f64) {
    let ids = source.class_ids();
    let chunks = draws.div_ceil(TV_CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = RngStream::new(base_seed, chunk as u64);
            let count = TV_CHUNK.min(draws - chunk * TV_CHUNK);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let g = source
                    .get(ids[rng.index(ids.len())])
                    .expect("class of the bank");
                let z = g.sample(1, &mut rng);
                let r = z.row(0);
                let v = (0.5 * (p.mixture_log_density(r) - q.mixture_log_density(r)))
                    .tanh()
                    .abs();
                s1 += v;
                s2 += v * v;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = draws as f64;
    let mean = s1 / n;
    let var = if draws > 1 {
        ((s2 - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Total variation between the equal-weight mixtures of `p` and `q`,
/// estimated as `E_M |p - q| / (p + q)` with `M = (P + Q)/2`, half the
/// draws from each side.
pub fn tv_estimate(
    p: &GaussianBank<f64>,
    q: &GaussianBank<f64>,
    samples: usize,
    rng: &mut RngStream,
) -> Result<TvEstimate> {
    if p.dim() != q.dim() {
        return Err(Error::shape("TV dimension", p.dim(), q.dim()));
    }
    if p.is_empty() || q.is_empty() {
        return Err(Error::Argument("TV of an empty bank".into()));
    }
    if samples < 4 {
        return Err(Error::Argument("TV estimate needs >= 4 samples".into()));
    }
    for g in p.iter().chain(q.iter()) {
        g.check_density()?;
    }
    let half = samples / 2;
    let seed_p = rng.next_u64();
    let seed_q = rng.next_u64();
    let (mp, vp) = tv_stratum(p, p, q, half, seed_p);
    let (mq, vq) = tv_stratum(q, p, q, samples - half, seed_q);
    let tv = (0.5 * (mp + mq)).clamp(0.0, 1.0);
    let std_err = 0.5 * (vp / half as f64 + vq / (samples - half) as f64).sqrt();
    let pinsker = if p.len() == 1 && q.len() == 1 {
        let (a, b) = (p.iter().next().unwrap(), q.iter().next().unwrap());
        let kl = gaussian_kl(a, b)?.min(gaussian_kl(b, a)?);
        Some((kl / 2.0).sqrt())
    } else {
        None
    };
    Ok(TvEstimate {
        tv,
        std_err,
        pinsker,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReport {
    pub tv: TvEstimate,
    /// loss over the pre-shift population
    pub measured: f64,
    /// training loss over the shifted set
    pub training: f64,
    pub robustness: f64,
    pub uncertainty: f64,
    pub loss_max: f64,
    pub tv_term: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl ShiftReport {
    pub const CSV_HEADER: &'static str =
        "tv,tv_std_err,pinsker,measured,training,robustness,uncertainty,loss_max,tv_term,rhs,holds";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.tv.tv,
            self.tv.std_err,
            self.tv
                .pinsker
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default(),
            self.measured,
            self.training,
            self.robustness,
            self.uncertainty,
            self.loss_max,
            self.tv_term,
            self.rhs,
            self.holds
        )
    }
}

/// Loss over the unshifted population `bank_pre` against
/// `2 ℓ_max TV(pre, post)` plus the sample terms over `D̂` drawn from
/// `bank_post`.
pub fn check_shift_bound(
    h: &ProgressiveClassifier<f64>,
    bank_pre: &GaussianBank<f64>,
    bank_post: &GaussianBank<f64>,
    d_hat_features: ArrayView2<'_, f64>,
    d_hat_labels: &[u32],
    cfg: &BoundConfig,
    rng: &mut RngStream,
) -> Result<ShiftReport> {
    if bank_pre.class_ids() != bank_post.class_ids() {
        return Err(Error::Validation(
            "pre- and post-shift banks cover different classes".into(),
        ));
    }
    let weights = class_weights(bank_post, d_hat_labels)?;
    let (training, robustness, uncertainty, lmax) =
        sample_terms(h, bank_post, d_hat_features, d_hat_labels, cfg, rng)?;
    let tv = tv_estimate(bank_pre, bank_post, cfg.tv_samples, rng)?;
    let measured = population_loss(h, bank_pre, &weights, cfg.test_per_class, cfg.p_min, rng)?;
    let tv_term = 2.0 * lmax * tv.tv;
    let rhs = tv_term + training + robustness.weighted + uncertainty;
    Ok(ShiftReport {
        tv,
        measured,
        training,
        robustness: robustness.weighted,
        uncertainty,
        loss_max: lmax,
        tv_term,
        rhs,
        holds: measured <= rhs,
    })
}

/// Bound reports as CSV with a leading `label` column.
pub fn bound_reports_csv(rows: &[(String, BoundReport)]) -> String {
    let mut s = format!("label,{}\n", BoundReport::CSV_HEADER);
    for (label, r) in rows {
        writeln!(s, "{label},{}", r.csv_row()).unwrap();
    }
    s
}

pub fn shift_reports_csv(rows: &[(String, ShiftReport)]) -> String {
    let mut s = format!("label,{}\n", ShiftReport::CSV_HEADER);
    for (label, r) in rows {
        writeln!(s, "{label},{}", r.csv_row()).unwrap();
    }
    s
}
