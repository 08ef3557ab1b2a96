//! Local classifier alignment: retrain the heads on Gaussian replay with a
//! per-class loss plus a λ-weighted penalty on within-class loss spread.
//!
//! For class `i` with losses `ℓ_1..ℓ_n` on its replay samples,
//!
//! ```text
//! L_i = mean(ℓ) + λ · mean_{a≠b} |ℓ_a − ℓ_b|,    L = (1/C) Σ_i L_i
//! ```

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::gaussian::GaussianBank;
use crate::nn::{softmax_xent_rows, OptimizerState, SgdConfig};
use crate::pipeline::ProgressiveClassifier;
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Which heads alignment may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSelector {
    All,
    /// the `k` most recent heads
    Recent(usize),
    /// the most recent ⌈t/2⌉ heads
    RecentHalf,
    /// explicit 0-based head indices
    Explicit(Vec<usize>),
}

impl HeadSelector {
    pub fn select(&self, heads: usize) -> Vec<usize> {
        match self {
            HeadSelector::All => (0..heads).collect(),
            HeadSelector::Recent(k) => (heads.saturating_sub(*k)..heads).collect(),
            HeadSelector::RecentHalf => (heads - heads.div_ceil(2)..heads).collect(),
            HeadSelector::Explicit(list) => list.iter().copied().filter(|&i| i < heads).collect(),
        }
    }

    pub fn to_config_string(&self) -> String {
        match self {
            HeadSelector::All => "all".into(),
            HeadSelector::Recent(k) => format!("recent:{k}"),
            HeadSelector::RecentHalf => "recent_half".into(),
            HeadSelector::Explicit(v) => {
                let items: Vec<String> = v.iter().map(usize::to_string).collect();
                format!("[{}]", items.join(", "))
            }
        }
    }
}

/// When alignment runs inside a task sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    EveryTask,
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcaConfig {
    pub lambda: f64,
    pub samples_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// replay samples per class inside one batch; 0 picks `max(2, batch / C)`
    pub class_batch: usize,
    pub heads: HeadSelector,
    /// draw a fresh replay set every epoch instead of one fixed set
    pub resample: bool,
}

impl Default for LcaConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            samples_per_class: 512,
            epochs: 10,
            batch_size: 128,
            class_batch: 0,
            heads: HeadSelector::All,
            resample: true,
        }
    }
}

impl LcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Argument(
                "alignment needs >= 2 samples per class".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::Argument("alignment batch size must be >= 2".into()));
        }
        if self.class_batch == 1 || self.class_batch > self.batch_size {
            return Err(Error::Argument(format!(
                "class_batch {} must be 0 (automatic) or in 2..={}",
                self.class_batch, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Terms of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassTerms {
    pub class_id: u32,
    pub samples: usize,
    pub mean: f64,
    pub dispersion: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcaLossBreakdown {
    pub lambda: f64,
    pub classes: Vec<ClassTerms>,
    /// `(1/C) Σ L_i`
    pub total: f64,
}

impl LcaLossBreakdown {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn mean_term(&self) -> f64 {
        self.classes.iter().map(|c| c.mean).sum::<f64>() / self.classes.len().max(1) as f64
    }

    pub fn dispersion_term(&self) -> f64 {
        self.classes.iter().map(|c| c.dispersion).sum::<f64>() / self.classes.len().max(1) as f64
    }

    pub fn worst_class_total(&self) -> f64 {
        self.classes.iter().map(|c| c.total).fold(0.0, f64::max)
    }
}

/// Indices of `values` in ascending order (ties by position).
fn sorted_order<S: Scalar>(values: &[S]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .as_f64()
            .total_cmp(&values[b].as_f64())
            .then(a.cmp(&b))
    });
    order
}

/// Mean `|ℓ_a − ℓ_b|` over ordered pairs of distinct positions,
/// `2/(n(n−1)) Σ_{a<b} |ℓ_a − ℓ_b|`.
pub fn dispersion<S: Scalar>(losses: &[S]) -> Result<S> {
    let n = losses.len();
    if n < 2 {
        return Err(Error::Argument(format!(
            "dispersion needs >= 2 values, got {n}"
        )));
    }
    let order = sorted_order(losses);
    let mut acc = S::zero();
    for (rank, &i) in order.iter().enumerate() {
        acc += losses[i] * S::of(2.0 * rank as f64 + 1.0 - n as f64);
    }
    Ok(acc * S::of(2.0 / (n as f64 * (n as f64 - 1.0))))
}

/// `Σ_b sign(ℓ_a − ℓ_b)` for every `a`; equal values contribute 0.
fn rank_signs<S: Scalar>(losses: &[S]) -> Vec<f64> {
    let n = losses.len();
    let order = sorted_order(losses);
    let mut signs = vec![0.0; n];
    let mut lo = 0;
    while lo < n {
        let mut hi = lo + 1;
        while hi < n && losses[order[hi]] == losses[order[lo]] {
            hi += 1;
        }
        let s = lo as f64 - (n - hi) as f64;
        for &i in &order[lo..hi] {
            signs[i] = s;
        }
        lo = hi;
    }
    signs
}

/// Breakdown of the loss given per-sample losses grouped by class.
pub fn lca_terms<S: Scalar>(
    losses_by_class: &BTreeMap<u32, Vec<S>>,
    lambda: f64,
) -> Result<LcaLossBreakdown> {
    let mut classes = Vec::with_capacity(losses_by_class.len());
    for (&class_id, losses) in losses_by_class {
        if losses.len() < 2 {
            return Err(Error::Argument(format!(
                "class {class_id} has {} replay samples; the dispersion term needs >= 2",
                losses.len()
            )));
        }
        let mean = losses.iter().map(|v| v.as_f64()).sum::<f64>() / losses.len() as f64;
        let disp = dispersion(losses)?.as_f64();
        classes.push(ClassTerms {
            class_id,
            samples: losses.len(),
            mean,
            dispersion: disp,
            total: mean + lambda * disp,
        });
    }
    let total = classes.iter().map(|c| c.total).sum::<f64>() / classes.len().max(1) as f64;
    Ok(LcaLossBreakdown {
        lambda,
        classes,
        total,
    })
}

/// Loss over labeled replay features and its gradient with respect to
/// every head (one vector per head, in head order).
pub fn lca_loss<S: Scalar>(
    classifier: &ProgressiveClassifier<S>,
    features: ArrayView2<'_, S>,
    labels: &[u32],
    lambda: f64,
) -> Result<(LcaLossBreakdown, Vec<Vec<S>>)> {
    let columns = classifier.columns_for(labels)?;
    let (logits, caches) = classifier.forward_cached(features)?;
    let (losses, probs) = softmax_xent_rows(logits.view(), &columns)?;

    let mut rows_of: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        rows_of.entry(c).or_default().push(i);
    }
    let grouped: BTreeMap<u32, Vec<S>> = rows_of
        .iter()
        .map(|(&c, rows)| (c, rows.iter().map(|&r| losses[r]).collect()))
        .collect();
    let breakdown = lca_terms(&grouped, lambda)?;

    // dL/dℓ_a = (1/C) (1/n + λ · 2/(n(n−1)) · Σ_b sign(ℓ_a − ℓ_b))
    let c = rows_of.len() as f64;
    let mut weights = vec![0.0f64; labels.len()];
    for (class_id, rows) in &rows_of {
        let n = rows.len() as f64;
        let signs = rank_signs(&grouped[class_id]);
        for (k, &r) in rows.iter().enumerate() {
            weights[r] = (1.0 / n + lambda * 2.0 / (n * (n - 1.0)) * signs[k]) / c;
        }
    }
    let mut grad = probs;
    for ((mut row, &y), &w) in grad.axis_iter_mut(Axis(0)).zip(&columns).zip(&weights) {
        row[y] -= S::one();
        let w = S::of(w);
        row.mapv_inplace(|v| v * w);
    }
    let grads = classifier.backward(&caches, grad.view())?;
    Ok((breakdown, grads))
}

/// Loss value only, without gradients.
pub fn lca_value<S: Scalar>(
    classifier: &ProgressiveClassifier<S>,
    features: ArrayView2<'_, S>,
    labels: &[u32],
    lambda: f64,
) -> Result<LcaLossBreakdown> {
    let columns = classifier.columns_for(labels)?;
    let logits = classifier.forward(features)?;
    let (losses, _) = softmax_xent_rows(logits.view(), &columns)?;
    let mut grouped: BTreeMap<u32, Vec<S>> = BTreeMap::new();
    for (&c, &l) in labels.iter().zip(&losses) {
        grouped.entry(c).or_default().push(l);
    }
    lca_terms(&grouped, lambda)
}

/// One line of the per-epoch alignment log, measured on that epoch's replay set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignEpochLog {
    pub epoch: usize,
    pub total: f64,
    pub mean_term: f64,
    pub dispersion_term: f64,
    pub worst_class: f64,
}

/// Class-balanced minibatches: `k` samples (by default `max(2, batch / C)`)
/// from each of `min(C, batch / k)` classes, classes visited round robin in
/// a shuffled order, samples drawn from per-class shuffled queues.
pub(crate) fn balanced_batches(
    class_rows: &[Vec<usize>],
    batch_size: usize,
    class_batch: usize,
    rng: &mut RngStream,
) -> Vec<Vec<usize>> {
    let c = class_rows.len();
    if c == 0 {
        return Vec::new();
    }
    let per_class = if class_batch == 0 {
        (batch_size / c).max(2)
    } else {
        class_batch
    };
    let classes_per_batch = (batch_size / per_class).clamp(1, c);
    let total: usize = class_rows.iter().map(Vec::len).sum();
    let batches = total.div_ceil(per_class * classes_per_batch);
    let mut queues: Vec<Vec<usize>> = class_rows.to_vec();
    for q in queues.iter_mut() {
        rng.shuffle(q);
    }
    let mut cursor = vec![0usize; c];
    let mut class_order: Vec<usize> = (0..c).collect();
    rng.shuffle(&mut class_order);
    let mut next_class = 0;
    let mut out = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut batch = Vec::with_capacity(per_class * classes_per_batch);
        for _ in 0..classes_per_batch {
            if next_class == c {
                rng.shuffle(&mut class_order);
                next_class = 0;
            }
            let k = class_order[next_class];
            next_class += 1;
            for _ in 0..per_class {
                if cursor[k] == queues[k].len() {
                    rng.shuffle(&mut queues[k]);
                    cursor[k] = 0;
                }
                batch.push(queues[k][cursor[k]]);
                cursor[k] += 1;
            }
        }
        out.push(batch);
    }
    out
}

/// Retrain the selected heads on Gaussian replay of every class in `bank`.
/// Heads outside the selector, the bank and the adapter are not touched.
pub fn align_classifiers<S: Scalar>(
    classifier: &mut ProgressiveClassifier<S>,
    bank: &GaussianBank<S>,
    cfg: &LcaConfig,
    sgd: SgdConfig,
    rng: &mut RngStream,
) -> Result<Vec<AlignEpochLog>> {
    cfg.validate()?;
    let mut bank_ids = bank.class_ids();
    let mut clf_ids = classifier.columns().to_vec();
    bank_ids.sort_unstable();
    clf_ids.sort_unstable();
    if bank_ids != clf_ids {
        return Err(Error::State(format!(
            "Gaussian bank covers {} classes but the classifier has {} outputs",
            bank_ids.len(),
            clf_ids.len()
        )));
    }
    if cfg.epochs == 0 || bank.is_empty() {
        return Ok(Vec::new());
    }
    let m = cfg.samples_per_class;
    let draw = |rng: &mut RngStream| bank.sample_alignment_set(m, rng);
    let first = draw(rng)?;
    train_heads(classifier, first, cfg, sgd, rng, |rng| {
        if cfg.resample {
            draw(rng).map(Some)
        } else {
            Ok(None)
        }
    })
}

/// Retrain the selected heads on one fixed labeled replay set.
pub fn align_on_fixed_set<S: Scalar>(
    classifier: &mut ProgressiveClassifier<S>,
    features: ArrayView2<'_, S>,
    labels: &[u32],
    cfg: &LcaConfig,
    sgd: SgdConfig,
    rng: &mut RngStream,
) -> Result<Vec<AlignEpochLog>> {
    cfg.validate()?;
    if labels.len() != features.nrows() {
        return Err(Error::shape(
            "replay labels",
            features.nrows(),
            labels.len(),
        ));
    }
    classifier.columns_for(labels)?;
    if cfg.epochs == 0 || labels.is_empty() {
        return Ok(Vec::new());
    }
    train_heads(
        classifier,
        (features.to_owned(), labels.to_vec()),
        cfg,
        sgd,
        rng,
        |_| Ok(None),
    )
}

type ReplaySet<S> = (Array2<S>, Vec<u32>);

fn train_heads<S: Scalar>(
    classifier: &mut ProgressiveClassifier<S>,
    first: ReplaySet<S>,
    cfg: &LcaConfig,
    sgd: SgdConfig,
    rng: &mut RngStream,
    mut redraw: impl FnMut(&mut RngStream) -> Result<Option<ReplaySet<S>>>,
) -> Result<Vec<AlignEpochLog>> {
    let selected = cfg.heads.select(classifier.head_count());
    if selected.is_empty() {
        return Ok(Vec::new());
    }
    let rows_by_class = |y: &[u32]| -> Vec<Vec<usize>> {
        let mut by: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &c) in y.iter().enumerate() {
            by.entry(c).or_default().push(i);
        }
        by.into_values().collect()
    };
    let (mut z, mut y) = first;
    let mut rows = rows_by_class(&y);
    let steps_per_epoch = {
        let mut probe = rng.clone();
        balanced_batches(&rows, cfg.batch_size, cfg.class_batch, &mut probe).len()
    };
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut opts: Vec<OptimizerState<S>> = selected
        .iter()
        .map(|&h| OptimizerState::new(classifier.heads()[h].params.len(), sgd, total_steps))
        .collect::<Result<_>>()?;

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            if let Some((z2, y2)) = redraw(rng)? {
                (z, y) = (z2, y2);
                rows = rows_by_class(&y);
            }
        }
        for batch in balanced_batches(&rows, cfg.batch_size, cfg.class_batch, rng) {
            let xb = z.select(Axis(0), &batch);
            let yb: Vec<u32> = batch.iter().map(|&i| y[i]).collect();
            let (_, grads) = lca_loss(classifier, xb.view(), &yb, cfg.lambda)?;
            for (opt, &h) in opts.iter_mut().zip(&selected) {
                opt.step(classifier.head_mut(h).params.values_mut(), &grads[h])?;
            }
        }
        let b = lca_value(classifier, z.view(), &y, cfg.lambda)?;
        log.push(AlignEpochLog {
            epoch,
            total: b.total,
            mean_term: b.mean_term(),
            dispersion_term: b.dispersion_term(),
            worst_class: b.worst_class_total(),
        });
    }
    Ok(log)
}

/// Per-epoch log as CSV: `task,epoch,total,mean_term,dispersion_term,worst_class`.
pub fn align_log_csv(log: &[(usize, AlignEpochLog)]) -> String {
    let mut s = String::from("task,epoch,total,mean_term,dispersion_term,worst_class\n");
    for (t, l) in log {
        s.push_str(&format!(
            "{t},{},{:.6},{:.6},{:.6},{:.6}\n",
            l.epoch, l.total, l.mean_term, l.dispersion_term, l.worst_class
        ));
    }
    s
}
