//! The sequential incremental-merging loop: per-task adapter finetuning,
//! merging, Gaussian refresh, optional alignment and concatenated-head
//! inference.

mod adapter;
mod classifier;

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

pub use adapter::{Adapter, AdapterKind, AdapterSpec};
pub use classifier::ProgressiveClassifier;

use crate::checkpoint::{read_params, write_params, Reader, Writer};
use crate::error::{Error, Result};
use crate::features::{FeatureDataset, TaskPart, TaskSplit};
use crate::gaussian::{fit_class_stats, FitOptions, GaussianBank};
use crate::lca::{align_classifiers, AlignEpochLog, AlignMode, LcaConfig};
use crate::merge::{task_vector, MergeOperator, MergeState};
use crate::metrics::{accuracy, AccuracyMatrix};
use crate::nn::{
    softmax_cross_entropy, Activation, Mlp, MlpSpec, OptimizerState, ParamVector, SgdConfig,
};
use crate::rng::RngStream;
use crate::scalar::Scalar;

const STREAM_ADAPTER_INIT: u64 = 0xada0;
const STREAM_HEAD_INIT: u64 = 0x4ead;
const STREAM_FINETUNE: u64 = 0xf17e;
const STREAM_ALIGN: u64 = 0xa119;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            sgd: SgdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    pub operator: MergeOperator,
    pub alpha: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            operator: MergeOperator::MaxAbs,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub enabled: bool,
    pub mode: AlignMode,
    pub lca: LcaConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: AlignMode::EveryTask,
            lca: LcaConfig::default(),
        }
    }
}

/// Adapter settings that do not depend on the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub hidden: usize,
    pub scale: f64,
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::ResidualMlp,
            hidden: 64,
            scale: 2.0,
            init_std: 1.0 / 64.0,
        }
    }
}

impl AdapterConfig {
    pub fn spec(&self, dim: usize) -> AdapterSpec {
        AdapterSpec {
            kind: self.kind,
            dim,
            hidden: self.hidden,
            scale: self.scale,
            init_std: self.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub merge: MergeConfig,
    pub align: AlignConfig,
    /// covariance shrinkage of the class Gaussians
    pub shrinkage: f64,
    /// hidden widths of each head; empty means a single linear layer
    pub head_hidden: Vec<usize>,
}

/// Train the adapter and one new head with cross-entropy over the head's
/// own classes. Only `adapter` and `head` change.
pub fn finetune_task<S: Scalar>(
    adapter: &mut Adapter<S>,
    head: &mut Mlp<S>,
    features: ArrayView2<'_, S>,
    labels: &[u32],
    classes: &[u32],
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<()> {
    if labels.len() != features.nrows() {
        return Err(Error::shape(
            "finetune labels",
            features.nrows(),
            labels.len(),
        ));
    }
    if head.spec.output_width() != classes.len() {
        return Err(Error::shape(
            "head output width",
            classes.len(),
            head.spec.output_width(),
        ));
    }
    let mut local = Vec::with_capacity(labels.len());
    let mut counts = vec![0usize; classes.len()];
    for &y in labels {
        let k = classes
            .iter()
            .position(|&c| c == y)
            .ok_or_else(|| Error::Data(format!("label {y} is not one of the task's classes")))?;
        counts[k] += 1;
        local.push(k);
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!(
            "class {} has no training samples",
            classes[k]
        )));
    }
    if cfg.epochs == 0 {
        return Ok(());
    }
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be >= 1".into()));
    }
    let n = labels.len();
    let steps = n.div_ceil(cfg.batch_size) * cfg.epochs;
    let mut opt_adapter = OptimizerState::new(adapter.params().len(), cfg.sgd, steps)?;
    let mut opt_head = OptimizerState::new(head.params.len(), cfg.sgd, steps)?;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let x = features.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| local[i]).collect();
            let (z, a_cache) = adapter.forward_cached(x.view())?;
            let (logits, h_cache) = head.forward_cached(z.view())?;
            let (_, g_logits) = softmax_cross_entropy(logits.view(), &y)?;
            let (g_head, g_z) = head.backward(&h_cache, g_logits.view())?;
            let g_adapter = adapter.backward(&a_cache, g_z.view())?;
            opt_head.step(head.params.values_mut(), &g_head)?;
            opt_adapter.step(adapter.net.params.values_mut(), &g_adapter)?;
        }
    }
    Ok(())
}

/// Everything a run carries between tasks. Only the base, the latest
/// finetuned and the deployed adapter plus the merge accumulator are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState<S> {
    adapter_spec: AdapterSpec,
    base: ParamVector<S>,
    finetuned: ParamVector<S>,
    deployed: ParamVector<S>,
    merge: MergeState<S>,
    classifier: ProgressiveClassifier<S>,
    bank: GaussianBank<S>,
    task_cursor: usize,
    accuracy: AccuracyMatrix,
    align_log: Vec<(usize, AlignEpochLog)>,
}

fn to_scalar<S: Scalar>(x: ArrayView2<'_, f64>) -> Array2<S> {
    x.mapv(S::of)
}

impl<S: Scalar> PipelineState<S> {
    pub fn new(cfg: &PipelineConfig, dim: usize, seed: u64) -> Result<Self> {
        let spec = cfg.adapter.spec(dim);
        let adapter =
            Adapter::<S>::init(spec, &mut RngStream::derive(seed, &[STREAM_ADAPTER_INIT]))?;
        let base = adapter.params().clone();
        Ok(Self {
            adapter_spec: spec,
            merge: MergeState::new(base.clone(), cfg.merge.operator, cfg.merge.alpha)?,
            finetuned: base.clone(),
            deployed: base.clone(),
            base,
            classifier: ProgressiveClassifier::new(),
            bank: GaussianBank::new(dim),
            task_cursor: 0,
            accuracy: AccuracyMatrix::new(),
            align_log: Vec::new(),
        })
    }

    pub fn adapter_spec(&self) -> &AdapterSpec {
        &self.adapter_spec
    }

    pub fn base(&self) -> &ParamVector<S> {
        &self.base
    }

    pub fn finetuned(&self) -> &ParamVector<S> {
        &self.finetuned
    }

    pub fn deployed(&self) -> &ParamVector<S> {
        &self.deployed
    }

    pub fn merge_state(&self) -> &MergeState<S> {
        &self.merge
    }

    pub fn classifier(&self) -> &ProgressiveClassifier<S> {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut ProgressiveClassifier<S> {
        &mut self.classifier
    }

    pub fn bank(&self) -> &GaussianBank<S> {
        &self.bank
    }

    /// Number of tasks processed.
    pub fn task_cursor(&self) -> usize {
        self.task_cursor
    }

    pub fn accuracy(&self) -> &AccuracyMatrix {
        &self.accuracy
    }

    /// `(task, epoch log)` for every alignment epoch run so far.
    pub fn align_log(&self) -> &[(usize, AlignEpochLog)] {
        &self.align_log
    }

    pub fn deployed_adapter(&self) -> Adapter<S> {
        Adapter::with_params(self.adapter_spec, self.deployed.clone())
            .expect("deployed adapter matches its spec")
    }

    /// Features under the deployed adapter.
    pub fn transform(&self, features: ArrayView2<'_, S>) -> Result<Array2<S>> {
        if features.ncols() != self.adapter_spec.dim {
            return Err(Error::shape(
                "feature dimension",
                self.adapter_spec.dim,
                features.ncols(),
            ));
        }
        self.deployed_adapter().forward(features)
    }

    /// Concatenated logits and predicted global ids for raw features.
    pub fn concat_inference(&self, features: ArrayView2<'_, S>) -> Result<(Array2<S>, Vec<u32>)> {
        let z = self.transform(features)?;
        let logits = self.classifier.forward(z.view())?;
        let pred = self.classifier.predict(logits.view());
        Ok((logits, pred))
    }

    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Vec<u32>> {
        Ok(self.concat_inference(to_scalar::<S>(features).view())?.1)
    }

    /// Process the next task of `split` and record the evaluation on every
    /// seen task's test rows.
    pub fn run_task(
        &mut self,
        data: &FeatureDataset,
        split: &TaskSplit,
        cfg: &PipelineConfig,
        seed: u64,
    ) -> Result<()> {
        let t = self.task_cursor;
        let part = split.tasks.get(t).ok_or_else(|| {
            Error::State(format!("all {} tasks already processed", split.tasks.len()))
        })?;
        self.learn_task(data, part, cfg, seed)?;
        let last = t + 1 == split.tasks.len();
        if cfg.align.enabled && (cfg.align.mode == AlignMode::EveryTask || last) {
            self.align(cfg, seed)?;
        }
        self.task_cursor += 1;
        self.evaluate(data, split)
    }

    /// Finetune, merge, deploy and fit Gaussians for task `part`, without
    /// alignment or evaluation. The cursor is not advanced.
    pub fn learn_task(
        &mut self,
        data: &FeatureDataset,
        part: &TaskPart,
        cfg: &PipelineConfig,
        seed: u64,
    ) -> Result<()> {
        let t = self.task_cursor;
        if part.classes.is_empty() {
            return Err(Error::Data(format!("task {t} has no classes")));
        }
        let (x, y) = data.select(&part.train);
        let x = to_scalar::<S>(x.view());

        let dim = self.adapter_spec.dim;
        let mut head_rng = RngStream::derive(seed, &[STREAM_HEAD_INIT, t as u64]);
        let mut head = ProgressiveClassifier::<S>::init_head(
            dim,
            &cfg.head_hidden,
            part.classes.len(),
            &mut head_rng,
        )?;
        let mut adapter = Adapter::with_params(self.adapter_spec, self.finetuned.clone())?;
        let mut rng = RngStream::derive(seed, &[STREAM_FINETUNE, t as u64]);
        finetune_task(
            &mut adapter,
            &mut head,
            x.view(),
            &y,
            &part.classes,
            &cfg.train,
            &mut rng,
        )?;

        self.finetuned = adapter.params().clone();
        let tau = task_vector(&self.finetuned, &self.base, t)?;
        self.merge.merge_step(&tau)?;
        self.deployed = self.merge.apply_merge();
        self.classifier.push_head(head, &part.classes)?;

        let z = self.transform(x.view())?;
        let fitted = fit_class_stats(
            z.view(),
            &y,
            &part.classes,
            FitOptions {
                shrinkage: cfg.shrinkage,
            },
        )?;
        self.bank.extend(fitted)
    }

    /// Align the heads on replay from the current bank.
    pub fn align(&mut self, cfg: &PipelineConfig, seed: u64) -> Result<()> {
        let t = self.task_cursor;
        let mut rng = RngStream::derive(seed, &[STREAM_ALIGN, t as u64]);
        let log = align_classifiers(
            &mut self.classifier,
            &self.bank,
            &cfg.align.lca,
            cfg.train.sgd,
            &mut rng,
        )?;
        self.align_log.extend(log.into_iter().map(|l| (t, l)));
        Ok(())
    }

    /// Accuracy on each seen task's test rows.
    pub fn evaluate_seen(
        &self,
        data: &FeatureDataset,
        split: &TaskSplit,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let seen = &split.tasks[..self.task_cursor.min(split.tasks.len())];
        let rows: Vec<usize> = seen.iter().flat_map(|p| p.test.iter().copied()).collect();
        if rows.is_empty() {
            return Err(Error::Data("no test rows for the seen tasks".into()));
        }
        let (x, y) = data.select(&rows);
        let pred = self.predict(x.view())?;
        let mut per_task = Vec::with_capacity(seen.len());
        let mut counts = Vec::with_capacity(seen.len());
        let mut start = 0;
        for p in seen {
            let end = start + p.test.len();
            if p.test.is_empty() {
                return Err(Error::Data(format!("task {} has no test rows", p.task)));
            }
            per_task.push(accuracy(&pred[start..end], &y[start..end])?);
            counts.push(p.test.len());
            start = end;
        }
        Ok((per_task, counts))
    }

    fn evaluate(&mut self, data: &FeatureDataset, split: &TaskSplit) -> Result<()> {
        let (per_task, counts) = self.evaluate_seen(data, split)?;
        self.accuracy.push(per_task, &counts)
    }

    /// Binary checkpoint: magic `FCKP`, version u32 = 1, then the adapter
    /// spec, base / finetuned / deployed parameters, the merge state, every
    /// head, the Gaussian bank, the task cursor, the accuracy matrix and the
    /// alignment log. Little-endian throughout; reals as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(b"FCKP");
        w.u32(1);
        let s = &self.adapter_spec;
        w.u8(match s.kind {
            AdapterKind::ResidualLinear => 0,
            AdapterKind::ResidualMlp => 1,
        });
        w.u64(s.dim as u64);
        w.u64(s.hidden as u64);
        w.f64(s.scale);
        w.f64(s.init_std);
        write_params(&mut w, &self.base);
        write_params(&mut w, &self.finetuned);
        write_params(&mut w, &self.deployed);
        let merge = self.merge.to_bytes();
        w.u64(merge.len() as u64);
        w.bytes(&merge);
        w.u32(self.classifier.head_count() as u32);
        for (i, head) in self.classifier.heads().iter().enumerate() {
            w.u32(head.spec.widths.len() as u32);
            for &wd in &head.spec.widths {
                w.u64(wd as u64);
            }
            w.u8(match head.spec.activation {
                Activation::Identity => 0,
                Activation::Relu => 1,
            });
            for &b in &head.spec.bias {
                w.u8(b as u8);
            }
            let classes = self.classifier.head_classes(i);
            w.u32(classes.len() as u32);
            for &c in classes {
                w.u32(c);
            }
            write_params(&mut w, &head.params);
        }
        let bank = self.bank.to_bytes();
        w.u64(bank.len() as u64);
        w.bytes(&bank);
        w.u64(self.task_cursor as u64);
        let acc = &self.accuracy;
        w.u32(acc.tasks() as u32);
        for row in acc.rows() {
            w.u32(row.len() as u32);
            w.f64s(row.iter().copied());
        }
        w.u32(acc.counts().len() as u32);
        for &n in acc.counts() {
            w.u64(n as u64);
        }
        w.f64s(acc.global().iter().copied());
        w.u64(self.align_log.len() as u64);
        for (t, l) in &self.align_log {
            w.u64(*t as u64);
            w.u64(l.epoch as u64);
            w.f64s([l.total, l.mean_term, l.dispersion_term, l.worst_class]);
        }
        w.out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(b"FCKP")?;
        r.version(1)?;
        let at = r.pos() as u64;
        let kind = match r.u8("adapter kind")? {
            0 => AdapterKind::ResidualLinear,
            1 => AdapterKind::ResidualMlp,
            k => {
                return Err(Error::Format {
                    offset: at,
                    message: format!("unknown adapter kind code {k}"),
                })
            }
        };
        let adapter_spec = AdapterSpec {
            kind,
            dim: r.u64("adapter dim")? as usize,
            hidden: r.u64("adapter hidden")? as usize,
            scale: r.f64("adapter scale")?,
            init_std: r.f64("adapter init std")?,
        };
        adapter_spec.validate()?;
        let base = read_params::<S>(&mut r)?;
        let finetuned = read_params::<S>(&mut r)?;
        let deployed = read_params::<S>(&mut r)?;
        let expected = adapter_spec.mlp_spec().param_count();
        for p in [&base, &finetuned, &deployed] {
            if p.len() != expected {
                return Err(Error::shape(
                    "checkpoint adapter parameters",
                    expected,
                    p.len(),
                ));
            }
        }
        let n = r.u64("merge state length")? as usize;
        let (merge, _) = MergeState::<S>::from_bytes(r.take(n, "merge state")?)?;
        let heads = r.u32("head count")? as usize;
        let mut classifier = ProgressiveClassifier::new();
        for _ in 0..heads {
            let k = r.u32("head widths")? as usize;
            let widths = (0..k)
                .map(|_| r.u64("head width").map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let at = r.pos() as u64;
            let activation = match r.u8("head activation")? {
                0 => Activation::Identity,
                1 => Activation::Relu,
                a => {
                    return Err(Error::Format {
                        offset: at,
                        message: format!("unknown activation code {a}"),
                    })
                }
            };
            let bias = (0..k.saturating_sub(1))
                .map(|_| r.u8("head bias flag").map(|b| b != 0))
                .collect::<Result<Vec<_>>>()?;
            let c = r.u32("head classes")? as usize;
            let classes = (0..c)
                .map(|_| r.u32("class id"))
                .collect::<Result<Vec<_>>>()?;
            let params = read_params::<S>(&mut r)?;
            let head = Mlp::from_params(MlpSpec::new(widths, activation, bias)?, params)?;
            classifier.push_head(head, &classes)?;
        }
        let n = r.u64("bank length")? as usize;
        let (bank, _) = GaussianBank::<S>::from_bytes(r.take(n, "bank")?)?;
        let task_cursor = r.u64("task cursor")? as usize;
        let tasks = r.u32("accuracy rows")? as usize;
        let mut rows = Vec::with_capacity(tasks);
        for _ in 0..tasks {
            let k = r.u32("accuracy row length")? as usize;
            rows.push(r.f64s(k, "accuracy")?);
        }
        let k = r.u32("test counts")? as usize;
        let counts = (0..k)
            .map(|_| r.u64("test count").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let global = r.f64s(tasks, "global accuracy")?;
        let logs = r.u64("align log length")? as usize;
        let mut align_log = Vec::with_capacity(logs);
        for _ in 0..logs {
            let t = r.u64("align task")? as usize;
            let epoch = r.u64("align epoch")? as usize;
            let v = r.f64s(4, "align log")?;
            align_log.push((
                t,
                AlignEpochLog {
                    epoch,
                    total: v[0],
                    mean_term: v[1],
                    dispersion_term: v[2],
                    worst_class: v[3],
                },
            ));
        }
        r.finish()?;
        if classifier.head_count() != task_cursor || bank.len() != classifier.width() {
            return Err(Error::Validation(format!(
                "checkpoint inconsistent: cursor {task_cursor}, {} heads, {} outputs, {} Gaussians",
                classifier.head_count(),
                classifier.width(),
                bank.len()
            )));
        }
        Ok(Self {
            adapter_spec,
            base,
            finetuned,
            deployed,
            merge,
            classifier,
            bank,
            task_cursor,
            accuracy: AccuracyMatrix::from_parts(rows, counts, global),
            align_log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Run every task of `split` from scratch.
pub fn run_sequence<S: Scalar>(
    data: &FeatureDataset,
    split: &TaskSplit,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<PipelineState<S>> {
    split.validate(data)?;
    let state = PipelineState::new(cfg, data.dim(), seed)?;
    resume_sequence(state, data, split, cfg, seed)
}

/// Continue a run from its task cursor to the end of `split`.
pub fn resume_sequence<S: Scalar>(
    mut state: PipelineState<S>,
    data: &FeatureDataset,
    split: &TaskSplit,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<PipelineState<S>> {
    while state.task_cursor() < split.tasks.len() {
        state.run_task(data, split, cfg, seed)?;
    }
    Ok(state)
}
