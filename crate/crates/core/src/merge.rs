//! Task vectors and incremental merging of flat adapter parameters.
//!
//! Only the running accumulator and the incoming task vector are held, so
//! memory stays `O(d)` however many tasks are merged.

use std::fmt;
use std::str::FromStr;

use crate::checkpoint::{read_params, write_params, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::scalar::Scalar;

/// Per-coordinate selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MergeOperator {
    /// largest magnitude, sign preserved
    MaxAbs,
    /// largest signed value
    Max,
    /// smallest signed value
    Min,
}

impl MergeOperator {
    pub const ALL: [MergeOperator; 3] = [
        MergeOperator::Min,
        MergeOperator::Max,
        MergeOperator::MaxAbs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeOperator::MaxAbs => "max_abs",
            MergeOperator::Max => "max",
            MergeOperator::Min => "min",
        }
    }

    /// Whether `candidate` replaces `held`. Ties go to the candidate, so
    /// the newest task wins at equal score.
    #[inline]
    pub fn prefers<S: Scalar>(self, candidate: S, held: S) -> bool {
        match self {
            MergeOperator::MaxAbs => candidate.abs() >= held.abs(),
            MergeOperator::Max => candidate >= held,
            MergeOperator::Min => candidate <= held,
        }
    }

    fn code(self) -> u8 {
        match self {
            MergeOperator::MaxAbs => 0,
            MergeOperator::Max => 1,
            MergeOperator::Min => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(MergeOperator::MaxAbs),
            1 => Some(MergeOperator::Max),
            2 => Some(MergeOperator::Min),
            _ => None,
        }
    }
}

impl fmt::Display for MergeOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_abs" | "maxabs" => Ok(MergeOperator::MaxAbs),
            "max" => Ok(MergeOperator::Max),
            "min" => Ok(MergeOperator::Min),
            other => Err(Error::Argument(format!(
                "unknown merge operator '{other}'; allowed: min, max, max_abs"
            ))),
        }
    }
}

/// `θ_task - θ_base` for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector<S> {
    pub delta: Vec<S>,
    pub task: usize,
}

pub fn task_vector<S: Scalar>(
    finetuned: &ParamVector<S>,
    base: &ParamVector<S>,
    task: usize,
) -> Result<TaskVector<S>> {
    if finetuned.len() != base.len() {
        return Err(Error::shape("task vector", base.len(), finetuned.len()));
    }
    let delta: Vec<S> = finetuned
        .values()
        .iter()
        .zip(base.values())
        .map(|(&a, &b)| a - b)
        .collect();
    if let Some(i) = delta.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("task vector of task {task}"),
            index: i,
        });
    }
    Ok(TaskVector { delta, task })
}

/// Running merge of task vectors on top of a base adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeState<S> {
    accumulator: Vec<S>,
    operator: MergeOperator,
    alpha: f64,
    base: ParamVector<S>,
    merged: usize,
}

impl<S: Scalar> MergeState<S> {
    pub fn new(base: ParamVector<S>, operator: MergeOperator, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::Argument(format!(
                "merge coefficient {alpha} is not finite"
            )));
        }
        Ok(Self {
            accumulator: vec![S::zero(); base.len()],
            operator,
            alpha,
            base,
            merged: 0,
        })
    }

    pub fn accumulator(&self) -> &[S] {
        &self.accumulator
    }

    pub fn operator(&self) -> MergeOperator {
        self.operator
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn base(&self) -> &ParamVector<S> {
        &self.base
    }

    /// Number of task vectors folded in so far.
    pub fn merged(&self) -> usize {
        self.merged
    }

    /// Fold one task vector into the accumulator. The first vector is taken
    /// as is; afterwards each coordinate keeps whichever value the operator
    /// prefers.
    pub fn merge_step(&mut self, current: &TaskVector<S>) -> Result<()> {
        if current.delta.len() != self.accumulator.len() {
            return Err(Error::shape(
                "merge step",
                self.accumulator.len(),
                current.delta.len(),
            ));
        }
        if self.merged == 0 {
            self.accumulator.copy_from_slice(&current.delta);
        } else {
            let op = self.operator;
            for (held, &cand) in self.accumulator.iter_mut().zip(&current.delta) {
                if op.prefers(cand, *held) {
                    *held = cand;
                }
            }
        }
        self.merged += 1;
        Ok(())
    }

    /// `θ_base + α τ`.
    pub fn apply_merge(&self) -> ParamVector<S> {
        let a = S::of(self.alpha);
        let values = self
            .base
            .values()
            .iter()
            .zip(&self.accumulator)
            .map(|(&b, &t)| b + a * t)
            .collect();
        self.base
            .with_values(values)
            .expect("accumulator matches base")
    }

    /// Snapshot: magic `FMRG`, version u32 = 1, operator u8, α f64,
    /// merged u64, accumulator (u64 length + f64 values), base parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(b"FMRG");
        w.u32(1);
        w.u8(self.operator.code());
        w.f64(self.alpha);
        w.u64(self.merged as u64);
        w.u64(self.accumulator.len() as u64);
        w.f64s(self.accumulator.iter().map(|v| v.as_f64()));
        write_params(&mut w, &self.base);
        w.out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader::new(bytes);
        r.magic(b"FMRG")?;
        r.version(1)?;
        let at = r.pos() as u64;
        let operator = MergeOperator::from_code(r.u8("operator")?).ok_or(Error::Format {
            offset: at,
            message: "unknown merge operator code".into(),
        })?;
        let alpha = r.f64("alpha")?;
        let merged = r.u64("merged count")? as usize;
        let n = r.u64("accumulator length")? as usize;
        let accumulator = r
            .f64s(n, "accumulator")?
            .into_iter()
            .map(S::of)
            .collect::<Vec<_>>();
        let base = read_params::<S>(&mut r)?;
        if base.len() != n {
            return Err(Error::shape("merge snapshot base", n, base.len()));
        }
        Ok((
            Self {
                accumulator,
                operator,
                alpha,
                base,
                merged,
            },
            r.pos(),
        ))
    }
}

/// Select over the whole list at once: per coordinate, the latest vector
/// whose value is best under `operator`.
pub fn batch_merge_oracle<S: Scalar>(
    vectors: &[TaskVector<S>],
    operator: MergeOperator,
) -> Result<Vec<S>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Argument("batch merge needs at least one vector".into()))?;
    let d = first.delta.len();
    if let Some(v) = vectors.iter().find(|v| v.delta.len() != d) {
        return Err(Error::shape(
            format!("task vector {}", v.task),
            d,
            v.delta.len(),
        ));
    }
    let mut out = Vec::with_capacity(d);
    for k in 0..d {
        let column = vectors.iter().map(|v| v.delta[k]);
        let best = match operator {
            MergeOperator::MaxAbs => column.map(|v| v.abs()).fold(S::zero(), S::max),
            MergeOperator::Max => column.fold(S::neg_infinity(), S::max),
            MergeOperator::Min => column.fold(S::infinity(), S::min),
        };
        let winner = vectors
            .iter()
            .rev()
            .map(|v| v.delta[k])
            .find(|&v| match operator {
                MergeOperator::MaxAbs => v.abs() == best,
                _ => v == best,
            })
            .expect("best value comes from the column");
        out.push(winner);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn pv(values: Vec<f64>) -> ParamVector<f64> {
        let n = values.len();
        ParamVector::flatten(vec![("w".into(), vec![n], values)]).unwrap()
    }

    fn tv(delta: Vec<f64>, task: usize) -> TaskVector<f64> {
        TaskVector { delta, task }
    }

    #[test]
    fn task_vector_subtracts() {
        let t = task_vector(&pv(vec![1.5, -0.5]), &pv(vec![1.0, 0.0]), 1).unwrap();
        assert_eq!(t.delta, vec![0.5, -0.5]);
        let z = task_vector(&pv(vec![3.0, 4.0]), &pv(vec![3.0, 4.0]), 1).unwrap();
        assert!(z.delta.iter().all(|&v| v == 0.0));
        assert!(task_vector(&pv(vec![1.0]), &pv(vec![1.0, 2.0]), 0).is_err());
    }

    #[test]
    fn task_vector_matches_elementwise_loop() {
        let mut rng = RngStream::new(2, 0);
        let a: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let t = task_vector(&pv(a.clone()), &pv(b.clone()), 0).unwrap();
        for k in 0..100 {
            assert_eq!(t.delta[k], a[k] - b[k]);
        }
    }

    #[test]
    fn max_abs_rule() {
        let mut s = MergeState::new(pv(vec![0.0, 0.0]), MergeOperator::MaxAbs, 1.0).unwrap();
        s.merge_step(&tv(vec![0.5, -0.2], 1)).unwrap();
        s.merge_step(&tv(vec![-0.7, 0.1], 2)).unwrap();
        assert_eq!(s.accumulator(), &[-0.7, -0.2]);
        s.merge_step(&tv(vec![0.0, 0.0], 3)).unwrap();
        assert_eq!(s.accumulator(), &[-0.7, -0.2]);
    }

    #[test]
    fn ties_take_the_current_task() {
        let mut s = MergeState::new(pv(vec![0.0]), MergeOperator::MaxAbs, 1.0).unwrap();
        s.merge_step(&tv(vec![0.5], 1)).unwrap();
        s.merge_step(&tv(vec![-0.5], 2)).unwrap();
        assert_eq!(s.accumulator(), &[-0.5]);
        assert_eq!(
            batch_merge_oracle(
                &[tv(vec![0.5], 1), tv(vec![-0.5], 2)],
                MergeOperator::MaxAbs
            )
            .unwrap(),
            vec![-0.5]
        );
    }

    #[test]
    fn signed_operators() {
        let vs = [tv(vec![0.5, -0.2], 1), tv(vec![-0.7, 0.1], 2)];
        assert_eq!(
            batch_merge_oracle(&vs, MergeOperator::Max).unwrap(),
            vec![0.5, 0.1]
        );
        assert_eq!(
            batch_merge_oracle(&vs, MergeOperator::Min).unwrap(),
            vec![-0.7, -0.2]
        );
        let mut s = MergeState::new(pv(vec![0.0, 0.0]), MergeOperator::Max, 1.0).unwrap();
        s.merge_step(&vs[0]).unwrap();
        s.merge_step(&vs[1]).unwrap();
        assert_eq!(s.accumulator(), &[0.5, 0.1]);
    }

    #[test]
    fn single_vector_oracle_is_identity() {
        let v = tv(vec![1.0, -2.0, 0.0], 0);
        for op in MergeOperator::ALL {
            assert_eq!(
                batch_merge_oracle(std::slice::from_ref(&v), op).unwrap(),
                v.delta
            );
        }
        assert!(batch_merge_oracle::<f64>(&[], MergeOperator::Max).is_err());
    }

    #[test]
    fn apply_merge_cases() {
        let base = pv(vec![1.0, -2.0]);
        let mut s = MergeState::new(base.clone(), MergeOperator::MaxAbs, 0.0).unwrap();
        s.merge_step(&tv(vec![3.0, 3.0], 1)).unwrap();
        assert_eq!(s.apply_merge(), base);
        let s = MergeState::new(base.clone(), MergeOperator::MaxAbs, 1.0).unwrap();
        assert_eq!(s.apply_merge(), base);
        assert!(MergeState::new(base, MergeOperator::Max, f64::NAN).is_err());
    }

    #[test]
    fn unknown_operator_lists_allowed() {
        let err = "ties".parse::<MergeOperator>().unwrap_err();
        assert!(err.to_string().contains("min, max, max_abs"));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = MergeState::new(pv(vec![0.25, 1.0, -3.0]), MergeOperator::Min, 0.7).unwrap();
        s.merge_step(&tv(vec![0.1, 0.2, -0.3], 1)).unwrap();
        let bytes = s.to_bytes();
        let (back, used) = MergeState::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, s);
    }

    fn random_vectors(seed: u64, count: usize, d: usize) -> Vec<TaskVector<f64>> {
        let mut rng = RngStream::new(seed, 0);
        (0..count)
            .map(|t| {
                // coarse grid so that magnitude ties actually happen
                let delta = (0..d)
                    .map(|_| ((rng.normal() * 4.0).round()) / 4.0)
                    .collect();
                tv(delta, t)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn sequential_fold_equals_oracle(seed in any::<u64>(), count in 1usize..20, d in 1usize..300) {
            let vs = random_vectors(seed, count, d);
            for op in MergeOperator::ALL {
                let mut s = MergeState::new(pv(vec![0.0; d]), op, 1.0).unwrap();
                for v in &vs {
                    s.merge_step(v).unwrap();
                }
                let oracle = batch_merge_oracle(&vs, op).unwrap();
                for (a, b) in s.accumulator().iter().zip(&oracle) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }

        #[test]
        fn max_abs_magnitude_never_shrinks(seed in any::<u64>(), count in 1usize..15, d in 1usize..100) {
            let vs = random_vectors(seed, count, d);
            let mut s = MergeState::new(pv(vec![0.0; d]), MergeOperator::MaxAbs, 1.0).unwrap();
            let mut prev = vec![0.0f64; d];
            for v in &vs {
                s.merge_step(v).unwrap();
                for (p, a) in prev.iter().zip(s.accumulator()) {
                    prop_assert!(a.abs() >= p.abs());
                }
                prev = s.accumulator().to_vec();
                let before = s.accumulator().to_vec();
                s.merge_step(&tv(before.clone(), 99)).unwrap();
                prop_assert_eq!(s.accumulator(), &before[..]);
            }
        }

        #[test]
        fn apply_merge_is_linear_in_alpha(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let vs = random_vectors(seed, 3, 20);
            let mut rng = RngStream::new(seed, 1);
            let base = pv((0..20).map(|_| rng.normal()).collect());
            let mut one = MergeState::new(base.clone(), MergeOperator::MaxAbs, 1.0).unwrap();
            let mut scaled = MergeState::new(base.clone(), MergeOperator::MaxAbs, alpha).unwrap();
            for v in &vs {
                one.merge_step(v).unwrap();
                scaled.merge_step(v).unwrap();
            }
            let r1 = one.apply_merge();
            let ra = scaled.apply_merge();
            for k in 0..20 {
                let lhs = ra.values()[k] - base.values()[k];
                let rhs = alpha * (r1.values()[k] - base.values()[k]);
                prop_assert!((lhs - rhs).abs() <= 1e-14 * (1.0 + base.values()[k].abs() + r1.values()[k].abs()) * (1.0 + alpha.abs()));
            }
        }
    }
}
