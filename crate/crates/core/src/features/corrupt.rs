//! Feature-space corruptions (five kinds × five severities) and sequential
//! perturbation walks.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    UniformNoise,
    FeatureDropout,
    ScaleShift,
    InterpolationBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::UniformNoise,
        CorruptionKind::FeatureDropout,
        CorruptionKind::ScaleShift,
        CorruptionKind::InterpolationBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::UniformNoise => "uniform_noise",
            CorruptionKind::FeatureDropout => "feature_dropout",
            CorruptionKind::ScaleShift => "scale_shift",
            CorruptionKind::InterpolationBlur => "interpolation_blur",
        }
    }

    /// Severity 1..=5 magnitudes.
    ///
    /// * noise kinds: per-coordinate standard deviation
    /// * dropout: probability of zeroing a coordinate
    /// * scale_shift: std of the per-row gain and of the per-row offset
    /// * interpolation_blur: weight of the 3-tap circular blur
    pub fn default_magnitudes(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise | CorruptionKind::UniformNoise => {
                [0.1, 0.2, 0.4, 0.8, 1.6]
            }
            CorruptionKind::FeatureDropout => [0.05, 0.1, 0.2, 0.3, 0.5],
            CorruptionKind::ScaleShift => [0.05, 0.1, 0.2, 0.4, 0.8],
            CorruptionKind::InterpolationBlur => [0.1, 0.2, 0.4, 0.6, 0.8],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = CorruptionKind::ALL.iter().map(|k| k.name()).collect();
                Error::Argument(format!(
                    "unknown corruption kind '{s}'; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// One corruption at one severity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub magnitudes: [f64; 5],
}

impl CorruptionSpec {
    /// Default magnitude table for `kind`.
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        Self::with_magnitudes(kind, severity, kind.default_magnitudes())
    }

    /// Custom table. Must be finite, non-negative and non-decreasing; an
    /// all-zero table gives the identity suite used as a clean baseline.
    pub fn with_magnitudes(
        kind: CorruptionKind,
        severity: u8,
        magnitudes: [f64; 5],
    ) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Argument(format!(
                "severity {severity} outside 1..=5"
            )));
        }
        if magnitudes.iter().any(|m| !m.is_finite() || *m < 0.0)
            || magnitudes.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::Argument(format!(
                "magnitude table for {kind} must be non-negative and non-decreasing"
            )));
        }
        if kind == CorruptionKind::FeatureDropout && magnitudes[4] > 1.0 {
            return Err(Error::Argument("dropout probabilities must be <= 1".into()));
        }
        Ok(Self {
            kind,
            severity,
            magnitudes,
        })
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitudes[self.severity as usize - 1]
    }
}

/// Apply a corruption row by row, drawing from a stream keyed by `seed` and
/// the corruption kind and severity.
pub fn corrupt(features: ArrayView2<'_, f64>, spec: &CorruptionSpec, seed: u64) -> Array2<f64> {
    let mut rng = RngStream::derive(seed, &[0xc044, spec.kind as u64, spec.severity as u64]);
    let m = spec.magnitude();
    let mut out = features.to_owned();
    let dim = out.ncols();
    for mut row in out.rows_mut() {
        match spec.kind {
            CorruptionKind::GaussianNoise => row.iter_mut().for_each(|v| *v += m * rng.normal()),
            CorruptionKind::UniformNoise => {
                let half = m * 3f64.sqrt();
                row.iter_mut()
                    .for_each(|v| *v += half * (2.0 * rng.uniform() - 1.0));
            }
            CorruptionKind::FeatureDropout => row.iter_mut().for_each(|v| {
                if rng.uniform() < m {
                    *v = 0.0;
                }
            }),
            CorruptionKind::ScaleShift => {
                let gain = 1.0 + m * rng.normal();
                let offset = m * rng.normal();
                row.mapv_inplace(|v| gain * v + offset);
            }
            CorruptionKind::InterpolationBlur => {
                if m > 0.0 && dim > 1 {
                    let orig: Array1<f64> = row.to_owned();
                    for j in 0..dim {
                        let blur =
                            (orig[(j + dim - 1) % dim] + orig[j] + orig[(j + 1) % dim]) / 3.0;
                        row[j] = (1.0 - m) * orig[j] + m * blur;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PerturbationKind {
    /// isotropic Gaussian increments
    GaussianWalk,
    /// one common offset per row and step
    ShiftWalk,
    /// multiplicative gain drift per row and step
    ScaleWalk,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [
        PerturbationKind::GaussianWalk,
        PerturbationKind::ShiftWalk,
        PerturbationKind::ScaleWalk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::GaussianWalk => "gaussian_walk",
            PerturbationKind::ShiftWalk => "shift_walk",
            PerturbationKind::ScaleWalk => "scale_walk",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A sequential noise walk: `steps` perturbed copies, each derived from the
/// previous one with per-step scale `step_sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub steps: usize,
    pub step_sigma: f64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind) -> Self {
        Self {
            kind,
            steps: 10,
            step_sigma: 0.05,
        }
    }
}

/// The `steps` successive states of the walk starting from `features`.
pub fn perturb_walk(
    features: ArrayView2<'_, f64>,
    spec: &PerturbationSpec,
    seed: u64,
) -> Vec<Array2<f64>> {
    let mut rng = RngStream::derive(seed, &[0x9e47, spec.kind as u64]);
    let s = spec.step_sigma;
    let mut cur = features.to_owned();
    let mut out = Vec::with_capacity(spec.steps);
    for _ in 0..spec.steps {
        for mut row in cur.rows_mut() {
            match spec.kind {
                PerturbationKind::GaussianWalk => {
                    row.iter_mut().for_each(|v| *v += s * rng.normal())
                }
                PerturbationKind::ShiftWalk => {
                    let off = s * rng.normal();
                    row.mapv_inplace(|v| v + off);
                }
                PerturbationKind::ScaleWalk => {
                    let gain = 1.0 + s * rng.normal();
                    row.mapv_inplace(|v| v * gain);
                }
            }
        }
        out.push(cur.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_perturbation(kind: CorruptionKind, severity: u8, rows: usize, dim: usize) -> f64 {
        let x = Array2::<f64>::ones((rows, dim));
        let y = corrupt(x.view(), &CorruptionSpec::new(kind, severity).unwrap(), 17);
        (&y - &x)
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .sum::<f64>()
            / rows as f64
    }

    #[test]
    fn gaussian_noise_norm_scales_with_sigma() {
        let dim = 64;
        for (s, sigma) in [0.1, 0.2, 0.4, 0.8, 1.6].into_iter().enumerate() {
            let got = mean_perturbation(CorruptionKind::GaussianNoise, s as u8 + 1, 2000, dim);
            let expected = sigma * (dim as f64).sqrt();
            assert!(
                (got / expected - 1.0).abs() < 0.03,
                "severity {} got {got} expected {expected}",
                s + 1
            );
        }
    }

    #[test]
    fn noise_is_monotone_in_severity() {
        for kind in [CorruptionKind::GaussianNoise, CorruptionKind::UniformNoise] {
            let norms: Vec<f64> = (1..=5)
                .map(|s| mean_perturbation(kind, s, 1000, 16))
                .collect();
            assert!(norms.windows(2).all(|w| w[1] > w[0]), "{kind}: {norms:?}");
        }
    }

    #[test]
    fn dropout_frequency() {
        let x = Array2::<f64>::ones((2000, 50));
        let y = corrupt(
            x.view(),
            &CorruptionSpec::new(CorruptionKind::FeatureDropout, 1).unwrap(),
            5,
        );
        let frac = y.iter().filter(|&&v| v == 0.0).count() as f64 / y.len() as f64;
        assert!((frac - 0.05).abs() < 0.005, "{frac}");
    }

    #[test]
    fn zero_table_is_identity() {
        let x = Array2::from_shape_fn((20, 7), |(i, j)| (i * 7 + j) as f64 * 0.3 - 4.0);
        for kind in CorruptionKind::ALL {
            for s in 1..=5 {
                let spec = CorruptionSpec::with_magnitudes(kind, s, [0.0; 5]).unwrap();
                assert_eq!(corrupt(x.view(), &spec, 1), x, "{kind} severity {s}");
            }
        }
    }

    #[test]
    fn default_tables_strictly_increase() {
        for kind in CorruptionKind::ALL {
            assert!(kind.default_magnitudes().windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn unknown_kind_is_argument_error() {
        assert!(matches!(
            "fog".parse::<CorruptionKind>(),
            Err(Error::Argument(_))
        ));
        assert_eq!(
            "scale_shift".parse::<CorruptionKind>().unwrap(),
            CorruptionKind::ScaleShift
        );
        assert!(CorruptionSpec::new(CorruptionKind::ScaleShift, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::ScaleShift, 6).is_err());
    }

    #[test]
    fn walk_has_requested_steps_and_drifts() {
        let x = Array2::<f64>::zeros((500, 8));
        let walk = perturb_walk(
            x.view(),
            &PerturbationSpec::new(PerturbationKind::GaussianWalk),
            2,
        );
        assert_eq!(walk.len(), 10);
        let spread = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64;
        // variance after k steps is k * 0.05^2
        assert!((spread(&walk[9]) / (10.0 * 0.0025) - 1.0).abs() < 0.1);
        assert!(spread(&walk[9]) > spread(&walk[0]));
    }
}
