use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpCache, MlpSpec, ParamVector};
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    /// `x + s (W x + b)`
    ResidualLinear,
    /// `x + s (W₂ relu(W₁ x + b₁) + b₂)`
    ResidualMlp,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::ResidualLinear => "residual_linear",
            AdapterKind::ResidualMlp => "residual_mlp",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual_linear" => Ok(AdapterKind::ResidualLinear),
            "residual_mlp" => Ok(AdapterKind::ResidualMlp),
            other => Err(Error::Argument(format!(
                "unknown adapter kind '{other}'; allowed: residual_linear, residual_mlp"
            ))),
        }
    }
}

/// Trainable residual adapter on top of the frozen feature transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub dim: usize,
    /// hidden width of `residual_mlp`; ignored for `residual_linear`
    pub hidden: usize,
    pub scale: f64,
    /// std of the Gaussian init of the first `residual_mlp` layer
    pub init_std: f64,
}

impl AdapterSpec {
    pub fn mlp_spec(&self) -> MlpSpec {
        match self.kind {
            AdapterKind::ResidualLinear => MlpSpec::linear(self.dim, self.dim),
            AdapterKind::ResidualMlp => MlpSpec {
                widths: vec![self.dim, self.hidden, self.dim],
                activation: Activation::Relu,
                bias: vec![true, true],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || (self.kind == AdapterKind::ResidualMlp && self.hidden == 0) {
            return Err(Error::Argument("adapter widths must be positive".into()));
        }
        if !self.scale.is_finite() || !self.init_std.is_finite() || self.init_std < 0.0 {
            return Err(Error::Argument(
                "adapter scale and init_std must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Adapter parameters with their spec. Output is always `x + scale · f(x)`;
/// the last layer of `f` starts at zero so a fresh adapter is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<S> {
    pub spec: AdapterSpec,
    pub net: Mlp<S>,
}

impl<S: Scalar> Adapter<S> {
    pub fn init(spec: AdapterSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut net = Mlp::zeros(spec.mlp_spec())?;
        if spec.kind == AdapterKind::ResidualMlp {
            let first = net.params.layout()[0].clone();
            for v in &mut net.params.values_mut()[first.offset..first.offset + first.len()] {
                *v = S::of(spec.init_std * rng.normal());
            }
        }
        Ok(Self { spec, net })
    }

    pub fn with_params(spec: AdapterSpec, params: ParamVector<S>) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            net: Mlp::from_params(spec.mlp_spec(), params)?,
        })
    }

    pub fn params(&self) -> &ParamVector<S> {
        &self.net.params
    }

    pub fn forward(&self, x: ArrayView2<'_, S>) -> Result<Array2<S>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, S>) -> Result<(Array2<S>, MlpCache<S>)> {
        let (f, cache) = self.net.forward_cached(x)?;
        let s = S::of(self.spec.scale);
        Ok((&x + &f.mapv(|v| s * v), cache))
    }

    /// Parameter gradient given d loss / d output.
    pub fn backward(&self, cache: &MlpCache<S>, grad_out: ArrayView2<'_, S>) -> Result<Vec<S>> {
        let s = S::of(self.spec.scale);
        let scaled = grad_out.mapv(|v| s * v);
        Ok(self.net.backward(cache, scaled.view())?.0)
    }
}
