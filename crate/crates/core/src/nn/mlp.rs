use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::params::ParamVector;
use crate::scalar::Scalar;

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        }
    }
}

/// Shape of a fully connected network.
///
/// `widths` lists the input width followed by every layer's output width, so
/// `[32, 4]` is a single linear layer from 32 features to 4 logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub bias: Vec<bool>,
}

impl MlpSpec {
    pub fn linear(input: usize, output: usize) -> Self {
        Self {
            widths: vec![input, output],
            activation: Activation::Identity,
            bias: vec![true],
        }
    }

    pub fn new(widths: Vec<usize>, activation: Activation, bias: Vec<bool>) -> Result<Self> {
        let spec = Self {
            widths,
            activation,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Argument("an MLP needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Argument("MLP widths must be positive".into()));
        }
        if self.bias.len() != self.layers() {
            return Err(Error::shape(
                "MLP bias flags",
                self.layers(),
                self.bias.len(),
            ));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Named tensor shapes in flat-vector order: `l{i}.weight` `[out, in]`
    /// then `l{i}.bias` `[out]` when enabled.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in 0..self.layers() {
            out.push((
                format!("l{l}.weight"),
                vec![self.widths[l + 1], self.widths[l]],
            ));
            if self.bias[l] {
                out.push((format!("l{l}.bias"), vec![self.widths[l + 1]]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// An MLP together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S> {
    pub spec: MlpSpec,
    pub params: ParamVector<S>,
}

/// Per-layer inputs and pre-activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<S> {
    inputs: Vec<Array2<S>>,
    pre: Vec<Array2<S>>,
}

impl<S: Scalar> Mlp<S> {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = ParamVector::zeros(&spec.shapes());
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: ParamVector<S>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::shape(
                "MLP parameters",
                spec.param_count(),
                params.len(),
            ));
        }
        Ok(Self { spec, params })
    }

    /// Weight and optional bias entry indices for layer `l`.
    fn entries(&self, l: usize) -> (usize, Option<usize>) {
        let mut idx = 0;
        for k in 0..l {
            idx += 1 + self.spec.bias[k] as usize;
        }
        (idx, self.spec.bias[l].then_some(idx + 1))
    }

    pub fn forward(&self, batch: ArrayView2<'_, S>) -> Result<Array2<S>> {
        Ok(self.forward_cached(batch)?.0)
    }

    pub fn forward_cached(&self, batch: ArrayView2<'_, S>) -> Result<(Array2<S>, MlpCache<S>)> {
        if batch.ncols() != self.spec.input_width() {
            return Err(Error::shape(
                "MLP layer 0 input",
                self.spec.input_width(),
                batch.ncols(),
            ));
        }
        let layers = self.spec.layers();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers),
        };
        let mut x = batch.to_owned();
        for l in 0..layers {
            let (w, b) = self.entries(l);
            let mut z = x.dot(&self.params.matrix(w).t());
            if let Some(b) = b {
                z += &self.params.vector(b);
            }
            cache.inputs.push(x);
            x = if l + 1 < layers && self.spec.activation == Activation::Relu {
                z.mapv(|v| if v > S::zero() { v } else { S::zero() })
            } else {
                z.clone()
            };
            cache.pre.push(z);
        }
        Ok((x, cache))
    }

    /// Backpropagate `grad_out` (d loss / d output). Returns the gradient with
    /// respect to the flat parameters and with respect to the input batch.
    pub fn backward(
        &self,
        cache: &MlpCache<S>,
        grad_out: ArrayView2<'_, S>,
    ) -> Result<(Vec<S>, Array2<S>)> {
        let layers = self.spec.layers();
        let rows = cache.inputs[0].nrows();
        if grad_out.dim() != (rows, self.spec.output_width()) {
            return Err(Error::shape(
                format!("MLP layer {} output gradient", layers - 1),
                rows * self.spec.output_width(),
                grad_out.len(),
            ));
        }
        let mut grad = vec![S::zero(); self.params.len()];
        let mut delta = grad_out.to_owned();
        for l in (0..layers).rev() {
            if l + 1 < layers && self.spec.activation == Activation::Relu {
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[l])
                    .for_each(|d, &z| {
                        if z <= S::zero() {
                            *d = S::zero();
                        }
                    });
            }
            let (w, b) = self.entries(l);
            let dw = delta.t().dot(&cache.inputs[l]);
            let we = &self.params.layout()[w];
            grad[we.offset..we.offset + we.len()]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(g, v)| *g = *v);
            if let Some(b) = b {
                let db: Array1<S> = delta.sum_axis(Axis(0));
                let be = &self.params.layout()[b];
                grad[be.offset..be.offset + be.len()]
                    .iter_mut()
                    .zip(db.iter())
                    .for_each(|(g, v)| *g = *v);
            }
            delta = delta.dot(&self.params.matrix(w));
        }
        Ok((grad, delta))
    }
}

/// Stateless forward pass over `(params, spec)`.
pub fn forward<S: Scalar>(
    params: &ParamVector<S>,
    spec: &MlpSpec,
    batch: ArrayView2<'_, S>,
) -> Result<Array2<S>> {
    let mlp = Mlp::from_params(spec.clone(), params.clone())?;
    mlp.forward(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_layer_returns_batch() {
        let spec = MlpSpec::linear(3, 3);
        let mut mlp = Mlp::<f64>::zeros(spec).unwrap();
        for i in 0..3 {
            mlp.params.values_mut()[i * 3 + i] = 1.0;
        }
        let b = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        assert_eq!(mlp.forward(b.view()).unwrap(), b);
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let spec = MlpSpec::new(vec![4, 5, 3], Activation::Relu, vec![true, true]).unwrap();
        let mlp = Mlp::<f64>::zeros(spec).unwrap();
        let b = array![[1.0, 2.0, 3.0, 4.0]];
        assert!(mlp.forward(b.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_relu_hand_values() {
        // W1 = [[1, -1], [2, 1]], b1 = [0, -1]; W2 = [[1, 2]], b2 = [0.5]
        // x = [1, 2]: z1 = [-1, 3] -> relu [0, 3] -> 0 + 6 + 0.5 = 6.5
        // x = [3, 1]: z1 = [2, 6] -> [2, 6] -> 2 + 12 + 0.5 = 14.5
        let spec = MlpSpec::new(vec![2, 2, 1], Activation::Relu, vec![true, true]).unwrap();
        let params = ParamVector::new(
            vec![1.0, -1.0, 2.0, 1.0, 0.0, -1.0, 1.0, 2.0, 0.5],
            ParamVector::<f64>::zeros(&spec.shapes()).layout().to_vec(),
        )
        .unwrap();
        let out = forward(&params, &spec, array![[1.0, 2.0], [3.0, 1.0]].view()).unwrap();
        assert_eq!(out, array![[6.5], [14.5]]);
    }

    #[test]
    fn input_width_mismatch_names_layer() {
        let mlp = Mlp::<f64>::zeros(MlpSpec::linear(3, 2)).unwrap();
        let err = mlp.forward(array![[1.0, 2.0]].view()).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn works_in_f32() {
        let mut mlp = Mlp::<f32>::zeros(MlpSpec::linear(2, 1)).unwrap();
        mlp.params.values_mut().copy_from_slice(&[2.0, 3.0, 1.0]);
        let out = mlp.forward(array![[1.0f32, 1.0]].view()).unwrap();
        assert_eq!(out[[0, 0]], 6.0);
    }
}
