use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpCache, MlpSpec};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Per-task heads whose logits are concatenated in task order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveClassifier<S> {
    heads: Vec<Mlp<S>>,
    /// global class id of every logit column
    columns: Vec<u32>,
    /// first column of each head
    offsets: Vec<usize>,
    column_of: HashMap<u32, usize>,
}

impl<S: Scalar> Default for ProgressiveClassifier<S> {
    fn default() -> Self {
        Self {
            heads: Vec::new(),
            columns: Vec::new(),
            offsets: Vec::new(),
            column_of: HashMap::new(),
        }
    }
}

impl<S: Scalar> ProgressiveClassifier<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh head for `classes`. Hidden layers get a Gaussian init scaled by
    /// fan-in; the output layer starts at zero.
    pub fn init_head(
        dim: usize,
        hidden: &[usize],
        classes: usize,
        rng: &mut RngStream,
    ) -> Result<Mlp<S>> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let layers = widths.len() - 1;
        let spec = MlpSpec::new(
            widths.clone(),
            crate::nn::Activation::Relu,
            vec![true; layers],
        )?;
        let mut head = Mlp::zeros(spec)?;
        for (l, &fan_in) in widths.iter().enumerate().take(layers.saturating_sub(1)) {
            let entry = head
                .params
                .find(&format!("l{l}.weight"))
                .expect("weight entry");
            let e = head.params.layout()[entry].clone();
            let std = (2.0 / fan_in as f64).sqrt();
            for v in &mut head.params.values_mut()[e.offset..e.offset + e.len()] {
                *v = S::of(std * rng.normal());
            }
        }
        Ok(head)
    }

    /// Append a head whose outputs are `classes`, in order.
    pub fn push_head(&mut self, head: Mlp<S>, classes: &[u32]) -> Result<()> {
        if head.spec.output_width() != classes.len() {
            return Err(Error::shape(
                "head output width",
                classes.len(),
                head.spec.output_width(),
            ));
        }
        if let Some(first) = self.heads.first() {
            if first.spec.input_width() != head.spec.input_width() {
                return Err(Error::shape(
                    "head input width",
                    first.spec.input_width(),
                    head.spec.input_width(),
                ));
            }
        }
        for &c in classes {
            if self.column_of.contains_key(&c) {
                return Err(Error::Validation(format!("class {c} already has a head")));
            }
        }
        self.offsets.push(self.columns.len());
        for &c in classes {
            self.column_of.insert(c, self.columns.len());
            self.columns.push(c);
        }
        self.heads.push(head);
        Ok(())
    }

    pub fn heads(&self) -> &[Mlp<S>] {
        &self.heads
    }

    pub fn head_mut(&mut self, i: usize) -> &mut Mlp<S> {
        &mut self.heads[i]
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[u32] {
        &self.columns
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Global class ids served by head `i`.
    pub fn head_classes(&self, i: usize) -> &[u32] {
        let end = self
            .offsets
            .get(i + 1)
            .copied()
            .unwrap_or(self.columns.len());
        &self.columns[self.offsets[i]..end]
    }

    pub fn column_of(&self, class: u32) -> Option<usize> {
        self.column_of.get(&class).copied()
    }

    /// Map global labels to logit columns.
    pub fn columns_for(&self, labels: &[u32]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&c| {
                self.column_of(c)
                    .ok_or_else(|| Error::State(format!("class {c} has no classifier head")))
            })
            .collect()
    }

    pub fn forward(&self, features: ArrayView2<'_, S>) -> Result<Array2<S>> {
        Ok(self.forward_cached(features)?.0)
    }

    /// Concatenated logits plus each head's cache.
    pub fn forward_cached(
        &self,
        features: ArrayView2<'_, S>,
    ) -> Result<(Array2<S>, Vec<MlpCache<S>>)> {
        if self.heads.is_empty() {
            return Err(Error::State("classifier has no heads".into()));
        }
        let mut logits = Array2::<S>::zeros((features.nrows(), self.width()));
        let mut caches = Vec::with_capacity(self.heads.len());
        for (i, head) in self.heads.iter().enumerate() {
            let (out, cache) = head.forward_cached(features)?;
            let start = self.offsets[i];
            logits
                .slice_mut(s![.., start..start + out.ncols()])
                .assign(&out);
            caches.push(cache);
        }
        Ok((logits, caches))
    }

    /// Per-head parameter gradients from d loss / d concatenated logits.
    pub fn backward(
        &self,
        caches: &[MlpCache<S>],
        grad_logits: ArrayView2<'_, S>,
    ) -> Result<Vec<Vec<S>>> {
        self.heads
            .iter()
            .enumerate()
            .map(|(i, head)| {
                let start = self.offsets[i];
                let cols = grad_logits.slice(s![.., start..start + head.spec.output_width()]);
                Ok(head.backward(&caches[i], cols)?.0)
            })
            .collect()
    }

    /// Arg-max over the full concatenated width, mapped to global class ids.
    pub fn predict(&self, logits: ArrayView2<'_, S>) -> Vec<u32> {
        logits
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                self.columns[best]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear_head(weights: Vec<f64>, bias: Vec<f64>, dim: usize) -> Mlp<f64> {
        let out = bias.len();
        let mut values = weights;
        values.extend(bias);
        let spec = MlpSpec::linear(dim, out);
        let template = crate::nn::ParamVector::<f64>::zeros(&spec.shapes());
        Mlp::from_params(
            spec,
            crate::nn::ParamVector::new(values, template.layout().to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn single_head_is_passthrough() {
        let head = linear_head(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0.0, 0.5, -0.5], 2);
        let mut clf = ProgressiveClassifier::new();
        clf.push_head(head.clone(), &[7, 8, 9]).unwrap();
        let x = array![[1.0, 2.0], [-1.0, 0.5]];
        assert_eq!(
            clf.forward(x.view()).unwrap(),
            head.forward(x.view()).unwrap()
        );
    }

    #[test]
    fn offsets_and_global_ids() {
        let mut clf = ProgressiveClassifier::<f64>::new();
        clf.push_head(Mlp::zeros(MlpSpec::linear(2, 3)).unwrap(), &[0, 1, 2])
            .unwrap();
        clf.push_head(Mlp::zeros(MlpSpec::linear(2, 2)).unwrap(), &[3, 4])
            .unwrap();
        assert_eq!(clf.width(), 5);
        assert_eq!(clf.offsets(), &[0, 3]);
        assert_eq!(clf.columns()[clf.offsets()[1] + 1], 4);
        assert_eq!(clf.head_classes(1), &[3, 4]);
        assert!(clf
            .push_head(Mlp::zeros(MlpSpec::linear(2, 1)).unwrap(), &[4])
            .is_err());
    }

    #[test]
    fn second_head_can_win() {
        // head 1 scores x0 for class 0 and 0 for class 1; head 2 scores 2 x1 for class 2
        let h1 = linear_head(vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0], 2);
        let h2 = linear_head(vec![0.0, 2.0], vec![0.0], 2);
        let mut clf = ProgressiveClassifier::new();
        clf.push_head(h1, &[0, 1]).unwrap();
        clf.push_head(h2, &[2]).unwrap();
        let x = array![[1.0, 1.0], [3.0, 1.0]];
        let logits = clf.forward(x.view()).unwrap();
        assert_eq!(logits, array![[1.0, 0.0, 2.0], [3.0, 0.0, 2.0]]);
        assert_eq!(clf.predict(logits.view()), vec![2, 0]);
    }
}
