use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One named tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter storage plus the layout mapping it onto named tensors.
///
/// Entries are contiguous and ordered by offset, so the vector can be merged
/// coordinate-wise without knowing what the tensors mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<S> {
    values: Vec<S>,
    layout: Vec<LayoutEntry>,
}

impl<S: Scalar> ParamVector<S> {
    pub fn new(values: Vec<S>, layout: Vec<LayoutEntry>) -> Result<Self> {
        let mut next = 0usize;
        for e in &layout {
            if e.offset != next {
                return Err(Error::Validation(format!(
                    "layout entry '{}' starts at {} but previous entry ended at {}",
                    e.name, e.offset, next
                )));
            }
            next += e.len();
        }
        if next != values.len() {
            return Err(Error::shape("parameter layout extent", values.len(), next));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(shapes: &[(String, Vec<usize>)]) -> Self {
        let mut layout = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, shape) in shapes {
            let e = LayoutEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += e.len();
            layout.push(e);
        }
        Self {
            values: vec![S::zero(); offset],
            layout,
        }
    }

    /// Concatenate named tensors into one flat vector.
    pub fn flatten(tensors: Vec<(String, Vec<usize>, Vec<S>)>) -> Result<Self> {
        let mut values = Vec::new();
        let mut layout = Vec::with_capacity(tensors.len());
        for (name, shape, data) in tensors {
            let expected: usize = shape.iter().product();
            if data.len() != expected {
                return Err(Error::shape(
                    format!("tensor '{name}'"),
                    expected,
                    data.len(),
                ));
            }
            layout.push(LayoutEntry {
                name,
                shape,
                offset: values.len(),
            });
            values.extend(data);
        }
        Ok(Self { values, layout })
    }

    /// Split back into named tensors (inverse of [`ParamVector::flatten`]).
    pub fn unflatten(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        self.layout
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    e.shape.clone(),
                    self.values[e.offset..e.offset + e.len()].to_vec(),
                )
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    /// Replace the values, keeping the layout.
    pub fn with_values(&self, values: Vec<S>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape(
                "parameter vector",
                self.values.len(),
                values.len(),
            ));
        }
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn slice(&self, entry: usize) -> &[S] {
        let e = &self.layout[entry];
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn matrix(&self, entry: usize) -> ArrayView2<'_, S> {
        let e = &self.layout[entry];
        debug_assert_eq!(e.shape.len(), 2);
        ArrayView2::from_shape((e.shape[0], e.shape[1]), self.slice(entry))
            .expect("layout shape matches extent")
    }

    pub fn vector(&self, entry: usize) -> ArrayView1<'_, S> {
        ArrayView1::from(self.slice(entry))
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|e| e.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_gapped_layout() {
        let layout = vec![
            LayoutEntry {
                name: "a".into(),
                shape: vec![2],
                offset: 0,
            },
            LayoutEntry {
                name: "b".into(),
                shape: vec![2],
                offset: 3,
            },
        ];
        assert!(ParamVector::<f64>::new(vec![0.0; 5], layout).is_err());
    }

    #[test]
    fn rejects_short_values() {
        let layout = vec![LayoutEntry {
            name: "a".into(),
            shape: vec![2, 3],
            offset: 0,
        }];
        assert!(ParamVector::<f64>::new(vec![0.0; 5], layout).is_err());
    }

    proptest! {
        #[test]
        fn unflatten_flatten_is_bit_exact(
            shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..3), 1..5),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::RngStream::new(seed, 0);
            let tensors: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n: usize = s.iter().product();
                    let data: Vec<f64> = (0..n).map(|_| rng.normal() * 1e3).collect();
                    (format!("t{i}"), s.clone(), data)
                })
                .collect();
            let pv = ParamVector::flatten(tensors).unwrap();
            let again = ParamVector::flatten(pv.unflatten()).unwrap();
            prop_assert_eq!(pv.layout(), again.layout());
            for (a, b) in pv.values().iter().zip(again.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
