//! Named parameter collections shared by the denoiser, optimizer and EMA.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of an array inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of named real arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    arrays: Vec<NamedArray<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            arrays: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(dims.iter().product::<usize>(), data.len(), "array {name} has wrong length");
        assert!(!self.index.contains_key(&name), "duplicate array {name}");
        let id = self.arrays.len();
        self.index.insert(name.clone(), id);
        self.arrays.push(NamedArray { name, dims, data });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedArray<T>> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedArray<T>> {
        self.arrays.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.arrays[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.arrays[id.0].data
    }

    pub fn by_name(&self, name: &str) -> Option<&NamedArray<T>> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut NamedArray<T>> {
        self.index.get(name).copied().map(move |i| &mut self.arrays[i])
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = ParamSet::new();
        for a in &self.arrays {
            out.push(a.name.clone(), a.dims.clone(), vec![T::zero(); a.data.len()]);
        }
        out
    }

    pub fn fill_zero(&mut self) {
        for a in &mut self.arrays {
            a.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Same names, same order, same dims.
    pub fn ensure_compatible(&self, other: &Self, context: &str) -> Result<()> {
        if self.arrays.len() != other.arrays.len() {
            return Err(Error::shape(
                context,
                format!("{} arrays", self.arrays.len()),
                format!("{} arrays", other.arrays.len()),
            ));
        }
        for (a, b) in self.arrays.iter().zip(&other.arrays) {
            if a.name != b.name {
                return Err(Error::shape(context, format!("array {:?}", a.name), format!("array {:?}", b.name)));
            }
            if a.dims != b.dims {
                return Err(Error::ArrayShape {
                    name: a.name.clone(),
                    expected: a.dims.clone(),
                    found: b.dims.clone(),
                });
            }
        }
        Ok(())
    }

    /// Copies values from `other`, which must be compatible.
    pub fn assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_compatible(other, "parameter assignment")?;
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for a in &self.arrays {
            out.push(a.name.clone(), a.dims.clone(), a.data.iter().map(|v| U::of(v.as_f64())).collect());
        }
        out
    }

    /// Euclidean norm over every scalar, accumulated in `f64`.
    pub fn l2_norm(&self) -> f64 {
        self.arrays
            .iter()
            .flat_map(|a| a.data.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.data.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compatibility_reports_dims() {
        let mut a = ParamSet::<f32>::new();
        a.push("w", vec![2, 2], vec![0.0; 4]);
        let mut b = ParamSet::<f32>::new();
        b.push("w", vec![4], vec![0.0; 4]);
        match a.ensure_compatible(&b, "test") {
            Err(Error::ArrayShape { name, expected, found }) => {
                assert_eq!(name, "w");
                assert_eq!(expected, vec![2, 2]);
                assert_eq!(found, vec![4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zeros_like_keeps_layout() {
        let mut a = ParamSet::<f64>::new();
        a.push("x", vec![3], vec![1.0, 2.0, 3.0]);
        let z = a.zeros_like();
        assert!(a.ensure_compatible(&z, "z").is_ok());
        assert_eq!(z.count(), 3);
        assert_eq!(z.l2_norm(), 0.0);
    }
}
