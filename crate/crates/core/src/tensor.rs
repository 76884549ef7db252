//! Dense row-major tensors and named parameter collections.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Activations use the `[batch, channels, height, width]` layout.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(batch, channels, height, width)` for a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(format!("expected rank-4 tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{what}: non-finite value at index {i}")));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Copies batch items `indices` (along axis 0) into a new tensor.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let item: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(item * indices.len());
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::shape(format!("batch index {i} out of range {}", self.shape[0])));
            }
            data.extend_from_slice(&self.data[i * item..(i + 1) * item]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along axis 0.
    pub fn stack_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::new();
        shape[0] = 0;
        for t in parts {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            shape[0] += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }
}

/// Which piece of the U-shaped network a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Head,
    Body,
    Tail,
    /// The monolithic, unsplit model.
    Full,
}

impl Part {
    pub fn prefix(self) -> &'static str {
        match self {
            Part::Head => "head",
            Part::Body => "body",
            Part::Tail => "tail",
            Part::Full => "full",
        }
    }

    pub fn from_prefix(s: &str) -> Option<Part> {
        match s {
            "head" => Some(Part::Head),
            "body" => Some(Part::Body),
            "tail" => Some(Part::Tail),
            "full" => Some(Part::Full),
            _ => None,
        }
    }
}

/// Named, ordered collection of parameter tensors for one model part.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub part: Part,
    pub round: u32,
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new(part: Part) -> Self {
        ParamSet { part, round: 0, tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn with_round(mut self, round: u32) -> Self {
        self.round = round;
        self
    }

    /// Errors unless `other` has identical names, order and shapes.
    pub fn ensure_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::config(format!(
                "parameter sets differ in size: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb {
                return Err(Error::config(format!("parameter name mismatch: {na} vs {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::config(format!(
                    "parameter {na} shape mismatch: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            part: self.part,
            round: self.round,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.ensure_compatible(other)?;
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.tensors.iter().zip(&other.tensors) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
        Ok(worst)
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sq_norm).sum()
    }

    /// Elementwise `f(self, other)` into a new set.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.ensure_compatible(other)?;
        let mut out = ParamSet::new(self.part);
        out.round = self.round;
        for ((name, a), (_, b)) in self.tensors.iter().zip(&other.tensors) {
            out.insert(name.clone(), a.zip_map(b, &f)?);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            part: self.part,
            round: self.round,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.map(&f))).collect(),
        }
    }

    /// All values flattened in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Merges several parts into one set, keeping names unique.
    pub fn merge(part: Part, sets: &[&ParamSet]) -> Result<ParamSet> {
        let mut out = ParamSet::new(part);
        for set in sets {
            for (name, t) in set.iter() {
                if out.tensors.contains_key(name) {
                    return Err(Error::config(format!("duplicate parameter {name} in merge")));
                }
                out.insert(name, t.clone());
            }
        }
        Ok(out)
    }

    /// Extracts the subset of names present in `template`, in template order.
    pub fn select_like(&self, template: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new(template.part);
        out.round = self.round;
        for (name, t) in template.iter() {
            let src = self
                .get(name)
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
            src.ensure_same_shape(t, name)?;
            out.insert(name, src.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gather_and_stack() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f64);
        let g = t.gather_batch(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        let s = Tensor::stack_batch(&[&g, &t]).unwrap();
        assert_eq!(s.shape(), &[5, 2]);
    }

    #[test]
    fn param_set_compatibility() {
        let mut a = ParamSet::new(Part::Head);
        a.insert("w", Tensor::zeros(&[2]));
        let mut b = ParamSet::new(Part::Head);
        b.insert("v", Tensor::zeros(&[2]));
        assert!(a.ensure_compatible(&b).is_err());
        assert!(a.ensure_compatible(&a.zeros_like()).is_ok());
    }
}
