//! Dense `f64` tensors and the keyed parameter store.
//!
//! Every model weight, gradient and optimizer accumulator in the lab is a
//! [`ParamStore`]: an ordered map from [`ParamKey`] to a row-major
//! [`DenseTensor`]. Cross-store operations require the two stores to be
//! shape-compatible (same key set, same per-key shapes).

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Index of one named parameter, the key half of a `<key, value>` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey(pub u32);

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

/// Row-major dense tensor. All elements are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        let t = DenseTensor { shape, data };
        t.ensure_finite()?;
        Ok(t)
    }

    /// One-dimensional tensor holding `data`.
    pub fn from_slice(data: &[f64]) -> Result<Self> {
        Self::new(vec![data.len()], data.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "extents must be positive"
        );
        let len = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw elements. Callers that write through this
    /// must keep every element finite; [`DenseTensor::ensure_finite`] checks.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Numeric(format!(
                "non-finite element {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    fn check_same_shape(&self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self += alpha * x`.
    pub fn axpy_in_place(&mut self, alpha: f64, x: &DenseTensor) -> Result<()> {
        self.check_same_shape(x)?;
        for (y, x) in self.data.iter_mut().zip(&x.data) {
            *y += alpha * x;
        }
        self.ensure_finite()
    }

    pub fn scale_in_place(&mut self, alpha: f64) -> Result<()> {
        for v in &mut self.data {
            *v *= alpha;
        }
        self.ensure_finite()
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Returns `y + alpha * x`. Inputs are untouched.
pub fn axpy(alpha: f64, x: &DenseTensor, y: &DenseTensor) -> Result<DenseTensor> {
    if !alpha.is_finite() {
        return Err(Error::Numeric(format!("axpy scale {alpha} is not finite")));
    }
    let mut out = y.clone();
    out.axpy_in_place(alpha, x)?;
    Ok(out)
}

/// Elementwise product `x ⊙ y`.
pub fn hadamard(x: &DenseTensor, y: &DenseTensor) -> Result<DenseTensor> {
    x.check_same_shape(y)?;
    let data = x.data.iter().zip(&y.data).map(|(a, b)| a * b).collect();
    let out = DenseTensor {
        shape: x.shape.clone(),
        data,
    };
    out.ensure_finite()?;
    Ok(out)
}

/// Keyed collection of tensors: model weights, gradients, accumulators.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<ParamKey, DenseTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ParamKey, value: DenseTensor) -> Option<DenseTensor> {
        self.entries.insert(key, value)
    }

    pub fn get(&self, key: ParamKey) -> Option<&DenseTensor> {
        self.entries.get(&key)
    }

    pub fn get_mut(&mut self, key: ParamKey) -> Option<&mut DenseTensor> {
        self.entries.get_mut(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &DenseTensor)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamKey, &mut DenseTensor)> {
        self.entries.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters across all keys.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(DenseTensor::len).sum()
    }

    /// A store with the same keys and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (*k, DenseTensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "stores hold {} vs {} keys",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, a), (kb, b)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                return Err(Error::Shape(format!("key sets differ: {ka} vs {kb}")));
            }
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "key {ka}: shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha * x` for every key.
    pub fn axpy_in_place(&mut self, alpha: f64, x: &ParamStore) -> Result<()> {
        self.check_compatible(x)?;
        for ((_, y), (_, x)) in self.entries.iter_mut().zip(&x.entries) {
            y.axpy_in_place(alpha, x)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, alpha: f64) -> Result<()> {
        for v in self.entries.values_mut() {
            v.scale_in_place(alpha)?;
        }
        Ok(())
    }

    /// Largest elementwise absolute difference over all keys.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Result<f64> {
        self.check_compatible(other)?;
        let mut m = 0.0f64;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (k, v) in &self.entries {
            v.ensure_finite()
                .map_err(|e| Error::Numeric(format!("key {k}: {e}")))?;
        }
        Ok(())
    }
}

impl FromIterator<(ParamKey, DenseTensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (ParamKey, DenseTensor)>>(iter: I) -> Self {
        ParamStore {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Overwrites every tensor of `dst` with a deep copy of the matching `src`
/// tensor.
pub fn copy_into(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    src.check_compatible(dst)?;
    for ((_, s), (_, d)) in src.entries.iter().zip(dst.entries.iter_mut()) {
        d.data.copy_from_slice(&s.data);
    }
    Ok(())
}
