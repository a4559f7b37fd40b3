use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to one learnable array inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Initial value of a freshly registered array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Named learnable arrays in registration order.
///
/// The same type holds gradients, optimizer moments and EMA shadows: they
/// are all "one array per parameter" and share names and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Registers a new array. Names must be unique.
    pub fn add<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![T::ZERO; n],
            Init::Ones => vec![T::ONE; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
            }
        };
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.values.push(values);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// `(name, shape, values)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[T])> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.values)
            .map(|((n, s), v)| (n.as_str(), s.as_slice(), v.as_slice()))
    }

    pub fn values(&self) -> impl Iterator<Item = &[T]> {
        self.values.iter().map(|v| v.as_slice())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.values.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self.values.iter().map(|v| vec![T::ZERO; v.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = T::ZERO);
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self.values.iter().map(|v| crate::real::cast(v)).collect(),
        }
    }

    /// Rebuilds a store from raw arrays, e.g. after deserialization.
    pub fn from_parts(entries: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let mut out = Self::new();
        for (name, shape, values) in entries {
            let n: usize = shape.iter().product();
            if n != values.len() {
                return Err(Error::Shape(format!(
                    "array {name}: shape {shape:?} needs {n} values, got {}",
                    values.len()
                )));
            }
            out.names.push(name);
            out.shapes.push(shape);
            out.values.push(values);
        }
        Ok(out)
    }

    /// True when names and shapes agree entry by entry.
    pub fn same_layout<U>(&self, other: &Params<U>) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }

    pub fn check_layout<U>(&self, other: &Params<U>, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: parameter layouts differ")))
        }
    }

    /// `Σ self·other` over every scalar, accumulated in f64.
    pub fn dot(&self, other: &Params<T>) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.to_f64() * y.to_f64()).sum::<f64>())
            .sum()
    }

    /// Global L2 norm over every scalar.
    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += scale·other`.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}
