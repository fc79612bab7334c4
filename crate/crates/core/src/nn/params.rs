use std::collections::BTreeMap;

use rand::Rng;

use super::matrix::Matrix;
use crate::error::{GowebError, Result};

/// Uniform initialization range for every learned matrix.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub(crate) m: Matrix,
    pub(crate) v: Matrix,
}

impl Param {
    fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Param { value, grad: Matrix::zeros(r, c), m: Matrix::zeros(r, c), v: Matrix::zeros(r, c) }
    }
}

/// Named parameters with their gradient accumulators and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn insert_uniform<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) {
        let data = (0..rows * cols).map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE)).collect();
        self.insert(name, Matrix::new(rows, cols, data).expect("sized"));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn value(&self, name: &str) -> &Matrix {
        &self.get(name).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self.get_mut(name).value
    }

    pub fn grad(&self, name: &str) -> &Matrix {
        &self.get(name).grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self.get_mut(name).grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.as_slice().len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Parameter values only, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Matrix> {
        self.params.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect()
    }

    pub fn from_snapshot(values: BTreeMap<String, Matrix>) -> Self {
        ParamSet { params: values.into_iter().map(|(k, v)| (k, Param::new(v))).collect() }
    }

    /// Checks that `self` has exactly the names and shapes of `expected`.
    pub fn check_layout(&self, expected: &ParamSet) -> Result<()> {
        for (name, p) in &expected.params {
            match self.params.get(name) {
                None => return Err(GowebError::Config(format!("checkpoint lacks parameter {name}"))),
                Some(q) if q.value.shape() != p.value.shape() => {
                    return Err(GowebError::shape("checkpoint", format!("{name}: expected {:?}, found {:?}", p.value.shape(), q.value.shape())))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !expected.params.contains_key(*k)) {
            return Err(GowebError::Config(format!("checkpoint has unexpected parameter {extra}")));
        }
        Ok(())
    }
}
