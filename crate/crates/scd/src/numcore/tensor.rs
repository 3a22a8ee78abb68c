//! Dense row-major tensors and named parameter sets.

use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};
use rand::Rng;

use super::{invalid, NumError};

/// Element type for tensors. `f32` is the training precision; `f64` is used
/// for gradient checking. Conversions go through `f64` so both precisions
/// consume identical RNG draws.
pub trait Scalar:
    Float + NumAssignOps + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    /// Widening conversion; named to avoid clashing with `ToPrimitive`.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense tensor. Rank 1 and 2 cover every model in this crate; scalars are
/// rank-1 tensors with a single element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self, NumError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(invalid(
                "tensor",
                format!("shape {:?} does not hold {} elements", shape, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel], requires_grad: false }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, NumError> {
        Self::from_vec(vec![rows, cols], data)
    }

    /// Entries drawn uniformly from `[lo, hi)`. Draws happen in `f64`.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Single element of a rank-1 tensor of length 1.
    pub fn item(&self) -> Result<F, NumError> {
        if self.numel() != 1 {
            return Err(NumError::NotScalarLoss { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    /// Element `(row, col)` of a rank-2 tensor. Panics on rank or bounds
    /// violations; intended for tests and small readers, not hot loops.
    pub fn at2(&self, row: usize, col: usize) -> F {
        assert_eq!(self.rank(), 2, "at2 on rank-{} tensor", self.rank());
        assert!(row < self.shape[0] && col < self.shape[1]);
        self.data[row * self.shape[1] + col]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Named tensor with a gradient accumulator of the same shape.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    name: String,
    value: Tensor<F>,
    grad: Tensor<F>,
}

impl<F: Scalar> Parameter<F> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<F> {
        &self.grad
    }
}

/// Ordered collection of parameters. Slot order is insertion order and is
/// the canonical order for optimizer state and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a parameter and returns its slot. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<usize, NumError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumError::DuplicateParam(name));
        }
        let slot = self.params.len();
        self.by_name.insert(name.clone(), slot);
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter { name, value: value.with_requires_grad(true), grad });
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Parameter<F> {
        &self.params[slot]
    }

    pub fn slot_of(&self, name: &str) -> Result<usize, NumError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, slot: usize) -> &Tensor<F> {
        &self.params[slot].value
    }

    pub fn set_value(&mut self, slot: usize, value: Tensor<F>) -> Result<(), NumError> {
        let current = &self.params[slot];
        if current.value.shape() != value.shape() {
            return Err(NumError::ShapeMismatch {
                op: "set_value",
                lhs: current.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.params[slot].value = value.with_requires_grad(true);
        Ok(())
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor<F> {
        &mut self.params[slot].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = F::zero();
            }
        }
    }

    /// Total scalar entries across all parameters.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast::<G>())
                .expect("names unique in source set");
        }
        out
    }

    pub(crate) fn add_grad(&mut self, slot: usize, grad: &[F]) {
        let dst = self.params[slot].grad.data_mut();
        debug_assert_eq!(dst.len(), grad.len());
        for (d, g) in dst.iter_mut().zip(grad) {
            *d += *g;
        }
    }

    pub(crate) fn update_values(&mut self, mut f: impl FnMut(usize, &mut [F], &[F])) {
        for (slot, p) in self.params.iter_mut().enumerate() {
            let grad = p.grad.data().to_vec();
            f(slot, p.value.data_mut(), &grad);
        }
    }
}
