//! Dense row-major tensors over `f32` (training/inference) or `f64`
//! (gradient checking).

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::iter::Sum;

/// Scalar type the numeric stack is generic over.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Send + Sync + fmt::Debug + fmt::Display + Default + 'static
{
    fn fl(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("real to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor. A scalar has an empty shape and one element.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "element count must equal the product of extents"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![F::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn scalar(v: F) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    /// Gaussian-initialized tensor. Samples are drawn in f64 so that a given
    /// seed produces the same values regardless of `F`.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::fl(z * std)
            })
            .collect();
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> F {
        assert!(self.numel() == 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    /// Extent of the last axis; 1 for scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| x.as_f64() as f32).collect() }
    }

    pub fn from_f32(t: &Tensor<f32>) -> Self {
        Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| F::fl(x as f64)).collect() }
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, ...]", &self.data[..8])
        }
    }
}
