use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::scalar::Scalar;

/// Ordered parameter tensors laid out as `[w0, b0, w1, b1, ...]`.
///
/// Gradients use the same type, so shapes mirror the model by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    tensors: Vec<Tensor2<T>>,
}

pub type Gradients<T> = Params<T>;

impl<T: Scalar> Params<T> {
    pub fn new(tensors: Vec<Tensor2<T>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            tensors: other
                .tensors
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor2<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor2<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.as_slice().len()).sum()
    }

    /// `layer{i}.weight` / `layer{i}.bias`.
    pub fn label(index: usize) -> String {
        let kind = if index.is_multiple_of(2) { "weight" } else { "bias" };
        format!("layer{}.{}", index / 2, kind)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    fn ensure_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                expected: self.numel(),
                found: other.numel(),
            })
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.ensure_same_shape(other, "parameter axpy")?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for t in &mut self.tensors {
            t.scale(alpha);
        }
    }

    /// `alpha * a + beta * b`, elementwise in one rounding step per product.
    pub fn combine(alpha: T, a: &Self, beta: T, b: &Self) -> Result<Self> {
        a.ensure_same_shape(b, "parameter combine")?;
        let tensors = a
            .tensors
            .iter()
            .zip(&b.tensors)
            .map(|(x, y)| {
                let data = x
                    .as_slice()
                    .iter()
                    .zip(y.as_slice())
                    .map(|(&u, &v)| alpha * u + beta * v)
                    .collect();
                Tensor2::from_vec(x.rows(), x.cols(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tensors })
    }

    pub fn norm(&self) -> T {
        self.tensors
            .iter()
            .flat_map(|t| t.as_slice())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Index of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.tensors.iter().position(|t| !t.is_finite())
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flat_map(|t| t.as_slice())
    }
}
