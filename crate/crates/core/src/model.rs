use crate::error::Result;
use crate::numerics::{Gradients, Params, Tensor2};
use crate::scalar::Scalar;

/// Anything that predicts the noise component `ε(x_t, t)` of a noisy point.
///
/// Implemented by the trainable [`Denoiser`](crate::numerics::Denoiser) and by
/// the closed-form oracles, so samplers and metrics accept either.
pub trait NoisePredictor<T: Scalar> {
    fn data_dim(&self) -> usize;

    /// Predictions for every row of `xs` (`n x d`) at the matching timestep in `ts`.
    fn predict_batch(&self, xs: &Tensor2<T>, ts: &[usize]) -> Result<Tensor2<T>>;

    fn predict(&self, x: &[T], t: usize) -> Result<Vec<T>> {
        let xs = Tensor2::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict_batch(&xs, &[t])?.into_vec())
    }
}

/// A noise predictor with parameters and exact reverse-mode gradients.
pub trait Trainable<T: Scalar>: NoisePredictor<T> {
    /// Intermediate values retained by the forward pass for [`Trainable::backward`].
    type Tape;

    fn forward_with_tape(&self, xs: &Tensor2<T>, ts: &[usize]) -> Result<(Tensor2<T>, Self::Tape)>;

    /// Gradient of `Σ_i grad_out_i · ε(x_i, t_i)` with respect to the parameters.
    fn backward(&self, tape: &Self::Tape, grad_out: &Tensor2<T>) -> Result<Gradients<T>>;

    fn params(&self) -> &Params<T>;

    fn params_mut(&mut self) -> &mut Params<T>;
}

impl<T: Scalar, M: NoisePredictor<T> + ?Sized> NoisePredictor<T> for &M {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }

    fn predict_batch(&self, xs: &Tensor2<T>, ts: &[usize]) -> Result<Tensor2<T>> {
        (**self).predict_batch(xs, ts)
    }
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ZeroPredictor {
    pub dim: usize,
}

impl<T: Scalar> NoisePredictor<T> for ZeroPredictor {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict_batch(&self, xs: &Tensor2<T>, _ts: &[usize]) -> Result<Tensor2<T>> {
        crate::error::check_dim("ZeroPredictor input width", self.dim, xs.cols())?;
        Ok(Tensor2::zeros(xs.rows(), self.dim))
    }
}
