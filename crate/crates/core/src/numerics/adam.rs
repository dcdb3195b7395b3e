use crate::error::{Error, Result};
use crate::numerics::{Gradients, Params};
use crate::scalar::Scalar;

/// Adam optimiser state with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    first: Params<T>,
    second: Params<T>,
    step: u64,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with the usual `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new(params: &Params<T>, learning_rate: T) -> Self {
        Self {
            first: Params::zeros_like(params),
            second: Params::zeros_like(params),
            step: 0,
            learning_rate,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one Adam update to `params` in place.
    ///
    /// Non-finite gradients are rejected before any state changes.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Gradients<T>) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.first) {
            return Err(Error::DimensionMismatch {
                context: "adam gradient shape",
                expected: params.numel(),
                found: grads.numel(),
            });
        }
        if let Some(i) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", Params::<T>::label(i))));
        }
        self.step += 1;
        let one = T::one();
        let exponent = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bias1 = one - self.beta1.powi(exponent);
        let bias2 = one - self.beta2.powi(exponent);
        let tensors = params.tensors_mut();
        for (i, p) in tensors.iter_mut().enumerate() {
            let g = grads.tensors()[i].as_slice();
            let m = self.first.tensors_mut()[i].as_mut_slice();
            let v = self.second.tensors_mut()[i].as_mut_slice();
            for (((p, &g), m), v) in p.as_mut_slice().iter_mut().zip(g).zip(m).zip(v) {
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// One Adam update of `params` given `grads`.
pub fn adam_step<T: Scalar>(state: &mut AdamState<T>, params: &mut Params<T>, grads: &Gradients<T>) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2;

    fn scalar_param(v: f64) -> Params<f64> {
        Params::new(vec![Tensor2::from_vec(1, 1, vec![v]).unwrap()])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(0.7);
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut s, &mut p, &scalar_param(0.0)).unwrap();
        assert_eq!(p.tensors()[0].as_slice(), &[0.7]);
        assert_eq!(s.steps_taken(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; update = 0.1 / (1 + 1e-8).
        let mut p = scalar_param(0.0);
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut s, &mut p, &scalar_param(1.0)).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.tensors()[0].as_slice()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn second_step_follows_recurrence() {
        let mut p = scalar_param(0.0);
        let mut s = AdamState::new(&p, 0.01);
        adam_step(&mut s, &mut p, &scalar_param(1.0)).unwrap();
        adam_step(&mut s, &mut p, &scalar_param(-2.0)).unwrap();
        let m: f64 = 0.9 * 0.1 + 0.1 * -2.0;
        let v: f64 = 0.999 * 0.001 + 0.001 * 4.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected = -0.01 / (1.0 + 1e-8) - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.tensors()[0].as_slice()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut p = Params::new(vec![
            Tensor2::from_vec(1, 1, vec![0.0]).unwrap(),
            Tensor2::from_vec(1, 1, vec![0.0]).unwrap(),
        ]);
        let mut s = AdamState::new(&p, 0.1);
        let g = Params::new(vec![
            Tensor2::from_vec(1, 1, vec![1.0]).unwrap(),
            Tensor2::from_vec(1, 1, vec![f64::NAN]).unwrap(),
        ]);
        let err = adam_step(&mut s, &mut p, &g).unwrap_err();
        assert!(err.to_string().contains("layer0.bias"), "{err}");
        assert_eq!(s.steps_taken(), 0);
    }
}
