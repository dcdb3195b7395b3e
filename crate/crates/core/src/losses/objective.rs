use crate::error::{check_dim, Result};
use crate::model::{NoisePredictor, Trainable};
use crate::numerics::{Gradients, Params, Tensor2};
use crate::scalar::Scalar;

/// What one Monte-Carlo draw sampled, kept for paired-seed bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Draw {
    pub t: usize,
    /// Row of `A_r` involved in the draw, if any.
    pub remain_index: Option<usize>,
    /// Row of `A_u` involved in the draw, if any.
    pub forget_index: Option<usize>,
}

/// A sampled quadratic objective
/// `scale · Σ_i Σ_j c_ij ‖ε(x_i, t_i) − y_ij‖²`.
///
/// Every loss in this crate reduces to this form once its draws are fixed:
/// the model enters only through `ε(x_i, t_i)`, so the same draws can be
/// replayed against any predictor.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    dim: usize,
    scale: T,
    inputs: Vec<T>,
    timesteps: Vec<usize>,
    /// Term range per row into `coeffs` / `targets`.
    spans: Vec<(usize, usize)>,
    coeffs: Vec<T>,
    targets: Vec<T>,
    draws: Vec<Draw>,
}

impl<T: Scalar> Objective<T> {
    pub(crate) fn new(dim: usize, scale: T) -> Self {
        Self {
            dim,
            scale,
            inputs: Vec::new(),
            timesteps: Vec::new(),
            spans: Vec::new(),
            coeffs: Vec::new(),
            targets: Vec::new(),
            draws: Vec::new(),
        }
    }

    /// Appends one draw with its `(coefficient, target)` terms.
    pub(crate) fn push<'a>(
        &mut self,
        x: &[T],
        t: usize,
        terms: impl IntoIterator<Item = (T, &'a [T])>,
        draw: Draw,
    ) {
        debug_assert_eq!(x.len(), self.dim);
        self.inputs.extend_from_slice(x);
        self.timesteps.push(t);
        let start = self.coeffs.len();
        for (c, y) in terms {
            debug_assert_eq!(y.len(), self.dim);
            self.coeffs.push(c);
            self.targets.extend_from_slice(y);
        }
        self.spans.push((start, self.coeffs.len()));
        self.draws.push(draw);
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn draws(&self) -> &[Draw] {
        &self.draws
    }

    pub fn inputs(&self) -> Tensor2<T> {
        Tensor2::from_vec(self.len(), self.dim, self.inputs.clone()).expect("rows pushed whole")
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// `(coefficient, target)` terms of row `i`.
    pub fn terms(&self, i: usize) -> impl Iterator<Item = (T, &[T])> {
        let (a, b) = self.spans[i];
        (a..b).map(move |j| (self.coeffs[j], &self.targets[j * self.dim..(j + 1) * self.dim]))
    }

    fn row_value(&self, i: usize, pred: &[T]) -> T {
        self.terms(i)
            .map(|(c, y)| {
                let sq: T = pred
                    .iter()
                    .zip(y)
                    .map(|(&p, &y)| {
                        let r = p - y;
                        r * r
                    })
                    .sum();
                c * sq
            })
            .sum()
    }

    fn predictions<M: NoisePredictor<T> + ?Sized>(&self, model: &M) -> Result<Tensor2<T>> {
        check_dim("objective dimension", model.data_dim(), self.dim)?;
        model.predict_batch(&self.inputs(), &self.timesteps)
    }

    /// Unscaled value of every draw, for variance estimates.
    pub fn per_draw<M: NoisePredictor<T> + ?Sized>(&self, model: &M) -> Result<Vec<T>> {
        let pred = self.predictions(model)?;
        Ok((0..self.len()).map(|i| self.row_value(i, pred.row(i))).collect())
    }

    pub fn value<M: NoisePredictor<T> + ?Sized>(&self, model: &M) -> Result<T> {
        Ok(self.scale * self.per_draw(model)?.into_iter().sum::<T>())
    }

    /// Value and exact parameter gradient.
    pub fn value_and_grad<M: Trainable<T> + ?Sized>(&self, model: &M) -> Result<(T, Gradients<T>)> {
        check_dim("objective dimension", model.data_dim(), self.dim)?;
        if self.is_empty() {
            return Ok((T::zero(), Params::zeros_like(model.params())));
        }
        let (pred, tape) = model.forward_with_tape(&self.inputs(), &self.timesteps)?;
        let two_scale = T::of(2.0) * self.scale;
        let mut total = T::zero();
        let mut grad_out = Tensor2::zeros(self.len(), self.dim);
        for i in 0..self.len() {
            let p = pred.row(i);
            total += self.row_value(i, p);
            let g = grad_out.row_mut(i);
            for (c, y) in self.terms(i) {
                for ((g, &p), &y) in g.iter_mut().zip(p).zip(y) {
                    *g += two_scale * c * (p - y);
                }
            }
        }
        let grads = model.backward(&tape, &grad_out)?;
        Ok((self.scale * total, grads))
    }
}

/// One stochastic evaluation of a fine-tuning loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSample<T> {
    pub value: T,
    pub grads: Gradients<T>,
    pub draws: Vec<Draw>,
    /// Unlearning-term value, for objectives that have one.
    pub unlearn_term: Option<T>,
    /// Remaining-set (regularisation) term value, for objectives that have one.
    pub retain_term: Option<T>,
}

impl<T: Scalar> LossSample<T> {
    pub(crate) fn from_objective<M: Trainable<T> + ?Sized>(objective: &Objective<T>, model: &M) -> Result<Self> {
        let (value, grads) = objective.value_and_grad(model)?;
        Ok(Self {
            value,
            grads,
            draws: objective.draws().to_vec(),
            unlearn_term: None,
            retain_term: None,
        })
    }

    /// `alpha · a + beta · b` for both value and gradients; draws are concatenated.
    pub fn combine(alpha: T, a: &Self, beta: T, b: &Self) -> Result<Self> {
        let mut draws = a.draws.clone();
        draws.extend(b.draws.iter().cloned());
        Ok(Self {
            value: alpha * a.value + beta * b.value,
            grads: Params::combine(alpha, &a.grads, beta, &b.grads)?,
            draws,
            unlearn_term: None,
            retain_term: None,
        })
    }
}
