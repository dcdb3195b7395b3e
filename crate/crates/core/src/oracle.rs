//! Closed-form ground truth for empirical data distributions.
//!
//! For a finite dataset the Bayes-optimal noise prediction is
//! `ε*(x_t, t) = (x_t − γ_t Σ_a w_t(x_t; a) a) / σ_t` with softmax weights
//! `w_t(x_t; a) ∝ exp(−‖x_t − γ_t a‖² / (2σ_t²))`. Everything here is an
//! exhaustive sum, evaluated in log space.

use serde::{Deserialize, Serialize};

use crate::diffusion::{kernel_logit, NoiseSchedule};
use crate::error::{check_dim, Error, Result};
use crate::losses::{SplitDataset, FULL_SUM_LIMIT};
use crate::model::{NoisePredictor, Trainable};
use crate::numerics::{Denoiser, Gradients, Params, RngStream, Tensor2};
use crate::scalar::{log_sum_exp, softmax, sq_dist, Scalar};

/// Normalised posterior weights of `points` given `x_t`, in iteration order.
pub fn weights_over<'a, T: Scalar>(
    schedule: &NoiseSchedule<T>,
    t: usize,
    x_t: &[T],
    points: impl Iterator<Item = &'a [T]>,
) -> Vec<T> {
    let logits: Vec<T> = points.map(|a| kernel_logit(schedule, x_t, a, t)).collect();
    softmax(&logits)
}

/// Weights `w_t(x_t; a)` over every row of `points`.
pub fn posterior_weights<T: Scalar>(
    points: &Tensor2<T>,
    schedule: &NoiseSchedule<T>,
    x_t: &[T],
    t: usize,
) -> Result<Vec<T>> {
    schedule.check_t(t)?;
    check_dim("posterior point width", points.cols(), x_t.len())?;
    Ok(weights_over(schedule, t, x_t, points.iter_rows()))
}

/// Posterior-mean noise `E[ε | x_t]` under the empirical distribution of `dataset`.
pub fn optimal_eps<T: Scalar>(dataset: &Tensor2<T>, schedule: &NoiseSchedule<T>, x_t: &[T], t: usize) -> Result<Vec<T>> {
    if dataset.rows() == 0 {
        return Err(Error::InvalidArgument("oracle dataset is empty".into()));
    }
    let w = posterior_weights(dataset, schedule, x_t, t)?;
    Ok(eps_from_weights(dataset, schedule, x_t, t, &w))
}

fn eps_from_weights<T: Scalar>(dataset: &Tensor2<T>, schedule: &NoiseSchedule<T>, x_t: &[T], t: usize, w: &[T]) -> Vec<T> {
    let mut mean = vec![T::zero(); x_t.len()];
    for (row, &wi) in dataset.iter_rows().zip(w) {
        if wi == T::zero() {
            continue;
        }
        for (m, &a) in mean.iter_mut().zip(row) {
            *m += wi * a;
        }
    }
    let (g, s) = (schedule.gamma(t), schedule.sigma(t));
    x_t.iter().zip(&mean).map(|(&x, &m)| (x - g * m) / s).collect()
}

/// The exact optimal denoiser of a finite dataset, usable wherever a model is.
#[derive(Clone, Debug)]
pub struct OracleDenoiser<T> {
    points: Tensor2<T>,
    schedule: NoiseSchedule<T>,
}

impl<T: Scalar> OracleDenoiser<T> {
    pub fn new(points: Tensor2<T>, schedule: NoiseSchedule<T>) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::InvalidArgument("oracle dataset is empty".into()));
        }
        if points.rows() > FULL_SUM_LIMIT {
            return Err(Error::GuardExceeded {
                size: points.rows(),
                limit: FULL_SUM_LIMIT,
            });
        }
        Ok(Self { points, schedule })
    }

    pub fn points(&self) -> &Tensor2<T> {
        &self.points
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }
}

impl<T: Scalar> NoisePredictor<T> for OracleDenoiser<T> {
    fn data_dim(&self) -> usize {
        self.points.cols()
    }

    fn predict_batch(&self, xs: &Tensor2<T>, ts: &[usize]) -> Result<Tensor2<T>> {
        check_dim("oracle input width", self.points.cols(), xs.cols())?;
        check_dim("timesteps per batch", xs.rows(), ts.len())?;
        let mut out = Tensor2::zeros(xs.rows(), xs.cols());
        for (i, &t) in ts.iter().enumerate() {
            let eps = optimal_eps(&self.points, &self.schedule, xs.row(i), t)?;
            out.row_mut(i).copy_from_slice(&eps);
        }
        Ok(out)
    }
}

/// The model that was only ever trained on `A_r`: the optimal denoiser of the remaining set.
pub fn retrained_reference<T: Scalar>(data: &SplitDataset<T>, schedule: &NoiseSchedule<T>) -> Result<OracleDenoiser<T>> {
    OracleDenoiser::new(data.remain().clone(), schedule.clone())
}

/// Per-timestep terms `exp(−γ_t² ‖a_u − a_r‖² / (4σ_t²))`, `t = 1..=T`.
pub fn overlap_terms<T: Scalar>(schedule: &NoiseSchedule<T>, a_u: &[T], a_r: &[T]) -> Vec<T> {
    let dist_sq = sq_dist(a_u, a_r);
    (1..=schedule.steps())
        .map(|t| (-(schedule.alpha_bar(t) / (T::of(4.0) * schedule.sigma_sq(t))) * dist_sq).exp())
        .collect()
}

/// Time-averaged expected kernel overlap between `a_u` and `a_r`; up to a
/// constant it is `E_{t, x_t ~ q_t(·|a_u)} exp(−‖x_t − γ_t a_r‖² / (2σ_t²))`.
pub fn expected_overlap<T: Scalar>(schedule: &NoiseSchedule<T>, a_u: &[T], a_r: &[T]) -> T {
    let terms = overlap_terms(schedule, a_u, a_r);
    terms.iter().copied().sum::<T>() / T::of(terms.len() as f64)
}

/// `log` of [`expected_overlap`], accurate when every term underflows.
pub fn log_expected_overlap<T: Scalar>(schedule: &NoiseSchedule<T>, a_u: &[T], a_r: &[T]) -> T {
    let dist_sq = sq_dist(a_u, a_r);
    let logs: Vec<T> = (1..=schedule.steps())
        .map(|t| -(schedule.alpha_bar(t) / (T::of(4.0) * schedule.sigma_sq(t))) * dist_sq)
        .collect();
    log_sum_exp(&logs) - T::of(schedule.steps() as f64).ln()
}

/// Outcome of comparing overlap ranking with Euclidean ranking for one `a_u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub forget_index: usize,
    pub matches: bool,
    /// First rank at which the two orderings differ.
    pub first_mismatch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub entries: Vec<RankingEntry>,
    pub mismatches: usize,
}

impl RankingReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// For every `a_u`, orders `A_r` by expected overlap (descending) and by
/// Euclidean distance (ascending), both with ties broken by row, and reports
/// whether the orderings coincide.
pub fn knn_ranking_check<T: Scalar>(data: &SplitDataset<T>, schedule: &NoiseSchedule<T>) -> RankingReport {
    let remain = data.remain();
    let entries: Vec<RankingEntry> = data
        .forget()
        .iter_rows()
        .enumerate()
        .map(|(u, a_u)| {
            let overlap: Vec<T> = remain.iter_rows().map(|r| log_expected_overlap(schedule, a_u, r)).collect();
            let dist: Vec<T> = remain.iter_rows().map(|r| sq_dist(a_u, r)).collect();
            let mut by_overlap: Vec<usize> = (0..remain.rows()).collect();
            by_overlap.sort_by(|&i, &j| {
                overlap[j]
                    .partial_cmp(&overlap[i])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(i.cmp(&j))
            });
            let mut by_dist: Vec<usize> = (0..remain.rows()).collect();
            by_dist.sort_by(|&i, &j| {
                dist[i]
                    .partial_cmp(&dist[j])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(i.cmp(&j))
            });
            let first_mismatch = by_overlap.iter().zip(&by_dist).position(|(a, b)| a != b);
            RankingEntry {
                forget_index: u,
                matches: first_mismatch.is_none(),
                first_mismatch,
            }
        })
        .collect();
    let mismatches = entries.iter().filter(|e| !e.matches).count();
    RankingReport { entries, mismatches }
}

/// Isotropic Gaussian mixture used to realise toy datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    /// Component means, one row per component.
    pub means: Vec<Vec<f64>>,
    /// Shared per-coordinate standard deviation.
    pub std: f64,
    pub weights: Vec<f64>,
    /// Points realised per component.
    pub counts: Vec<usize>,
}

/// A realised dataset with the component each point came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoints<T> {
    pub points: Tensor2<T>,
    pub labels: Vec<usize>,
}

impl GaussianMixtureSpec {
    /// Mixture whose weights are the normalised `counts`.
    pub fn from_counts(means: Vec<Vec<f64>>, std: f64, counts: Vec<usize>) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("mixture has no points".into()));
        }
        let weights = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let spec = Self {
            means,
            std,
            weights,
            counts,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.means.len();
        if m == 0 || self.dim() == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one non-empty mean".into()));
        }
        if self.means.iter().any(|mu| mu.len() != self.dim() || mu.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("mixture means must be finite and equally long".into()));
        }
        check_dim("mixture weights", m, self.weights.len())?;
        check_dim("mixture counts", m, self.counts.len())?;
        if !(self.std >= 0.0) || !self.std.is_finite() {
            return Err(Error::InvalidArgument(format!("mixture std {} must be >= 0", self.std)));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Draws `counts[c]` points around each mean, component by component.
    pub fn realize<T: Scalar>(&self, rng: &mut RngStream) -> Result<LabeledPoints<T>> {
        self.validate()?;
        let d = self.dim();
        let n: usize = self.counts.iter().sum();
        let mut points = Tensor2::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (c, (&count, mean)) in self.counts.iter().zip(&self.means).enumerate() {
            for _ in 0..count {
                let z: Vec<f64> = rng.standard_normal(d);
                for (j, slot) in points.row_mut(row).iter_mut().enumerate() {
                    *slot = T::of(mean[j] + self.std * z[j]);
                }
                labels.push(c);
                row += 1;
            }
        }
        Ok(LabeledPoints { points, labels })
    }
}

impl<T: Scalar> LabeledPoints<T> {
    /// Moves the points of `forget_component` into `A_u`, everything else into `A_r`.
    pub fn split_out(&self, forget_component: usize) -> Result<SplitDataset<T>> {
        let d = self.points.cols();
        let (mut keep, mut drop) = (Vec::new(), Vec::new());
        for (row, &label) in self.points.iter_rows().zip(&self.labels) {
            if label == forget_component {
                drop.extend_from_slice(row);
            } else {
                keep.extend_from_slice(row);
            }
        }
        SplitDataset::new(
            Tensor2::from_vec(keep.len() / d, d, keep)?,
            Tensor2::from_vec(drop.len() / d, d, drop)?,
        )
    }
}

/// The optimal denoiser of a dataset plus a trainable residual network:
/// `ε(x, t) = ε*(x, t) + r_θ(x, t)`. Gradients flow only into the residual.
#[derive(Clone, Debug)]
pub struct ResidualOverOracle<T> {
    oracle: OracleDenoiser<T>,
    residual: Denoiser<T>,
}

impl<T: Scalar> ResidualOverOracle<T> {
    /// `residual` is used as given; zero its output layer to start exactly at the oracle.
    pub fn new(oracle: OracleDenoiser<T>, residual: Denoiser<T>) -> Result<Self> {
        check_dim("residual output width", oracle.data_dim(), residual.data_dim())?;
        if residual.horizon() != oracle.schedule().steps() {
            return Err(Error::InvalidArgument("residual horizon differs from the oracle schedule".into()));
        }
        Ok(Self { oracle, residual })
    }

    /// Residual network whose last layer is zero, so the sum equals the oracle.
    pub fn at_oracle(oracle: OracleDenoiser<T>, residual: Denoiser<T>) -> Result<Self> {
        let mut residual = residual;
        let n = residual.params().len();
        for t in &mut residual.params_mut().tensors_mut()[n - 2..] {
            t.scale(T::zero());
        }
        Self::new(oracle, residual)
    }

    pub fn residual(&self) -> &Denoiser<T> {
        &self.residual
    }
}

impl<T: Scalar> NoisePredictor<T> for ResidualOverOracle<T> {
    fn data_dim(&self) -> usize {
        self.oracle.data_dim()
    }

    fn predict_batch(&self, xs: &Tensor2<T>, ts: &[usize]) -> Result<Tensor2<T>> {
        let mut base = self.oracle.predict_batch(xs, ts)?;
        base.axpy(T::one(), &self.residual.predict_batch(xs, ts)?)?;
        Ok(base)
    }
}

impl<T: Scalar> Trainable<T> for ResidualOverOracle<T> {
    type Tape = <Denoiser<T> as Trainable<T>>::Tape;

    fn forward_with_tape(&self, xs: &Tensor2<T>, ts: &[usize]) -> Result<(Tensor2<T>, Self::Tape)> {
        let (mut out, tape) = self.residual.forward_with_tape(xs, ts)?;
        out.axpy(T::one(), &self.oracle.predict_batch(xs, ts)?)?;
        Ok((out, tape))
    }

    fn backward(&self, tape: &Self::Tape, grad_out: &Tensor2<T>) -> Result<Gradients<T>> {
        self.residual.backward(tape, grad_out)
    }

    fn params(&self) -> &Params<T> {
        self.residual.params()
    }

    fn params_mut(&mut self) -> &mut Params<T> {
        self.residual.params_mut()
    }
}
