//! Fine-tuning objectives for data unlearning.
//!
//! Each loss first fixes its Monte-Carlo draws as an [`Objective`] and then
//! evaluates it on a model, so two models (or two objectives) can be compared
//! on identical draws by cloning the [`RngStream`] beforehand.

mod data;
mod knn;
mod objective;

use serde::{Deserialize, Serialize};

pub use data::SplitDataset;
pub use knn::{build_neighbor_index, Neighbor, NeighborIndex};
pub use objective::{Draw, LossSample, Objective};

use crate::diffusion::{forward_sample, log_q_unchecked, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::Trainable;
use crate::numerics::{RngStream, Tensor2};
use crate::oracle::weights_over;
use crate::scalar::{log_sum_exp, Scalar};

/// Largest remaining set the exhaustive unlearning sum is evaluated on.
pub const FULL_SUM_LIMIT: usize = 10_000;

/// Child-stream label of the remaining-set term in composite losses.
pub const RETAIN_STREAM: u64 = 0;
/// Child-stream label of the unlearning term in composite losses.
pub const FORGET_STREAM: u64 = 1;

/// Splits one composite-loss evaluation into independent remaining-set and
/// unlearning-set streams. Advances `rng` by one word.
pub fn role_streams(rng: &mut RngStream) -> (RngStream, RngStream) {
    let key = rng.next_u64();
    let base = rng.derive(key);
    (base.derive(RETAIN_STREAM), base.derive(FORGET_STREAM))
}

/// Fine-tuning objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    #[serde(rename = "neggrad")]
    NegGrad,
    #[serde(rename = "erasediff")]
    EraseDiff,
    Siss,
    #[serde(rename = "retrack")]
    ReTrack,
    /// ReTrack with the exhaustive (untruncated) unlearning sum.
    #[serde(rename = "retrack_full")]
    ReTrackFull,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Vanilla,
        Method::NegGrad,
        Method::EraseDiff,
        Method::Siss,
        Method::ReTrack,
        Method::ReTrackFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::NegGrad => "neggrad",
            Method::EraseDiff => "erasediff",
            Method::Siss => "siss",
            Method::ReTrack => "retrack",
            Method::ReTrackFull => "retrack_full",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {name:?}")))
    }

    pub fn uses_neighbors(self) -> bool {
        matches!(self, Method::ReTrack)
    }

    pub fn uses_retrack_lambda(self) -> bool {
        matches!(self, Method::ReTrack | Method::ReTrackFull)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Method and hyperparameters of one fine-tuning objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub method: Method,
    /// Interpolation `λ` between the unlearning and remaining-set terms.
    pub lambda_retrack: f64,
    pub k: usize,
    /// Probability of drawing the unlearning branch of the SISS mixture.
    pub siss_mixture_lambda: f64,
    /// SISS subtraction scale `s`.
    pub siss_scale: f64,
    /// Weight of the EraseDiff noise-guidance term.
    pub erasediff_lambda: f64,
    pub batch_remain: usize,
    pub batch_forget: usize,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            method: Method::ReTrack,
            lambda_retrack: 0.5,
            k: 10,
            siss_mixture_lambda: 0.5,
            siss_scale: 1.0,
            erasediff_lambda: 0.5,
            batch_remain: 32,
            batch_forget: 32,
        }
    }
}

impl LossSpec {
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    /// Range checks; `n_remain` bounds `k` when the method needs neighbours.
    pub fn validate(&self, n_remain: Option<usize>) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..=1.0).contains(&self.lambda_retrack) {
            return bad(format!("lambda_retrack {} outside [0, 1]", self.lambda_retrack));
        }
        if !(0.0..=1.0).contains(&self.siss_mixture_lambda) {
            return bad(format!(
                "siss_mixture_lambda {} outside [0, 1]",
                self.siss_mixture_lambda
            ));
        }
        if self.method == Method::Siss && !(self.siss_mixture_lambda > 0.0 && self.siss_mixture_lambda < 1.0) {
            return bad("SISS needs 0 < siss_mixture_lambda < 1".into());
        }
        if !(self.siss_scale > 0.0) {
            return bad(format!("siss_scale {} must be positive", self.siss_scale));
        }
        if !(self.erasediff_lambda >= 0.0) || !self.erasediff_lambda.is_finite() {
            return bad(format!("erasediff_lambda {} must be non-negative", self.erasediff_lambda));
        }
        if self.batch_remain == 0 || self.batch_forget == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if let Some(n) = n_remain {
            if self.method.uses_neighbors() && self.k > n {
                return bad(format!("k = {} exceeds the remaining set size {n}", self.k));
            }
        }
        Ok(())
    }
}

fn check_batch(batch: usize) -> Result<()> {
    if batch == 0 {
        Err(Error::InvalidArgument("batch must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn inv<T: Scalar>(n: usize) -> T {
    T::one() / T::of(n as f64)
}

/// Plain denoising draws `‖ε(x_t, t) − ε‖²` over rows of `points`, scaled by `sign / batch`.
fn denoising_objective<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    points: &Tensor2<T>,
    from_forget: bool,
    rng: &mut RngStream,
    batch: usize,
    sign: T,
) -> Result<Objective<T>> {
    check_batch(batch)?;
    let d = points.cols();
    let mut obj = Objective::new(d, sign * inv(batch));
    for _ in 0..batch {
        let t = rng.timestep(schedule.steps());
        let i = rng.below(points.rows());
        let eps: Vec<T> = rng.standard_normal(d);
        let x = forward_sample(schedule, points.row(i), t, &eps)?;
        let draw = Draw {
            t,
            remain_index: (!from_forget).then_some(i),
            forget_index: from_forget.then_some(i),
        };
        obj.push(&x, t, [(T::one(), eps.as_slice())], draw);
    }
    Ok(obj)
}

/// Draws of the vanilla loss `E ‖ε_θ(x_t, t) − ε‖²` over `A_r`.
pub fn vanilla_objective<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    batch: usize,
) -> Result<Objective<T>> {
    denoising_objective(schedule, data.remain(), false, rng, batch, T::one())
}

/// Draws of the plain denoising loss over `A_u` (positive sign).
pub fn forget_denoising_objective<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    batch: usize,
) -> Result<Objective<T>> {
    denoising_objective(schedule, data.forget(), true, rng, batch, T::one())
}

/// Draws of the denoising loss over an arbitrary point set (e.g. all of `A` for pretraining).
pub fn denoising_objective_over<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    points: &Tensor2<T>,
    rng: &mut RngStream,
    batch: usize,
) -> Result<Objective<T>> {
    denoising_objective(schedule, points, false, rng, batch, T::one())
}

/// Vanilla fine-tuning on the remaining set.
pub fn loss_vanilla<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    batch: usize,
) -> Result<LossSample<T>> {
    let obj = vanilla_objective(schedule, data, rng, batch)?;
    let mut s = LossSample::from_objective(&obj, model)?;
    s.retain_term = Some(s.value);
    Ok(s)
}

/// Gradient ascent on the unlearning set: the negated denoising loss over `A_u`.
pub fn loss_neggrad<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    batch: usize,
) -> Result<LossSample<T>> {
    let obj = denoising_objective(schedule, data.forget(), true, rng, batch, -T::one())?;
    let mut s = LossSample::from_objective(&obj, model)?;
    s.unlearn_term = Some(s.value);
    Ok(s)
}

/// Draws of the EraseDiff guidance term `E ‖ε_θ(x_t, t) − ε_u‖²`,
/// `x_t ~ q_t(· | a_u)`, `ε_u ~ U[0, 1]^d`.
pub fn erasediff_guidance_objective<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    batch: usize,
) -> Result<Objective<T>> {
    check_batch(batch)?;
    let d = data.dim();
    let mut obj = Objective::new(d, inv(batch));
    for _ in 0..batch {
        let t = rng.timestep(schedule.steps());
        let u = rng.below(data.n_forget());
        let eps: Vec<T> = rng.standard_normal(d);
        let eps_u: Vec<T> = rng.standard_uniform(d);
        let x = forward_sample(schedule, data.forget().row(u), t, &eps)?;
        let draw = Draw {
            t,
            remain_index: None,
            forget_index: Some(u),
        };
        obj.push(&x, t, [(T::one(), eps_u.as_slice())], draw);
    }
    Ok(obj)
}

/// Remaining-set denoising plus `erasediff_lambda` times the uniform-noise guidance term on `A_u`.
pub fn loss_erasediff<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    spec: &LossSpec,
) -> Result<LossSample<T>> {
    let (mut retain_rng, mut forget_rng) = role_streams(rng);
    let keep = loss_vanilla(model, schedule, data, &mut retain_rng, spec.batch_remain)?;
    let guide_obj = erasediff_guidance_objective(schedule, data, &mut forget_rng, spec.batch_forget)?;
    let guide = LossSample::from_objective(&guide_obj, model)?;
    let mut s = LossSample::combine(T::one(), &keep, T::of(spec.erasediff_lambda), &guide)?;
    s.retain_term = Some(keep.value);
    s.unlearn_term = Some(guide.value);
    Ok(s)
}

/// Draws of the SISS objective.
///
/// Each draw picks `a_r`, `a_u`, then `x_t` from the mixture
/// `(1 − λ) q_t(· | a_r) + λ q_t(· | a_u)` by a Bernoulli branch, and carries
/// the two terms `ρ_r ‖ε − (x_t − γ_t a_r)/σ_t‖²` and
/// `−s ρ_u ‖ε − (x_t − γ_t a_u)/σ_t‖²` with density ratios `ρ` taken in log space.
pub fn siss_objective<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    batch: usize,
    mixture_lambda: f64,
    scale: f64,
) -> Result<Objective<T>> {
    check_batch(batch)?;
    if !(mixture_lambda > 0.0 && mixture_lambda < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "SISS mixture weight {mixture_lambda} must lie in (0, 1)"
        )));
    }
    let d = data.dim();
    let log_keep = T::of((1.0 - mixture_lambda).ln());
    let log_forget = T::of(mixture_lambda.ln());
    let s = T::of(scale);
    let mut obj = Objective::new(d, inv(batch));
    for _ in 0..batch {
        let t = rng.timestep(schedule.steps());
        let r = rng.below(data.n_remain());
        let u = rng.below(data.n_forget());
        let from_forget = rng.bernoulli(mixture_lambda);
        let eps: Vec<T> = rng.standard_normal(d);
        let a_r = data.remain().row(r);
        let a_u = data.forget().row(u);
        let x = forward_sample(schedule, if from_forget { a_u } else { a_r }, t, &eps)?;

        let lq_r = log_q_unchecked(schedule, &x, a_r, t);
        let lq_u = log_q_unchecked(schedule, &x, a_u, t);
        let lq_mix = log_sum_exp(&[log_keep + lq_r, log_forget + lq_u]);
        let rho_r = (lq_r - lq_mix).exp();
        let rho_u = (lq_u - lq_mix).exp();

        let (g, sig) = (schedule.gamma(t), schedule.sigma(t));
        let target_r: Vec<T> = x.iter().zip(a_r).map(|(&x, &a)| (x - g * a) / sig).collect();
        let target_u: Vec<T> = x.iter().zip(a_u).map(|(&x, &a)| (x - g * a) / sig).collect();
        let draw = Draw {
            t,
            remain_index: Some(r),
            forget_index: Some(u),
        };
        obj.push(
            &x,
            t,
            [(rho_r, target_r.as_slice()), (-s * rho_u, target_u.as_slice())],
            draw,
        );
    }
    Ok(obj)
}

/// Subtracted importance-sampled scores.
pub fn loss_siss<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    spec: &LossSpec,
) -> Result<LossSample<T>> {
    let obj = siss_objective(
        schedule,
        data,
        rng,
        spec.batch_remain,
        spec.siss_mixture_lambda,
        spec.siss_scale,
    )?;
    LossSample::from_objective(&obj, model)
}

/// Weight normalisation used by the importance-sampled unlearning sums.
///
/// `Scaled` multiplies every normalised weight by a factor and exists to
/// fault-inject the verification harness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightNormalization {
    Exact,
    Scaled(f64),
}

/// Adds one importance-sampled draw: `x_t ~ q_t(· | a_u)` redirected to the
/// candidate rows of `A_r` (in the given order) with softmax weights.
#[allow(clippy::too_many_arguments)]
fn push_redirect_draw<T: Scalar>(
    obj: &mut Objective<T>,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    t: usize,
    u: usize,
    x: &[T],
    candidates: &[usize],
    norm: WeightNormalization,
) {
    let remain = data.remain();
    let mut weights = weights_over(schedule, t, x, candidates.iter().map(|&i| remain.row(i)));
    if let WeightNormalization::Scaled(f) = norm {
        for w in &mut weights {
            *w *= T::of(f);
        }
    }
    let (g, sig) = (schedule.gamma(t), schedule.sigma(t));
    let targets: Vec<Vec<T>> = candidates
        .iter()
        .map(|&i| x.iter().zip(remain.row(i)).map(|(&x, &a)| (x - g * a) / sig).collect())
        .collect();
    let draw = Draw {
        t,
        remain_index: None,
        forget_index: Some(u),
    };
    obj.push(
        x,
        t,
        weights.iter().copied().zip(targets.iter().map(Vec::as_slice)),
        draw,
    );
}

fn redirect_objective<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    batch: usize,
    candidates: impl Fn(usize) -> Vec<usize>,
    norm: WeightNormalization,
) -> Result<Objective<T>> {
    check_batch(batch)?;
    let d = data.dim();
    let mut obj = Objective::new(d, inv(batch));
    for _ in 0..batch {
        let t = rng.timestep(schedule.steps());
        let u = rng.below(data.n_forget());
        let eps: Vec<T> = rng.standard_normal(d);
        let x = forward_sample(schedule, data.forget().row(u), t, &eps)?;
        push_redirect_draw(&mut obj, schedule, data, t, u, &x, &candidates(u), norm);
    }
    Ok(obj)
}

/// Draws of the exhaustive importance-sampled unlearning loss: `x_t` is drawn
/// around `A_u` and redirected to every row of `A_r` with weights
/// `w_t(x_t; a_r) ∝ q_t(x_t | a_r)` normalised over all of `A_r`.
pub fn unlearn_full_objective<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    batch: usize,
    norm: WeightNormalization,
) -> Result<Objective<T>> {
    if data.n_remain() > FULL_SUM_LIMIT {
        return Err(Error::GuardExceeded {
            size: data.n_remain(),
            limit: FULL_SUM_LIMIT,
        });
    }
    let all: Vec<usize> = (0..data.n_remain()).collect();
    redirect_objective(schedule, data, rng, batch, |_| all.clone(), norm)
}

/// Draws of the `k`-nearest-neighbour truncated unlearning loss. Candidates
/// are summed in ascending row order, so `k = n_r` reproduces
/// [`unlearn_full_objective`] bit for bit.
pub fn retrack_unlearn_objective<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    index: &NeighborIndex<T>,
    rng: &mut RngStream,
    batch: usize,
) -> Result<Objective<T>> {
    if index.n_forget() != data.n_forget() {
        return Err(Error::DimensionMismatch {
            context: "neighbour index rows",
            expected: data.n_forget(),
            found: index.n_forget(),
        });
    }
    redirect_objective(
        schedule,
        data,
        rng,
        batch,
        |u| index.sorted_indices(u),
        WeightNormalization::Exact,
    )
}

/// Exhaustive unlearning loss over all of `A_r`.
pub fn loss_unlearn_full<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    rng: &mut RngStream,
    batch: usize,
) -> Result<LossSample<T>> {
    let obj = unlearn_full_objective(schedule, data, rng, batch, WeightNormalization::Exact)?;
    let mut s = LossSample::from_objective(&obj, model)?;
    s.unlearn_term = Some(s.value);
    Ok(s)
}

/// Truncated unlearning loss over the `k` nearest neighbours of each `a_u`.
pub fn loss_retrack_unlearn<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    index: &NeighborIndex<T>,
    rng: &mut RngStream,
    batch: usize,
) -> Result<LossSample<T>> {
    let obj = retrack_unlearn_objective(schedule, data, index, rng, batch)?;
    let mut s = LossSample::from_objective(&obj, model)?;
    s.unlearn_term = Some(s.value);
    Ok(s)
}

/// Truncated weights `w̃_t(x_t; a_r)` over the neighbours of unlearning row
/// `u`, listed in neighbour rank order.
pub fn truncated_weights<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    t: usize,
    x_t: &[T],
    u: usize,
    index: &NeighborIndex<T>,
    data: &SplitDataset<T>,
) -> Result<Vec<T>> {
    schedule.check_t(t)?;
    if u >= index.n_forget() {
        return Err(Error::InvalidArgument(format!("no neighbours recorded for unlearning row {u}")));
    }
    let remain = data.remain();
    Ok(weights_over(
        schedule,
        t,
        x_t,
        index.neighbors(u).iter().map(|n| remain.row(n.index)),
    ))
}

/// `λ · L_unlearn + (1 − λ) · L_vanilla`, with the unlearning term either
/// truncated to the neighbour index or (`index = None`) exhaustive.
pub fn loss_retrack<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    index: Option<&NeighborIndex<T>>,
    rng: &mut RngStream,
    spec: &LossSpec,
) -> Result<LossSample<T>> {
    let lambda = spec.lambda_retrack;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda_retrack {lambda} outside [0, 1]")));
    }
    let (mut retain_rng, mut forget_rng) = role_streams(rng);
    let unlearn = match index {
        Some(index) => loss_retrack_unlearn(model, schedule, data, index, &mut forget_rng, spec.batch_forget)?,
        None => loss_unlearn_full(model, schedule, data, &mut forget_rng, spec.batch_forget)?,
    };
    let keep = loss_vanilla(model, schedule, data, &mut retain_rng, spec.batch_remain)?;
    let lam = T::of(lambda);
    let mut s = LossSample::combine(lam, &unlearn, T::one() - lam, &keep)?;
    s.unlearn_term = Some(unlearn.value);
    s.retain_term = Some(keep.value);
    Ok(s)
}

/// Evaluates whichever objective `spec.method` selects.
///
/// Vanilla and NegGrad draw from the same role streams as the composite
/// losses, so e.g. ReTrack at `λ = 0` replays vanilla fine-tuning exactly.
pub fn compute_loss<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    index: Option<&NeighborIndex<T>>,
    rng: &mut RngStream,
    spec: &LossSpec,
) -> Result<LossSample<T>> {
    match spec.method {
        Method::Vanilla => {
            let (mut retain_rng, _) = role_streams(rng);
            loss_vanilla(model, schedule, data, &mut retain_rng, spec.batch_remain)
        }
        Method::NegGrad => {
            let (_, mut forget_rng) = role_streams(rng);
            loss_neggrad(model, schedule, data, &mut forget_rng, spec.batch_forget)
        }
        Method::EraseDiff => loss_erasediff(model, schedule, data, rng, spec),
        Method::Siss => loss_siss(model, schedule, data, rng, spec),
        Method::ReTrack => {
            let index = index.ok_or_else(|| {
                Error::InvalidArgument("retrack needs a neighbour index built before fine-tuning".into())
            })?;
            loss_retrack(model, schedule, data, Some(index), rng, spec)
        }
        Method::ReTrackFull => loss_retrack(model, schedule, data, None, rng, spec),
    }
}
