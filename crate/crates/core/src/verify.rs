//! Self-checks of the unlearning objectives against their closed forms:
//! unbiasedness of the exhaustive unlearning loss, overlap versus Euclidean
//! ranking, truncation quality, stationarity at the target model and
//! finite-difference gradients.

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::losses::{
    build_neighbor_index, retrack_unlearn_objective, unlearn_full_objective, vanilla_objective, LossSample,
    LossSpec, Method, SplitDataset, WeightNormalization,
};
use crate::model::{NoisePredictor, Trainable};
use crate::numerics::{Denoiser, DenoiserConfig, RngStream, Tensor2};
use crate::oracle::{knn_ranking_check, retrained_reference, ResidualOverOracle};
use crate::scalar::Scalar;
use crate::stats;
use crate::trainer::{unlearn, TrainConfig};

/// Rows per objective chunk in Monte-Carlo checks, to bound memory.
const CHUNK: usize = 10_000;

/// One named check with its measured statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn new(checks: Vec<CheckOutcome>) -> Self {
        Self {
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

/// Settings of [`run_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub horizon: usize,
    /// Monte-Carlo draws per side of the unbiasedness check.
    pub unbiased_draws: usize,
    pub ranking_datasets: usize,
    pub ranking_points: usize,
    pub truncation_draws: usize,
    pub stationarity_steps: usize,
    pub stationarity_lr: f64,
    /// Slope-test p-value below which drift is declared.
    pub stationarity_alpha: f64,
    /// Largest acceptable `|Δ| / SE` in the unbiasedness check.
    pub max_z: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon: 10,
            unbiased_draws: 100_000,
            ranking_datasets: 20,
            ranking_points: 50,
            truncation_draws: 1000,
            stationarity_steps: 500,
            stationarity_lr: 1e-4,
            stationarity_alpha: 0.01,
            max_z: 3.0,
        }
    }
}

/// Uniform points in `[-1, 1]^d`.
pub fn uniform_points(n: usize, d: usize, rng: &mut RngStream) -> Result<Tensor2<f64>> {
    let data = (0..n * d).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    Tensor2::from_vec(n, d, data)
}

/// Random 2-d dataset with `n_remain + n_forget` distinct points.
pub fn random_split(n_remain: usize, n_forget: usize, rng: &mut RngStream) -> Result<SplitDataset<f64>> {
    let pts = uniform_points(n_remain + n_forget, 2, rng)?;
    let (r, u) = pts.as_slice().split_at(2 * n_remain);
    SplitDataset::new(
        Tensor2::from_vec(n_remain, 2, r.to_vec())?,
        Tensor2::from_vec(n_forget, 2, u.to_vec())?,
    )
}

/// The 8-point 2-d dataset of the default suite (6 remaining, 2 unlearning).
pub fn eight_point_dataset(seed: u64) -> Result<SplitDataset<f64>> {
    random_split(6, 2, &mut RngStream::new(seed, 8))
}

/// Small random denoiser used by the default suite.
pub fn probe_denoiser(horizon: usize, seed: u64) -> Result<Denoiser<f64>> {
    Denoiser::new(DenoiserConfig::standard(2, horizon).with_hidden(vec![32, 32]), seed)
}

fn mc_values<T: Scalar>(draws: usize, mut chunk: impl FnMut(usize) -> Result<Vec<T>>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(draws);
    while out.len() < draws {
        let n = CHUNK.min(draws - out.len());
        out.extend(chunk(n)?.into_iter().map(Scalar::f64));
    }
    Ok(out)
}

/// Compares Monte-Carlo means of the vanilla loss and the exhaustive
/// unlearning loss; they estimate the same expectation.
#[allow(clippy::too_many_arguments)]
pub fn unbiasedness_check<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    draws: usize,
    seed: u64,
    norm: WeightNormalization,
    max_z: f64,
) -> Result<CheckOutcome> {
    if draws < 2 {
        return Err(Error::InvalidArgument("unbiasedness check needs at least 2 draws".into()));
    }
    let mut rv = RngStream::new(seed, 0);
    let mut ru = RngStream::new(seed, 1);
    let vanilla = mc_values(
        draws,
        |n| vanilla_objective(schedule, data, &mut rv, n)?.per_draw(model),
    )?;
    let unlearn = mc_values(
        draws,
        |n| unlearn_full_objective(schedule, data, &mut ru, n, norm)?.per_draw(model),
    )?;
    let (mv, mu) = (stats::mean(&vanilla), stats::mean(&unlearn));
    let se = (stats::standard_error(&vanilla).powi(2) + stats::standard_error(&unlearn).powi(2)).sqrt();
    let z = (mv - mu).abs() / se;
    Ok(CheckOutcome {
        name: "unbiasedness".into(),
        passed: z < max_z,
        measured: z,
        threshold: max_z,
        detail: format!("vanilla mean {mv:.6}, unlearn mean {mu:.6}, combined SE {se:.6}, {draws} draws each"),
    })
}

/// Largest deviation from 1 of the summed unlearning weights over `draws`
/// sampled `(t, x_t)`.
pub fn weight_normalization_check<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    draws: usize,
    seed: u64,
    norm: WeightNormalization,
) -> Result<CheckOutcome> {
    let obj = unlearn_full_objective(schedule, data, &mut RngStream::new(seed, 4), draws, norm)?;
    let worst = (0..obj.len())
        .map(|i| (obj.terms(i).map(|(w, _)| w.f64()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(CheckOutcome {
        name: "weight_normalization".into(),
        passed: worst <= 1e-12,
        measured: worst,
        threshold: 1e-12,
        detail: format!("largest |sum of weights - 1| over {draws} draws"),
    })
}

/// Largest gradient norm of the exhaustive unlearning loss at the
/// remaining-set oracle over `draws` draws. The weighted target
/// `Σ_r w_r (x_t − γ_t a_r)/σ_t` equals the oracle output, so every draw has
/// zero gradient up to rounding.
pub fn oracle_fixed_point_check(
    data: &SplitDataset<f64>,
    schedule: &NoiseSchedule<f64>,
    draws: usize,
    seed: u64,
    norm: WeightNormalization,
    tolerance: f64,
) -> Result<CheckOutcome> {
    let oracle = retrained_reference(data, schedule)?;
    let model = ResidualOverOracle::at_oracle(oracle, probe_denoiser(schedule.steps(), seed)?)?;
    let mut rng = RngStream::new(seed, 3);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let obj = unlearn_full_objective(schedule, data, &mut rng, 1, norm)?;
        let (_, grads) = obj.value_and_grad(&model)?;
        worst = worst.max(grads.norm());
    }
    Ok(CheckOutcome {
        name: "oracle_fixed_point".into(),
        passed: worst < tolerance,
        measured: worst,
        threshold: tolerance,
        detail: format!("largest per-draw gradient norm over {draws} draws at the remaining-set oracle"),
    })
}

/// Overlap-versus-distance ranking on `datasets` random point sets.
pub fn ranking_check(datasets: usize, points: usize, horizon: usize, seed: u64) -> Result<CheckOutcome> {
    if points < 2 {
        return Err(Error::InvalidArgument("ranking check needs at least 2 points".into()));
    }
    let schedule = NoiseSchedule::<f64>::linear(horizon)?;
    let n_forget = (points / 5).max(1);
    let mut mismatches = 0;
    let mut compared = 0;
    for i in 0..datasets {
        let mut rng = RngStream::new(seed, 50).derive(i as u64);
        let data = random_split(points - n_forget, n_forget, &mut rng)?;
        let report = knn_ranking_check(&data, &schedule);
        mismatches += report.mismatches;
        compared += report.entries.len();
    }
    Ok(CheckOutcome {
        name: "knn_ranking".into(),
        passed: mismatches == 0,
        measured: mismatches as f64,
        threshold: 0.0,
        detail: format!("{compared} unlearning points over {datasets} datasets of {points} points"),
    })
}

/// Mean `|L(θ; k) − L_full(θ)|` per `k` on shared draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationSweep {
    pub ks: Vec<usize>,
    pub mean_abs_deviation: Vec<f64>,
    /// Whether `k = n_r` reproduced the exhaustive loss bit for bit.
    pub full_k_bit_exact: bool,
    pub non_increasing: bool,
}

/// `1, 2, 4, …` below `n`, then `n`.
pub fn doubling_grid(n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = std::iter::successors(Some(1usize), |k| k.checked_mul(2))
        .take_while(|&k| k < n)
        .collect();
    ks.push(n);
    ks
}

pub fn truncation_sweep<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    ks: &[usize],
    draws: usize,
    seed: u64,
) -> Result<TruncationSweep> {
    let rng = RngStream::new(seed, 2);
    let full_obj = unlearn_full_objective(schedule, data, &mut rng.clone(), draws, WeightNormalization::Exact)?;
    let full = full_obj.per_draw(model)?;
    let mut devs = Vec::with_capacity(ks.len());
    let mut bit_exact = true;
    for &k in ks {
        let index = build_neighbor_index(data, k)?;
        let obj = retrack_unlearn_objective(schedule, data, &index, &mut rng.clone(), draws)?;
        let vals = obj.per_draw(model)?;
        let dev: Vec<f64> = vals.iter().zip(&full).map(|(&a, &b)| (a - b).f64().abs()).collect();
        devs.push(stats::mean(&dev));
        if k == data.n_remain() {
            let same_rows = vals.iter().zip(&full).all(|(a, b)| a.f64().to_bits() == b.f64().to_bits());
            let truncated = LossSample::from_objective(&obj, model)?;
            let exhaustive = LossSample::from_objective(&full_obj, model)?;
            bit_exact &= same_rows && truncated == exhaustive;
        }
    }
    let non_increasing = devs.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    Ok(TruncationSweep {
        ks: ks.to_vec(),
        mean_abs_deviation: devs,
        full_k_bit_exact: bit_exact,
        non_increasing,
    })
}

impl TruncationSweep {
    pub fn outcome(&self) -> CheckOutcome {
        let worst_rise = self
            .mean_abs_deviation
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max);
        CheckOutcome {
            name: "truncation_sweep".into(),
            passed: self.non_increasing && self.full_k_bit_exact,
            measured: worst_rise,
            threshold: 1e-12,
            detail: format!(
                "k = {:?}, mean |L_k - L_full| = {:?}, k = n_r bit-exact: {}",
                self.ks, self.mean_abs_deviation, self.full_k_bit_exact
            ),
        }
    }
}

/// Slope test of gradient norms while fine-tuning from the target model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stationarity {
    pub grad_norms: Vec<f64>,
    pub slope: f64,
    pub p_value: f64,
}

/// Runs ReTrack fine-tuning (`k = n_r`, `λ = 0.5`) on the remaining-set
/// oracle plus a zero-output residual network and regresses the gradient norm
/// on the step index.
pub fn stationarity(
    data: &SplitDataset<f64>,
    schedule: &NoiseSchedule<f64>,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Stationarity> {
    let oracle = retrained_reference(data, schedule)?;
    let residual = probe_denoiser(schedule.steps(), seed)?;
    let mut model = ResidualOverOracle::at_oracle(oracle, residual)?;
    let index = build_neighbor_index(data, data.n_remain())?;
    let config = TrainConfig {
        horizon: schedule.steps(),
        steps,
        learning_rate,
        seed,
        loss: LossSpec {
            method: Method::ReTrack,
            k: data.n_remain(),
            lambda_retrack: 0.5,
            ..LossSpec::default()
        },
        hidden: vec![32, 32],
        time_dim: 16,
        checkpoint_every: 0,
        eval_every: 0,
    };
    let record = unlearn(&config, &mut model, schedule, data, Some(&index), None)?;
    let grad_norms = record.grad_norms();
    let xs: Vec<f64> = (0..grad_norms.len()).map(|i| i as f64).collect();
    let fit = stats::slope_test(&xs, &grad_norms)?;
    Ok(Stationarity {
        grad_norms,
        slope: fit.slope,
        p_value: fit.p_value,
    })
}

impl Stationarity {
    pub fn outcome(&self, alpha: f64) -> CheckOutcome {
        CheckOutcome {
            name: "stationarity".into(),
            passed: self.p_value > alpha,
            measured: self.p_value,
            threshold: alpha,
            detail: format!(
                "slope {:.3e} per step over {} steps, mean gradient norm {:.4}",
                self.slope,
                self.grad_norms.len(),
                stats::mean(&self.grad_norms)
            ),
        }
    }
}

/// Worst entry of an analytic-versus-central-difference gradient comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    /// `layer{i}.weight[j]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Compares the analytic gradient of `loss` at `model` with central
/// differences of step `h` on every parameter. The relative error is
/// `|a − n| / max(|a|, |n|, floor)`. `loss` must be deterministic in the
/// model (fix its draws by cloning the stream inside the closure).
pub fn gradient_check<T, M, F>(model: &M, loss: F, h: f64, floor: f64) -> Result<GradientCheck>
where
    T: Scalar,
    M: Trainable<T> + Clone,
    F: Fn(&M) -> Result<LossSample<T>>,
{
    let analytic = loss(model)?.grads;
    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for l in 0..analytic.len() {
        for j in 0..analytic.tensors()[l].as_slice().len() {
            let orig = probe.params().tensors()[l].as_slice()[j];
            probe.params_mut().tensors_mut()[l].as_mut_slice()[j] = orig + T::of(h);
            let up = loss(&probe)?.value.f64();
            probe.params_mut().tensors_mut()[l].as_mut_slice()[j] = orig - T::of(h);
            let down = loss(&probe)?.value.f64();
            probe.params_mut().tensors_mut()[l].as_mut_slice()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.tensors()[l].as_slice()[j].f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if !(rel <= worst.0) {
                worst = (rel, format!("{}[{j}]", crate::numerics::Params::<T>::label(l)));
            }
            checked += 1;
        }
    }
    Ok(GradientCheck {
        max_rel_error: worst.0,
        worst: worst.1,
        checked,
    })
}

/// Runs every check on the 8-point dataset (and the random ranking sets).
/// `norm` other than `Exact` fault-injects the unlearning weights.
pub fn run_suite(config: &SuiteConfig, norm: WeightNormalization) -> Result<VerifyReport> {
    let schedule = NoiseSchedule::<f64>::linear(config.horizon)?;
    let data = eight_point_dataset(config.seed)?;
    let model = probe_denoiser(config.horizon, config.seed)?;
    let mut checks = vec![unbiasedness_check(
        &model,
        &schedule,
        &data,
        config.unbiased_draws,
        config.seed,
        norm,
        config.max_z,
    )?];
    checks.push(weight_normalization_check(&schedule, &data, 1000, config.seed, norm)?);
    checks.push(oracle_fixed_point_check(&data, &schedule, 200, config.seed, norm, 1e-8)?);
    checks.push(ranking_check(
        config.ranking_datasets,
        config.ranking_points,
        100,
        config.seed,
    )?);
    let ks = doubling_grid(data.n_remain());
    checks.push(truncation_sweep(&model, &schedule, &data, &ks, config.truncation_draws, config.seed)?.outcome());
    checks.push(
        stationarity(
            &data,
            &schedule,
            config.stationarity_steps,
            config.stationarity_lr,
            config.seed,
        )?
        .outcome(config.stationarity_alpha),
    );
    Ok(VerifyReport::new(checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_grid_ends_at_n() {
        assert_eq!(doubling_grid(6), vec![1, 2, 4, 6]);
        assert_eq!(doubling_grid(8), vec![1, 2, 4, 8]);
        assert_eq!(doubling_grid(1), vec![1]);
    }

    #[test]
    fn scaled_weights_break_normalization() {
        let schedule = NoiseSchedule::<f64>::linear(10).unwrap();
        let data = eight_point_dataset(3).unwrap();
        assert!(weight_normalization_check(&schedule, &data, 500, 3, WeightNormalization::Exact).unwrap().passed);
        let bad = weight_normalization_check(&schedule, &data, 500, 3, WeightNormalization::Scaled(1.001)).unwrap();
        assert!(!bad.passed);
        assert!((bad.measured - 0.001).abs() < 1e-9);
    }

    #[test]
    fn literal_means_of_vanilla_and_unlearning_differ() {
        // Weights normalised over A_r with x_t drawn around A_u do not
        // reproduce the vanilla expectation; the check reports the gap.
        let schedule = NoiseSchedule::<f64>::linear(10).unwrap();
        let data = eight_point_dataset(3).unwrap();
        let model = probe_denoiser(10, 3).unwrap();
        let out = unbiasedness_check(&model, &schedule, &data, 20_000, 3, WeightNormalization::Exact, 3.0).unwrap();
        assert!(!out.passed, "{out:?}");
    }

    #[test]
    fn remaining_oracle_is_a_fixed_point_of_the_unlearning_loss() {
        let schedule = NoiseSchedule::<f64>::linear(10).unwrap();
        let data = eight_point_dataset(4).unwrap();
        let out = oracle_fixed_point_check(&data, &schedule, 100, 4, WeightNormalization::Exact, 1e-8).unwrap();
        assert!(out.passed, "{out:?}");
    }

    #[test]
    fn gradient_check_catches_a_wrong_gradient() {
        let model = Denoiser::<f64>::new(DenoiserConfig::standard(2, 10).with_hidden(vec![4]), 1).unwrap();
        let schedule = NoiseSchedule::<f64>::linear(10).unwrap();
        let data = eight_point_dataset(1).unwrap();
        let rng = RngStream::new(9, 0);
        let honest = |m: &Denoiser<f64>| {
            let obj = vanilla_objective(&schedule, &data, &mut rng.clone(), 4)?;
            LossSample::from_objective(&obj, m)
        };
        assert!(gradient_check(&model, honest, 1e-5, 1e-6).unwrap().max_rel_error < 1e-6);
        let doubled = |m: &Denoiser<f64>| {
            let mut s = honest(m)?;
            s.grads.scale(2.0);
            Ok(s)
        };
        assert!(gradient_check(&model, doubled, 1e-5, 1e-6).unwrap().max_rel_error > 0.3);
    }
}
