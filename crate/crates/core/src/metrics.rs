//! Evaluation protocol: mode frequencies, paired likelihoods, noise-inject
//! and reconstruct similarity, and distance to a reference denoiser.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise_from, forward_sample, nll_elbo, sample_batch, NoiseSchedule};
use crate::error::{check_dim, Error, Result};
use crate::losses::SplitDataset;
use crate::model::NoisePredictor;
use crate::numerics::{RngStream, Tensor2};
use crate::scalar::{sq_dist, Scalar};
use crate::stats;

const SAMPLE_STREAM: u64 = 0x5341_4d50;
const NLL_STREAM: u64 = 0x4e4c_4c00;
const RECON_STREAM: u64 = 0x5245_434f;
const PROBE_STREAM: u64 = 0x5052_4f42;

/// Mode centres and the assignment rule for generated samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub centers: Vec<Vec<f64>>,
    /// Samples farther than this from every centre are unassigned; `None`
    /// assigns every sample to its nearest centre.
    pub radius: Option<f64>,
}

impl ModeSpec {
    pub fn new(centers: Vec<Vec<f64>>, radius: Option<f64>) -> Result<Self> {
        let spec = Self { centers, radius };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.centers.first().map_or(0, Vec::len);
        if d == 0 || self.centers.iter().any(|c| c.len() != d) {
            return Err(Error::InvalidArgument("mode centres must be non-empty and equally long".into()));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) {
                return Err(Error::InvalidArgument(format!("mode radius {r} must be positive")));
            }
        }
        for (i, a) in self.centers.iter().enumerate() {
            if self.centers[..i].iter().any(|b| b == a) {
                return Err(Error::InvalidArgument(format!("mode centre {i} is duplicated")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// Index of the mode `x` belongs to, if any. Ties go to the lower index.
    pub fn assign<T: Scalar>(&self, x: &[T]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.centers.iter().enumerate() {
            let d2: f64 = x.iter().zip(c).map(|(&v, &m)| (v.f64() - m).powi(2)).sum();
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        }
        let (i, d2) = best?;
        match self.radius {
            Some(r) if d2.sqrt() > r => None,
            _ => Some(i),
        }
    }
}

/// Per-mode sample counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub counts: Vec<usize>,
    pub unassigned: usize,
}

impl ModeCounts {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.unassigned
    }

    /// Fraction of samples in mode `i`; 0 when there are no samples.
    pub fn frequency(&self, i: usize) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            self.counts[i] as f64 / n as f64
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|i| self.frequency(i)).collect()
    }

    pub fn unassigned_frequency(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            self.unassigned as f64 / n as f64
        }
    }
}

pub fn mode_histogram<T: Scalar>(samples: &Tensor2<T>, modes: &ModeSpec) -> Result<ModeCounts> {
    check_dim("sample width", modes.dim(), samples.cols())?;
    let mut counts = ModeCounts {
        counts: vec![0; modes.len()],
        unassigned: 0,
    };
    for row in samples.iter_rows() {
        match modes.assign(row) {
            Some(i) => counts.counts[i] += 1,
            None => counts.unassigned += 1,
        }
    }
    Ok(counts)
}

/// Histogram of `n_samples` ancestral samples (chain `i` uses `rng.derive(i)`).
pub fn sample_modes<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    modes: &ModeSpec,
    n_samples: usize,
    rng: &RngStream,
) -> Result<ModeCounts> {
    let samples = sample_batch(model, schedule, n_samples, rng)?;
    mode_histogram(&samples, modes)
}

/// Fraction of `n_samples` generated samples assigned to `target_mode`.
pub fn mode_frequency<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    modes: &ModeSpec,
    n_samples: usize,
    rng: &RngStream,
    target_mode: usize,
) -> Result<f64> {
    if target_mode >= modes.len() {
        return Err(Error::InvalidArgument(format!(
            "target mode {target_mode} of {} modes",
            modes.len()
        )));
    }
    if n_samples == 0 {
        return Ok(0.0);
    }
    Ok(sample_modes(model, schedule, modes, n_samples, rng)?.frequency(target_mode))
}

/// NLL of one point under two models on identical `(t, ε)` draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllPair {
    pub a: f64,
    pub b: f64,
}

impl NllPair {
    pub fn difference(&self) -> f64 {
        self.a - self.b
    }
}

/// Point `i` is evaluated with `rng.derive(i)` for both models.
pub fn paired_nll<T: Scalar, A: NoisePredictor<T> + ?Sized, B: NoisePredictor<T> + ?Sized>(
    model_a: &A,
    model_b: &B,
    schedule: &NoiseSchedule<T>,
    points: &Tensor2<T>,
    rng: &RngStream,
    n_mc: usize,
) -> Result<Vec<NllPair>> {
    points
        .iter_rows()
        .enumerate()
        .map(|(i, x0)| {
            let lane = rng.derive(i as u64);
            let a = nll_elbo(model_a, schedule, x0, &mut lane.clone(), n_mc)?.f64();
            let b = nll_elbo(model_b, schedule, x0, &mut lane.clone(), n_mc)?.f64();
            Ok(NllPair { a, b })
        })
        .collect()
}

/// Mean ELBO NLL over `points`, point `i` drawn from `rng.derive(i)`.
pub fn mean_nll<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    points: &Tensor2<T>,
    rng: &RngStream,
    n_mc: usize,
) -> Result<f64> {
    let values = points
        .iter_rows()
        .enumerate()
        .map(|(i, x0)| Ok(nll_elbo(model, schedule, x0, &mut rng.derive(i as u64), n_mc)?.f64()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(stats::mean(&values))
}

/// Default noise-injection step, `⌊T/4⌋` (at least 1).
pub fn default_t_inject(horizon: usize) -> usize {
    (horizon / 4).max(1)
}

/// Cosine similarity of `a - center` and `b - center`; 0 if either is zero.
pub fn centered_cosine<T: Scalar>(a: &[T], b: &[T], center: &[T]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for ((&x, &y), &c) in a.iter().zip(b).zip(center) {
        let (x, y) = ((x - c).f64(), (y - c).f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Noises `a` to step `t_inject`, denoises back to step 0, and returns the
/// centred cosine similarity between the reconstruction and `a`.
pub fn reconstruction_similarity<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    a: &[T],
    center: &[T],
    rng: &mut RngStream,
    t_inject: usize,
) -> Result<f64> {
    if t_inject == 0 || t_inject >= schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "t_inject {t_inject} must lie in 1..{}",
            schedule.steps()
        )));
    }
    check_dim("centre width", a.len(), center.len())?;
    let eps: Vec<T> = rng.standard_normal(a.len());
    let x_t = forward_sample(schedule, a, t_inject, &eps)?;
    let recon = denoise_from(model, schedule, &x_t, t_inject, rng)?;
    Ok(centered_cosine(&recon, a, center))
}

/// RMS over probes of `‖ε_θ(x, t) − ε_ref(x, t)‖ / √d`, with probes
/// `x = γ_t a + σ_t ε` for every anchor `a`, every `t` in `t_grid`, and
/// `per_anchor` noise draws from `rng`.
pub fn oracle_distance<T: Scalar, M: NoisePredictor<T> + ?Sized, R: NoisePredictor<T> + ?Sized>(
    model: &M,
    reference: &R,
    schedule: &NoiseSchedule<T>,
    anchors: &Tensor2<T>,
    t_grid: &[usize],
    per_anchor: usize,
    rng: &RngStream,
) -> Result<f64> {
    let d = anchors.cols();
    let mut rng = rng.clone();
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    for &t in t_grid {
        schedule.check_t(t)?;
        for a in anchors.iter_rows() {
            for _ in 0..per_anchor {
                let eps: Vec<T> = rng.standard_normal(d);
                xs.extend(forward_sample(schedule, a, t, &eps)?);
                ts.push(t);
            }
        }
    }
    if ts.is_empty() {
        return Err(Error::InvalidArgument("oracle_distance needs at least one probe".into()));
    }
    let xs = Tensor2::from_vec(ts.len(), d, xs)?;
    let pa = model.predict_batch(&xs, &ts)?;
    let pb = reference.predict_batch(&xs, &ts)?;
    let mean_sq: f64 = pa
        .iter_rows()
        .zip(pb.iter_rows())
        .map(|(x, y)| sq_dist(x, y).f64() / d as f64)
        .sum::<f64>()
        / ts.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Sample counts and grids used by [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub n_samples: usize,
    /// ELBO draws per point.
    pub n_mc: usize,
    /// Remaining-set points the remaining NLL is averaged over (the first rows).
    pub nll_remain_points: usize,
    /// Defaults to `⌊T/4⌋` when absent.
    pub t_inject: Option<usize>,
    /// Reconstructions averaged per unlearning point.
    pub recon_repeats: usize,
    pub oracle_t_grid: Vec<usize>,
    pub oracle_probes_per_point: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            n_mc: 64,
            nll_remain_points: 100,
            t_inject: None,
            recon_repeats: 10,
            oracle_t_grid: vec![1, 5, 10, 25],
            oracle_probes_per_point: 16,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.n_mc == 0 || self.recon_repeats == 0 || self.oracle_probes_per_point == 0 {
            return Err(Error::InvalidArgument("evaluation counts must be at least 1".into()));
        }
        if let Some(&t) = self.oracle_t_grid.iter().find(|&&t| t == 0 || t > horizon) {
            return Err(Error::InvalidArgument(format!("oracle grid step {t} outside 1..={horizon}")));
        }
        if self.oracle_t_grid.is_empty() {
            return Err(Error::InvalidArgument("oracle_t_grid is empty".into()));
        }
        let t = self.t_inject.unwrap_or_else(|| default_t_inject(horizon));
        if t == 0 || t >= horizon {
            return Err(Error::InvalidArgument(format!("t_inject {t} must lie in 1..{horizon}")));
        }
        Ok(())
    }
}

/// Evaluation of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Hash of the configuration that produced the row; empty unless a caller sets it.
    #[serde(default)]
    pub config_hash: String,
    pub method: String,
    pub step: usize,
    pub seed: u64,
    /// Frequency of the unlearned mode among generated samples.
    pub frequency: f64,
    pub nll_unlearn: f64,
    pub nll_remain: f64,
    pub recon_similarity: f64,
    pub oracle_distance: f64,
    pub n_samples: usize,
    /// Frequency of every mode, in [`ModeSpec`] order.
    pub mode_frequencies: Vec<f64>,
    pub unassigned: f64,
}

impl MetricsReport {
    /// Frequencies of every mode except `target`.
    pub fn retained_frequencies(&self, target: usize) -> Vec<f64> {
        self.mode_frequencies
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target)
            .map(|(_, &f)| f)
            .collect()
    }

    /// Largest retained-mode shift from `baseline` in units of the two-sample
    /// binomial standard error.
    pub fn retained_distortion(&self, baseline: &MetricsReport, target: usize) -> f64 {
        let ours = self.retained_frequencies(target);
        let base = baseline.retained_frequencies(target);
        ours.iter()
            .zip(&base)
            .map(|(&p, &q)| {
                let se = (stats::proportion_se(p, self.n_samples).powi(2)
                    + stats::proportion_se(q, baseline.n_samples).powi(2))
                .sqrt();
                if se == 0.0 {
                    if p == q {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    (p - q).abs() / se
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Writes reports as CSV, one row per report with a `mode_<i>` column per mode.
pub fn write_reports_csv<W: Write>(reports: &[MetricsReport], out: W) -> Result<()> {
    let modes = reports.first().map_or(0, |r| r.mode_frequencies.len());
    if reports.iter().any(|r| r.mode_frequencies.len() != modes) {
        return Err(Error::InvalidArgument("reports disagree on the number of modes".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "config_hash",
        "method",
        "step",
        "seed",
        "frequency",
        "nll_unlearn",
        "nll_remain",
        "recon_similarity",
        "oracle_distance",
        "n_samples",
        "unassigned",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..modes).map(|i| format!("mode_{i}")));
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.config_hash.clone(),
            r.method.clone(),
            r.step.to_string(),
            r.seed.to_string(),
            r.frequency.to_string(),
            r.nll_unlearn.to_string(),
            r.nll_remain.to_string(),
            r.recon_similarity.to_string(),
            r.oracle_distance.to_string(),
            r.n_samples.to_string(),
            r.unassigned.to_string(),
        ];
        row.extend(r.mode_frequencies.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the full protocol on `model`. All randomness derives from `seed`, so
/// two models evaluated with the same seed see identical draws.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar, M: NoisePredictor<T> + ?Sized, R: NoisePredictor<T> + ?Sized>(
    model: &M,
    reference: &R,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    modes: &ModeSpec,
    target_mode: usize,
    settings: &EvalSettings,
    method: &str,
    step: usize,
    seed: u64,
) -> Result<MetricsReport> {
    settings.validate(schedule.steps())?;
    if target_mode >= modes.len() {
        return Err(Error::InvalidArgument(format!("target mode {target_mode} of {} modes", modes.len())));
    }
    let counts = if settings.n_samples == 0 {
        ModeCounts {
            counts: vec![0; modes.len()],
            unassigned: 0,
        }
    } else {
        sample_modes(model, schedule, modes, settings.n_samples, &RngStream::new(seed, SAMPLE_STREAM))?
    };

    let nll_rng = RngStream::new(seed, NLL_STREAM);
    let nll_unlearn = mean_nll(model, schedule, data.forget(), &nll_rng.derive(0), settings.n_mc)?;
    let n_rem = settings.nll_remain_points.min(data.n_remain());
    let nll_remain = if n_rem == 0 {
        f64::NAN
    } else {
        let head = Tensor2::from_vec(n_rem, data.dim(), data.remain().as_slice()[..n_rem * data.dim()].to_vec())?;
        mean_nll(model, schedule, &head, &nll_rng.derive(1), settings.n_mc)?
    };

    let full = data.full();
    let mut center = vec![T::zero(); data.dim()];
    for row in full.iter_rows() {
        for (c, &v) in center.iter_mut().zip(row) {
            *c += v;
        }
    }
    for c in &mut center {
        *c /= T::of(full.rows() as f64);
    }
    let t_inject = settings.t_inject.unwrap_or_else(|| default_t_inject(schedule.steps()));
    let recon_rng = RngStream::new(seed, RECON_STREAM);
    let mut sims = Vec::new();
    for (u, a) in data.forget().iter_rows().enumerate() {
        for r in 0..settings.recon_repeats {
            let mut lane = recon_rng.derive((u * settings.recon_repeats + r) as u64);
            sims.push(reconstruction_similarity(model, schedule, a, &center, &mut lane, t_inject)?);
        }
    }

    let oracle_distance = oracle_distance(
        model,
        reference,
        schedule,
        data.forget(),
        &settings.oracle_t_grid,
        settings.oracle_probes_per_point,
        &RngStream::new(seed, PROBE_STREAM),
    )?;

    Ok(MetricsReport {
        config_hash: String::new(),
        method: method.to_string(),
        step,
        seed,
        frequency: counts.frequency(target_mode),
        nll_unlearn,
        nll_remain,
        recon_similarity: stats::mean(&sims),
        oracle_distance,
        n_samples: settings.n_samples,
        mode_frequencies: counts.frequencies(),
        unassigned: counts.unassigned_frequency(),
    })
}

#[cfg(test)]
mod tests;
