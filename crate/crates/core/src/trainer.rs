//! Pretraining and unlearning fine-tuning loops.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::losses::{
    compute_loss, denoising_objective_over, retrack_unlearn_objective, role_streams, unlearn_full_objective,
    vanilla_objective, LossSample, LossSpec, Method, NeighborIndex, SplitDataset, WeightNormalization,
};
use crate::model::Trainable;
use crate::numerics::{AdamState, Denoiser, DenoiserConfig, RngStream, Tensor2};
use crate::scalar::Scalar;

/// Stream of the per-step draws in a training run.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
/// Stream of the draws of [`balance_lambda`].
pub const BALANCE_STREAM: u64 = 0x6261_6c61_6e63;

/// Consecutive steps above the divergence threshold before a run aborts.
pub const DIVERGENCE_PATIENCE: usize = 100;
/// Loss magnitude, relative to the first step, that counts as divergent.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Diffusion steps `T`.
    pub horizon: usize,
    /// Optimiser steps `N`.
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossSpec,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    /// Steps between checkpoint hooks; 0 disables them.
    pub checkpoint_every: usize,
    /// Steps between evaluation hooks; 0 disables them.
    pub eval_every: usize,
}

impl TrainConfig {
    /// Pretraining defaults: vanilla loss on all of `A`, 5000 steps at `1e-3`.
    pub fn pretrain_default(seed: u64) -> Self {
        Self {
            horizon: 100,
            steps: 5000,
            learning_rate: 1e-3,
            seed,
            loss: LossSpec::default().with_method(Method::Vanilla),
            hidden: vec![128, 128, 128],
            time_dim: 16,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }

    /// Unlearning defaults: ReTrack, 50 steps at `1e-4`.
    pub fn unlearn_default(seed: u64) -> Self {
        Self {
            steps: 50,
            learning_rate: 1e-4,
            loss: LossSpec::default(),
            ..Self::pretrain_default(seed)
        }
    }

    pub fn denoiser_config(&self, data_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            hidden: self.hidden.clone(),
            time_dim: self.time_dim,
            ..DenoiserConfig::standard(data_dim, self.horizon)
        }
    }

    /// `steps = 0` is allowed and leaves a model untouched.
    pub fn validate(&self, n_remain: Option<usize>) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::InvalidArgument(format!("horizon {} must be at least 2", self.horizon)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, every) in [("checkpoint_every", self.checkpoint_every), ("eval_every", self.eval_every)] {
            if every != 0 && !self.steps.is_multiple_of(every) {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {every} does not divide steps = {}",
                    self.steps
                )));
            }
        }
        self.loss.validate(n_remain)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of the canonical JSON form of `value` (object keys sorted).
pub fn config_hash<S: Serialize + ?Sized>(value: &S) -> String {
    let canonical = serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .expect("config serialises to JSON");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Per-step log line of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_unlearn: Option<f64>,
    pub loss_vanilla: Option<f64>,
    pub grad_norm: f64,
}

/// Log of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub method: Method,
    /// Interpolation weight actually used, for ReTrack runs.
    pub lambda: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<String>,
}

impl RunRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss_total).collect()
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.grad_norm).collect()
    }

    /// CSV body `config_hash,step,loss_total,loss_unlearn,loss_vanilla,grad_norm`;
    /// absent terms are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config_hash", "step", "loss_total", "loss_unlearn", "loss_vanilla", "grad_norm"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for s in &self.steps {
            w.write_record([
                self.config_hash.clone(),
                s.step.to_string(),
                s.loss_total.to_string(),
                opt(s.loss_unlearn),
                opt(s.loss_vanilla),
                s.grad_norm.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON header: the full config plus run metadata (including wall-clock).
    pub fn header_json<S: Serialize>(&self, config: &S) -> Result<String> {
        let header = serde_json::json!({
            "config": config,
            "config_hash": self.config_hash,
            "method": self.method,
            "lambda": self.lambda,
            "steps": self.steps.len(),
            "wall_clock_secs": self.wall_clock_secs,
            "checkpoints": self.checkpoints,
        });
        Ok(serde_json::to_string_pretty(&header)?)
    }
}

/// Why a hook fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookKind {
    Checkpoint,
    Evaluate,
}

/// Called after step `n` (1-based) whenever `n` is a multiple of a cadence.
/// A returned string is recorded as a checkpoint path.
pub type Hook<'a, M> = dyn FnMut(HookKind, usize, &M) -> Result<Option<String>> + 'a;

fn run_loop<T, M, F>(
    model: &mut M,
    config: &TrainConfig,
    method: Method,
    lambda: Option<f64>,
    mut loss_at: F,
    hook: Option<&mut Hook<'_, M>>,
) -> Result<RunRecord>
where
    T: Scalar,
    M: Trainable<T>,
    F: FnMut(&M, &mut RngStream) -> Result<LossSample<T>>,
{
    let started = Instant::now();
    let base = RngStream::new(config.seed, TRAIN_STREAM);
    let mut adam = AdamState::new(model.params(), T::of(config.learning_rate));
    let mut record = RunRecord {
        config_hash: config.hash(),
        method,
        lambda,
        steps: Vec::with_capacity(config.steps),
        wall_clock_secs: 0.0,
        checkpoints: Vec::new(),
    };
    let mut hook = hook;
    let mut initial: Option<f64> = None;
    let mut over = 0usize;
    for step in 0..config.steps {
        let mut rng = base.derive(step as u64);
        let sample = loss_at(model, &mut rng)?;
        let loss = sample.value.f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let init = *initial.get_or_insert(loss);
        if loss.abs() > DIVERGENCE_FACTOR * init.abs() {
            over += 1;
            if over >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step,
                    loss,
                    initial: init,
                    run: over,
                });
            }
        } else {
            over = 0;
        }
        adam.step(model.params_mut(), &sample.grads)?;
        record.steps.push(StepRecord {
            step,
            loss_total: loss,
            loss_unlearn: sample.unlearn_term.map(Scalar::f64),
            loss_vanilla: sample.retain_term.map(Scalar::f64),
            grad_norm: sample.grads.norm().f64(),
        });
        if let Some(h) = hook.as_deref_mut() {
            let n = step + 1;
            if config.checkpoint_every != 0 && n % config.checkpoint_every == 0 {
                if let Some(path) = h(HookKind::Checkpoint, n, model)? {
                    record.checkpoints.push(path);
                }
            }
            if config.eval_every != 0 && n % config.eval_every == 0 {
                h(HookKind::Evaluate, n, model)?;
            }
        }
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Trains a fresh denoiser on all of `points` with the vanilla denoising loss.
/// The network is initialised from `config.seed`.
pub fn pretrain<T: Scalar>(
    config: &TrainConfig,
    schedule: &NoiseSchedule<T>,
    points: &Tensor2<T>,
    hook: Option<&mut Hook<'_, Denoiser<T>>>,
) -> Result<(Denoiser<T>, RunRecord)> {
    if config.loss.method != Method::Vanilla {
        return Err(Error::InvalidArgument(format!(
            "pretraining uses the vanilla loss, not {}",
            config.loss.method
        )));
    }
    config.validate(None)?;
    if schedule.steps() != config.horizon {
        return Err(Error::InvalidArgument("schedule length differs from config horizon".into()));
    }
    if points.rows() == 0 {
        return Err(Error::InvalidArgument("pretraining set is empty".into()));
    }
    let mut model = Denoiser::new(config.denoiser_config(points.cols()), config.seed)?;
    let batch = config.loss.batch_remain;
    let record = run_loop(
        &mut model,
        config,
        Method::Vanilla,
        None,
        |m, rng| {
            let obj = denoising_objective_over(schedule, points, rng, batch)?;
            let (value, grads) = obj.value_and_grad(m)?;
            Ok(LossSample {
                value,
                grads,
                draws: obj.draws().to_vec(),
                unlearn_term: None,
                retain_term: Some(value),
            })
        },
        hook,
    )?;
    Ok((model, record))
}

/// Fine-tunes `model` for exactly `config.steps` steps of the objective in
/// `config.loss`. ReTrack needs `index`, built before the loop starts.
pub fn unlearn<T: Scalar, M: Trainable<T>>(
    config: &TrainConfig,
    model: &mut M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    index: Option<&NeighborIndex<T>>,
    hook: Option<&mut Hook<'_, M>>,
) -> Result<RunRecord> {
    config.validate(Some(data.n_remain()))?;
    let spec = &config.loss;
    if spec.method == Method::ReTrack {
        let index = index.ok_or_else(|| Error::InvalidArgument("retrack needs a neighbour index".into()))?;
        if index.k() != spec.k {
            return Err(Error::InvalidArgument(format!(
                "neighbour index has k = {}, config asks for {}",
                index.k(),
                spec.k
            )));
        }
    }
    let lambda = spec.method.uses_retrack_lambda().then_some(spec.lambda_retrack);
    run_loop(
        model,
        config,
        spec.method,
        lambda,
        |m, rng| compute_loss(m, schedule, data, index, rng, spec),
        hook,
    )
}

/// Outcome of [`balance_lambda`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub lambda: f64,
    /// Mean unlearning-term magnitude `Û`.
    pub unlearn_mean: f64,
    /// Mean remaining-set term magnitude `V̂`.
    pub vanilla_mean: f64,
}

/// `λ = V̂ / (Û + V̂)` from two term magnitudes, so that `λ Û = (1 − λ) V̂`.
pub fn lambda_from_magnitudes(unlearn: f64, vanilla: f64) -> Result<f64> {
    let total = unlearn + vanilla;
    if !(unlearn >= 0.0 && vanilla >= 0.0) || !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "cannot balance term magnitudes {unlearn} and {vanilla}"
        )));
    }
    Ok(vanilla / total)
}

/// Estimates the magnitudes of the unlearning and remaining-set terms at
/// `model` over `probes` paired draws and returns the balancing `λ`. The
/// unlearning term is truncated to `index` when given, exhaustive otherwise.
pub fn balance_lambda<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    data: &SplitDataset<T>,
    index: Option<&NeighborIndex<T>>,
    rng: &mut RngStream,
    spec: &LossSpec,
    probes: usize,
) -> Result<Balance> {
    if probes == 0 {
        return Err(Error::InvalidArgument("balance_lambda needs at least one probe".into()));
    }
    let (mut u_sum, mut v_sum) = (0.0, 0.0);
    for _ in 0..probes {
        let (mut retain_rng, mut forget_rng) = role_streams(rng);
        let unlearn = match index {
            Some(index) => retrack_unlearn_objective(schedule, data, index, &mut forget_rng, spec.batch_forget)?,
            None => unlearn_full_objective(
                schedule,
                data,
                &mut forget_rng,
                spec.batch_forget,
                WeightNormalization::Exact,
            )?,
        };
        let keep = vanilla_objective(schedule, data, &mut retain_rng, spec.batch_remain)?;
        u_sum += unlearn.value(model)?.f64().abs();
        v_sum += keep.value(model)?.f64().abs();
    }
    let (u, v) = (u_sum / probes as f64, v_sum / probes as f64);
    Ok(Balance {
        lambda: lambda_from_magnitudes(u, v)?,
        unlearn_mean: u,
        vanilla_mean: v,
    })
}

#[cfg(test)]
mod tests;
