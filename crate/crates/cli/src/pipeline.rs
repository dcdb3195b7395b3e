//! Experiment stages on in-memory data. The subcommands wrap these with file
//! IO; sweeps and tests call them directly.

use std::io::Write;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use unlearn_core::diffusion::NoiseSchedule;
use unlearn_core::losses::{build_neighbor_index, denoising_objective_over, NeighborIndex};
use unlearn_core::metrics::{self, MetricsReport, ModeSpec};
use unlearn_core::oracle::{retrained_reference, LabeledPoints, OracleDenoiser};
use unlearn_core::trainer::{self, balance_lambda, Balance, Hook, RunRecord, BALANCE_STREAM};
use unlearn_core::{Denoiser, Method, RngStream, SplitDataset};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};

/// Stream the mixture is realised from.
pub const DATA_STREAM: u64 = 0x6461_7461;
/// Stream of the paired remaining-set loss draws.
pub const RETAINED_STREAM: u64 = 0x7265_7461;

/// Realises the configured mixture. CSV sources are read by the caller.
pub fn realize_mixture(config: &ExperimentConfig) -> CliResult<SplitDataset<f64>> {
    match &config.data {
        DataSource::Mixture { spec, forget_component } => {
            let points: LabeledPoints<f64> = spec.realize(&mut RngStream::new(config.seed, DATA_STREAM))?;
            Ok(points.split_out(*forget_component)?)
        }
        DataSource::Csv { .. } => Err(CliError::Config("CSV data is read from files, not realised".into())),
    }
}

/// A configuration bound to its dataset.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub schedule: NoiseSchedule<f64>,
    pub data: SplitDataset<f64>,
    pub modes: Option<ModeSpec>,
    pub target: Option<usize>,
    pub reference: OracleDenoiser<f64>,
}

/// One unlearning run.
#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub model: Denoiser<f64>,
    pub record: RunRecord,
    pub method: Method,
    pub lambda: f64,
    pub config_hash: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, data: SplitDataset<f64>) -> CliResult<Self> {
        config.validate()?;
        let n_r = data.n_remain();
        if config.methods.iter().any(|m| m.uses_neighbors()) && config.unlearn.k > n_r {
            return Err(CliError::Config(format!(
                "unlearn.k = {} exceeds the remaining set size {n_r}",
                config.unlearn.k
            )));
        }
        let modes = config.mode_spec()?;
        if let Some(m) = &modes {
            if m.dim() != data.dim() {
                return Err(CliError::Config(format!(
                    "modes have dimension {} but the data has {}",
                    m.dim(),
                    data.dim()
                )));
            }
        }
        let schedule = NoiseSchedule::linear(config.horizon)?;
        let reference = retrained_reference(&data, &schedule)?;
        let target = config.target();
        Ok(Self {
            config,
            schedule,
            data,
            modes,
            target,
            reference,
        })
    }

    /// Same data under a modified configuration.
    pub fn with_config(&self, config: ExperimentConfig) -> CliResult<Self> {
        Self::new(config, self.data.clone())
    }

    pub fn pretrain(&self, hook: Option<&mut Hook<'_, Denoiser<f64>>>) -> CliResult<(Denoiser<f64>, RunRecord)> {
        let train = self.config.pretrain_config();
        let (model, mut record) = trainer::pretrain(&train, &self.schedule, &self.data.full(), hook)?;
        record.config_hash = self.config.pretrain_hash();
        Ok((model, record))
    }

    fn index(&self, k: usize) -> CliResult<NeighborIndex<f64>> {
        Ok(build_neighbor_index(&self.data, k)?)
    }

    /// The configured ReTrack weight, or the balancing estimate at `model`.
    pub fn lambda(&self, model: &Denoiser<f64>) -> CliResult<(f64, Option<Balance>)> {
        if let Some(l) = self.config.unlearn.lambda {
            return Ok((l, None));
        }
        let index = self.index(self.config.unlearn.k)?;
        let spec = self.config.unlearn_config(Method::ReTrack, 0.5).loss;
        let balance = balance_lambda(
            model,
            &self.schedule,
            &self.data,
            Some(&index),
            &mut RngStream::new(self.config.seed, BALANCE_STREAM),
            &spec,
            self.config.unlearn.balance_probes,
        )?;
        Ok((balance.lambda, Some(balance)))
    }

    /// Fine-tunes a copy of `pretrained` with `method`.
    pub fn unlearn(
        &self,
        pretrained: &Denoiser<f64>,
        method: Method,
        lambda: f64,
        hook: Option<&mut Hook<'_, Denoiser<f64>>>,
    ) -> CliResult<UnlearnOutcome> {
        if !method.uses_retrack_lambda() && self.config.unlearn.lambda.is_some() {
            warn!("method {method} does not use lambda; unlearn.lambda is ignored");
        }
        let train = self.config.unlearn_config(method, lambda);
        let index = if method.uses_neighbors() {
            Some(self.index(train.loss.k)?)
        } else {
            None
        };
        let mut model = pretrained.clone();
        let mut record = trainer::unlearn(&train, &mut model, &self.schedule, &self.data, index.as_ref(), hook)?;
        let config_hash = self.config.unlearn_hash(method, lambda);
        record.config_hash = config_hash.clone();
        info!(
            "{method}: {} steps, final loss {:.4}",
            record.len(),
            record.losses().last().copied().unwrap_or(f64::NAN)
        );
        Ok(UnlearnOutcome {
            model,
            record,
            method,
            lambda,
            config_hash,
        })
    }

    /// Full metrics protocol; every model sees the same draws.
    pub fn evaluate(&self, model: &Denoiser<f64>, label: &str, step: usize, model_hash: &str) -> CliResult<MetricsReport> {
        let (modes, target) = match (&self.modes, self.target) {
            (Some(m), Some(t)) => (m, t),
            _ => return Err(CliError::Config("evaluation needs modes and target_mode".into())),
        };
        let mut report = metrics::evaluate(
            model,
            &self.reference,
            &self.schedule,
            &self.data,
            modes,
            target,
            &self.config.eval,
            label,
            step,
            self.config.seed,
        )?;
        report.config_hash = self.config.eval_hash(model_hash)?;
        Ok(report)
    }

    /// Mean remaining-set denoising loss over fixed draws.
    pub fn retained_loss(&self, model: &Denoiser<f64>) -> CliResult<f64> {
        let obj = denoising_objective_over(
            &self.schedule,
            self.data.remain(),
            &mut RngStream::new(self.config.seed, RETAINED_STREAM),
            self.config.sweep.retained_loss_draws,
        )?;
        Ok(obj.value(model)?)
    }
}

/// Ablation axes of [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    Lambda,
    Regularizer,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Regularizer => "regularizer",
        }
    }
}

/// One ReTrack run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub k: usize,
    pub lambda: f64,
    pub retained_loss: f64,
    /// Largest retained-mode shift from the pretrained model, in standard errors.
    pub retained_distortion: f64,
    pub report: MetricsReport,
}

/// Cells of `axis`: label and the configuration of that cell.
pub fn sweep_cells(
    experiment: &Experiment,
    axis: SweepAxis,
    base_lambda: f64,
) -> CliResult<Vec<(String, ExperimentConfig, f64)>> {
    let base = &experiment.config;
    let n_r = experiment.data.n_remain();
    let mut cells = Vec::new();
    match axis {
        SweepAxis::K => {
            for &k in &base.sweep.k {
                if k > n_r {
                    return Err(CliError::Config(format!("sweep k = {k} exceeds the remaining set size {n_r}")));
                }
                let mut c = base.clone();
                c.unlearn.k = k;
                cells.push((k.to_string(), c, base_lambda));
            }
        }
        SweepAxis::Lambda => {
            for &l in &base.sweep.lambda {
                let mut c = base.clone();
                c.unlearn.lambda = Some(l);
                cells.push((l.to_string(), c, l));
            }
        }
        SweepAxis::Regularizer => {
            cells.push(("on".to_string(), base.clone(), base_lambda));
            let mut off = base.clone();
            off.unlearn.lambda = Some(1.0);
            cells.push(("off".to_string(), off, 1.0));
        }
    }
    for (_, c, _) in &mut cells {
        c.methods = vec![Method::ReTrack];
    }
    Ok(cells)
}

/// Runs ReTrack for every cell of `axis` from `pretrained`; `baseline` is the
/// pretrained model's report.
pub fn sweep(
    experiment: &Experiment,
    pretrained: &Denoiser<f64>,
    baseline: &MetricsReport,
    axis: SweepAxis,
) -> CliResult<Vec<SweepRow>> {
    let (base_lambda, _) = experiment.lambda(pretrained)?;
    let target = experiment
        .target
        .ok_or_else(|| CliError::Config("sweeps need target_mode".into()))?;
    let mut rows = Vec::new();
    for (value, config, lambda) in sweep_cells(experiment, axis, base_lambda)? {
        let cell = experiment.with_config(config)?;
        let run = cell.unlearn(pretrained, Method::ReTrack, lambda, None)?;
        let report = cell.evaluate(&run.model, Method::ReTrack.name(), run.record.len(), &run.config_hash)?;
        info!("sweep {}={value}: frequency {:.4}", axis.name(), report.frequency);
        rows.push(SweepRow {
            axis,
            value,
            k: cell.config.unlearn.k,
            lambda,
            retained_loss: cell.retained_loss(&run.model)?,
            retained_distortion: report.retained_distortion(baseline, target),
            report,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> CliResult<()> {
    let modes = rows.first().map_or(0, |r| r.report.mode_frequencies.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "config_hash",
        "axis",
        "value",
        "k",
        "lambda",
        "frequency",
        "nll_unlearn",
        "nll_remain",
        "recon_similarity",
        "oracle_distance",
        "retained_loss",
        "retained_distortion",
        "unassigned",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..modes).map(|i| format!("mode_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let m = &r.report;
        let mut row = vec![
            m.config_hash.clone(),
            r.axis.name().to_string(),
            r.value.clone(),
            r.k.to_string(),
            r.lambda.to_string(),
            m.frequency.to_string(),
            m.nll_unlearn.to_string(),
            m.nll_remain.to_string(),
            m.recon_similarity.to_string(),
            m.oracle_distance.to_string(),
            r.retained_loss.to_string(),
            r.retained_distortion.to_string(),
            m.unassigned.to_string(),
        ];
        row.extend(m.mode_frequencies.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))?;
    Ok(())
}
