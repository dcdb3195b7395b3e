//! Subcommands. Each reads the configuration, checks the hashes of upstream
//! artifacts, and writes its outputs under the layout root. CSV and model
//! files are deterministic; wall-clock times go to `run.json` sidecars.

use std::path::Path;

use log::info;
use serde_json::json;
use unlearn_core::losses::WeightNormalization;
use unlearn_core::metrics::{write_reports_csv, MetricsReport};
use unlearn_core::trainer::HookKind;
use unlearn_core::verify::{run_suite, VerifyReport};
use unlearn_core::{Checkpoint, Denoiser, Method, SplitDataset};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::io::{self, Layout};
use crate::pipeline::{self, Experiment, SweepAxis, UnlearnOutcome};

/// Writes the dataset and its manifest.
pub fn gen_data(config: &ExperimentConfig, layout: &Layout) -> CliResult<SplitDataset<f64>> {
    let data = match &config.data {
        DataSource::Mixture { .. } => pipeline::realize_mixture(config)?,
        DataSource::Csv { remain, forget } => SplitDataset::new(io::read_points(remain)?, io::read_points(forget)?)
            .map_err(|e| CliError::Config(e.to_string()))?,
    };
    io::write_points(&layout.remain_csv(), data.remain())?;
    io::write_points(&layout.forget_csv(), data.forget())?;
    let n = data.n_remain() + data.n_forget();
    io::write_json(
        &layout.manifest(),
        &json!({
            "config_hash": config.data_hash(),
            "seed": config.seed,
            "source": config.data,
            "dim": data.dim(),
            "n_remain": data.n_remain(),
            "n_forget": data.n_forget(),
            "forget_ratio": data.n_forget() as f64 / n as f64,
        }),
    )?;
    info!("wrote {} remaining and {} unlearning points", data.n_remain(), data.n_forget());
    Ok(data)
}

/// Reads the dataset written by [`gen_data`] for this configuration.
pub fn load_data(config: &ExperimentConfig, layout: &Layout) -> CliResult<SplitDataset<f64>> {
    let manifest_path = layout.manifest();
    if !manifest_path.exists() {
        return Err(CliError::Usage(format!(
            "no dataset at {}; run gen-data first",
            layout.data_dir().display()
        )));
    }
    let manifest: serde_json::Value = serde_json::from_str(&io::read_text(&manifest_path)?)?;
    expect_hash(&manifest_path, manifest["config_hash"].as_str(), &config.data_hash())?;
    let data = SplitDataset::new(io::read_points(&layout.remain_csv())?, io::read_points(&layout.forget_csv())?)?;
    if manifest["n_remain"] != json!(data.n_remain()) || manifest["n_forget"] != json!(data.n_forget()) {
        return Err(CliError::Config("dataset files disagree with their manifest".into()));
    }
    Ok(data)
}

fn expect_hash(path: &Path, found: Option<&str>, expected: &str) -> CliResult<()> {
    match found {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(CliError::Config(format!(
            "config-hash mismatch: {} was produced by {h}, the current configuration expects {expected}",
            path.display()
        ))),
        None => Err(CliError::Config(format!("{} carries no config hash", path.display()))),
    }
}

fn load_model(path: &Path, expected_hash: &str, what: &str) -> CliResult<Denoiser<f64>> {
    if !path.exists() {
        return Err(CliError::Usage(format!("missing {what} checkpoint {}", path.display())));
    }
    let checkpoint = Checkpoint::load(path)?;
    expect_hash(path, checkpoint.config_hash.as_deref(), expected_hash)?;
    Ok(checkpoint.to_model()?)
}

fn save_model(path: &Path, model: &Denoiser<f64>, hash: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        io::create_dir(parent)?;
    }
    Checkpoint::from_model(model, Some(hash.to_string())).save(path)?;
    Ok(())
}

pub fn experiment(config: &ExperimentConfig, layout: &Layout) -> CliResult<Experiment> {
    Experiment::new(config.clone(), load_data(config, layout)?)
}

pub fn pretrained_model(config: &ExperimentConfig, layout: &Layout) -> CliResult<Denoiser<f64>> {
    load_model(&layout.pretrain_dir().join("model.json"), &config.pretrain_hash(), "pretrained")
}

pub fn pretrain(config: &ExperimentConfig, layout: &Layout) -> CliResult<Denoiser<f64>> {
    let exp = experiment(config, layout)?;
    let dir = layout.pretrain_dir();
    let hash = config.pretrain_hash();
    let mut hook = |kind: HookKind, step: usize, model: &Denoiser<f64>| -> unlearn_core::Result<Option<String>> {
        if kind != HookKind::Checkpoint {
            return Ok(None);
        }
        let path = dir.join(format!("step_{step}.json"));
        save_model(&path, model, &hash).map_err(|e| unlearn_core::Error::InvalidArgument(e.to_string()))?;
        Ok(Some(path.display().to_string()))
    };
    let (model, record) = exp.pretrain(Some(&mut hook))?;
    save_model(&dir.join("model.json"), &model, &hash)?;
    record.write_csv(io::create_file(&dir.join("log.csv"))?)?;
    io::write_text(&dir.join("run.json"), &record.header_json(&config.pretrain_config())?)?;
    info!("pretrained {} steps in {:.1}s", record.len(), record.wall_clock_secs);
    Ok(model)
}

/// Runs every configured method from the pretrained checkpoint.
pub fn unlearn(config: &ExperimentConfig, layout: &Layout) -> CliResult<Vec<UnlearnOutcome>> {
    let exp = experiment(config, layout)?;
    let pretrained = pretrained_model(config, layout)?;
    let (lambda, balance) = exp.lambda(&pretrained)?;
    if let Some(b) = balance {
        info!(
            "balanced lambda {:.4} from term magnitudes {:.4} / {:.4}",
            b.lambda, b.unlearn_mean, b.vanilla_mean
        );
    }
    let mut outcomes = Vec::new();
    for &method in &config.methods {
        let dir = layout.unlearn_dir(method);
        let hash = config.unlearn_hash(method, lambda);
        let evals = std::cell::RefCell::new(Vec::<MetricsReport>::new());
        let mut hook = |kind: HookKind, step: usize, model: &Denoiser<f64>| -> unlearn_core::Result<Option<String>> {
            let wrap = |e: CliError| unlearn_core::Error::InvalidArgument(e.to_string());
            match kind {
                HookKind::Checkpoint => {
                    let path = dir.join(format!("step_{step}.json"));
                    save_model(&path, model, &hash).map_err(wrap)?;
                    Ok(Some(path.display().to_string()))
                }
                HookKind::Evaluate => {
                    let report = exp.evaluate(model, method.name(), step, &hash).map_err(wrap)?;
                    evals.borrow_mut().push(report);
                    Ok(None)
                }
            }
        };
        let outcome = exp.unlearn(&pretrained, method, lambda, Some(&mut hook))?;
        save_model(&dir.join("model.json"), &outcome.model, &hash)?;
        outcome.record.write_csv(io::create_file(&dir.join("log.csv"))?)?;
        let train = config.unlearn_config(method, lambda);
        io::write_text(&dir.join("run.json"), &outcome.record.header_json(&train)?)?;
        let evals = evals.into_inner();
        if !evals.is_empty() {
            write_reports_csv(&evals, io::create_file(&dir.join("evals.csv"))?)?;
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Evaluates the pretrained model and every configured method's checkpoint.
pub fn evaluate(config: &ExperimentConfig, layout: &Layout) -> CliResult<Vec<MetricsReport>> {
    let exp = experiment(config, layout)?;
    let pretrained = pretrained_model(config, layout)?;
    let (lambda, _) = exp.lambda(&pretrained)?;
    let started = std::time::Instant::now();
    let mut reports = vec![exp.evaluate(&pretrained, "pretrained", 0, &config.pretrain_hash())?];
    for &method in &config.methods {
        let hash = config.unlearn_hash(method, lambda);
        let model = load_model(&layout.unlearn_dir(method).join("model.json"), &hash, method.name())?;
        reports.push(exp.evaluate(&model, method.name(), config.unlearn.steps, &hash)?);
    }
    let dir = layout.eval_dir();
    write_reports_csv(&reports, io::create_file(&dir.join("metrics.csv"))?)?;
    io::write_json(&dir.join("metrics.json"), &reports)?;
    io::write_json(
        &dir.join("run.json"),
        &json!({ "config_hash": config.hash(), "wall_clock_secs": started.elapsed().as_secs_f64() }),
    )?;
    Ok(reports)
}

/// Runs the oracle verification suite. `fault_scale` multiplies every
/// importance weight, which the suite must detect.
pub fn verify_oracle(config: &ExperimentConfig, layout: &Layout, fault_scale: Option<f64>) -> CliResult<VerifyReport> {
    let norm = fault_scale.map_or(WeightNormalization::Exact, WeightNormalization::Scaled);
    let report = run_suite(&config.verify, norm)?;
    io::write_json(
        &layout.verify_dir().join("report.json"),
        &json!({ "config_hash": unlearn_core::trainer::config_hash(&config.verify), "fault_scale": fault_scale, "report": report }),
    )?;
    for c in &report.checks {
        println!(
            "{} {:<22} measured {:<12.6e} threshold {:<12.6e} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.threshold,
            c.detail
        );
    }
    Ok(report)
}

/// Runs one ablation axis and writes `sweep/<axis>.csv`.
pub fn sweep(config: &ExperimentConfig, layout: &Layout, axis: SweepAxis) -> CliResult<Vec<pipeline::SweepRow>> {
    let exp = experiment(config, layout)?;
    let pretrained = pretrained_model(config, layout)?;
    let started = std::time::Instant::now();
    let baseline = exp.evaluate(&pretrained, "pretrained", 0, &config.pretrain_hash())?;
    let rows = pipeline::sweep(&exp, &pretrained, &baseline, axis)?;
    let dir = layout.sweep_dir();
    pipeline::write_sweep_csv(&rows, io::create_file(&dir.join(format!("{}.csv", axis.name())))?)?;
    io::write_json(
        &dir.join(format!("{}.run.json", axis.name())),
        &json!({ "config_hash": config.hash(), "wall_clock_secs": started.elapsed().as_secs_f64() }),
    )?;
    Ok(rows)
}

/// Parses a method name as given on the command line.
pub fn parse_method(name: &str) -> CliResult<Method> {
    Method::parse(name).map_err(|e| CliError::Usage(e.to_string()))
}
