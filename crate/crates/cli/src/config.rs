//! Experiment configuration: one JSON document drives every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use unlearn_core::losses::LossSpec;
use unlearn_core::metrics::{EvalSettings, ModeSpec};
use unlearn_core::trainer::{config_hash, TrainConfig};
use unlearn_core::verify::SuiteConfig;
use unlearn_core::{GaussianMixtureSpec, Method};

use crate::error::{CliError, CliResult};

/// Where the training points come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Realised from a Gaussian mixture; one component is the unlearning set.
    Mixture {
        spec: GaussianMixtureSpec,
        forget_component: usize,
    },
    /// Flattened rows, one point per line, with a header row.
    Csv { remain: PathBuf, forget: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            time_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub checkpoint_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 5000,
            learning_rate: 2e-3,
            batch: 512,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnSection {
    pub steps: usize,
    pub learning_rate: f64,
    /// ReTrack interpolation weight; `None` balances the two terms at the
    /// pretrained model.
    pub lambda: Option<f64>,
    /// Paired draws used to balance `lambda`.
    pub balance_probes: usize,
    pub k: usize,
    pub batch_remain: usize,
    pub batch_forget: usize,
    pub siss_mixture_lambda: f64,
    pub siss_scale: f64,
    pub erasediff_lambda: f64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        Self {
            steps: 50,
            learning_rate: 1e-4,
            lambda: None,
            balance_probes: 64,
            k: 10,
            batch_remain: 32,
            batch_forget: 32,
            siss_mixture_lambda: 0.5,
            siss_scale: 1.0,
            erasediff_lambda: 0.5,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub k: Vec<usize>,
    pub lambda: Vec<f64>,
    /// Paired draws of the remaining-set denoising loss reported per cell.
    pub retained_loss_draws: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            k: vec![1, 10, 100],
            lambda: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            retained_loss_draws: 4096,
        }
    }
}

/// Mixture used when no data source is given: ten retained modes on the unit
/// circle with 99 points each and one forbidden mode of 10 points outside it.
pub fn default_mixture() -> (GaussianMixtureSpec, usize) {
    let mut means: Vec<Vec<f64>> = (0..10)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / 10.0;
            vec![a.cos(), a.sin()]
        })
        .collect();
    means.push(vec![FORBIDDEN_RADIUS, 0.0]);
    let mut counts = vec![99; 10];
    counts.push(10);
    let spec = GaussianMixtureSpec::from_counts(means, MODE_STD, counts).expect("default mixture is valid");
    (spec, 10)
}

const MODE_STD: f64 = 0.1;
const FORBIDDEN_RADIUS: f64 = 1.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Diffusion steps `T`.
    pub horizon: usize,
    pub data: DataSource,
    /// Defaults to the mixture means with a radius of three component stds.
    pub modes: Option<ModeSpec>,
    /// Mode counted as forbidden; defaults to the mixture's forget component.
    pub target_mode: Option<usize>,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub unlearn: UnlearnSection,
    pub methods: Vec<Method>,
    pub eval: EvalSettings,
    pub sweep: SweepSection,
    pub verify: SuiteConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let (spec, forget_component) = default_mixture();
        Self {
            seed: 0,
            horizon: 100,
            data: DataSource::Mixture { spec, forget_component },
            modes: None,
            target_mode: None,
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            unlearn: UnlearnSection::default(),
            methods: vec![Method::Vanilla, Method::NegGrad, Method::EraseDiff, Method::Siss, Method::ReTrack],
            eval: EvalSettings::default(),
            sweep: SweepSection::default(),
            verify: SuiteConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies command-line overrides and re-validates.
    pub fn with_overrides(mut self, seed: Option<u64>, method: Option<Method>) -> CliResult<Self> {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(method) = method {
            self.methods = vec![method];
        }
        self.validate()?;
        Ok(self)
    }

    /// Checks everything that does not need the data on disk.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.horizon < 2 {
            return bad(format!("horizon {} must be at least 2", self.horizon));
        }
        if let DataSource::Mixture { spec, forget_component } = &self.data {
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if *forget_component >= spec.components() {
                return bad(format!(
                    "forget_component {forget_component} of {} components",
                    spec.components()
                ));
            }
        }
        if self.methods.is_empty() {
            return bad("methods is empty".into());
        }
        if let Some(l) = self.unlearn.lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("unlearn.lambda {l} outside [0, 1]"));
            }
        }
        if self.unlearn.lambda.is_none() && self.unlearn.balance_probes == 0 {
            return bad("balance_probes must be positive when lambda is balanced".into());
        }
        if self.pretrain.batch == 0 {
            return bad("pretrain.batch must be at least 1".into());
        }
        self.pretrain_config().validate(None).map_err(cfg_err)?;
        for &method in &self.methods {
            self.unlearn_config(method, 0.5).validate(None).map_err(cfg_err)?;
        }
        if self.sweep.k.contains(&0) {
            return bad("sweep.k values must be positive".into());
        }
        if self.sweep.lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("sweep.lambda values must lie in [0, 1]".into());
        }
        if self.sweep.retained_loss_draws == 0 {
            return bad("sweep.retained_loss_draws must be positive".into());
        }
        self.eval.validate(self.horizon).map_err(cfg_err)?;
        let modes = self.mode_spec()?;
        if let Some(modes) = &modes {
            modes.validate().map_err(cfg_err)?;
            if let Some(dim) = self.data_dim() {
                if modes.dim() != dim {
                    return bad(format!("modes have dimension {} but the data has {dim}", modes.dim()));
                }
            }
            if let Some(t) = self.target() {
                if t >= modes.len() {
                    return bad(format!("target_mode {t} of {} modes", modes.len()));
                }
            }
        }
        if self.verify.horizon < 2 {
            return bad("verify.horizon must be at least 2".into());
        }
        Ok(())
    }

    fn data_dim(&self) -> Option<usize> {
        match &self.data {
            DataSource::Mixture { spec, .. } => Some(spec.dim()),
            DataSource::Csv { .. } => None,
        }
    }

    /// Mode centres used by the frequency metrics, if known.
    pub fn mode_spec(&self) -> CliResult<Option<ModeSpec>> {
        if let Some(m) = &self.modes {
            return Ok(Some(m.clone()));
        }
        match &self.data {
            DataSource::Mixture { spec, .. } => Ok(Some(
                ModeSpec::new(spec.means.clone(), Some(3.0 * spec.std)).map_err(cfg_err)?,
            )),
            DataSource::Csv { .. } => Ok(None),
        }
    }

    pub fn target(&self) -> Option<usize> {
        self.target_mode.or(match &self.data {
            DataSource::Mixture { forget_component, .. } => Some(*forget_component),
            DataSource::Csv { .. } => None,
        })
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            horizon: self.horizon,
            steps: self.pretrain.steps,
            learning_rate: self.pretrain.learning_rate,
            seed: self.seed,
            loss: LossSpec {
                batch_remain: self.pretrain.batch,
                ..LossSpec::default().with_method(Method::Vanilla)
            },
            hidden: self.model.hidden.clone(),
            time_dim: self.model.time_dim,
            checkpoint_every: self.pretrain.checkpoint_every,
            eval_every: 0,
        }
    }

    /// Fine-tuning run of `method`; ReTrack uses `lambda`. Runs draw from
    /// `seed + 1`, shared by every method so that they see paired draws.
    pub fn unlearn_config(&self, method: Method, lambda: f64) -> TrainConfig {
        let u = &self.unlearn;
        TrainConfig {
            horizon: self.horizon,
            steps: u.steps,
            learning_rate: u.learning_rate,
            seed: self.seed.wrapping_add(1),
            loss: LossSpec {
                method,
                lambda_retrack: lambda,
                k: u.k,
                siss_mixture_lambda: u.siss_mixture_lambda,
                siss_scale: u.siss_scale,
                erasediff_lambda: u.erasediff_lambda,
                batch_remain: u.batch_remain,
                batch_forget: u.batch_forget,
            },
            hidden: self.model.hidden.clone(),
            time_dim: self.model.time_dim,
            checkpoint_every: u.checkpoint_every,
            eval_every: u.eval_every,
        }
    }

    /// Identifies the dataset.
    pub fn data_hash(&self) -> String {
        config_hash(&json!({ "seed": self.seed, "data": self.data }))
    }

    /// Identifies the pretrained model.
    pub fn pretrain_hash(&self) -> String {
        config_hash(&json!({ "data": self.data_hash(), "train": self.pretrain_config() }))
    }

    /// Identifies one unlearned model.
    pub fn unlearn_hash(&self, method: Method, lambda: f64) -> String {
        let lambda = method.uses_retrack_lambda().then_some(lambda);
        let mut train = self.unlearn_config(method, lambda.unwrap_or(0.0));
        if !method.uses_retrack_lambda() {
            train.loss.lambda_retrack = 0.0;
        }
        config_hash(&json!({ "pretrain": self.pretrain_hash(), "train": train }))
    }

    /// Identifies an evaluation of the model with hash `model_hash`.
    pub fn eval_hash(&self, model_hash: &str) -> CliResult<String> {
        Ok(config_hash(&json!({
            "model": model_hash,
            "eval": self.eval,
            "modes": self.mode_spec()?,
            "target": self.target(),
            "seed": self.seed,
        })))
    }

    /// Hash of the whole document.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

fn cfg_err(e: unlearn_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.hash(), config.hash());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let config = ExperimentConfig::from_json(r#"{"seed": 7, "unlearn": {"k": 5}}"#).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.unlearn.k, 5);
        assert_eq!(config.unlearn.steps, 50);
        assert_eq!(config.horizon, 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"sede": 1}"#,
            r#"{"unlearn": {"lamda": 0.5}}"#,
            r#"{"eval": {"samples": 3}}"#,
            r#"{"verify": {"bogus": 1}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            r#"{"horizon": 1}"#,
            r#"{"methods": []}"#,
            r#"{"unlearn": {"lambda": 1.5}}"#,
            r#"{"unlearn": {"k": 0}}"#,
            r#"{"pretrain": {"learning_rate": -1}}"#,
            r#"{"target_mode": 11}"#,
            r#"{"sweep": {"k": [0]}}"#,
            r#"{"eval": {"oracle_t_grid": [500]}}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn stage_hashes_track_their_inputs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.unlearn.k = 3;
        assert_eq!(a.pretrain_hash(), b.pretrain_hash());
        assert_ne!(a.unlearn_hash(Method::ReTrack, 0.5), b.unlearn_hash(Method::ReTrack, 0.5));
        // Vanilla ignores lambda.
        assert_eq!(a.unlearn_hash(Method::Vanilla, 0.1), a.unlearn_hash(Method::Vanilla, 0.9));
        assert_ne!(a.unlearn_hash(Method::ReTrack, 0.1), a.unlearn_hash(Method::ReTrack, 0.9));
        let c = a.clone().with_overrides(Some(9), None).unwrap();
        assert_ne!(a.data_hash(), c.data_hash());
        assert_ne!(a.pretrain_hash(), c.pretrain_hash());
    }

    #[test]
    fn default_mixture_is_one_percent_forbidden() {
        let (spec, forget) = default_mixture();
        let total: usize = spec.counts.iter().sum();
        assert_eq!((total - spec.counts[forget], spec.counts[forget]), (990, 10));
        let modes = ExperimentConfig::default().mode_spec().unwrap().unwrap();
        assert_eq!(modes.len(), 11);
        assert!((modes.radius.unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let analog = ExperimentConfig::load(&dir.join("gmm_analog.json")).unwrap();
        assert_eq!(analog, ExperimentConfig::default());
        let smoke = ExperimentConfig::load(&dir.join("smoke.json")).unwrap();
        assert_eq!(smoke.horizon, 10);
    }
}
