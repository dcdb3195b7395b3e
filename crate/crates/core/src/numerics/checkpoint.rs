//! JSON model checkpoints.
//!
//! Parameters are stored as `f64` numbers; `serde_json` is built with
//! `float_roundtrip`, so decoding returns the exact bits that were written.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Trainable;
use crate::numerics::{Denoiser, DenoiserConfig, Params, Tensor2};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "unlearn-lab/denoiser/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: DenoiserConfig,
    /// Diffusion steps `T` of the schedule the model was trained with.
    pub schedule_steps: usize,
    pub seed: u64,
    /// Hash of the experiment configuration that produced the model, if any.
    #[serde(default)]
    pub config_hash: Option<String>,
    params: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Denoiser<T>, config_hash: Option<String>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config().clone(),
            schedule_steps: model.horizon(),
            seed: model.seed(),
            config_hash,
            params: model
                .params()
                .tensors()
                .iter()
                .map(|t| TensorRecord {
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.as_slice().iter().map(|v| v.f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Denoiser<T>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        if self.schedule_steps != self.config.horizon {
            return Err(Error::InvalidArgument(
                "checkpoint schedule length disagrees with model horizon".into(),
            ));
        }
        let tensors = self
            .params
            .iter()
            .map(|r| Tensor2::from_vec(r.rows, r.cols, r.data.iter().map(|&v| T::of(v)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Denoiser::from_parts(self.config.clone(), Params::new(tensors), self.seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoisePredictor;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), width in 1usize..12) {
            let cfg = DenoiserConfig::standard(2, 100).with_hidden(vec![width, width + 1]);
            let mut model = Denoiser::<f64>::new(cfg, seed).unwrap();
            // push a few awkward values through the encoder
            let w = model.params_mut().tensors_mut()[0].as_mut_slice();
            w[0] = 1e-310;
            w[1] = -0.1 - f64::EPSILON;
            let json = Checkpoint::from_model(&model, Some("abc".into())).to_json().unwrap();
            let back: Denoiser<f64> = Checkpoint::from_json(&json).unwrap().to_model().unwrap();
            for (a, b) in model.params().iter_flat().zip(back.params().iter_flat()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.seed(), seed);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let model = Denoiser::<f64>::new(DenoiserConfig::standard(1, 10).with_hidden(vec![2]), 1).unwrap();
        let mut v: serde_json::Value =
            serde_json::from_str(&Checkpoint::from_model(&model, None).to_json().unwrap()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn f32_models_round_trip() {
        let model = Denoiser::<f32>::new(DenoiserConfig::standard(2, 10).with_hidden(vec![4]), 5).unwrap();
        let back: Denoiser<f32> = Checkpoint::from_json(&Checkpoint::from_model(&model, None).to_json().unwrap())
            .unwrap()
            .to_model()
            .unwrap();
        assert_eq!(back, model);
        assert_eq!(back.data_dim(), 2);
    }
}
