use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{NoisePredictor, Trainable};
use crate::numerics::{Gradients, Params, RngStream, Tensor2};
use crate::scalar::Scalar;

/// Hidden nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `z · sigmoid(z)`
    Silu,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Silu => z / (T::one() + (-z).exp()),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Silu => {
                let s = T::one() / (T::one() + (-z).exp());
                s * (T::one() + z * (T::one() - s))
            }
        }
    }
}

/// Architecture of a [`Denoiser`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    /// Number of diffusion steps `T` the time embedding is normalised by.
    pub horizon: usize,
    pub activation: Activation,
}

impl DenoiserConfig {
    /// Three hidden SiLU layers of width 128 and a 16-wide time embedding.
    pub fn standard(data_dim: usize, horizon: usize) -> Self {
        Self {
            data_dim,
            hidden: vec![128, 128, 128],
            time_dim: 16,
            horizon,
            activation: Activation::Silu,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(self.data_dim);
        w
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::InvalidArgument("data_dim must be positive".into()));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("time_dim must be even".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of `t / horizon`, `[sin(ω_i τ), cos(ω_i τ)]` with
/// `τ = 1000 t / horizon` and geometric frequencies `ω_i = 10000^(-i/half)`.
pub fn time_embedding<T: Scalar>(t: usize, horizon: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let tau = 1000.0 * t as f64 / horizon as f64;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        let angle = tau * freq;
        out[i] = T::of(angle.sin());
        out[half + i] = T::of(angle.cos());
    }
    out
}

/// Feed-forward noise-prediction network `ε_θ(x_t, t)`.
///
/// The input row is `[x_t, embed(t / T)]`; every hidden layer is affine
/// followed by the activation and the output layer is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    params: Params<T>,
    seed: u64,
}

/// Per-layer inputs and pre-activations from [`Denoiser::forward_with_tape`].
#[derive(Debug)]
pub struct DenoiserTape<T> {
    inputs: Vec<Tensor2<T>>,
    preacts: Vec<Tensor2<T>>,
}

impl<T: Scalar> Denoiser<T> {
    /// Fan-in scaled uniform initialisation, `U(-1/√fan_in, 1/√fan_in)` for
    /// weights and biases, drawn from stream 0 of `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, 0);
        let widths = config.widths();
        let mut tensors = Vec::with_capacity(2 * (widths.len() - 1));
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<T> {
                (0..n)
                    .map(|_| T::of(bound * (2.0 * rng.uniform() - 1.0)))
                    .collect()
            };
            tensors.push(Tensor2::from_vec(fan_in, fan_out, draw(fan_in * fan_out))?);
            tensors.push(Tensor2::from_vec(1, fan_out, draw(fan_out))?);
        }
        Ok(Self {
            config,
            params: Params::new(tensors),
            seed,
        })
    }

    /// All parameters zero; predicts zero everywhere.
    pub fn zeroed(config: DenoiserConfig) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        for t in model.params.tensors_mut() {
            t.scale(T::zero());
        }
        Ok(model)
    }

    pub fn from_parts(config: DenoiserConfig, params: Params<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        check_dim("denoiser parameter count", 2 * (widths.len() - 1), params.len())?;
        for (l, pair) in widths.windows(2).enumerate() {
            let w = &params.tensors()[2 * l];
            let b = &params.tensors()[2 * l + 1];
            if w.shape() != (pair[0], pair[1]) || b.shape() != (1, pair[1]) {
                return Err(Error::DimensionMismatch {
                    context: "denoiser layer shape",
                    expected: pair[0] * pair[1],
                    found: w.as_slice().len(),
                });
            }
        }
        Ok(Self {
            config,
            params,
            seed,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn num_layers(&self) -> usize {
        self.params.len() / 2
    }

    fn weight(&self, l: usize) -> &Tensor2<T> {
        &self.params.tensors()[2 * l]
    }

    fn bias(&self, l: usize) -> &Tensor2<T> {
        &self.params.tensors()[2 * l + 1]
    }

    fn network_input(&self, xs: &Tensor2<T>, ts: &[usize]) -> Result<Tensor2<T>> {
        check_dim("denoiser input width", self.config.data_dim, xs.cols())?;
        check_dim("timesteps per batch", xs.rows(), ts.len())?;
        let d = self.config.data_dim;
        let width = self.config.input_dim();
        let mut input = Tensor2::zeros(xs.rows(), width);
        for (i, &t) in ts.iter().enumerate() {
            if t == 0 || t > self.config.horizon {
                return Err(Error::TimestepOutOfRange {
                    t,
                    horizon: self.config.horizon,
                });
            }
            let row = input.row_mut(i);
            row[..d].copy_from_slice(xs.row(i));
            row[d..].copy_from_slice(&time_embedding::<T>(t, self.config.horizon, self.config.time_dim));
        }
        Ok(input)
    }

    fn forward_impl(&self, xs: &Tensor2<T>, ts: &[usize], keep: bool) -> Result<(Tensor2<T>, DenoiserTape<T>)> {
        let mut h = self.network_input(xs, ts)?;
        let mut tape = DenoiserTape {
            inputs: Vec::new(),
            preacts: Vec::new(),
        };
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let mut z = h.matmul(self.weight(l))?;
            z.add_row_broadcast(self.bias(l))?;
            let next = if l < last {
                let act = self.config.activation;
                let a = z.map(|v| act.apply(v));
                if keep {
                    tape.preacts.push(z);
                }
                a
            } else {
                z
            };
            if keep {
                tape.inputs.push(h);
            }
            h = next;
        }
        if !h.is_finite() {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok((h, tape))
    }

    /// `∂(grad_output · ε_θ(x_t, t)) / ∂θ` for a single input.
    pub fn backward_single(&self, x: &[T], t: usize, grad_output: &[T]) -> Result<Gradients<T>> {
        let xs = Tensor2::from_vec(1, x.len(), x.to_vec())?;
        let g = Tensor2::from_vec(1, grad_output.len(), grad_output.to_vec())?;
        let (_, tape) = self.forward_with_tape(&xs, &[t])?;
        self.backward(&tape, &g)
    }
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn predict_batch(&self, xs: &Tensor2<T>, ts: &[usize]) -> Result<Tensor2<T>> {
        Ok(self.forward_impl(xs, ts, false)?.0)
    }
}

impl<T: Scalar> Trainable<T> for Denoiser<T> {
    type Tape = DenoiserTape<T>;

    fn forward_with_tape(&self, xs: &Tensor2<T>, ts: &[usize]) -> Result<(Tensor2<T>, Self::Tape)> {
        self.forward_impl(xs, ts, true)
    }

    fn backward(&self, tape: &DenoiserTape<T>, grad_out: &Tensor2<T>) -> Result<Gradients<T>> {
        let layers = self.num_layers();
        check_dim("tape depth", layers, tape.inputs.len())?;
        check_dim("grad_output width", self.config.data_dim, grad_out.cols())?;
        check_dim("grad_output rows", tape.inputs[0].rows(), grad_out.rows())?;
        if !grad_out.is_finite() {
            return Err(Error::NonFinite("grad_output".into()));
        }
        let mut grads = Params::zeros_like(&self.params);
        let mut g = grad_out.clone();
        for l in (0..layers).rev() {
            let dw = tape.inputs[l].t_matmul(&g)?;
            let db = g.sum_rows();
            if l > 0 {
                let mut prev = g.matmul_t(self.weight(l))?;
                let act = self.config.activation;
                for (p, &z) in prev
                    .as_mut_slice()
                    .iter_mut()
                    .zip(tape.preacts[l - 1].as_slice())
                {
                    *p *= act.derivative(z);
                }
                g = prev;
            }
            grads.tensors_mut()[2 * l] = dw;
            grads.tensors_mut()[2 * l + 1] = db;
        }
        Ok(grads)
    }

    fn params(&self) -> &Params<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }
}

/// `ε_θ(x_t, t)` for a single point.
pub fn denoiser_forward<T: Scalar>(model: &Denoiser<T>, x_t: &[T], t: usize) -> Result<Vec<T>> {
    model.predict(x_t, t)
}

/// Parameter gradient of `grad_output · ε_θ(x_t, t)`.
pub fn denoiser_backward<T: Scalar>(
    model: &Denoiser<T>,
    x_t: &[T],
    t: usize,
    grad_output: &[T],
) -> Result<Gradients<T>> {
    model.backward_single(x_t, t, grad_output)
}
