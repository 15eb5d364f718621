//! The adversarial reconstruction model: a convolutional-recurrent
//! generator with slot attention, a second encoder applied to the
//! reconstruction, and a convolutional critic trained with a gradient
//! penalty.

mod attention;
mod checkpoint;
mod network;
mod train;

pub use attention::attention_combine;
pub use network::{Batch, Forward};
pub use checkpoint::CHECKPOINT_VERSION;
pub use train::{
    compute_losses, gradient_penalty, mean_l2, train, EpochStats, LossBreakdown, Losses, Trainer,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::no_grad;
use crate::error::{invalid, Error, Result};
use crate::mcm::{residual_first_channel, ModelInput, SquareMatrix};
use crate::nn::{AdamConfig, ParamStore};

use network::{Critic, Generator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub contextual: f64,
    pub latent: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contextual: 50.0,
            latent: 1.0,
            adversarial: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Encoder convolutions; decoder and recurrent cells mirror them.
    pub conv_layers: Vec<ConvLayerSpec>,
    pub lstm_kernel: usize,
    /// Critic convolution widths (kernel 3; stride 1 then 2).
    pub critic_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub loss_weights: LossWeights,
    pub gp_coefficient: f64,
    pub attention_rescale: f64,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub critic_updates_per_gen: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let layer = |channels, stride| ConvLayerSpec {
            channels,
            kernel: 3,
            stride,
        };
        Self {
            conv_layers: vec![layer(32, 1), layer(64, 2), layer(128, 2), layer(256, 2)],
            lstm_kernel: 3,
            critic_channels: vec![32, 64, 128],
            leaky_slope: 0.2,
            loss_weights: LossWeights::default(),
            gp_coefficient: 10.0,
            attention_rescale: 5.0,
            optimizer: AdamConfig::default(),
            epochs: 300,
            batch_size: 32,
            critic_updates_per_gen: 1,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Narrow network and short schedule that train on a single CPU core in
    /// minutes rather than hours.
    pub fn desk() -> Self {
        let layer = |channels, stride| ConvLayerSpec {
            channels,
            kernel: 3,
            stride,
        };
        Self {
            conv_layers: vec![layer(8, 1), layer(16, 2), layer(16, 2), layer(32, 2)],
            critic_channels: vec![8, 16, 16],
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::Config("need at least one convolution layer".into()));
        }
        if self
            .conv_layers
            .iter()
            .any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0)
        {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.critic_channels.is_empty() || self.critic_channels.contains(&0) {
            return Err(Error::Config("critic widths must be positive".into()));
        }
        let w = &self.loss_weights;
        if !(w.contextual > 0.0 && w.latent > 0.0 && w.adversarial > 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if !(self.gp_coefficient >= 0.0) {
            return Err(Error::Config("gradient penalty coefficient must be >= 0".into()));
        }
        if !(self.attention_rescale > 0.0) {
            return Err(Error::Config("attention rescale must be positive".into()));
        }
        if self.lstm_kernel == 0 || self.batch_size == 0 || self.critic_updates_per_gen == 0 {
            return Err(Error::Config(
                "kernel, batch size and critic updates must be positive".into(),
            ));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of each encoder layer's output for `n × n` inputs.
    pub fn layer_sizes(&self, n: usize) -> Vec<usize> {
        let mut size = n;
        self.conv_layers
            .iter()
            .map(|l| {
                size = size.div_ceil(l.stride);
                size
            })
            .collect()
    }

    /// Length of `z`: the attended last-layer state, flattened.
    pub fn latent_dim(&self, n: usize) -> usize {
        let last = *self.layer_sizes(n).last().unwrap_or(&n);
        last * last * self.conv_layers.last().map_or(0, |l| l.channels)
    }
}

/// Input geometry a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub n: usize,
    pub channels: usize,
    pub slots: usize,
}

impl InputShape {
    pub fn matrix_len(&self) -> usize {
        self.n * self.n * self.channels
    }
}

/// Generator (`G_E`, `G_D`, `E`) and critic parameters with their config and
/// training history.
#[derive(Clone, Debug)]
pub struct ReconstructionModel {
    pub config: NetworkConfig,
    pub shape: InputShape,
    pub(crate) generator: Generator,
    pub(crate) critic: Critic,
    pub generator_params: ParamStore,
    pub critic_params: ParamStore,
    pub history: Vec<EpochStats>,
}

/// One reconstructed step.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub step: usize,
    /// `n × n × C`, same layout as the target.
    pub output: Vec<f64>,
    pub residual: SquareMatrix,
}

impl ReconstructionModel {
    /// Freshly initialized model; initialization is a pure function of
    /// `config.seed`.
    pub fn new(config: NetworkConfig, shape: InputShape) -> Result<Self> {
        config.validate()?;
        if shape.n == 0 || shape.channels == 0 || shape.slots == 0 {
            return Err(invalid!("input shape must be non-empty: {shape:?}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut generator_params = ParamStore::new();
        let mut critic_params = ParamStore::new();
        let generator = Generator::new(&config, shape, &mut generator_params, &mut rng);
        let critic = Critic::new(&config, shape, &mut critic_params, &mut rng);
        Ok(Self {
            config,
            shape,
            generator,
            critic,
            generator_params,
            critic_params,
            history: Vec::new(),
        })
    }

    /// Shape of inputs this model accepts.
    pub fn check_input(&self, input: &ModelInput) -> Result<()> {
        let s = self.shape;
        if input.slot_count() != s.slots || input.slots.len() != s.slots * s.matrix_len() {
            return Err(Error::Shape(format!(
                "input has {} slots / {} values, model expects {} slots of {}",
                input.slot_count(),
                input.slots.len(),
                s.slots,
                s.matrix_len()
            )));
        }
        if !input.slot_mask.last().copied().unwrap_or(false) {
            return Err(invalid!("the current slot of step {} is masked", input.step));
        }
        Ok(())
    }

    /// Generator pass without recording gradients.
    pub fn forward(&self, inputs: &[&ModelInput]) -> Result<Forward> {
        for i in inputs {
            self.check_input(i)?;
        }
        let batch = Batch::from_inputs(inputs, self.shape)?;
        Ok(no_grad(|| {
            let p = self.generator_params.constants();
            self.generator.forward(&p, &batch, &self.config)
        }))
    }

    /// Critic value `f(x)` for each target block (`n × n × C` each).
    pub fn critic_values(&self, blocks: &[&[f64]]) -> Result<Vec<f64>> {
        let len = self.shape.matrix_len();
        if blocks.iter().any(|b| b.len() != len) {
            return Err(Error::Shape(format!("critic blocks must hold {len} values")));
        }
        let data: Vec<f64> = blocks.iter().flat_map(|b| b.iter().copied()).collect();
        Ok(no_grad(|| {
            let p = self.critic_params.constants();
            let x = crate::autograd::Var::constant(crate::autograd::Tensor::new(
                vec![blocks.len() * self.shape.n * self.shape.n, self.shape.channels],
                data,
            ));
            self.critic
                .forward(&p, &x, blocks.len(), &self.config)
                .value()
                .data()
                .to_vec()
        }))
    }

    /// Reconstructions and first-channel residuals, computed `batch_size`
    /// inputs at a time.
    pub fn reconstruct(&self, inputs: &[ModelInput]) -> Result<Vec<Reconstruction>> {
        let s = self.shape;
        let len = s.matrix_len();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.config.batch_size.max(1)) {
            let refs: Vec<&ModelInput> = chunk.iter().collect();
            let fwd = self.forward(&refs)?;
            let data = fwd.reconstruction.value().data();
            for (b, input) in chunk.iter().enumerate() {
                let output = data[b * len..(b + 1) * len].to_vec();
                let residual = residual_first_channel(input.target(), &output, s.n, s.channels)?;
                out.push(Reconstruction {
                    step: input.step,
                    output,
                    residual,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
