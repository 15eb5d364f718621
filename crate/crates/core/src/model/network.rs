use rand::Rng;

use super::attention::attend;
use super::{InputShape, NetworkConfig};
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::mcm::ModelInput;
use crate::nn::{Conv2d, ConvLstmCell, Deconv2d, Linear, LstmState, ParamStore, Params};

/// A mini-batch in slot-major form: `slots[k]` is `[batch·n·n, C]` and
/// `mask[k][b]` is the attention bit of slot `k` for sample `b`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub n: usize,
    pub slots: Vec<Tensor>,
    pub mask: Vec<Vec<f64>>,
}

impl Batch {
    pub fn from_inputs(inputs: &[&ModelInput], shape: InputShape) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let len = shape.matrix_len();
        let mut slots = Vec::with_capacity(shape.slots);
        let mut mask = Vec::with_capacity(shape.slots);
        for k in 0..shape.slots {
            let mut data = Vec::with_capacity(inputs.len() * len);
            for input in inputs {
                data.extend_from_slice(input.slot(k));
            }
            slots.push(Tensor::new(
                vec![inputs.len() * shape.n * shape.n, shape.channels],
                data,
            ));
            mask.push(
                inputs
                    .iter()
                    .map(|i| if i.slot_mask[k] { 1.0 } else { 0.0 })
                    .collect(),
            );
        }
        Ok(Self {
            size: inputs.len(),
            n: shape.n,
            slots,
            mask,
        })
    }

    /// The reconstruction target `x`, `[batch·n·n, C]`.
    pub fn target(&self) -> &Tensor {
        self.slots.last().expect("batch has slots")
    }
}

/// Output of one generator pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `x'`, `[batch·n·n, C]`.
    pub reconstruction: Var,
    /// `z = G_E(x)`, `[batch, latent_dim]`.
    pub latent: Var,
    /// Attention weights `[layer][slot][sample]`.
    pub attention: Vec<Vec<Vec<f64>>>,
}

/// Per-slot convolution chain with a ConvLSTM over each layer's slot
/// sequence, followed by slot attention.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    convs: Vec<Conv2d>,
    cells: Vec<ConvLstmCell>,
    /// Spatial size of each layer's input, then of the last output.
    sizes: Vec<usize>,
}

impl Encoder {
    fn new(
        name: &str,
        config: &NetworkConfig,
        shape: InputShape,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let mut c_in = shape.channels;
        let mut convs = Vec::new();
        let mut cells = Vec::new();
        for (k, l) in config.conv_layers.iter().enumerate() {
            convs.push(Conv2d::new(
                store,
                &format!("{name}.conv{k}"),
                c_in,
                l.channels,
                l.kernel,
                l.stride,
                rng,
            ));
            cells.push(ConvLstmCell::new(
                store,
                &format!("{name}.lstm{k}"),
                l.channels,
                l.channels,
                config.lstm_kernel,
                rng,
            ));
            c_in = l.channels;
        }
        let mut sizes = vec![shape.n];
        sizes.extend(config.layer_sizes(shape.n));
        Self {
            convs,
            cells,
            sizes,
        }
    }

    /// Attended state of every layer, `[batch·h_k·w_k, c_k]`, plus weights.
    fn forward(
        &self,
        p: &Params,
        slots: &[Var],
        mask: &[Vec<f64>],
        batch: usize,
        config: &NetworkConfig,
    ) -> (Vec<Var>, Vec<Vec<Vec<f64>>>) {
        let mut feats: Vec<Var> = slots.to_vec();
        let mut attended = Vec::with_capacity(self.convs.len());
        let mut weights = Vec::with_capacity(self.convs.len());
        for (k, (conv, cell)) in self.convs.iter().zip(&self.cells).enumerate() {
            let size = self.sizes[k];
            let out = self.sizes[k + 1];
            feats = feats
                .iter()
                .map(|x| {
                    conv.forward(p, x, batch, size, size)
                        .leaky_relu(config.leaky_slope)
                })
                .collect();

            let mut state: Option<LstmState> = None;
            let mut hidden = Vec::with_capacity(feats.len());
            for (x, bits) in feats.iter().zip(mask) {
                let next = cell.step(p, x, state.as_ref(), batch, out, out);
                // A masked slot leaves the recurrent state untouched.
                let next = if bits.iter().all(|&b| b == 1.0) {
                    next
                } else {
                    let rows = out * out;
                    let keep = row_mask(bits, rows, cell.channels, false);
                    let skip = row_mask(bits, rows, cell.channels, true);
                    match &state {
                        Some(prev) => LstmState {
                            hidden: next.hidden.mul(&keep).add(&prev.hidden.mul(&skip)),
                            cell: next.cell.mul(&keep).add(&prev.cell.mul(&skip)),
                        },
                        None => LstmState {
                            hidden: next.hidden.mul(&keep),
                            cell: next.cell.mul(&keep),
                        },
                    }
                };
                hidden.push(next.hidden.clone());
                state = Some(next);
            }
            let (combined, alpha) = attend(&hidden, mask, batch, config.attention_rescale);
            attended.push(combined);
            weights.push(alpha);
        }
        (attended, weights)
    }
}

/// `[batch·rows, channels]` constant holding each sample's bit (or its
/// complement).
fn row_mask(bits: &[f64], rows: usize, channels: usize, complement: bool) -> Var {
    let mut data = Vec::with_capacity(bits.len() * rows * channels);
    for &b in bits {
        let v = if complement { 1.0 - b } else { b };
        data.extend(std::iter::repeat_n(v, rows * channels));
    }
    Var::constant(Tensor::new(vec![bits.len() * rows, channels], data))
}

/// Transposed convolutions back to the input grid; every stage after the
/// first also sees the attended state of the matching encoder layer.
#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    deconvs: Vec<Deconv2d>,
    sizes: Vec<usize>,
}

impl Decoder {
    fn new(
        config: &NetworkConfig,
        shape: InputShape,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = &config.conv_layers;
        let deconvs = layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let c_ins = if k + 1 == layers.len() {
                    vec![l.channels]
                } else {
                    vec![l.channels, l.channels]
                };
                let c_out = if k == 0 {
                    shape.channels
                } else {
                    layers[k - 1].channels
                };
                Deconv2d::new(
                    store,
                    &format!("decoder.deconv{k}"),
                    &c_ins,
                    c_out,
                    l.kernel,
                    l.stride,
                    rng,
                )
            })
            .collect();
        let mut sizes = vec![shape.n];
        sizes.extend(config.layer_sizes(shape.n));
        Self { deconvs, sizes }
    }

    fn forward(&self, p: &Params, attended: &[Var], batch: usize, config: &NetworkConfig) -> Var {
        let mut up: Option<Var> = None;
        for k in (0..self.deconvs.len()).rev() {
            let size = self.sizes[k];
            let out = match &up {
                None => self.deconvs[k].forward(p, &[&attended[k]], batch, size, size),
                Some(d) => self.deconvs[k].forward(p, &[d, &attended[k]], batch, size, size),
            };
            up = Some(if k == 0 {
                out
            } else {
                out.leaky_relu(config.leaky_slope)
            });
        }
        up.expect("decoder has layers")
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Generator {
    encoder: Encoder,
    decoder: Decoder,
    /// `E`: same architecture as the generator's encoder, separate weights.
    second: Encoder,
}

impl Generator {
    pub(crate) fn new(
        config: &NetworkConfig,
        shape: InputShape,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            encoder: Encoder::new("encoder", config, shape, store, rng),
            decoder: Decoder::new(config, shape, store, rng),
            second: Encoder::new("latent_encoder", config, shape, store, rng),
        }
    }

    pub(crate) fn forward(&self, p: &Params, batch: &Batch, config: &NetworkConfig) -> Forward {
        let slots: Vec<Var> = batch.slots.iter().cloned().map(Var::constant).collect();
        let (attended, attention) = self.encoder.forward(p, &slots, &batch.mask, batch.size, config);
        let reconstruction = self.decoder.forward(p, &attended, batch.size, config);
        let latent = flatten_samples(attended.last().expect("encoder has layers"), batch.size);
        Forward {
            reconstruction,
            latent,
            attention,
        }
    }

    /// `z' = E(x')`: the second encoder on the input stack with the target
    /// slot replaced by the reconstruction.
    pub(crate) fn second_latent(
        &self,
        p: &Params,
        batch: &Batch,
        reconstruction: &Var,
        config: &NetworkConfig,
    ) -> Var {
        let mut slots: Vec<Var> = batch.slots.iter().cloned().map(Var::constant).collect();
        *slots.last_mut().expect("batch has slots") = reconstruction.clone();
        let (attended, _) = self.second.forward(p, &slots, &batch.mask, batch.size, config);
        flatten_samples(attended.last().expect("encoder has layers"), batch.size)
    }
}

/// `[batch·rows, c] -> [batch, rows·c]` (rows of a sample are contiguous).
pub(crate) fn flatten_samples(x: &Var, batch: usize) -> Var {
    let len = x.value().len();
    x.reshape(&[batch, len / batch])
}

/// Strided convolutions and a linear head producing one critic value per
/// sample. No normalization layers, so the gradient penalty stays per-sample.
#[derive(Clone, Debug)]
pub(crate) struct Critic {
    convs: Vec<Conv2d>,
    sizes: Vec<usize>,
    head: Linear,
}

impl Critic {
    pub(crate) fn new(
        config: &NetworkConfig,
        shape: InputShape,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let mut c_in = shape.channels;
        let mut size = shape.n;
        let mut sizes = vec![size];
        let mut convs = Vec::new();
        for (k, &c) in config.critic_channels.iter().enumerate() {
            let stride = if k == 0 { 1 } else { 2 };
            convs.push(Conv2d::new(
                store,
                &format!("critic.conv{k}"),
                c_in,
                c,
                3,
                stride,
                rng,
            ));
            size = size.div_ceil(stride);
            sizes.push(size);
            c_in = c;
        }
        let head = Linear::new(store, "critic.head", size * size * c_in, 1, rng);
        Self { convs, sizes, head }
    }

    /// `[batch·n·n, C] -> [batch, 1]`
    pub(crate) fn forward(&self, p: &Params, x: &Var, batch: usize, config: &NetworkConfig) -> Var {
        let mut h = x.clone();
        for (k, conv) in self.convs.iter().enumerate() {
            let size = self.sizes[k];
            h = conv
                .forward(p, &h, batch, size, size)
                .leaky_relu(config.leaky_slope);
        }
        self.head.forward(p, &flatten_samples(&h, batch))
    }
}
