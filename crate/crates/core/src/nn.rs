//! Layers on top of [`crate::autograd`].
//!
//! Feature maps are rank-2 `[batch·H·W, channels]` tensors (NHWC flattened),
//! so a convolution is an im2col gather followed by one matrix product, and a
//! transposed convolution is the exact adjoint: a matrix product followed by
//! the col2im scatter of the same index map.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var, NO_INDEX};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform matrix `[fan_in, fan_out]`.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data))
    }

    pub fn add_bias(&mut self, name: impl Into<String>, len: usize, value: f64) -> ParamId {
        self.add(name, Tensor::full(&[len], value))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Differentiable leaves for one forward/backward pass.
    pub fn leaves(&self) -> Params {
        Params(self.values.iter().cloned().map(Var::leaf).collect())
    }

    /// Non-differentiable views (gradients still flow *through* them).
    pub fn constants(&self) -> Params {
        Params(self.values.iter().cloned().map(Var::constant).collect())
    }
}

/// Graph handles for the tensors of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Params(pub Vec<Var>);

impl Params {
    pub fn get(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Spatial geometry of a "same"-style convolution: output size
/// `ceil(H / stride)`, padding split as evenly as possible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(height: usize, width: usize, kernel: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            kernel,
            stride,
        }
    }

    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }

    fn pad(&self, size: usize, out: usize) -> usize {
        ((out - 1) * self.stride + self.kernel).saturating_sub(size) / 2
    }

    /// im2col map for `batch` images of `channels` channels: entry
    /// `[(b, oy, ox), (ky, kx, c)]` names the input element it reads.
    pub fn im2col_map(&self, batch: usize, channels: usize) -> Rc<[u32]> {
        thread_local! {
            static CACHE: RefCell<HashMap<(ConvGeometry, usize, usize), Rc<[u32]>>> =
                RefCell::new(HashMap::new());
        }
        CACHE.with(|cache| {
            cache
                .borrow_mut()
                .entry((*self, batch, channels))
                .or_insert_with(|| self.build_map(batch, channels))
                .clone()
        })
    }

    fn build_map(&self, batch: usize, channels: usize) -> Rc<[u32]> {
        let (h, w, k, s) = (self.height, self.width, self.kernel, self.stride);
        let (ho, wo) = (self.out_height(), self.out_width());
        let (pt, pl) = (self.pad(h, ho), self.pad(w, wo));
        let mut map = Vec::with_capacity(batch * ho * wo * k * k * channels);
        for b in 0..batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - pt as isize;
                            let ix = (ox * s + kx) as isize - pl as isize;
                            let inside =
                                iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            for c in 0..channels {
                                map.push(if inside {
                                    (((b * h + iy as usize) * w + ix as usize) * channels + c)
                                        as u32
                                } else {
                                    NO_INDEX
                                });
                            }
                        }
                    }
                }
            }
        }
        map.into()
    }
}

/// Column selection `[rows, total] -> [rows, len]` starting at `offset`.
pub fn column_slice(x: &Var, offset: usize, len: usize) -> Var {
    thread_local! {
        static CACHE: RefCell<HashMap<(usize, usize, usize, usize), Rc<[u32]>>> =
            RefCell::new(HashMap::new());
    }
    let (rows, total) = x.value().dims2();
    let map = CACHE.with(|cache| {
        cache
            .borrow_mut()
            .entry((rows, total, offset, len))
            .or_insert_with(|| {
                (0..rows)
                    .flat_map(|r| (0..len).map(move |c| (r * total + offset + c) as u32))
                    .collect()
            })
            .clone()
    });
    x.gather(&map, &[rows, len])
}

/// Convolution weights `[k·k·c_in, c_out]` plus bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        Self {
            weight: store.add_weight(format!("{name}.weight"), fan_in, c_out, rng),
            bias: store.add_bias(format!("{name}.bias"), c_out, 0.0),
            kernel,
            stride,
            c_in,
            c_out,
        }
    }

    pub fn geometry(&self, height: usize, width: usize) -> ConvGeometry {
        ConvGeometry::new(height, width, self.kernel, self.stride)
    }

    /// `[B·H·W, c_in] -> [B·Ho·Wo, c_out]`
    pub fn forward(&self, p: &Params, x: &Var, batch: usize, height: usize, width: usize) -> Var {
        self.forward_no_bias(p, x, batch, height, width)
            .add_row_vec(p.get(self.bias))
    }

    pub fn forward_no_bias(
        &self,
        p: &Params,
        x: &Var,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Var {
        let g = self.geometry(height, width);
        let rows = batch * g.out_height() * g.out_width();
        let cols = x.gather(
            &g.im2col_map(batch, self.c_in),
            &[rows, self.kernel * self.kernel * self.c_in],
        );
        cols.matmul(p.get(self.weight))
    }
}

/// Transposed convolution: maps the output grid of a forward convolution
/// on `(height, width)` back onto `(height, width)`.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weights: Vec<ParamId>,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub c_ins: Vec<usize>,
    pub c_out: usize,
}

impl Deconv2d {
    /// One weight block per input; the inputs act as if concatenated along
    /// channels.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_ins: &[usize],
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let total_in: usize = c_ins.iter().sum();
        let fan_out = kernel * kernel * c_out;
        let limit = (6.0 / (total_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let weights = c_ins
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let data = (0..c * fan_out).map(|_| dist.sample(rng)).collect();
                store.add(format!("{name}.weight{k}"), Tensor::new(vec![c, fan_out], data))
            })
            .collect();
        Self {
            weights,
            bias: store.add_bias(format!("{name}.bias"), c_out, 0.0),
            kernel,
            stride,
            c_ins: c_ins.to_vec(),
            c_out,
        }
    }

    /// Each input is `[B·Ho·Wo, c_ins[k]]`; output is `[B·H·W, c_out]`.
    pub fn forward(
        &self,
        p: &Params,
        inputs: &[&Var],
        batch: usize,
        height: usize,
        width: usize,
    ) -> Var {
        assert_eq!(inputs.len(), self.weights.len());
        let g = ConvGeometry::new(height, width, self.kernel, self.stride);
        let mut cols: Option<Var> = None;
        for (x, &w) in inputs.iter().zip(&self.weights) {
            let y = x.matmul(p.get(w));
            cols = Some(match cols {
                Some(acc) => acc.add(&y),
                None => y,
            });
        }
        let cols = cols.expect("at least one input");
        cols.scatter_add(
            &g.im2col_map(batch, self.c_out),
            &[batch * height * width, self.c_out],
        )
        .add_row_vec(p.get(self.bias))
    }
}

/// Dense layer `[rows, c_in] -> [rows, c_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add_weight(format!("{name}.weight"), c_in, c_out, rng),
            bias: store.add_bias(format!("{name}.bias"), c_out, 0.0),
        }
    }

    pub fn forward(&self, p: &Params, x: &Var) -> Var {
        x.matmul(p.get(self.weight)).add_row_vec(p.get(self.bias))
    }
}

/// Convolutional LSTM cell: all four gates come from one convolution of the
/// input plus one of the previous hidden state.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    input_conv: Conv2d,
    hidden_conv: Conv2d,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl ConvLstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input_conv = Conv2d::new(store, &format!("{name}.x"), c_in, 4 * channels, kernel, 1, rng);
        let hidden_conv =
            Conv2d::new(store, &format!("{name}.h"), channels, 4 * channels, kernel, 1, rng);
        // Forget-gate bias of 1 keeps early gradients flowing through the cell.
        let bias = &mut store.values_mut()[input_conv.bias.0];
        for v in &mut bias.data_mut()[channels..2 * channels] {
            *v = 1.0;
        }
        Self {
            input_conv,
            hidden_conv,
            channels,
        }
    }

    pub fn step(
        &self,
        p: &Params,
        x: &Var,
        state: Option<&LstmState>,
        batch: usize,
        height: usize,
        width: usize,
    ) -> LstmState {
        let mut gates = self.input_conv.forward(p, x, batch, height, width);
        if let Some(s) = state {
            gates = gates.add(&self.hidden_conv.forward_no_bias(p, &s.hidden, batch, height, width));
        }
        let c = self.channels;
        let i = column_slice(&gates, 0, c).sigmoid();
        let f = column_slice(&gates, c, c).sigmoid();
        let o = column_slice(&gates, 2 * c, c).sigmoid();
        let g = column_slice(&gates, 3 * c, c).tanh();
        let cell = match state {
            Some(s) => f.mul(&s.cell).add(&i.mul(&g)),
            None => i.mul(&g),
        };
        let hidden = o.mul(&cell.tanh());
        LstmState { hidden, cell }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Adam state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Var]) {
        assert_eq!(grads.len(), store.len());
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (k, (value, g)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (((x, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.value().data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *x -= learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
            }
        }
    }
}
