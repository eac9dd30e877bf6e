//! Parameterized building blocks: dense layers, MLPs and a strided conv layer.
//!
//! Each block has a taped `forward` for training and a tape-free `infer` for
//! inference with identical math.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::linalg::{gemm, sparse_affine};
use super::tape::{im2col, ConvGeometry};
use super::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    fn apply_in_place(self, xs: &mut [f64]) {
        match self {
            Activation::Relu => xs.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => xs.iter_mut().for_each(|v| *v = v.tanh()),
        }
    }
}

/// Weight initialization scheme. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`, for layers followed by relu.
    He,
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// Normal with the given std.
    Normal(f64),
}

fn init_weights<R: Rng>(init: Init, fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f64> {
    let n = fan_in * fan_out;
    match init {
        Init::He => {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::Glorot => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let d = Uniform::new_inclusive(-limit, limit).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::matrix(in_dim, out_dim, init_weights(init, in_dim, out_dim, rng))
            .expect("positive layer sizes");
        let weight = store.add(format!("{name}.weight"), w, trainable);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), trainable);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, AutodiffError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// Affine map of `rows` row-major inputs; zero inputs are skipped.
    pub fn infer(&self, store: &ParamStore, rows: usize, x: &[f64]) -> Vec<f64> {
        sparse_affine(
            rows,
            x,
            store.get(self.weight).data(),
            store.get(self.bias).data(),
        )
    }
}

/// Stack of dense layers; the activation follows every layer but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every width including input and output.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        output_init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output sizes");
        let hidden_init = match activation {
            Activation::Relu => Init::He,
            Activation::Tanh => Init::Glorot,
        };
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i == last { output_init } else { hidden_init };
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    w[0],
                    w[1],
                    init,
                    trainable,
                    rng,
                )
            })
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, AutodiffError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    pub fn infer(&self, store: &ParamStore, rows: usize, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(store, rows, &h);
            if i + 1 < self.layers.len() {
                self.activation.apply_in_place(&mut h);
            }
        }
        h
    }
}

/// Serializable description of one conv layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Valid NHWC convolution followed by relu.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub in_shape: (usize, usize, usize),
}

impl ConvLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_shape: (usize, usize, usize),
        spec: ConvSpec,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let (_, _, c) = in_shape;
        let plen = spec.kernel * spec.kernel * c;
        let k = Tensor::matrix(
            plen,
            spec.out_channels,
            init_weights(Init::He, plen, spec.out_channels, rng),
        )
        .expect("positive conv sizes");
        let kernel = store.add(format!("{name}.kernel"), k, trainable);
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(&[spec.out_channels]),
            trainable,
        );
        Self {
            kernel,
            bias,
            spec,
            in_shape,
        }
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        let (h, w, _) = self.in_shape;
        (
            (h - self.spec.kernel) / self.spec.stride + 1,
            (w - self.spec.kernel) / self.spec.stride + 1,
            self.spec.out_channels,
        )
    }

    /// `x` is `[n, h, w, c]`; output `[n, oh, ow, out_channels]` after relu.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, AutodiffError> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, k, self.spec.kernel, self.spec.stride)?;
        let y = tape.add_row(y, b)?;
        tape.relu(y)
    }

    pub fn infer(&self, store: &ParamStore, batch: usize, x: &[f64]) -> Vec<f64> {
        let (h, w, c) = self.in_shape;
        let g = ConvGeometry {
            batch,
            height: h,
            width: w,
            in_channels: c,
            out_channels: self.spec.out_channels,
            kernel: self.spec.kernel,
            stride: self.spec.stride,
        };
        let patches = im2col(x, &g);
        let rows = batch * g.out_height() * g.out_width();
        let mut out = vec![0.0; rows * g.out_channels];
        gemm(
            rows,
            g.patch_len(),
            g.out_channels,
            &patches,
            false,
            store.get(self.kernel).data(),
            false,
            0.0,
            &mut out,
        );
        let b = store.get(self.bias).data();
        for row in out.chunks_mut(g.out_channels) {
            row.iter_mut()
                .zip(b)
                .for_each(|(v, bv)| *v = (*v + bv).max(0.0));
        }
        out
    }
}
