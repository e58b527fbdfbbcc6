//! Model parameters for the 2-layer LSTM used by both the language model and
//! the discriminator. One shape serves both heads; only the interpretation of
//! the output logits changes (softmax vs elementwise sigmoid).

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gate order within the 4H-wide gate blocks: input, forget, candidate, output.
pub const GATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Number of real words V; the embedding has V+1 rows (start token at 0)
    /// and the output layer has V columns (word w at column w-1).
    pub vocab_size: usize,
    /// Hidden size; the embedding dimensionality is the same.
    pub hidden: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn new(vocab_size: usize, hidden: usize) -> Self {
        ModelDims { vocab_size, hidden, layers: 2 }
    }

    /// Total parameter count; a pure function of the dimensions.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let embedding = (self.vocab_size + 1) * h;
        let per_layer = h * GATES * h + h * GATES * h + GATES * h;
        let output = h * self.vocab_size + self.vocab_size;
        embedding + self.layers * per_layer + output
    }
}

/// Which nonlinearity the output logits are meant for. Metadata only: the
/// parameters are identical in shape and the forward trunk is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// (input_dim, 4H)
    pub w_ih: Array2<f64>,
    /// (H, 4H)
    pub w_hh: Array2<f64>,
    /// (4H)
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub head: HeadKind,
    /// (V+1, H); row 0 embeds the start token.
    pub embedding: Array2<f64>,
    pub layers: Vec<LstmLayer>,
    /// (H, V)
    pub w_out: Array2<f64>,
    /// (V); addressable per word, which the perturbation experiment relies on.
    pub b_out: Array1<f64>,
}

const INIT_RANGE: f64 = 0.1;
const FORGET_BIAS: f64 = 1.0;

impl ModelParams {
    /// Language-model initialization: all weights uniform(-0.1, 0.1), biases
    /// zero except the forget gate at +1.
    pub fn init_lm(dims: ModelDims, seed: u64) -> Self {
        Self::init(dims, HeadKind::Softmax, seed, false)
    }

    /// Discriminator initialization: random trunk, but the output projection
    /// and bias start at zero so every logit is exactly zero and r = 1/2.
    pub fn init_discriminator(dims: ModelDims, seed: u64) -> Self {
        Self::init(dims, HeadKind::Sigmoid, seed, true)
    }

    fn init(dims: ModelDims, head: HeadKind, seed: u64, zero_head: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = dims.hidden;
        let mut uniform = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-INIT_RANGE..INIT_RANGE))
        };
        let embedding = uniform(dims.vocab_size + 1, h);
        let mut layers = Vec::with_capacity(dims.layers);
        for _ in 0..dims.layers {
            let w_ih = uniform(h, GATES * h);
            let w_hh = uniform(h, GATES * h);
            let mut bias = Array1::zeros(GATES * h);
            bias.slice_mut(ndarray::s![h..2 * h]).fill(FORGET_BIAS);
            layers.push(LstmLayer { w_ih, w_hh, bias });
        }
        let (w_out, b_out) = if zero_head {
            (Array2::zeros((h, dims.vocab_size)), Array1::zeros(dims.vocab_size))
        } else {
            (uniform(h, dims.vocab_size), Array1::zeros(dims.vocab_size))
        };
        ModelParams { dims, head, embedding, layers, w_out, b_out }
    }

    /// All-zero parameters with the same shape; the gradient accumulator.
    pub fn zeros_like(other: &ModelParams) -> Self {
        let dims = other.dims;
        let h = dims.hidden;
        ModelParams {
            dims,
            head: other.head,
            embedding: Array2::zeros((dims.vocab_size + 1, h)),
            layers: (0..dims.layers)
                .map(|_| LstmLayer {
                    w_ih: Array2::zeros((h, GATES * h)),
                    w_hh: Array2::zeros((h, GATES * h)),
                    bias: Array1::zeros(GATES * h),
                })
                .collect(),
            w_out: Array2::zeros((h, dims.vocab_size)),
            b_out: Array1::zeros(dims.vocab_size),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.dims.vocab_size
    }

    /// Set the output bias of one word (1-based id). The perturbation
    /// experiment writes a large negative value here to crush the word's
    /// probability in every context.
    pub fn perturb_bias(&mut self, word: u32, value: f64) -> Result<()> {
        if word == 0 || word as usize > self.dims.vocab_size {
            return Err(Error::Invalid(format!(
                "perturb_bias: word id {word} out of range 1..={}",
                self.dims.vocab_size
            )));
        }
        self.b_out[word as usize - 1] = value;
        Ok(())
    }

    /// Visit every parameter slice in canonical order: embedding, then per
    /// layer w_ih, w_hh, bias, then w_out, b_out. Checkpoints and the flat
    /// vector representation use this order.
    pub fn for_each_slice<'a>(&'a self, mut f: impl FnMut(&'a [f64])) {
        f(self.embedding.as_slice().unwrap());
        for layer in &self.layers {
            f(layer.w_ih.as_slice().unwrap());
            f(layer.w_hh.as_slice().unwrap());
            f(layer.bias.as_slice().unwrap());
        }
        f(self.w_out.as_slice().unwrap());
        f(self.b_out.as_slice().unwrap());
    }

    pub fn for_each_slice_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.embedding.as_slice_mut().unwrap());
        for layer in &mut self.layers {
            f(layer.w_ih.as_slice_mut().unwrap());
            f(layer.w_hh.as_slice_mut().unwrap());
            f(layer.bias.as_slice_mut().unwrap());
        }
        f(self.w_out.as_slice_mut().unwrap());
        f(self.b_out.as_slice_mut().unwrap());
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.dims.param_count());
        self.for_each_slice(|s| flat.extend_from_slice(s));
        flat
    }

    pub fn from_flat(dims: ModelDims, head: HeadKind, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.param_count() {
            return Err(Error::Invalid(format!(
                "flat parameter vector has {} entries, dims require {}",
                flat.len(),
                dims.param_count()
            )));
        }
        let mut template = ModelParams::zeros_like(&ModelParams {
            dims,
            head,
            embedding: Array2::zeros((dims.vocab_size + 1, dims.hidden)),
            layers: (0..dims.layers)
                .map(|_| LstmLayer {
                    w_ih: Array2::zeros((dims.hidden, GATES * dims.hidden)),
                    w_hh: Array2::zeros((dims.hidden, GATES * dims.hidden)),
                    bias: Array1::zeros(GATES * dims.hidden),
                })
                .collect(),
            w_out: Array2::zeros((dims.hidden, dims.vocab_size)),
            b_out: Array1::zeros(dims.vocab_size),
        });
        let mut offset = 0usize;
        template.for_each_slice_mut(|s| {
            let len = s.len();
            s.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        });
        Ok(template)
    }

    /// Squared L2 norm over all parameters.
    pub fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each_slice(|s| acc += s.iter().map(|v| v * v).sum::<f64>());
        acc
    }

    /// `self += scale * other`, matching shapes assumed.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let flat = other.to_flat();
        let mut offset = 0usize;
        self.for_each_slice_mut(|s| {
            let len = s.len();
            for (dst, src) in s.iter_mut().zip(&flat[offset..offset + len]) {
                *dst += scale * src;
            }
            offset += len;
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_slice_mut(|s| s.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_slice(|s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}
