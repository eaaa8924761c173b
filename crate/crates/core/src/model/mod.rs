//! Decoder-only transformer with hand-written forward and backward passes.
//!
//! Pre-norm layers: each block applies layer-normed causal multi-head
//! self-attention and a layer-normed GELU feed-forward, both with residual
//! connections, followed by a final layer norm and a vocabulary projection
//! (weight-tied to the token embedding by default). Positions are sinusoidal
//! unless the config asks for a learned table.
//!
//! Everything is generic over `f32`/`f64`: training and inference run at
//! 32-bit, gradient checking at 64-bit.

mod backward;
mod checkpoint;
mod forward;

pub use backward::backward;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward, forward_with_cache, Batch, DecodeState, ForwardCache, LogitsBatch};

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, LinalgScalar};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Floating-point element type of the model.
pub trait Scalar:
    LinalgScalar
    + Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(x: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}
impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
}

/// Layer-norm epsilon.
pub(crate) const LN_EPS: f64 = 1e-5;

/// Transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width h.
    pub hidden: usize,
    /// Layer count l.
    pub layers: usize,
    /// Attention head count k.
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_ffn_multiplier")]
    pub ffn_multiplier: usize,
    /// Learned position table instead of the sinusoidal default.
    #[serde(default)]
    pub learned_positions: bool,
    /// Tie the output projection to the token embedding.
    #[serde(default = "default_true")]
    pub tied_output: bool,
}

fn default_ffn_multiplier() -> usize {
    4
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(
        hidden: usize,
        layers: usize,
        heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            hidden,
            layers,
            heads,
            vocab_size,
            max_seq_len,
            ffn_multiplier: 4,
            learned_positions: false,
            tied_output: true,
        }
    }

    /// tiny: h=64, l=2, k=2
    pub fn tiny(vocab_size: usize, max_seq_len: usize) -> Self {
        Self::new(64, 2, 2, vocab_size, max_seq_len)
    }

    /// small: h=128, l=4, k=4
    pub fn small(vocab_size: usize, max_seq_len: usize) -> Self {
        Self::new(128, 4, 4, vocab_size, max_seq_len)
    }

    /// base: h=256, l=6, k=8
    pub fn base(vocab_size: usize, max_seq_len: usize) -> Self {
        Self::new(256, 6, 8, vocab_size, max_seq_len)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden * self.ffn_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.layers == 0
            || self.heads == 0
            || self.vocab_size == 0
            || self.ffn_multiplier == 0
        {
            return Err(Error::InvalidConfig(
                "all dimensions must be positive".into(),
            ));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be at least 2".into()));
        }
        if !self.learned_positions && self.hidden % 2 != 0 {
            return Err(Error::InvalidConfig(
                "sinusoidal positions require an even hidden width".into(),
            ));
        }
        Ok(())
    }
}

/// The standard sinusoidal position table:
/// `PE[pos, 2i] = sin(pos / 10000^(2i/h))`, `PE[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_positions<T: Scalar>(max_seq_len: usize, hidden: usize) -> Result<Array2<T>> {
    if hidden % 2 != 0 {
        return Err(Error::InvalidConfig(
            "sinusoidal positions require an even hidden width".into(),
        ));
    }
    let mut table = Array2::zeros((max_seq_len, hidden));
    for pos in 0..max_seq_len {
        for i in 0..hidden / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / hidden as f64);
            table[[pos, 2 * i]] = T::from_f64(rate.sin());
            table[[pos, 2 * i + 1]] = T::from_f64(rate.cos());
        }
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// All model weights. Also used as the gradient container: gradients share
/// the exact shapes of their parameters.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embedding: Array2<T>,
    /// Fixed sinusoidal table, or learned (and then part of the gradient).
    pub positions: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_ln_gain: Array1<T>,
    pub final_ln_bias: Array1<T>,
    /// Present only when the output projection is untied.
    pub out_proj: Option<Array2<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization: weights from N(0, 0.02), biases zero,
    /// layer-norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut randn = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| T::from_f64(normal.sample(&mut rng)))
        };

        let h = config.hidden;
        let f = config.ffn_dim();
        let embedding = randn(config.vocab_size, h);
        let positions = if config.learned_positions {
            randn(config.max_seq_len, h)
        } else {
            sinusoidal_positions(config.max_seq_len, h)?
        };
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                ln1_gain: Array1::from_elem(h, T::one()),
                ln1_bias: Array1::zeros(h),
                wq: randn(h, h),
                wk: randn(h, h),
                wv: randn(h, h),
                wo: randn(h, h),
                ln2_gain: Array1::from_elem(h, T::one()),
                ln2_bias: Array1::zeros(h),
                w1: randn(h, f),
                b1: Array1::zeros(f),
                w2: randn(f, h),
                b2: Array1::zeros(h),
            });
        }
        let out_proj = if config.tied_output {
            None
        } else {
            Some(randn(config.vocab_size, h))
        };
        Ok(ModelParams {
            config: config.clone(),
            embedding,
            positions,
            layers,
            final_ln_gain: Array1::from_elem(h, T::one()),
            final_ln_bias: Array1::zeros(h),
            out_proj,
        })
    }

    /// Zero tensors with this config's shapes — the gradient buffer.
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden;
        let f = config.ffn_dim();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Array1::zeros(h),
                ln1_bias: Array1::zeros(h),
                wq: Array2::zeros((h, h)),
                wk: Array2::zeros((h, h)),
                wv: Array2::zeros((h, h)),
                wo: Array2::zeros((h, h)),
                ln2_gain: Array1::zeros(h),
                ln2_bias: Array1::zeros(h),
                w1: Array2::zeros((h, f)),
                b1: Array1::zeros(f),
                w2: Array2::zeros((f, h)),
                b2: Array1::zeros(h),
            })
            .collect();
        ModelParams {
            config: config.clone(),
            embedding: Array2::zeros((config.vocab_size, h)),
            positions: Array2::zeros((config.max_seq_len, h)),
            layers,
            final_ln_gain: Array1::zeros(h),
            final_ln_bias: Array1::zeros(h),
            out_proj: if config.tied_output {
                None
            } else {
                Some(Array2::zeros((config.vocab_size, h)))
            },
        }
    }

    /// The weight matrix projecting hidden states into the vocabulary.
    pub fn output_weight(&self) -> &Array2<T> {
        self.out_proj.as_ref().unwrap_or(&self.embedding)
    }

    /// Named views of every trainable tensor, in canonical order. The
    /// position table is included only when positions are learned.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out: Vec<(String, ArrayViewD<'_, T>)> = Vec::new();
        out.push(("embedding".into(), self.embedding.view().into_dyn()));
        if self.config.learned_positions {
            out.push(("positions".into(), self.positions.view().into_dyn()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), layer.ln1_gain.view().into_dyn()));
            out.push((format!("layer{i}.ln1.bias"), layer.ln1_bias.view().into_dyn()));
            out.push((format!("layer{i}.attn.wq"), layer.wq.view().into_dyn()));
            out.push((format!("layer{i}.attn.wk"), layer.wk.view().into_dyn()));
            out.push((format!("layer{i}.attn.wv"), layer.wv.view().into_dyn()));
            out.push((format!("layer{i}.attn.wo"), layer.wo.view().into_dyn()));
            out.push((format!("layer{i}.ln2.gain"), layer.ln2_gain.view().into_dyn()));
            out.push((format!("layer{i}.ln2.bias"), layer.ln2_bias.view().into_dyn()));
            out.push((format!("layer{i}.ffn.w1"), layer.w1.view().into_dyn()));
            out.push((format!("layer{i}.ffn.b1"), layer.b1.view().into_dyn()));
            out.push((format!("layer{i}.ffn.w2"), layer.w2.view().into_dyn()));
            out.push((format!("layer{i}.ffn.b2"), layer.b2.view().into_dyn()));
        }
        out.push(("final_ln.gain".into(), self.final_ln_gain.view().into_dyn()));
        out.push(("final_ln.bias".into(), self.final_ln_bias.view().into_dyn()));
        if let Some(w) = &self.out_proj {
            out.push(("out_proj".into(), w.view().into_dyn()));
        }
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let learned = self.config.learned_positions;
        let mut out: Vec<(String, ArrayViewMutD<'_, T>)> = Vec::new();
        out.push(("embedding".into(), self.embedding.view_mut().into_dyn()));
        if learned {
            out.push(("positions".into(), self.positions.view_mut().into_dyn()));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layer{i}.ln1.gain"),
                layer.ln1_gain.view_mut().into_dyn(),
            ));
            out.push((
                format!("layer{i}.ln1.bias"),
                layer.ln1_bias.view_mut().into_dyn(),
            ));
            out.push((format!("layer{i}.attn.wq"), layer.wq.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.wk"), layer.wk.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.wv"), layer.wv.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.wo"), layer.wo.view_mut().into_dyn()));
            out.push((
                format!("layer{i}.ln2.gain"),
                layer.ln2_gain.view_mut().into_dyn(),
            ));
            out.push((
                format!("layer{i}.ln2.bias"),
                layer.ln2_bias.view_mut().into_dyn(),
            ));
            out.push((format!("layer{i}.ffn.w1"), layer.w1.view_mut().into_dyn()));
            out.push((format!("layer{i}.ffn.b1"), layer.b1.view_mut().into_dyn()));
            out.push((format!("layer{i}.ffn.w2"), layer.w2.view_mut().into_dyn()));
            out.push((format!("layer{i}.ffn.b2"), layer.b2.view_mut().into_dyn()));
        }
        out.push((
            "final_ln.gain".into(),
            self.final_ln_gain.view_mut().into_dyn(),
        ));
        out.push((
            "final_ln.bias".into(),
            self.final_ln_bias.view_mut().into_dyn(),
        ));
        if let Some(w) = &mut self.out_proj {
            out.push(("out_proj".into(), w.view_mut().into_dyn()));
        }
        out
    }

    /// Accumulate `other` into `self` tensor-by-tensor (gradient reduction).
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.zip_mut_with(&b, |x, &y| *x = *x + y);
        }
    }

    /// Multiply every tensor by a scalar.
    pub fn scale(&mut self, factor: T) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// Cast parameters between precisions (the 64-bit gradient-check mode runs
/// on casts of 32-bit models).
pub fn cast_params<A: Scalar, B: Scalar>(params: &ModelParams<A>) -> ModelParams<B> {
    let mut out = ModelParams::<B>::zeros(&params.config);
    out.positions = params.positions.mapv(|x| B::from_f64(x.to_f64().unwrap()));
    for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(params.tensors()) {
        dst.zip_mut_with(&src, |d, s| *d = B::from_f64(s.to_f64().unwrap()));
    }
    out
}
