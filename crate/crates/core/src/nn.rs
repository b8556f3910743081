//! Neural layers with hand-written forward/backward passes.
//!
//! There is no general autograd here: each layer caches what its backward
//! needs and returns exact analytic input gradients while accumulating
//! parameter gradients in place. Every backward in this module is checked
//! against central finite differences.

use rand_chacha::ChaCha8Rng;

use crate::rng::uniform;
use crate::tensor::{softmax_rows, softmax_rows_backward, Parameter, Tensor};
use crate::{Error, Result};

/// Nonlinearity between the two linear maps of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn act_forward(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        Activation::Relu => x.max(0.0),
        Activation::Identity => x,
    }
}

fn act_derivative(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Identity => 1.0,
    }
}

/// Fully connected layer `y = x W + b` with `W: d_in x d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
}

impl Linear {
    /// Uniform init in `(-1/sqrt(d_in), 1/sqrt(d_in))`.
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = 1.0 / (d_in as f64).sqrt();
        Self {
            w: Parameter::new(uniform(&[d_in, d_out], limit, rng)),
            b: Parameter::new(Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.w.value)?;
        let b = self.b.value.data();
        for i in 0..y.rows() {
            for (v, bias) in y.row_mut(i).iter_mut().zip(b) {
                *v += bias;
            }
        }
        Ok(y)
    }

    /// Accumulates `dW`, `db` and returns `dx`. `x` must be the forward input.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        self.w.grad.add_assign(&x.transposed().matmul(dy)?)?;
        let db = dy.col_sums();
        self.b.grad.add_assign(&db)?;
        dy.matmul(&self.w.value.transposed())
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Two-layer perceptron: linear -> activation -> linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

#[derive(Debug)]
pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
}

impl Mlp {
    pub fn new(
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(d_in, d_hidden, rng),
            fc2: Linear::new(d_hidden, d_out, rng),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let pre = self.fc1.forward(x)?;
        let hidden = pre.map(|v| act_forward(self.act, v));
        let y = self.fc2.forward(&hidden)?;
        Ok((
            y,
            MlpCache {
                x: x.clone(),
                pre,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Tensor) -> Result<Tensor> {
        let hidden = cache.pre.map(|v| act_forward(self.act, v));
        let d_hidden = self.fc2.backward(&hidden, dy)?;
        let d_pre = d_hidden.hadamard(&cache.pre.map(|v| act_derivative(self.act, v)))?;
        self.fc1.backward(&cache.x, &d_pre)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

/// Shape/head configuration for attention blocks.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub include_residual: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("attention dims must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Multi-head attention core: per-head QKV projections, scaled dot-product,
/// output projection. No residual; callers that want one add it themselves.
///
/// Queries may come from a different sequence than keys/values, which covers
/// self-attention (`q_in == k_in == v_in`), cross-attention, and prefix
/// injection (keys/values over `[prefix; x]`, queries over `x`).
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
}

#[derive(Debug)]
pub struct AttnCache {
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per-head softmax weights, each `A x B`.
    pub weights: Vec<Tensor>,
    o: Tensor,
}

impl Attention {
    pub fn new(dim: usize, num_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        AttentionConfig {
            model_dim: dim,
            num_heads,
            include_residual: false,
        }
        .validate()?;
        Ok(Self {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            num_heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.d_in()
    }

    /// Cross-attention forward: `q_in: A x D`, `k_in, v_in: B x D` -> `A x D`.
    pub fn forward(&self, q_in: &Tensor, k_in: &Tensor, v_in: &Tensor) -> Result<(Tensor, AttnCache)> {
        let d = self.dim();
        if q_in.cols() != d || k_in.cols() != d || v_in.cols() != d {
            return Err(Error::Shape(format!(
                "attention dim {} vs inputs {:?}/{:?}/{:?}",
                d,
                q_in.shape(),
                k_in.shape(),
                v_in.shape()
            )));
        }
        if k_in.rows() != v_in.rows() {
            return Err(Error::Shape(format!(
                "keys {:?} and values {:?} must have the same row count",
                k_in.shape(),
                v_in.shape()
            )));
        }
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(k_in)?;
        let v = self.wv.forward(v_in)?;
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Tensor::zeros(&[q_in.rows(), d]);
        let mut weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.col_slice(lo, hi);
            let kh = k.col_slice(lo, hi);
            let vh = v.col_slice(lo, hi);
            let scores = qh.matmul(&kh.transposed())?.scaled(scale);
            let a = softmax_rows(&scores);
            let oh = a.matmul(&vh)?;
            o.set_col_block(lo, &oh);
            weights.push(a);
        }
        let y = self.wo.forward(&o)?;
        Ok((
            y,
            AttnCache {
                q_in: q_in.clone(),
                k_in: k_in.clone(),
                v_in: v_in.clone(),
                q,
                k,
                v,
                weights,
                o,
            },
        ))
    }

    /// Returns `(d_q_in, d_k_in, d_v_in)`; callers sum the last two when the
    /// same tensor fed both keys and values.
    pub fn backward(&mut self, cache: &AttnCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let d = self.dim();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_o = self.wo.backward(&cache.o, dy)?;
        let mut dq = Tensor::zeros(cache.q.shape());
        let mut dk = Tensor::zeros(cache.k.shape());
        let mut dv = Tensor::zeros(cache.v.shape());
        for h in 0..self.num_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = cache.q.col_slice(lo, hi);
            let kh = cache.k.col_slice(lo, hi);
            let vh = cache.v.col_slice(lo, hi);
            let a = &cache.weights[h];
            let d_oh = d_o.col_slice(lo, hi);
            let d_a = d_oh.matmul(&vh.transposed())?;
            let d_vh = a.transposed().matmul(&d_oh)?;
            let d_scores = softmax_rows_backward(a, &d_a).scaled(scale);
            let d_qh = d_scores.matmul(&kh)?;
            let d_kh = d_scores.transposed().matmul(&qh)?;
            dq.set_col_block(lo, &d_qh);
            dk.set_col_block(lo, &d_kh);
            dv.set_col_block(lo, &d_vh);
        }
        let d_q_in = self.wq.backward(&cache.q_in, &dq)?;
        let d_k_in = self.wk.backward(&cache.k_in, &dk)?;
        let d_v_in = self.wv.backward(&cache.v_in, &dv)?;
        Ok((d_q_in, d_k_in, d_v_in))
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

/// Multi-head self-attention layer with optional residual connection and
/// optional prefix rows injected into keys/values only.
///
/// Prefix rows extend what the sequence can attend to without changing its
/// length: with `R` prefix rows the keys/values cover `R + S` rows while the
/// output stays `S x E`.
#[derive(Debug, Clone)]
pub struct SelfAttnLayer {
    pub attn: Attention,
    pub residual: bool,
}

#[derive(Debug)]
pub struct SelfAttnCache {
    inner: AttnCache,
    prefix_rows: usize,
}

impl SelfAttnLayer {
    pub fn new(cfg: &AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            attn: Attention::new(cfg.model_dim, cfg.num_heads, rng)?,
            residual: cfg.include_residual,
        })
    }

    pub fn forward(&self, x: &Tensor, prefix: Option<&Tensor>) -> Result<(Tensor, SelfAttnCache)> {
        let (kv, prefix_rows) = match prefix {
            Some(p) if p.rows() > 0 => (p.concat_rows(x)?, p.rows()),
            _ => (x.clone(), 0),
        };
        let (mut y, inner) = self.attn.forward(x, &kv, &kv)?;
        if self.residual {
            y.add_assign(x)?;
        }
        Ok((y, SelfAttnCache { inner, prefix_rows }))
    }

    /// Returns `(dx, d_prefix)`; `d_prefix` is `None` when no prefix was given.
    pub fn backward(
        &mut self,
        cache: &SelfAttnCache,
        dy: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let (d_q, d_k, d_v) = self.attn.backward(&cache.inner, dy)?;
        let d_kv = d_k.add(&d_v)?;
        let r = cache.prefix_rows;
        let mut dx = if r == 0 {
            d_q.add(&d_kv)?
        } else {
            d_q.add(&d_kv.row_slice(r, d_kv.rows()))?
        };
        if self.residual {
            dx.add_assign(dy)?;
        }
        let d_prefix = (r > 0).then(|| d_kv.row_slice(0, r));
        Ok((dx, d_prefix))
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.attn.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.attn.visit_mut(prefix, f);
    }
}
