//! Parameterised layers. Each layer only stores parameter ids; the values live
//! in a [`ParamStore`] and the layer is scalar-agnostic.

use rand::Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `y = x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[1, dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt, lit(LN_EPS))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// `queries: [N, D]`, `keys_values: [T, D]` → `[N, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, queries: Var, keys_values: Var) -> Var {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, keys_values);
        let v = self.v.forward(g, keys_values);
        let dh = self.dim / self.heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, a, b), g.slice_cols(k, a, b), g.slice_cols(v, a, b))
            };
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s);
            outs.push(g.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, cat)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.out].iter().flat_map(|l| l.ids()).collect()
    }
}

/// Two-layer position-wise feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.fc1.ids().into_iter().chain(self.fc2.ids()).collect()
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_hidden, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

/// 2-D convolution over `[C, H*W]` maps, weights `[C_out, C_in*k*k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[c_out, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out, 1]))?;
        Ok(Self { weight, bias, in_channels: c_in, out_channels: c_out, kernel, pad: kernel / 2 })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Var {
        let w_id = g.param(self.weight);
        let b = g.param(self.bias);
        let cols = if self.kernel == 1 {
            x
        } else {
            let geom = ConvGeom {
                channels: self.in_channels,
                height: h,
                width: w,
                kernel: self.kernel,
                stride: 1,
                pad: self.pad,
            };
            g.im2col(x, geom)
        };
        let y = g.matmul(w_id, cols);
        g.add_col(y, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Strided 1-D convolution without padding over `[C, L]` signals.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[c_out, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out, 1]))?;
        Ok(Self { weight, bias, kernel, stride })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let cols = g.im2col_1d(x, self.kernel, self.stride);
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(w, cols);
        g.add_col(y, b)
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len - self.kernel) / self.stride + 1
    }
}
