//! Parameterized building blocks shared by the encoder, decoder and adapters.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Origin, ParamId, ParameterRegistry, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// N(0, 1/fan_in)
    Lecun,
    /// N(0, 2/fan_in)
    Kaiming,
    Zeros,
}

/// Normal draws rounded to `f32`, so parameters survive the checkpoint
/// payload bit-exactly.
pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let data = (0..n).map(|_| round_f32(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{name}.weight` (`[in, out]`) and `{name}.bias`. Biases start
    /// at zero.
    pub fn register(
        reg: &mut ParameterRegistry,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        origin: Origin,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = match init {
            Init::Lecun => normal_tensor(rng, &[in_dim, out_dim], (1.0 / in_dim as f64).sqrt()),
            Init::Kaiming => normal_tensor(rng, &[in_dim, out_dim], (2.0 / in_dim as f64).sqrt()),
            Init::Zeros => Tensor::zeros(&[in_dim, out_dim]),
        };
        let weight = reg.register(format!("{name}.weight"), w, origin, true)?;
        let bias = reg.register(
            format!("{name}.bias"),
            Tensor::zeros(&[out_dim]),
            origin,
            true,
        )?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(reg, self.weight);
        let b = g.param(reg, self.bias);
        let y = g.matmul(x, w)?;
        g.broadcast_add(y, b)
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(
        reg: &mut ParameterRegistry,
        name: &str,
        dim: usize,
        origin: Origin,
    ) -> Result<Self> {
        let ones = Tensor::new(vec![dim], vec![1.0; dim])?;
        let gamma = reg.register(format!("{name}.weight"), ones, origin, true)?;
        let beta = reg.register(format!("{name}.bias"), Tensor::zeros(&[dim]), origin, true)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(reg, self.gamma);
        let beta = g.param(reg, self.beta);
        g.layernorm(x, gamma, beta)
    }
}

/// Two-layer perceptron `fc2(act(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub gelu: bool,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        reg: &mut ParameterRegistry,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        gelu: bool,
        last_init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fc1 = Linear::register(
            reg,
            &format!("{name}.fc1"),
            in_dim,
            hidden,
            Origin::Base,
            Init::Lecun,
            rng,
        )?;
        let fc2 = Linear::register(
            reg,
            &format!("{name}.fc2"),
            hidden,
            out_dim,
            Origin::Base,
            last_init,
            rng,
        )?;
        Ok(Self { fc1, fc2, gelu })
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        x: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(g, reg, x)?;
        let h = if self.gelu { g.gelu(h) } else { g.relu(h) };
        self.fc2.forward(g, reg, h)
    }
}

/// Scaled dot-product attention over `[B, Tq, C]` queries and `[B, Tk, C]`
/// keys/values, split into `heads` heads.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    let (b, tq, c) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    let d = c / heads;
    let split = |g: &mut Graph<'_>, x: Var, t: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, t, heads, d])?;
        let x = g.transpose(x, 1, 2)?;
        g.reshape(x, &[b * heads, t, d])
    };
    let qh = split(g, q, tq)?;
    let kh = split(g, k, tk)?;
    let vh = split(g, v, tk)?;
    let kt = g.transpose(kh, 1, 2)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores);
    let out = g.matmul(attn, vh)?;
    let out = g.reshape(out, &[b, heads, tq, d])?;
    let out = g.transpose(out, 1, 2)?;
    g.reshape(out, &[b, tq, c])
}
