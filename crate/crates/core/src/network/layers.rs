use crate::autograd::{Graph, Var};
use crate::error::{ensure, Result};
use crate::params::{param_rng, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;
pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

/// Parameter store plus the graph a forward pass records on.
pub(crate) struct Ctx<'a, 'g, T: Scalar> {
    pub ps: &'a ParamStore<T>,
    pub g: &'g Graph<T>,
}

impl<'a, 'g, T: Scalar> Ctx<'a, 'g, T> {
    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.ps.bind(self.g, id)
    }
}

/// Registers named parameters with deterministic per-name initialization.
pub(crate) struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let mut rng = param_rng(self.seed, name);
        self.store.insert(name, Tensor::uniform(shape, bound, &mut rng))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.store.insert(name, value)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let mut rng = param_rng(self.seed, name);
        self.store.insert(name, Tensor::randn(shape, &mut rng))
    }

    pub fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, stride: usize) -> Result<Conv2d> {
        let bound = 1.0 / ((ci * k * k) as f64).sqrt();
        Ok(Conv2d {
            weight: self.uniform(&format!("{name}.weight"), &[co, ci, k, k], bound)?,
            bias: self.uniform(&format!("{name}.bias"), &[co], bound)?,
            stride,
            pad: k / 2,
        })
    }

    pub fn zero_conv(&mut self, name: &str, ci: usize, co: usize, k: usize) -> Result<Conv2d> {
        Ok(Conv2d {
            weight: self.tensor(&format!("{name}.weight"), Tensor::zeros(&[co, ci, k, k]))?,
            bias: self.tensor(&format!("{name}.bias"), Tensor::zeros(&[co]))?,
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Linear> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Linear {
            weight: self.uniform(&format!("{name}.weight"), &[output, input], bound)?,
            bias: self.uniform(&format!("{name}.bias"), &[output], bound)?,
        })
    }

    pub fn norm(&mut self, name: &str, channels: usize, groups: usize) -> Result<GroupNorm> {
        Ok(GroupNorm {
            gamma: self.tensor(&format!("{name}.weight"), Tensor::ones(&[channels]))?,
            beta: self.tensor(&format!("{name}.bias"), Tensor::zeros(&[channels]))?,
            groups,
        })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'_, 'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(cx.p(self.weight), Some(cx.p(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'_, 'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(cx.p(self.weight), cx.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'_, 'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.group_norm(self.groups, cx.p(self.gamma), cx.p(self.beta), GROUP_NORM_EPS)
    }
}

/// Two (norm → SiLU → conv) sub-blocks with the step embedding added after
/// the first, plus a shortcut (1×1 conv when widths differ).
#[derive(Clone, Debug)]
pub(crate) struct ResidualBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_in: Linear,
    time_out: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        ci: usize,
        co: usize,
        time_dim: usize,
        groups_in: usize,
        groups_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: b.norm(&format!("{name}.norm1"), ci, groups_in)?,
            conv1: b.conv(&format!("{name}.conv1"), ci, co, 3, 1)?,
            time_in: b.linear(&format!("{name}.time_proj.0"), time_dim, co)?,
            time_out: b.linear(&format!("{name}.time_proj.1"), co, co)?,
            norm2: b.norm(&format!("{name}.norm2"), co, groups_out)?,
            conv2: b.conv(&format!("{name}.conv2"), co, co, 3, 1)?,
            shortcut: if ci != co {
                Some(b.conv(&format!("{name}.shortcut"), ci, co, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'_, 'g, T>, x: Var<'g, T>, temb: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.norm1.forward(cx, x)?.silu()?;
        let h = self.conv1.forward(cx, h)?;
        let t = self.time_in.forward(cx, temb)?.silu()?;
        let t = self.time_out.forward(cx, t)?;
        let h = h.add_channel_bias(t)?;
        let h = self.norm2.forward(cx, h)?.silu()?;
        let h = self.conv2.forward(cx, h)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(cx, x)?,
            None => x,
        };
        skip.add(h)
    }

    #[cfg(test)]
    pub fn residual_params(&self) -> Vec<ParamId> {
        vec![self.conv2.weight, self.conv2.bias]
    }
}

/// Sinusoidal features of step indices, `(t.len(), dim)`.
pub fn sinusoidal_embedding<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| step as f64 * f).collect();
        data.extend(args.iter().map(|a| T::lit(a.sin())));
        data.extend(args.iter().map(|a| T::lit(a.cos())));
    }
    Tensor::from_vec(&[t.len(), dim], data).expect("embedding shape")
}

/// Step embedding shared by every residual block.
#[derive(Clone, Debug)]
pub(crate) struct TimeEmbedding {
    dim: usize,
    table: Option<ParamId>,
    proj_in: Linear,
    proj_out: Linear,
}

impl TimeEmbedding {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, dim: usize, steps: usize, learned_table: bool) -> Result<Self> {
        Ok(Self {
            dim,
            table: if learned_table {
                Some(b.randn("time_embed.table", &[steps, dim])?)
            } else {
                None
            },
            proj_in: b.linear("time_embed.proj.0", dim, dim)?,
            proj_out: b.linear("time_embed.proj.1", dim, dim)?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'_, 'g, T>, t: &[usize]) -> Result<Var<'g, T>> {
        let base = match self.table {
            Some(id) => cx.p(id).gather_rows(t)?,
            None => cx.g.constant(sinusoidal_embedding(t, self.dim)),
        };
        let h = self.proj_in.forward(cx, base)?.silu()?;
        self.proj_out.forward(cx, h)
    }
}

/// Affinity gating of condition features by mask features:
/// `(LN(m_i) ⊙ LN(m_x)) ⊙ m_i`, where LN normalizes across channels at each
/// spatial position to zero mean and unit variance, without affine terms.
pub fn dynamic_condition<'g, T: Scalar>(m_i: Var<'g, T>, m_x: Var<'g, T>) -> Result<Var<'g, T>> {
    ensure!(
        m_i.shape() == m_x.shape(),
        "dynamic_condition: condition features {:?} and mask features {:?} differ",
        m_i.shape(),
        m_x.shape()
    );
    let affinity = m_i.channel_norm(LAYER_NORM_EPS)?.mul(m_x.channel_norm(LAYER_NORM_EPS)?)?;
    affinity.mul(m_i)
}
