//! Parameterized layers. Each layer owns [`ParamId`]s into a caller-provided
//! [`ParamStore`]; the store is passed again at forward time.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn(f64),
    Normal(f64),
    Zeros,
}

impl Init {
    pub fn tensor<T: Scalar, R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
        match self {
            Init::FanIn(gain) => Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// Everything a layer constructor needs: the store, a name prefix and an rng.
pub struct Builder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
    pub init: Init,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, init: Init) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            init,
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<O>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> O) -> O {
        let saved = self.prefix.clone();
        if self.prefix.is_empty() {
            self.prefix = name.to_string();
        } else {
            self.prefix = format!("{}.{name}", self.prefix);
        }
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = self.init.tensor(shape, fan_in, self.rng);
        let n = self.full_name(name);
        self.store.add(n, t)
    }

    pub fn with_init(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> ParamId {
        let t = init.tensor(shape, fan_in, self.rng);
        let n = self.full_name(name);
        self.store.add(n, t)
    }

    pub fn constant(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, value)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, input: usize, output: usize, bias: bool) -> Self {
        b.scoped(name, |b| {
            let weight = b.weight("weight", &[input, output], input);
            let bias = bias.then(|| b.constant("bias", Tensor::zeros(&[output])));
            Self { weight, bias, input, output }
        })
    }

    /// Zero weight and bias.
    pub fn zeroed<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, input: usize, output: usize) -> Self {
        b.scoped(name, |b| {
            let weight = b.with_init("weight", &[input, output], input, Init::Zeros);
            let bias = Some(b.constant("bias", Tensor::zeros(&[output])));
            Self { weight, bias, input, output }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(p, self.weight);
        let b = self.bias.map(|b| g.param(p, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        b.scoped(name, |b| {
            let weight = b.weight("weight", &[output, input, kernel, kernel], input * kernel * kernel);
            let bias = b.constant("bias", Tensor::zeros(&[output]));
            Self { weight, bias, stride, pad: kernel / 2 }
        })
    }

    pub fn with_init<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        init: Init,
    ) -> Self {
        b.scoped(name, |b| {
            let weight = b.with_init("weight", &[output, input, kernel, kernel], input * kernel * kernel, init);
            let bias = b.constant("bias", Tensor::zeros(&[output]));
            Self { weight, bias, stride: 1, pad: kernel / 2 }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, groups: usize, channels: usize) -> Self {
        assert_eq!(channels % groups, 0, "group norm: {channels} channels, {groups} groups");
        b.scoped(name, |b| Self {
            gamma: b.constant("gamma", Tensor::ones(&[channels])),
            beta: b.constant("beta", Tensor::zeros(&[channels])),
            groups,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let s = g.shape(x);
        let chunk = s[1] / self.groups * s[2..].iter().product::<usize>();
        let y = g.normalize_chunks(x, chunk, 1e-5);
        let y = g.mul_channel(y, g.param(p, self.gamma), 1);
        g.add_channel(y, g.param(p, self.beta), 1)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.constant("gamma", Tensor::ones(&[dim])),
            beta: b.constant("beta", Tensor::zeros(&[dim])),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let s = g.shape(x);
        let last = s.len() - 1;
        let y = g.normalize_chunks(x, s[last], 1e-5);
        let y = g.mul_channel(y, g.param(p, self.gamma), last);
        g.add_channel(y, g.param(p, self.beta), last)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    /// `dim`: query width and inner width; `context_dim`: key/value input width.
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize, context_dim: usize, heads: usize) -> Self {
        Self::build(b, name, dim, context_dim, heads, false)
    }

    /// Same as [`Attention::new`] with a zero-initialized output projection.
    pub fn zero_out<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize, context_dim: usize, heads: usize) -> Self {
        Self::build(b, name, dim, context_dim, heads, true)
    }

    fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize, context_dim: usize, heads: usize, zero: bool) -> Self {
        assert_eq!(dim % heads, 0, "attention width must divide by heads");
        b.scoped(name, |b| Self {
            q: Linear::new(b, "q", dim, dim, false),
            k: Linear::new(b, "k", context_dim, dim, false),
            v: Linear::new(b, "v", context_dim, dim, false),
            out: if zero {
                Linear::zeroed(b, "out", dim, dim)
            } else {
                Linear::new(b, "out", dim, dim, true)
            },
            heads,
            dim,
        })
    }

    pub fn num_params(&self, context_dim: usize) -> usize {
        let d = self.dim;
        d * d + 2 * context_dim * d + d * d + d
    }

    /// `x: [n, lq, dim]`, `context: [n, lk, context_dim]` -> `[n, lq, dim]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var, context: Var) -> Var {
        self.forward_with_weights(g, p, x, context).0
    }

    /// Also returns the softmax weights `[n * heads, lq, lk]`.
    pub fn forward_with_weights<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var, context: Var) -> (Var, Var) {
        let xs = g.shape(x);
        let cs = g.shape(context);
        let (n, lq, lk) = (xs[0], xs[1], cs[1]);
        let h = self.heads;
        let d = self.dim / h;
        let split = |v: Var, l: usize| {
            let v = g.reshape(v, &[n, l, h, d]);
            let v = g.permute(v, &[0, 2, 1, 3]);
            g.reshape(v, &[n * h, l, d])
        };
        let q = split(self.q.forward(g, p, x), lq);
        let k = split(self.k.forward(g, p, context), lk);
        let v = split(self.v.forward(g, p, context), lk);
        let scores = g.matmul_t(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = g.softmax(scores);
        let o = g.matmul(weights, v);
        let o = g.reshape(o, &[n, h, lq, d]);
        let o = g.permute(o, &[0, 2, 1, 3]);
        let o = g.reshape(o, &[n, lq, self.dim]);
        (self.out.forward(g, p, o), weights)
    }
}

/// Sinusoidal embedding of scalar positions (e.g. diffusion timesteps),
/// `[len(ts), dim]` with `[sin | cos]` halves.
pub fn sinusoidal_embedding<T: Scalar>(ts: &[f64], dim: usize) -> Tensor<T> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t)
            .collect();
        out.extend(freqs.iter().map(|f| T::from_f64c(f.sin())));
        out.extend(freqs.iter().map(|f| T::from_f64c(f.cos())));
    }
    Tensor::from_vec(&[ts.len(), dim], out).unwrap()
}
