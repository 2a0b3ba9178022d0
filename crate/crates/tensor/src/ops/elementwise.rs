use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Decomposes `shape` around `axis` into `(outer, channels, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    fn unary(
        &self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out = xv.map(f);
        self.push_op(out, &[x], move |ctx| {
            let xs = ctx.inputs[0].data();
            let ys = ctx.output.data();
            let data = ctx
                .grad
                .data()
                .iter()
                .zip(xs.iter().zip(ys))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(ctx.grad.shape(), data).unwrap())]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let out = av.zip_map(&bv, |x, y| x + y);
        self.push_op(out, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let out = av.zip_map(&bv, |x, y| x - y);
        self.push_op(out, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let out = av.zip_map(&bv, |x, y| x * y);
        self.push_op(out, &[a, b], |ctx| {
            vec![
                Some(ctx.grad.zip_map(&ctx.inputs[1], |g, y| g * y)),
                Some(ctx.grad.zip_map(&ctx.inputs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let s = T::from_f64c(s);
        let out = self.value(x).map(|v| v * s);
        self.push_op(out, &[x], move |ctx| vec![Some(ctx.grad.map(|g| g * s))])
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        let s = T::from_f64c(s);
        let out = self.value(x).map(|v| v + s);
        self.push_op(out, &[x], |ctx| vec![Some(ctx.grad.clone())])
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64c(lo), T::from_f64c(hi));
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `x + b` where `b` has shape `[x.shape[axis]]`.
    pub fn add_channel(&self, x: Var, b: Var, axis: usize) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let (outer, c, inner) = split_axis(xv.shape(), axis);
        assert_eq!(bv.shape(), &[c], "add_channel: bias shape");
        let mut out = xv.as_ref().clone();
        {
            let d = out.data_mut();
            let bd = bv.data();
            for o in 0..outer {
                for ch in 0..c {
                    let bb = bd[ch];
                    let base = (o * c + ch) * inner;
                    for v in &mut d[base..base + inner] {
                        *v += bb;
                    }
                }
            }
        }
        self.push_op(out, &[x, b], move |ctx| {
            let g = ctx.grad.data();
            let mut gb = vec![T::zero(); c];
            for o in 0..outer {
                for (ch, acc) in gb.iter_mut().enumerate() {
                    let base = (o * c + ch) * inner;
                    *acc += g[base..base + inner].iter().copied().sum::<T>();
                }
            }
            vec![
                Some(ctx.grad.clone()),
                Some(Tensor::from_vec(&[c], gb).unwrap()),
            ]
        })
    }

    /// `x * s` where `s` has shape `[x.shape[axis]]`.
    pub fn mul_channel(&self, x: Var, s: Var, axis: usize) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        let (outer, c, inner) = split_axis(xv.shape(), axis);
        assert_eq!(sv.shape(), &[c], "mul_channel: scale shape");
        let mut out = xv.as_ref().clone();
        {
            let d = out.data_mut();
            let sd = sv.data();
            for o in 0..outer {
                for ch in 0..c {
                    let ss = sd[ch];
                    let base = (o * c + ch) * inner;
                    for v in &mut d[base..base + inner] {
                        *v *= ss;
                    }
                }
            }
        }
        self.push_op(out, &[x, s], move |ctx| {
            let g = ctx.grad.data();
            let xd = ctx.inputs[0].data();
            let sd = ctx.inputs[1].data();
            let mut gx = vec![T::zero(); g.len()];
            let mut gs = vec![T::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    let mut acc = T::zero();
                    for i in base..base + inner {
                        gx[i] = g[i] * sd[ch];
                        acc += g[i] * xd[i];
                    }
                    gs[ch] += acc;
                }
            }
            vec![
                Some(Tensor::from_vec(ctx.grad.shape(), gx).unwrap()),
                Some(Tensor::from_vec(&[c], gs).unwrap()),
            ]
        })
    }

    /// `x + e` for `x` of shape `[n, c, ...]` and `e` of shape `[n, c]`,
    /// broadcast over the trailing axes.
    pub fn add_per_sample_channel(&self, x: Var, e: Var) -> Var {
        let (xv, ev) = (self.value(x), self.value(e));
        let shape = xv.shape();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        assert_eq!(ev.shape(), &[n, c], "add_per_sample_channel: shape");
        let mut out = xv.as_ref().clone();
        {
            let d = out.data_mut();
            for (row, &ee) in ev.data().iter().enumerate() {
                for v in &mut d[row * inner..(row + 1) * inner] {
                    *v += ee;
                }
            }
        }
        self.push_op(out, &[x, e], move |ctx| {
            let g = ctx.grad.data();
            let ge: Vec<T> = (0..n * c)
                .map(|row| g[row * inner..(row + 1) * inner].iter().copied().sum())
                .collect();
            vec![
                Some(ctx.grad.clone()),
                Some(Tensor::from_vec(&[n, c], ge).unwrap()),
            ]
        })
    }
}
