use crate::graph::{Graph, Var};
use crate::ops::elementwise::split_axis;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Copies `src` (shape `shape`) into a new buffer laid out in `axes` order.
pub(crate) fn permute_raw<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    // Innermost axis handled as a strided run for speed.
    let last = nd - 1;
    let run = out_shape[last];
    let run_stride = strides[last];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        if run_stride == 1 {
            out.extend_from_slice(&src[base..base + run]);
        } else {
            out.extend((0..run).map(|j| src[base + j * run_stride]));
        }
        // advance odometer over axes [0, last)
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// 1-D linear interpolation matrix `[n * factor, n]` (half-pixel centres,
/// edge-clamped).
pub fn bilinear_matrix<T: Scalar>(n: usize, factor: usize) -> Vec<T> {
    let out = n * factor;
    let mut m = vec![T::zero(); out * n];
    for o in 0..out {
        let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let l = src - i0 as f64;
        m[o * n + i0] += T::from_f64c(1.0 - l);
        m[o * n + i1] += T::from_f64c(l);
    }
    m
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let old = xv.shape().to_vec();
        let out = xv.as_ref().clone().reshape(shape).expect("reshape");
        self.push_op(out, &[x], move |ctx| {
            vec![Some(ctx.grad.clone().reshape(&old).unwrap())]
        })
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(axes.len(), xv.ndim(), "permute: axes rank");
        let (shape, data) = permute_raw(xv.data(), xv.shape(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push_op(Tensor::from_vec(&shape, data).unwrap(), &[x], move |ctx| {
            let (s, d) = permute_raw(ctx.grad.data(), ctx.grad.shape(), &inverse);
            vec![Some(Tensor::from_vec(&s, d).unwrap())]
        })
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let base = vals[0].shape().to_vec();
        let mut sizes = Vec::with_capacity(vals.len());
        for v in &vals {
            let s = v.shape();
            assert_eq!(s.len(), base.len(), "concat rank");
            for (i, (&a, &b)) in s.iter().zip(&base).enumerate() {
                assert!(i == axis || a == b, "concat: shape {s:?} vs {base:?}");
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &c) in vals.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        self.push_op(Tensor::from_vec(&shape, out).unwrap(), xs, move |ctx| {
            let g = ctx.grad.data();
            let mut parts: Vec<Vec<T>> = sizes
                .iter()
                .map(|&c| Vec::with_capacity(outer * c * inner))
                .collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (p, &c) in parts.iter_mut().zip(&sizes) {
                    p.extend_from_slice(&g[off..off + c * inner]);
                    off += c * inner;
                }
            }
            parts
                .into_iter()
                .zip(ctx.inputs)
                .map(|(p, inp)| Some(Tensor::from_vec(inp.shape(), p).unwrap()))
                .collect()
        })
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (outer, c, inner) = split_axis(&shape, axis);
        assert!(start + len <= c, "narrow out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * c + start) * inner;
            out.extend_from_slice(&xv.data()[b..b + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        self.push_op(Tensor::from_vec(&oshape, out).unwrap(), &[x], move |ctx| {
            let mut gx = vec![T::zero(); outer * c * inner];
            let g = ctx.grad.data();
            for o in 0..outer {
                let b = (o * c + start) * inner;
                gx[b..b + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_vec(&shape, gx).unwrap())]
        })
    }

    /// Nearest-neighbour upsampling of `[n, c, h, w]` by an integer factor.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let &[n, c, h, w] = xv.shape() else {
            panic!("upsample_nearest expects NCHW")
        };
        let (ho, wo) = (h * factor, w * factor);
        let src = xv.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let p = &src[plane * h * w..(plane + 1) * h * w];
            for i in 0..ho {
                let row = &p[(i / factor) * w..(i / factor + 1) * w];
                for &v in row {
                    for _ in 0..factor {
                        out.push(v);
                    }
                }
            }
        }
        self.push_op(
            Tensor::from_vec(&[n, c, ho, wo], out).unwrap(),
            &[x],
            move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            gx[plane * h * w + (i / factor) * w + j / factor] +=
                                g[plane * ho * wo + i * wo + j];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], gx).unwrap())]
            },
        )
    }

    /// Bilinear upsampling of `[n, c, h, w]` by an integer factor
    /// (half-pixel centres, edge-clamped).
    pub fn upsample_bilinear(&self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let &[n, c, h, w] = xv.shape() else {
            panic!("upsample_bilinear expects NCHW")
        };
        let (ho, wo) = (h * factor, w * factor);
        let mh: Vec<T> = bilinear_matrix(h, factor);
        let mw: Vec<T> = bilinear_matrix(w, factor);
        let planes = n * c;
        let src = xv.data();
        let mut tmp = vec![T::zero(); ho * w];
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            // tmp = Mh @ X  [ho, w]
            T::gemm(ho, h, w, T::one(), &mh, h as isize, 1, &src[p * h * w..(p + 1) * h * w], w as isize, 1, T::zero(), &mut tmp, w as isize, 1);
            // out = tmp @ Mw^T  [ho, wo]
            T::gemm(ho, w, wo, T::one(), &tmp, w as isize, 1, &mw, 1, w as isize, T::zero(), &mut out[p * ho * wo..(p + 1) * ho * wo], wo as isize, 1);
        }
        self.push_op(
            Tensor::from_vec(&[n, c, ho, wo], out).unwrap(),
            &[x],
            move |ctx| {
                let g = ctx.grad.data();
                let mut tmp = vec![T::zero(); ho * w];
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    // tmp = G @ Mw  [ho, w]
                    T::gemm(ho, wo, w, T::one(), &g[p * ho * wo..(p + 1) * ho * wo], wo as isize, 1, &mw, w as isize, 1, T::zero(), &mut tmp, w as isize, 1);
                    // gx = Mh^T @ tmp  [h, w]
                    T::gemm(h, ho, w, T::one(), &mh, 1, h as isize, &tmp, w as isize, 1, T::zero(), &mut gx[p * h * w..(p + 1) * h * w], w as isize, 1);
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], gx).unwrap())]
            },
        )
    }

    /// Row gather: `table[ids[i], :]` stacked into `[ids.len(), d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let &[vocab, d] = tv.shape() else {
            panic!("embedding table must be 2-d")
        };
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < vocab, "token id {i} out of range");
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        self.push_op(
            Tensor::from_vec(&[ids.len(), d], out).unwrap(),
            &[table],
            move |ctx| {
                let g = ctx.grad.data();
                let mut gt = vec![T::zero(); vocab * d];
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[row * d + j];
                    }
                }
                vec![Some(Tensor::from_vec(&[vocab, d], gt).unwrap())]
            },
        )
    }
}
