use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
/// lies inside the image.
fn valid_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < g.wo && lo * g.stride + kx < g.pad {
        lo += 1;
    }
    let mut hi = g.wo;
    while hi > lo && (hi - 1) * g.stride + kx >= g.pad + g.w {
        hi -= 1;
    }
    (lo, hi)
}

/// Unfolds `x` into `[c*k*k, n*ho*wo]` (column index = sample-major, then
/// output pixel).
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let mut col = vec![T::zero(); g.rows() * cols];
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for s in 0..g.n {
                    let plane = &x[(s * g.c + ci) * g.h * g.w..(s * g.c + ci + 1) * g.h * g.w];
                    let d = &mut dst[s * hw_out..(s + 1) * hw_out];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut d[oy * g.wo..(oy + 1) * g.wo];
                        let (lo, hi) = valid_range(g, kx);
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            drow[lo..hi].copy_from_slice(&src_row[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                drow[ox] = src_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let hw_out = g.ho * g.wo;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for s in 0..g.n {
                    let base = (s * g.c + ci) * g.h * g.w;
                    let sv = &src[s * hw_out..(s + 1) * hw_out];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = base + iy as usize * g.w;
                        let (lo, hi) = valid_range(g, kx);
                        let srow = &sv[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let off = xrow + lo + kx - g.pad;
                            for (d, &v) in x[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for ox in lo..hi {
                                x[xrow + ox * g.stride + kx - g.pad] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[o, n*hw]` -> `[n, o, hw]` and back.
fn swap_outer<T: Scalar>(src: &[T], a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..b {
        for i in 0..a {
            let off = (i * b + j) * inner;
            out.extend_from_slice(&src[off..off + inner]);
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// 2-D convolution, `x: [n, c, h, w]`, `w: [o, c, k, k]`, square kernel,
    /// symmetric zero padding.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(weight));
        let &[n, c, h, w] = xv.shape() else {
            panic!("conv2d expects NCHW input, got {:?}", xv.shape())
        };
        let &[o, wc, k, k2] = wv.shape() else {
            panic!("conv2d expects OCKK weight")
        };
        assert_eq!(wc, c, "conv2d: channel mismatch");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n, c, h, w, k, stride, pad, ho, wo };
        let direct = k == 1 && stride == 1 && pad == 0;
        let col = if direct {
            swap_outer(xv.data(), n, c, h * w)
        } else {
            im2col(xv.data(), &geom)
        };
        let cols = geom.cols();
        let rows = geom.rows();
        let mut y = vec![T::zero(); o * cols];
        T::gemm(o, rows, cols, T::one(), wv.data(), rows as isize, 1, &col, cols as isize, 1, T::zero(), &mut y, cols as isize, 1);
        drop(col);
        let out = swap_outer(&y, o, n, ho * wo);
        let out = Tensor::from_vec(&[n, o, ho, wo], out).unwrap();
        let y = self.push_op(out, &[x, weight], move |ctx| {
            let g = &geom;
            let gy = swap_outer(ctx.grad.data(), n, o, g.ho * g.wo); // [o, cols]
            let xin = ctx.inputs[0].data();
            let wd = ctx.inputs[1].data();
            let col = if direct {
                swap_outer(xin, n, c, g.h * g.w)
            } else {
                im2col(xin, g)
            };
            let cols = g.cols();
            let rows = g.rows();
            let mut gw = vec![T::zero(); o * rows];
            // dW = gy @ col^T
            T::gemm(o, cols, rows, T::one(), &gy, cols as isize, 1, &col, 1, cols as isize, T::zero(), &mut gw, rows as isize, 1);
            let mut gcol = col;
            // dcol = W^T @ gy
            T::gemm(rows, o, cols, T::one(), wd, 1, rows as isize, &gy, cols as isize, 1, T::zero(), &mut gcol, cols as isize, 1);
            let gx = if direct {
                swap_outer(&gcol, c, n, g.h * g.w)
            } else {
                col2im(&gcol, g)
            };
            vec![
                Some(Tensor::from_vec(&[n, c, g.h, g.w], gx).unwrap()),
                Some(Tensor::from_vec(&[o, c, k, k], gw).unwrap()),
            ]
        });
        match bias {
            Some(b) => self.add_channel(y, b, 1),
            None => y,
        }
    }
}
