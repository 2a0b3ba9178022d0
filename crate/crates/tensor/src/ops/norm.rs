use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Standardizes each contiguous chunk of `chunk` elements to zero mean
    /// and unit variance (biased variance, `eps` inside the root).
    ///
    /// Group norm over NCHW is `chunk = (c / groups) * h * w`; layer norm over
    /// the last axis is `chunk = last_dim`.
    pub fn normalize_chunks(&self, x: Var, chunk: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data();
        assert!(chunk > 0 && data.len() % chunk == 0, "normalize_chunks: bad chunk");
        let eps = T::from_f64c(eps);
        let count = T::from_usize_c(chunk);
        let chunks = data.len() / chunk;
        let mut out = vec![T::zero(); data.len()];
        let mut rstd = Vec::with_capacity(chunks);
        for (src, dst) in data.chunks_exact(chunk).zip(out.chunks_exact_mut(chunk)) {
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let r = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::from_vec(xv.shape(), out).unwrap();
        self.push_op(out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let y = ctx.output.data();
            let mut gx = vec![T::zero(); g.len()];
            for (i, ((gc, yc), dc)) in g
                .chunks_exact(chunk)
                .zip(y.chunks_exact(chunk))
                .zip(gx.chunks_exact_mut(chunk))
                .enumerate()
            {
                let mg = gc.iter().copied().sum::<T>() / count;
                let mgy = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / count;
                for ((d, &gv), &yv) in dc.iter_mut().zip(gc).zip(yc) {
                    *d = rstd[i] * (gv - mg - yv * mgy);
                }
            }
            vec![Some(Tensor::from_vec(ctx.grad.shape(), gx).unwrap())]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut out = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in dst.iter_mut() {
                *o /= s;
            }
        }
        let out = Tensor::from_vec(xv.shape(), out).unwrap();
        self.push_op(out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let y = ctx.output.data();
            let mut gx = vec![T::zero(); g.len()];
            for ((gc, yc), dc) in g.chunks_exact(d).zip(y.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                let dot: T = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in dc.iter_mut().zip(gc).zip(yc) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_vec(ctx.grad.shape(), gx).unwrap())]
        })
    }
}
