use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row/column strides for a `rows x cols` row-major matrix, optionally read
/// transposed.
fn strides(cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Batched `op(a) @ op(b)` over raw buffers. `a` holds `batch` matrices of
/// `ar x ac`, `b` holds `batch` of `br x bc` (or one, broadcast, when
/// `b_shared`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_raw<T: Scalar>(
    batch: usize,
    a: &[T],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[T],
    (br, bc): (usize, usize),
    tb: bool,
    b_shared: bool,
    out: &mut [T],
    accumulate: bool,
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let (rsa, csa) = strides(ac, ta);
    let (rsb, csb) = strides(bc, tb);
    let beta = if accumulate { T::one() } else { T::zero() };
    for i in 0..batch {
        let asl = &a[i * ar * ac..(i + 1) * ar * ac];
        let bsl = if b_shared {
            &b[..br * bc]
        } else {
            &b[i * br * bc..(i + 1) * br * bc]
        };
        let osl = &mut out[i * m * n..(i + 1) * m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            asl,
            rsa,
            csa,
            bsl,
            rsb,
            csb,
            beta,
            osl,
            n as isize,
            1,
        );
    }
}

impl<T: Scalar> Graph<T> {
    /// Matrix product of the last two axes, batched over the leading ones.
    ///
    /// `a: [.., m, k]` (or `[.., k, m]` when `ta`), `b: [.., k, n]` (or
    /// `[.., n, k]` when `tb`). When `b` is 2-D it is shared by every batch.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs >=2-d operands");
        let (ar, ac) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (br, bc) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let b_shared = bsh.len() == 2;
        if !b_shared {
            assert_eq!(
                &ash[..ash.len() - 2],
                &bsh[..bsh.len() - 2],
                "matmul batch dims"
            );
        }
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        bmm_raw(
            batch,
            av.data(),
            (ar, ac),
            ta,
            bv.data(),
            (br, bc),
            tb,
            b_shared,
            &mut out,
            false,
        );
        let out = Tensor::from_vec(&out_shape, out).unwrap();
        self.push_op(out, &[a, b], move |ctx| {
            let g = ctx.grad.data();
            let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            // dA' = G B'^T, dB' = A'^T G; transposed storage swaps operands.
            let mut ga = vec![T::zero(); ad.len()];
            if ta {
                // dA = B' G^T : [k, m]
                for i in 0..batch {
                    let bsl = if b_shared { &bd[..] } else { &bd[i * br * bc..(i + 1) * br * bc] };
                    let (rsb, csb) = strides(bc, tb);
                    let gsl = &g[i * m * n..(i + 1) * m * n];
                    let k = ar;
                    T::gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        bsl,
                        rsb,
                        csb,
                        gsl,
                        1,
                        n as isize,
                        T::zero(),
                        &mut ga[i * ar * ac..(i + 1) * ar * ac],
                        ac as isize,
                        1,
                    );
                }
            } else {
                // dA = G B'^T : [m, k]
                for i in 0..batch {
                    let bsl = if b_shared { &bd[..] } else { &bd[i * br * bc..(i + 1) * br * bc] };
                    let (rsb, csb) = strides(bc, tb);
                    let gsl = &g[i * m * n..(i + 1) * m * n];
                    let k = ac;
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gsl,
                        n as isize,
                        1,
                        bsl,
                        csb,
                        rsb,
                        T::zero(),
                        &mut ga[i * ar * ac..(i + 1) * ar * ac],
                        ac as isize,
                        1,
                    );
                }
            }
            let mut gb = vec![T::zero(); bd.len()];
            let (rsa, csa) = strides(ac, ta);
            let k = if ta { ar } else { ac };
            for i in 0..batch {
                let asl = &ad[i * ar * ac..(i + 1) * ar * ac];
                let gsl = &g[i * m * n..(i + 1) * m * n];
                let beta = if b_shared && i > 0 { T::one() } else { T::zero() };
                let gbsl = if b_shared {
                    &mut gb[..]
                } else {
                    &mut gb[i * br * bc..(i + 1) * br * bc]
                };
                if tb {
                    // dB = G^T A' : [n, k]
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        gsl,
                        1,
                        n as isize,
                        asl,
                        rsa,
                        csa,
                        beta,
                        gbsl,
                        bc as isize,
                        1,
                    );
                } else {
                    // dB = A'^T G : [k, n]
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        asl,
                        csa,
                        rsa,
                        gsl,
                        n as isize,
                        1,
                        beta,
                        gbsl,
                        bc as isize,
                        1,
                    );
                }
            }
            vec![
                Some(Tensor::from_vec(ctx.inputs[0].shape(), ga).unwrap()),
                Some(Tensor::from_vec(ctx.inputs[1].shape(), gb).unwrap()),
            ]
        })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x @ w + b` over the last axis; `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_rows(x, w);
        match b {
            Some(b) => {
                let nd = self.shape(y).len();
                self.add_channel(y, b, nd - 1)
            }
            None => y,
        }
    }

    /// Treats every leading axis of `x` as rows: `[.., in] @ [in, out]`.
    pub fn matmul_rows(&self, x: Var, w: Var) -> Var {
        let xs = self.shape(x);
        let cols = *xs.last().unwrap();
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, cols]);
        let y = self.matmul(flat, w);
        let mut out = xs.clone();
        *out.last_mut().unwrap() = self.shape(w)[1];
        self.reshape(y, &out)
    }
}
