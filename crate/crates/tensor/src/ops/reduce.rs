use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = Tensor::scalar(xv.sum());
        self.push_op(out, &[x], move |ctx| {
            vec![Some(Tensor::full(&shape, ctx.grad.item()))]
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and constant
    /// targets in `[0, 1]`, computed in the overflow-free form.
    pub fn bce_with_logits(&self, logits: Var, targets: &Tensor<T>) -> Var {
        let xv = self.value(logits);
        assert_eq!(xv.shape(), targets.shape(), "bce: shape mismatch");
        let n = T::from_usize_c(xv.numel());
        let loss: T = xv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let targets = targets.clone();
        self.push_op(Tensor::scalar(loss), &[logits], move |ctx| {
            let g = ctx.grad.item() / n;
            let gx = ctx.inputs[0].zip_map(&targets, |x, y| {
                let s = if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                };
                (s - y) * g
            });
            vec![Some(gx)]
        })
    }
}
