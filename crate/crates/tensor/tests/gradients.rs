use ldz_tensor::gradcheck::{check_input, check_params};
use ldz_tensor::nn::{Attention, Builder, Conv2d, GroupNorm, Init, LayerNorm, Linear};
use ldz_tensor::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe_loss(g: &Graph<f64>, y: Var, seed: u64) -> Var {
    let w = g.constant(rand_tensor(&g.shape(y), seed));
    let p = g.mul(y, w);
    g.sum_all(p)
}

fn check(shape: &[usize], f: impl Fn(&Graph<f64>, Var) -> Var) {
    let x = rand_tensor(shape, 11);
    let r = check_input(&x, 1e-5, |g, x| {
        let y = f(g, x);
        probe_loss(g, y, 99)
    });
    assert!(r.max_rel_error < TOL, "rel error {:?}", r);
}

#[test]
fn elementwise_ops() {
    check(&[2, 3, 4], |g, x| g.silu(x));
    check(&[2, 3, 4], |g, x| g.sigmoid(x));
    check(&[2, 3, 4], |g, x| g.exp(x));
    check(&[2, 3, 4], |g, x| g.square(x));
    check(&[2, 3, 4], |g, x| {
        let y = g.scale(x, 0.3);
        g.add_scalar(y, 2.0)
    });
    check(&[2, 3, 4], |g, x| {
        let y = g.square(x);
        let z = g.mul(x, y);
        g.sub(z, x)
    });
}

#[test]
fn broadcast_ops() {
    check(&[2, 3, 4], |g, x| {
        let b = g.constant(rand_tensor(&[3], 5));
        g.add_channel(x, b, 1)
    });
    check(&[3], |g, b| {
        let x = g.constant(rand_tensor(&[2, 3, 4], 5));
        g.mul_channel(x, b, 1)
    });
    check(&[2, 3, 4], |g, x| {
        let s = g.constant(rand_tensor(&[4], 5));
        g.mul_channel(x, s, 2)
    });
    check(&[2, 3], |g, e| {
        let x = g.constant(rand_tensor(&[2, 3, 2, 2], 5));
        g.add_per_sample_channel(x, e)
    });
}

#[test]
fn matmul_all_transpose_modes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let ash = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let bsh = if tb { [2, 5, 4] } else { [2, 4, 5] };
        check(&ash, |g, a| {
            let b = g.constant(rand_tensor(&bsh, 3));
            g.matmul_t(a, b, ta, tb)
        });
        check(&bsh, |g, b| {
            let a = g.constant(rand_tensor(&ash, 3));
            g.matmul_t(a, b, ta, tb)
        });
        // shared 2-d rhs
        let bsh2 = if tb { [5, 4] } else { [4, 5] };
        check(&bsh2, |g, b| {
            let a = g.constant(rand_tensor(&ash, 3));
            g.matmul_t(a, b, ta, tb)
        });
    }
}

#[test]
fn conv_strides_and_padding() {
    for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
        check(&[2, 3, 6, 6], |g, x| {
            let w = g.constant(rand_tensor(&[4, 3, k, k], 7));
            g.conv2d(x, w, None, stride, k / 2)
        });
        check(&[4, 3, k, k], |g, w| {
            let x = g.constant(rand_tensor(&[2, 3, 6, 6], 7));
            g.conv2d(x, w, None, stride, k / 2)
        });
    }
}

#[test]
fn shape_ops() {
    check(&[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]));
    check(&[2, 3, 4, 2], |g, x| g.permute(x, &[0, 2, 1, 3]));
    check(&[2, 3, 4], |g, x| g.reshape(x, &[6, 4]));
    check(&[2, 3, 4], |g, x| {
        let y = g.constant(rand_tensor(&[2, 2, 4], 1));
        g.concat(&[x, y, x], 1)
    });
    check(&[2, 5, 3], |g, x| g.narrow(x, 1, 1, 3));
    check(&[1, 2, 3, 3], |g, x| g.upsample_nearest(x, 2));
    check(&[1, 2, 3, 4], |g, x| g.upsample_bilinear(x, 4));
    check(&[5, 3], |g, t| g.embedding(t, &[4, 0, 4, 2]));
}

#[test]
fn normalization_and_softmax() {
    check(&[2, 4, 3, 3], |g, x| g.normalize_chunks(x, 18, 1e-5));
    check(&[3, 7], |g, x| g.normalize_chunks(x, 7, 1e-5));
    check(&[2, 3, 5], |g, x| g.softmax(x));
}

#[test]
fn losses() {
    let x = rand_tensor(&[2, 8], 4);
    let target = rand_tensor(&[2, 8], 5).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let r = check_input(&x, 1e-5, |g, x| g.bce_with_logits(x, &target));
    assert!(r.max_rel_error < TOL, "{r:?}");
    let other = rand_tensor(&[2, 8], 6);
    let r = check_input(&x, 1e-5, |g, x| {
        let o = g.constant(other.clone());
        g.mse(x, o)
    });
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn layers_param_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (conv, gn, lin, ln, attn) = {
        let mut b = Builder::new(&mut store, &mut rng, Init::FanIn(1.0));
        (
            Conv2d::new(&mut b, "conv", 2, 4, 3, 1),
            GroupNorm::new(&mut b, "gn", 2, 4),
            Linear::new(&mut b, "lin", 4, 4, true),
            LayerNorm::new(&mut b, "ln", 4),
            Attention::new(&mut b, "attn", 4, 3, 2),
        )
    };
    // perturb norms away from the identity init so their grads are generic
    for name in ["gn.gamma", "gn.beta", "ln.gamma", "ln.beta", "lin.bias", "conv.bias", "attn.out.bias"] {
        let t = rand_tensor(store.by_name(name).unwrap().shape(), 77);
        store.set(name, t).unwrap();
    }
    let x = rand_tensor(&[2, 2, 3, 3], 8);
    let ctx = rand_tensor(&[2, 5, 3], 9);
    let r = check_params(&mut store, 1e-5, 12, |g, p| {
        let x = g.constant(x.clone());
        let h = conv.forward(g, p, x);
        let h = gn.forward(g, p, h);
        let h = g.silu(h);
        let t = g.reshape(h, &[2, 4, 9]);
        let t = g.permute(t, &[0, 2, 1]);
        let t = ln.forward(g, p, t);
        let t = lin.forward(g, p, t);
        let c = g.constant(ctx.clone());
        let a = attn.forward(g, p, t, c);
        probe_loss(g, a, 3)
    });
    assert!(r.max_rel_error < 1e-5, "{r:?}");
    assert!(r.checked > 50);
}

#[test]
fn attention_rows_sum_to_one() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let attn = {
        let mut b = Builder::new(&mut store, &mut rng, Init::FanIn(1.0));
        Attention::new(&mut b, "a", 8, 6, 4)
    };
    let g = Graph::inference();
    let x = g.constant(Tensor::randn(&[3, 10, 8], 3.0, &mut rng));
    let c = g.constant(Tensor::randn(&[3, 7, 6], 3.0, &mut rng));
    let (_, w) = attn.forward_with_weights(&g, &store, x, c);
    let w = g.value(w);
    assert_eq!(w.shape(), &[12, 10, 7]);
    for row in w.data().chunks(7) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn frozen_store_gets_no_gradient() {
    let mut frozen = ParamStore::<f64>::new();
    let mut live = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Linear::new(&mut Builder::new(&mut frozen, &mut rng, Init::FanIn(1.0)), "a", 3, 3, true);
    let b = Linear::new(&mut Builder::new(&mut live, &mut rng, Init::FanIn(1.0)), "b", 3, 3, true);
    frozen.freeze();
    let g = Graph::new();
    let x = g.constant(rand_tensor(&[2, 3], 1));
    let h = a.forward(&g, &frozen, x);
    let y = b.forward(&g, &live, h);
    let l = g.sum_all(y);
    let grads = g.backward(l);
    assert!(!grads.touches(&frozen));
    assert!(grads.touches(&live));
}
