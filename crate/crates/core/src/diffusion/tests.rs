use super::*;
use crate::latentae::{AeConfig, AeStats};
use crate::synthdata::{make_sample, Domain};
use ldz_tensor::gradcheck::check_params;

fn tiny_unet_config() -> UNetConfig {
    UNetConfig { in_channels: 2, base_channels: 4, multipliers: vec![1, 2, 2], heads: 2, context_dim: 6, time_dim: 8, groups: 2 }
}

fn tiny_ldm_config() -> LdmConfig {
    LdmConfig {
        unet: UNetConfig { base_channels: 8, time_dim: 16, heads: 2, groups: 4, ..UNetConfig::default() },
        text: TextEncoderConfig { dim: 64, heads: 2, layers: 1, max_len: 16, mlp_hidden: 32 },
        latent_size: 8,
        steps: 3,
        batch: 4,
        ..LdmConfig::default()
    }
}

fn tiny_ae() -> TrainedAutoencoder {
    let (model, params) = TrainedAutoencoder::build(AeConfig { base_channels: 4, ..AeConfig::default() }).unwrap();
    let stats = AeStats { latent_global_std: 1.0, ..AeStats::default() };
    TrainedAutoencoder { model, params, stats }
}

fn samples(n: usize) -> Vec<ImageSample> {
    (0..n).map(|i| make_sample(100 + i as u64, format!("s{i}"), 32, 32, Domain::A).1).collect()
}

#[test]
fn schedule_matches_direct_product() {
    let s = Schedule::new(ScheduleConfig::default()).unwrap();
    assert_eq!(s.alpha_bar(0), 1.0);
    assert_eq!(s.beta(1), 1e-4);
    assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
    let mut direct = 1.0f64;
    for t in 1..=1000 {
        let beta = 1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 999.0;
        direct *= 1.0 - beta;
        assert!((s.alpha_bar(t) - direct).abs() <= 1e-12 * direct.max(1e-300));
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        if t > 1 {
            assert!(s.snr(t) < s.snr(t - 1));
        }
    }
    assert!(s.alpha_bar(1000) < 1e-3);
    assert!(s.check_step(0).is_err() && s.check_step(1001).is_err());
    assert!(Schedule::new(ScheduleConfig { steps: 10, beta_start: 0.5, beta_end: 0.1 }).is_err());
}

#[test]
fn forward_noise_has_closed_form_moments() {
    let s = Schedule::new(ScheduleConfig::default()).unwrap();
    let z = Tensor::<f64>::full(&[20000], 0.7);
    let mut r = rng::seeded(1);
    assert_eq!(forward_diffuse(&s, &z, 0, &mut r).unwrap().z_t, z);
    for t in [1usize, 250, 500, 1000] {
        let n = forward_diffuse(&s, &z, t, &mut r).unwrap();
        let ab = s.alpha_bar(t);
        let d = n.z_t.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        assert!((mean - ab.sqrt() * 0.7).abs() < 0.03, "t={t} mean {mean}");
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.03, "t={t} var {var}");
        let rebuilt = diffuse_with(&s, &z, t, &n.noise);
        assert!(rebuilt.max_abs_diff(&n.z_t) < 1e-12);
    }
    assert!(forward_diffuse(&s, &z, 1001, &mut r).is_err());
}

#[test]
fn guidance_endpoints_are_exact() {
    let mut r = rng::seeded(2);
    let u = Tensor::<f32>::randn(&[3, 5], 1.0, &mut r);
    let c = Tensor::<f32>::randn(&[3, 5], 1.0, &mut r);
    assert_eq!(guided(&u, &c, 0.0), u);
    assert_eq!(guided(&u, &c, 1.0), c);
    let g = guided(&u, &c, 3.0);
    for i in 0..15 {
        let want = u.data()[i] + 3.0 * (c.data()[i] - u.data()[i]);
        assert!((g.data()[i] - want).abs() < 1e-5);
    }
}

#[test]
fn strides_cover_the_schedule() {
    assert_eq!(strided_timesteps(1000, 4).unwrap(), vec![250, 500, 750, 1000]);
    assert_eq!(strided_timesteps(10, 3).unwrap(), vec![4, 7, 10]);
    assert_eq!(strided_timesteps(5, 5).unwrap(), vec![1, 2, 3, 4, 5]);
    assert!(strided_timesteps(5, 0).is_err() && strided_timesteps(5, 6).is_err());
}

#[test]
fn topology_follows_encoder_middle_decoder_layout() {
    let cfg = UNetConfig::default();
    let mut store = ParamStore::<f32>::new();
    let mut r = rng::seeded(0);
    let unet = UNet::new(&mut Builder::new(&mut store, &mut r, Init::FanIn(1.0)), cfg.clone());
    let top = unet.topology();
    assert_eq!(top.len(), 16);
    // (level, channels, stride) written out by hand.
    let expected = [
        (0, 32, 1), (0, 32, 1), (1, 64, 2), (1, 64, 2), (2, 128, 4), (2, 128, 4),
        (2, 128, 4),
        (2, 128, 4), (2, 128, 4), (2, 128, 4), (1, 64, 2), (1, 64, 2), (1, 64, 2), (0, 32, 1), (0, 32, 1), (0, 32, 1),
    ];
    for (i, (m, e)) in top.iter().zip(expected).enumerate() {
        assert_eq!(m.index, i + 1);
        assert_eq!((m.level, m.channels, m.stride), e, "module {}", i + 1);
    }
}

#[test]
fn taps_are_pure_and_shaped_by_topology() {
    let ldm = Ldm::build(tiny_ldm_config()).unwrap();
    let mut r = rng::seeded(4);
    let z = Tensor::<f32>::randn(&[2, 4, 8, 8], 1.0, &mut r);
    let ctx = ldm.context(&["a photo of a red circle", ""]).unwrap();
    let (e1, taps) = ldm.predict_noise(&z, &[10, 500], &ctx, true).unwrap();
    let (e2, none) = ldm.predict_noise(&z, &[10, 500], &ctx, false).unwrap();
    assert!(none.is_none());
    assert_eq!(e1, e2);
    let taps = taps.unwrap();
    assert_eq!(taps.len(), 16);
    for m in ldm.unet.topology() {
        assert_eq!(taps.get(m.index).unwrap().shape(), &[2, m.channels, 8 / m.stride, 8 / m.stride]);
    }
    assert!(taps.get(0).is_err() && taps.get(17).is_err());
    assert!(ldm.predict_noise(&z, &[0, 5], &ctx, false).is_err());
    assert!(ldm.predict_noise(&z, &[5], &ctx, false).is_err());
}

#[test]
fn untrained_denoiser_predicts_zero() {
    let ldm = Ldm::build(tiny_ldm_config()).unwrap();
    let z = Tensor::<f32>::full(&[1, 4, 8, 8], 0.3);
    let ctx = ldm.context(&["red circle"]).unwrap();
    let (eps, _) = ldm.predict_noise(&z, &[100], &ctx, false).unwrap();
    assert!(eps.data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = UNetConfig::default();
    let mut store = ParamStore::<f32>::new();
    let mut r = rng::seeded(5);
    let unet = UNet::new(&mut Builder::new(&mut store, &mut r, Init::FanIn(1.0)), cfg.clone());
    let g = Graph::inference();
    let x = g.constant(Tensor::randn(&[2, 64, 4, 4], 1.0, &mut r));
    let ctx = g.constant(Tensor::randn(&[2, 16, 64], 1.0, &mut r));
    let (sw, cw) = unet.attention_module(3).attention_weights(&g, &store, x, ctx);
    for (w, lk) in [(g.value(sw), 16usize), (g.value(cw), 16usize)] {
        assert_eq!(w.shape()[2], lk);
        for row in w.data().chunks(lk) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn unet_gradients_match_finite_differences() {
    let cfg = tiny_unet_config();
    let mut store = ParamStore::<f64>::new();
    let mut r = rng::seeded(6);
    let unet = UNet::new(&mut Builder::new(&mut store, &mut r, Init::FanIn(1.0)), cfg.clone());
    // Re-randomize the zero output conv so gradients reach every layer.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains("conv_out") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut r);
        }
    }
    let z = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut r);
    let ctx = Tensor::<f64>::randn(&[2, 3, 6], 1.0, &mut r);
    let target = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut r);
    let report = check_params(&mut store, 1e-5, 3, |g, p| {
        let out = unet.forward(g, p, g.constant(z.clone()), &[3.0, 70.0], g.constant(ctx.clone()), None);
        g.mse(out.eps, g.constant(target.clone()))
    });
    assert!(report.checked > 100);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn training_checkpoint_and_saliency_contracts() {
    let ae = tiny_ae();
    let train = samples(6);
    let untrained = Ldm::build(tiny_ldm_config()).unwrap();
    assert!(matches!(noise_norm_saliency(&untrained, &ae, &train[0], "red circle", 400, 0), Err(LdzError::Invalid(_))));

    let ldm = train_ldm(&tiny_ldm_config(), &train, &ae, "abc", |_, _| {}).unwrap();
    assert!(ldm.is_trained());
    assert!(ldm.unet_params.is_frozen() && ldm.text_params.is_frozen());
    assert_eq!(ldm.stats.trained_steps, 3);
    assert!(ldm.stats.initial_loss.is_finite());

    let dir = tempfile::tempdir().unwrap();
    ldm.save(dir.path()).unwrap();
    let back = Ldm::load(dir.path()).unwrap();
    assert_eq!(back.autoencoder_sha256, "abc");
    assert_eq!(back.latent_scale, ldm.latent_scale);
    let mut r = rng::seeded(9);
    let z = Tensor::<f32>::randn(&[1, 4, 8, 8], 1.0, &mut r);
    let ctx = ldm.context(&["red circle"]).unwrap();
    assert_eq!(ldm.predict_noise(&z, &[7], &ctx, false).unwrap().0, back.predict_noise(&z, &[7], &ctx, false).unwrap().0);

    let maps = noise_norm_saliency_seeds(&ldm, &ae, &train[0], &train[0].caption, 400, &[0, 1]).unwrap();
    for m in &maps {
        assert_eq!(m.len(), 32 * 32);
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let empty = noise_norm_saliency(&ldm, &ae, &train[0], "", 400, 0).unwrap();
    assert!(empty.iter().all(|&v| v == 0.0));
    assert!(noise_norm_saliency(&ldm, &ae, &train[0], "red circle", 0, 0).is_err());

    let img = ldm.sample(&ae, "a photo of a red circle", 3, 2.0, 0).unwrap();
    assert_eq!(img.shape(), &[3, 32, 32]);
    assert!(img.is_finite());

    std::fs::write(dir.path().join("unet.bin"), b"junk").unwrap();
    assert!(matches!(Ldm::load(dir.path()), Err(LdzError::Checkpoint(_))));
}
