use ldz_tensor::{Graph, Tensor};
use ldznet::diffusion::{guided, Schedule, ScheduleConfig};
use ldznet::latentae::kl_term;
use ldznet::rng::seeded;
use ldznet::synthdata::{make_sample, phrase_mask, two_object_scene, Domain, Phrase, PREFIXES};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn caption_always_reproduces_mask(seed in any::<u64>(), domain in prop_oneof![Just(Domain::A), Just(Domain::B)]) {
        let (spec, s) = make_sample(seed, "p".into(), 64, 64, domain);
        let phrase = Phrase::parse(&s.caption).unwrap();
        prop_assert_eq!(phrase_mask(&spec, &phrase), s.mask.clone());
        prop_assert!(s.mask.iter().any(|&m| m));
        prop_assert!(PREFIXES.iter().any(|p| s.caption.starts_with(p)));
    }

    #[test]
    fn domains_share_scenes(seed in any::<u64>()) {
        let (a, sa) = make_sample(seed, "p".into(), 64, 64, Domain::A);
        let (b, sb) = make_sample(seed, "p".into(), 64, 64, Domain::B);
        prop_assert_eq!(a.objects.len(), b.objects.len());
        prop_assert_eq!(sa.caption, sb.caption);
        prop_assert_eq!(sa.mask, sb.mask);
        prop_assert_ne!(sa.image, sb.image);
    }

    #[test]
    fn two_object_prompt_names_one_present_object(seed in any::<u64>()) {
        let (spec, s) = two_object_scene(seed, 64, 64, Domain::A);
        prop_assert_eq!(spec.objects.len(), 2);
        let inside = s.mask.iter().filter(|&&m| m).count();
        prop_assert!(inside > 0 && inside < s.mask.len());
    }

    #[test]
    fn schedule_is_monotone(steps in 2usize..2000, lo in 1e-5f64..1e-2, span in 1e-4f64..0.5) {
        let s = Schedule::new(ScheduleConfig { steps, beta_start: lo, beta_end: (lo + span).min(0.999) }).unwrap();
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            if t > 1 {
                prop_assert!(s.snr(t) < s.snr(t - 1));
            }
        }
    }

    #[test]
    fn kl_is_nonnegative(seed in any::<u64>(), spread in 0.01f64..5.0) {
        let mut r = seeded(seed);
        let g = Graph::<f64>::inference();
        let mean = g.constant(Tensor::<f64>::randn(&[2, 4, 3, 3], spread, &mut r));
        let logvar = g.constant(Tensor::<f64>::randn(&[2, 4, 3, 3], spread, &mut r).map(|v: f64| v.clamp(-10.0, 10.0)));
        prop_assert!(g.value(kl_term(&g, mean, logvar)).item() >= 0.0);
    }

    #[test]
    fn guidance_is_affine_in_scale(seed in any::<u64>(), w in -4.0f64..8.0) {
        let mut r = seeded(seed);
        let u = Tensor::<f64>::randn(&[16], 1.0, &mut r);
        let c = Tensor::<f64>::randn(&[16], 1.0, &mut r);
        let g = guided(&u, &c, w);
        for i in 0..16 {
            let want = (1.0 - w) * u.data()[i] + w * c.data()[i];
            prop_assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }
}
