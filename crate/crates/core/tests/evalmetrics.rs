use ldznet::evalmetrics::{average_precision, evaluate, iou, EvalConfig};
use proptest::prelude::*;

/// Precision/recall at every distinct score, recomputed from scratch.
fn brute_ap(preds: &[Vec<f32>], gts: &[Vec<bool>]) -> f64 {
    let pix: Vec<(f32, bool)> = preds.iter().zip(gts).flat_map(|(p, g)| p.iter().copied().zip(g.iter().copied())).collect();
    let pos = pix.iter().filter(|x| x.1).count() as f64;
    let mut levels: Vec<f32> = pix.iter().map(|x| x.0).collect();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let (mut ap, mut prev_tp) = (0.0, 0u64);
    for t in levels {
        let sel: Vec<&(f32, bool)> = pix.iter().filter(|x| x.0 >= t).collect();
        let tp = sel.iter().filter(|x| x.1).count() as u64;
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos * (tp as f64 / sel.len() as f64);
            prev_tp = tp;
        }
    }
    ap
}

fn brute_iou(p: &[bool], g: &[bool]) -> f64 {
    let i = (0..p.len()).filter(|&k| p[k] && g[k]).count();
    let u = (0..p.len()).filter(|&k| p[k] || g[k]).count();
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn brute_metrics(preds: &[Vec<f32>], gts: &[Vec<bool>], taus: &[f32]) -> (f64, f64) {
    let mut best_mean = f64::NEG_INFINITY;
    let mut best_pooled = f64::NEG_INFINITY;
    for &t in taus {
        let bin: Vec<Vec<bool>> = preds.iter().map(|p| p.iter().map(|&v| v >= t).collect()).collect();
        let mean = bin.iter().zip(gts).map(|(p, g)| brute_iou(p, g)).sum::<f64>() / preds.len() as f64;
        let flat_p: Vec<bool> = bin.concat();
        let flat_g: Vec<bool> = gts.concat();
        best_mean = best_mean.max(mean);
        best_pooled = best_pooled.max(brute_iou(&flat_p, &flat_g));
    }
    (best_mean, best_pooled)
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

/// 8 hand-built 4x4 maps with deliberate score ties.
fn fixture() -> (Vec<Vec<f32>>, Vec<Vec<bool>>) {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in 0..8usize {
        let mut p = vec![0f32; 16];
        let mut g = vec![false; 16];
        for k in 0..16 {
            let (x, y) = (k % 4, k / 4);
            g[k] = x + s % 3 >= 2 && y <= 1 + s % 2;
            let level = ((x * 3 + y * 5 + s * 7) % 10) as f32 / 10.0;
            p[k] = if g[k] { (level + 0.35).min(1.0) } else { level * 0.8 };
        }
        preds.push(p);
        gts.push(g);
    }
    (preds, gts)
}

#[test]
fn overlapping_squares_give_one_third() {
    let mut a = vec![false; 9];
    let mut b = vec![false; 9];
    for &k in &[0, 1, 3, 4] {
        a[k] = true;
    }
    for &k in &[1, 2, 4, 5] {
        b[k] = true;
    }
    assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
    assert_eq!(brute_iou(&a, &b), 1.0 / 3.0);
}

#[test]
fn fixture_matches_brute_force_exactly() {
    let (p, g) = fixture();
    let cfg = EvalConfig::default();
    let (m, _) = evaluate(&p, &g, &ids(8), &cfg).unwrap();
    let (mean, pooled) = brute_metrics(&p, &g, &cfg.thresholds);
    assert_eq!(m.miou, mean);
    assert_eq!(m.iou_fg, pooled);
    assert_eq!(m.ap, brute_ap(&p, &g));
    assert!(m.ap > 0.5 && m.ap <= 1.0);
}

#[test]
fn strictly_inverted_scores_give_prevalence_ap() {
    let (_, g) = fixture();
    // strictly inverted and strictly ordered: every negative outranks every positive
    let p: Vec<Vec<f32>> = g
        .iter()
        .enumerate()
        .map(|(s, m)| m.iter().enumerate().map(|(k, &b)| {
            let jitter = (s * 16 + k) as f32 / 1e4;
            if b { 0.1 + jitter } else { 0.6 + jitter }
        }).collect())
        .collect();
    let pos = g.iter().flatten().filter(|&&b| b).count() as f64;
    let total = g.iter().map(|m| m.len()).sum::<usize>() as f64;
    let ap = average_precision(&p, &g).unwrap();
    assert_eq!(ap, brute_ap(&p, &g));
    // all positives ranked last: every precision on the curve is at most the prevalence
    assert!(ap <= pos / total, "{ap} vs {}", pos / total);
    let binary: Vec<Vec<f32>> = g.iter().map(|m| m.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect()).collect();
    assert_eq!(average_precision(&binary, &g).unwrap(), pos / total);
    let cfg = EvalConfig::default();
    let (m, _) = evaluate(&binary, &g, &ids(8), &cfg).unwrap();
    assert_eq!(m.miou, 0.0);
}

fn case() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<bool>>)> {
    (1usize..5, 4usize..20).prop_flat_map(|(n, len)| {
        (
            prop::collection::vec(prop::collection::vec(0u8..=64, len), n),
            prop::collection::vec(prop::collection::vec(any::<bool>(), len), n),
        )
    })
}

fn to_probs(levels: &[Vec<u8>], f: impl Fn(f64) -> f64) -> Vec<Vec<f32>> {
    levels.iter().map(|r| r.iter().map(|&l| f(l as f64 / 64.0) as f32).collect()).collect()
}

proptest! {
    #[test]
    fn adding_a_correct_pixel_never_lowers_iou(
        p in prop::collection::vec(any::<bool>(), 1..40),
        g in prop::collection::vec(any::<bool>(), 1..40),
        k in 0usize..40,
    ) {
        let n = p.len().min(g.len());
        let (mut p, g) = (p[..n].to_vec(), g[..n].to_vec());
        let k = k % n;
        let before = iou(&p, &g).unwrap();
        p[k] = g[k];
        prop_assert!(iou(&p, &g).unwrap() >= before);
    }

    #[test]
    fn sweep_dominates_any_single_threshold((levels, mut g) in case(), t in 0usize..19) {
        g[0][0] = true;
        let p = to_probs(&levels, |v| v);
        let cfg = EvalConfig::default();
        let (m, _) = evaluate(&p, &g, &ids(p.len()), &cfg).unwrap();
        let fixed = EvalConfig { thresholds: vec![cfg.thresholds[t]] };
        let (single, _) = evaluate(&p, &g, &ids(p.len()), &fixed).unwrap();
        prop_assert!(m.miou >= single.miou);
        prop_assert!(m.iou_fg >= single.iou_fg);
        prop_assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.ap));
    }

    #[test]
    fn ap_invariant_under_monotone_transform((levels, mut g) in case()) {
        g[0][0] = true;
        let p = to_probs(&levels, |v| v);
        let q = to_probs(&levels, |v| 1.0 / (1.0 + (-(6.0 * v - 2.0)).exp()));
        let a = average_precision(&p, &g).unwrap();
        prop_assert_eq!(a, average_precision(&q, &g).unwrap());
        prop_assert_eq!(a, brute_ap(&p, &g));
    }
}
