//! One PASS/FAIL line per acceptance criterion. Trained-model criteria run the
//! default preset through the stage cache under `<workspace>/runs` (or
//! `LDZ_OUT`), building whatever is missing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ldz_tensor::gradcheck::check_params;
use ldz_tensor::nn::{Builder, Init};
use ldz_tensor::{Graph, ParamStore, Tensor};
use ldznet::diffusion::{forward_diffuse, Ldm, LdmConfig, Schedule, ScheduleConfig, UNet, UNetConfig};
use ldznet::evalmetrics::{evaluate, EvalConfig};
use ldznet::latentae::{AeConfig, AeStats, TrainedAutoencoder};
use ldznet::rng::seeded;
use ldznet::segnets::{InjectionAdapter, SegConfig, SegData, SegModel, SegModelKind, TapNoise};
use ldznet::synthdata::{make_sample, write_split, DatasetConfig, Domain};
use ldznet::textenc::TextEncoderConfig;
use ldznet_runner::pipeline::{report, Pipeline};
use ldznet_runner::{ExperimentConfig, Upstream};

const SEEDS: [u64; 3] = [0, 1, 2];
const SEED_BUDGET_S: f64 = 2.0 * 3600.0;
const GRID_BUDGET_S: f64 = 3600.0;
const UNIT_BUDGET_S: f64 = 300.0;

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn preset() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(Some(&workspace().join("configs/default.toml")), &[]).unwrap();
    if std::env::var_os(ldznet_runner::config::OUT_ENV).is_none() {
        cfg.out = workspace().join("runs");
    }
    cfg
}

fn pipeline(seed: u64) -> Pipeline {
    Pipeline { config: ExperimentConfig { seed, ..preset() }, mode: Upstream::Build, verbose: true }
}

fn verdict(id: usize, pass: bool, detail: String) -> Line {
    Line { id, pass, detail }
}


/// Wall clock of every stage one seed's evaluations depend on.
fn seed_wall_clock(p: &Pipeline) -> f64 {
    let mut keys = vec![p.synth_key(), p.ae_key(), p.ldm_key()];
    for kind in [SegModelKind::RgbNet, SegModelKind::ZNet, SegModelKind::LdZNet] {
        keys.push(p.seg_key(kind));
        for d in [Domain::A, Domain::B] {
            keys.push(p.eval_key(kind, d));
        }
    }
    keys.iter()
        .map(|k| ldznet_runner::artifact::open(p.out(), k).map(|a| a.manifest.wall_clock_s).unwrap_or(f64::NAN))
        .sum()
}

fn criteria_1_to_3() -> Vec<Line> {
    let (_, table) = report(&preset(), &SEEDS, Upstream::Build, true).unwrap();
    let r = |k| table.row(k);
    let (rgb, z, lz, cc) = (r(SegModelKind::RgbNet), r(SegModelKind::ZNet), r(SegModelKind::LdZNet), r(SegModelKind::LdZNetConcat));
    let n_test = preset().data.n_test;
    let worst_seed = SEEDS.iter().map(|&s| seed_wall_clock(&pipeline(s))).fold(0.0, f64::max);
    let gap_z = 100.0 * (z.miou - rgb.miou);
    let gap_lz = 100.0 * (lz.miou - z.miou);
    let c1 = n_test >= 512 && gap_z >= 1.0 && gap_lz >= 0.0 && worst_seed <= SEED_BUDGET_S;
    let c2 = z.relative_drop < rgb.relative_drop && lz.relative_drop < rgb.relative_drop;
    let c3 = lz.miou >= cc.miou;
    vec![
        verdict(
            1,
            c1,
            format!(
                "mIoU RGBNet {:.2} < ZNet {:.2} <= LD-ZNet {:.2} (gaps {gap_z:+.2}, {gap_lz:+.2}; need >= 1, >= 0); \
                 n_test {n_test}; slowest seed {:.0} s (budget {SEED_BUDGET_S:.0} s)",
                100.0 * rgb.miou,
                100.0 * z.miou,
                100.0 * lz.miou,
                worst_seed
            ),
        ),
        verdict(
            2,
            c2,
            format!(
                "relative A->B drop RGBNet {:.2}%, ZNet {:.2}%, LD-ZNet {:.2}% (need both below RGBNet)",
                100.0 * rgb.relative_drop,
                100.0 * z.relative_drop,
                100.0 * lz.relative_drop
            ),
        ),
        verdict(3, c3, format!("mIoU cross-attention {:.2} >= concat {:.2}", 100.0 * lz.miou, 100.0 * cc.miou)),
    ]
}

fn criterion_4() -> Line {
    let p = pipeline(0);
    let a = p.probe_grid().unwrap();
    let grid = Pipeline::read_probe_grid(&a).unwrap();
    let mid: Vec<usize> = (6..=10).collect();
    let all_t: Vec<usize> = (1..=10).map(|i| i * 100).collect();
    let ap_mid = grid.mean_ap(&mid, &all_t).unwrap_or(f64::NAN);
    let ap_ends = grid.mean_ap(&[1, 2, 15, 16], &all_t).unwrap_or(f64::NAN);
    let ap_early = grid.mean_ap(&mid, &[300, 400, 500]).unwrap_or(f64::NAN);
    let ap_late = grid.mean_ap(&mid, &[800, 900, 1000]).unwrap_or(f64::NAN);
    let done = grid.cells.iter().filter(|c| c.ap.is_some()).count();
    let pass = done == 160 && grid.complete && ap_mid > ap_ends && ap_early >= ap_late && grid.wall_clock_s <= GRID_BUDGET_S;
    verdict(
        4,
        pass,
        format!(
            "{done}/160 cells; AP blocks 6-10 {ap_mid:.4} > blocks 1,2,15,16 {ap_ends:.4}; \
             t 300-500 {ap_early:.4} >= t 800-1000 {ap_late:.4}; grid {:.0} s (budget {GRID_BUDGET_S:.0} s)",
            grid.wall_clock_s
        ),
    )
}

fn criterion_5() -> Line {
    let p = pipeline(0);
    let s = Pipeline::read_saliency(&p.saliency().unwrap()).unwrap();
    let pass = s.scenes.len() == 100 && s.noise_seeds == 16 && s.timestep == 400 && s.fraction >= 0.70;
    verdict(
        5,
        pass,
        format!(
            "{}/{} scenes with inside mean > outside mean ({:.0}%, need >= 70%), t={}, {} noise seeds",
            s.hits,
            s.scenes.len(),
            100.0 * s.fraction,
            s.timestep,
            s.noise_seeds
        ),
    )
}

// ---- criterion 6: exact unit properties -----------------------------------

fn check(name: &str, ok: bool, failures: &mut Vec<String>) {
    if !ok {
        failures.push(name.to_string());
    }
}

fn schedule_properties(f: &mut Vec<String>) {
    let s = Schedule::new(ScheduleConfig::default()).unwrap();
    let mut product = 1.0f64;
    let mut ok = s.alpha_bar(0) == 1.0;
    for t in 1..=1000 {
        let beta = 1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 999.0;
        product *= 1.0 - beta;
        ok &= (s.beta(t) - beta).abs() <= 1e-18 + 1e-15 * beta;
        ok &= (s.alpha_bar(t) - product).abs() <= 1e-12 * product;
        ok &= s.alpha_bar(t) < s.alpha_bar(t - 1);
        if t > 1 {
            ok &= s.beta(t) > s.beta(t - 1);
        }
    }
    check("schedule", ok, f);

    let z = Tensor::<f64>::full(&[40000], -0.4);
    let mut r = seeded(61);
    let mut ok = true;
    for t in [1usize, 100, 400, 700, 1000] {
        let n = forward_diffuse(&s, &z, t, &mut r).unwrap();
        let d = n.z_t.data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        ok &= (v / (1.0 - s.alpha_bar(t)) - 1.0).abs() < 0.03;
    }
    check("forward-diffusion variance", ok, f);
}

fn attention_rows(f: &mut Vec<String>) {
    let mut store = ParamStore::<f32>::new();
    let mut r = seeded(62);
    let unet = UNet::new(&mut Builder::new(&mut store, &mut r, Init::FanIn(1.0)), UNetConfig::default());
    let g = Graph::inference();
    let mut ok = true;
    for (m, (c, side)) in [(1usize, (32usize, 8usize)), (7, (128, 2)), (16, (32, 8))] {
        let x = g.constant(Tensor::randn(&[2, c, side, side], 1.0, &mut r));
        let ctx = g.constant(Tensor::randn(&[2, 16, 64], 1.0, &mut r));
        let (sw, cw) = unet.attention_module(m).attention_weights(&g, &store, x, ctx);
        for (w, len) in [(g.value(sw), side * side), (g.value(cw), 16)] {
            ok &= w.data().chunks(len).all(|row| (row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
        }
    }
    check("attention row sums", ok, f);
}

fn small_ldm() -> (Ldm, TrainedAutoencoder) {
    let cfg = LdmConfig {
        unet: UNetConfig { base_channels: 8, time_dim: 16, heads: 2, groups: 4, context_dim: 32, ..UNetConfig::default() },
        text: TextEncoderConfig { dim: 32, heads: 2, layers: 1, max_len: 16, mlp_hidden: 32 },
        latent_size: 8,
        ..LdmConfig::default()
    };
    let mut ldm = Ldm::build(cfg).unwrap();
    ldm.freeze();
    let (model, mut params) = TrainedAutoencoder::build(AeConfig { base_channels: 4, ..AeConfig::default() }).unwrap();
    params.freeze();
    (ldm, TrainedAutoencoder { model, params, stats: AeStats { latent_global_std: 1.0, ..AeStats::default() } })
}

fn zero_init_and_taps(f: &mut Vec<String>) {
    let (ldm, ae) = small_ldm();
    let set: Vec<_> = (0..16).map(|i| make_sample(900 + i, format!("u-{i}"), 32, 32, Domain::A).1).collect();
    let cfg = |kind| SegConfig { kind, pool_heads: 2, ..SegConfig::default() };
    let z = SegModel::new(cfg(SegModelKind::ZNet), &ldm, 4).unwrap();
    let lz = SegModel::new(cfg(SegModelKind::LdZNet), &ldm, 4).unwrap();
    let zd = SegData::prepare(SegModelKind::ZNet, &ldm, &ae, &set).unwrap();
    let ld = SegData::prepare(SegModelKind::LdZNet, &ldm, &ae, &set).unwrap();
    let idx: Vec<usize> = (0..set.len()).collect();
    let a = z.logits(&z.assemble(&ldm, &zd, &idx, TapNoise::PerSample(5)).unwrap());
    let b = lz.logits(&lz.assemble(&ldm, &ld, &idx, TapNoise::PerSample(5)).unwrap());
    check("zero-init LD-ZNet == ZNet", a.max_abs_diff(&b) <= 1e-5, f);

    let mut r = seeded(63);
    let zt = Tensor::<f32>::randn(&[2, 4, 8, 8], 1.0, &mut r);
    let ctx = ldm.context(&["a photo of a blue star", ""]).unwrap();
    let (e_tap, taps) = ldm.predict_noise(&zt, &[40, 800], &ctx, true).unwrap();
    let (e_plain, _) = ldm.predict_noise(&zt, &[40, 800], &ctx, false).unwrap();
    check("tap purity", e_tap.data() == e_plain.data() && taps.map(|t| t.len()) == Some(16), f);
}

fn metrics_fixture(f: &mut Vec<String>) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics.json");
    let fx: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let preds: Vec<Vec<f32>> = serde_json::from_value(fx["preds"].clone()).unwrap();
    let gts: Vec<Vec<bool>> = serde_json::from_value(fx["gts"].clone()).unwrap();
    let ids: Vec<String> = (0..preds.len()).map(|i| format!("f{i}")).collect();
    let (m, _) = evaluate(&preds, &gts, &ids, &EvalConfig::default()).unwrap();
    let e = &fx["expected"];
    let ok = m.miou == e["miou"].as_f64().unwrap()
        && m.iou_fg == e["iou_fg"].as_f64().unwrap()
        && m.ap == e["ap"].as_f64().unwrap();
    check("metric suite vs brute-force fixture", ok, f);
}

fn gradients(f: &mut Vec<String>) {
    let cfg = UNetConfig { in_channels: 2, base_channels: 4, multipliers: vec![1, 2, 2], heads: 2, context_dim: 6, time_dim: 8, groups: 2 };
    let mut store = ParamStore::<f64>::new();
    let mut r = seeded(64);
    let unet = UNet::new(&mut Builder::new(&mut store, &mut r, Init::FanIn(1.0)), cfg);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains("conv_out") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut r);
        }
    }
    let z = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut r);
    let ctx = Tensor::<f64>::randn(&[2, 3, 6], 1.0, &mut r);
    let target = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut r);
    let unet_report = check_params(&mut store, 1e-5, 3, |g, p| {
        let out = unet.forward(g, p, g.constant(z.clone()), &[3.0, 70.0], g.constant(ctx.clone()), None);
        g.mse(out.eps, g.constant(target.clone()))
    });

    let mut store = ParamStore::<f64>::new();
    let a = InjectionAdapter::new(&mut Builder::new(&mut store, &mut r, Init::FanIn(1.0)), 6, 4, 9, 2);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains("cross.out") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.5, &mut r);
        }
    }
    let feat = Tensor::<f64>::randn(&[2, 4, 3, 3], 1.0, &mut r);
    let q = Tensor::<f64>::randn(&[2, 5, 4], 1.0, &mut r);
    let target = Tensor::<f64>::randn(&[2, 5, 4], 1.0, &mut r);
    let adapter_report = check_params(&mut store, 1e-5, 12, |g, p| {
        let out = a.forward(g, p, g.constant(q.clone()), g.constant(feat.clone()));
        g.mse(out, g.constant(target.clone()))
    });
    let ok = unet_report.checked > 100
        && adapter_report.checked > 50
        && unet_report.max_rel_error < 1e-3
        && adapter_report.max_rel_error < 1e-3;
    check("gradient checks", ok, f);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn dataset_determinism(f: &mut Vec<String>) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = DatasetConfig { seed: 99, height: 32, width: 32, ..DatasetConfig::default() };
    write_split(a.path(), &cfg, "test", 12).unwrap();
    write_split(b.path(), &cfg, "test", 12).unwrap();
    check("dataset determinism", dir_bytes(a.path()) == dir_bytes(b.path()), f);
}

fn criterion_6() -> Line {
    let start = Instant::now();
    let mut failures = Vec::new();
    schedule_properties(&mut failures);
    attention_rows(&mut failures);
    zero_init_and_taps(&mut failures);
    metrics_fixture(&mut failures);
    gradients(&mut failures);
    dataset_determinism(&mut failures);
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < UNIT_BUDGET_S;
    let detail = if failures.is_empty() { "all properties hold".to_string() } else { format!("failed: {}", failures.join(", ")) };
    verdict(6, pass, format!("{detail}; {secs:.1} s (budget {UNIT_BUDGET_S:.0} s)"))
}

fn emit(l: Line) -> Line {
    println!("criterion {}: {} | {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    l
}

fn main() {
    let mut lines = vec![emit(criterion_6())];
    lines.extend(criteria_1_to_3().into_iter().map(emit));
    lines.push(emit(criterion_4()));
    lines.push(emit(criterion_5()));
    lines.sort_by_key(|l| l.id);
    println!("\nsummary");
    for l in &lines {
        println!("criterion {}: {}", l.id, if l.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
