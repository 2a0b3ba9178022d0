use ldznet::diffusion::{Ldm, LdmConfig};
use ldznet::latentae::{AeConfig, AeStats, TrainedAutoencoder};
use ldznet::probes::{extract_probe_features, extract_taps, run_probe_grid, ProbeGridSpec};
use ldznet::synthdata::{make_sample, Domain, ImageSample};
use ldznet::LdzError;

fn ae() -> TrainedAutoencoder {
    let (model, params) = TrainedAutoencoder::build(AeConfig { base_channels: 4, ..AeConfig::default() }).unwrap();
    TrainedAutoencoder { model, params, stats: AeStats { latent_global_std: 1.0, ..AeStats::default() } }
}

fn samples(n: usize, split: &str) -> Vec<ImageSample> {
    (0..n).map(|i| make_sample(70 + i as u64, format!("{split}-{i}"), 64, 64, Domain::A).1).collect()
}

#[test]
fn features_follow_topology_and_are_deterministic() {
    let ldm = Ldm::build(LdmConfig::default()).unwrap();
    let ae = ae();
    let s = &samples(1, "val")[0];
    let (f, mask) = extract_probe_features(&ldm, &ae, s, 7, 300, 5).unwrap();
    assert_eq!(f.shape(), &[128, 4, 4]);
    assert_eq!(mask, s.mask);
    let (g, _) = extract_probe_features(&ldm, &ae, s, 7, 300, 5).unwrap();
    assert_eq!(f, g);
    let (h, _) = extract_probe_features(&ldm, &ae, s, 7, 300, 6).unwrap();
    assert_ne!(f, h);
    assert_eq!(extract_probe_features(&ldm, &ae, s, 1, 300, 5).unwrap().0.shape(), &[32, 16, 16]);
    for bad in [0, 17] {
        assert!(matches!(extract_probe_features(&ldm, &ae, s, bad, 300, 5), Err(LdzError::Range { .. })));
    }
    assert!(extract_probe_features(&ldm, &ae, s, 7, 1001, 5).is_err());
}

#[test]
fn grid_cells_are_restartable_and_isolated() {
    let ldm = Ldm::build(LdmConfig::default()).unwrap();
    let ae = ae();
    let (train, val) = (samples(6, "train"), samples(3, "val"));
    let spec = ProbeGridSpec { blocks: vec![2, 7], timesteps: vec![100, 500], n_train: 6, n_val: 3, steps: 3, batch: 4, hidden: 4, ..Default::default() };
    let mut partial = None;
    let full = run_probe_grid(&ldm, &ae, &train, &val, &spec, 1, None, |r| {
        if r.cells.len() == 3 {
            partial = Some(r.clone());
        }
    })
    .unwrap();
    assert!(full.complete);
    assert_eq!(full.cells.len(), 4);
    assert!(full.budget_is_uniform());
    assert!(full.cells.iter().all(|c| c.ap.is_some_and(|a| (0.0..=1.0).contains(&a))));

    let mut partial = partial.unwrap();
    partial.cells.remove(0);
    let resumed = run_probe_grid(&ldm, &ae, &train, &val, &spec, 1, Some(partial), |_| {}).unwrap();
    for c in &full.cells {
        let r = resumed.cell(c.block, c.timestep).unwrap();
        assert_eq!(r.seed, c.seed);
        assert!((r.ap.unwrap() - c.ap.unwrap()).abs() <= 1e-6);
    }
    let taps = extract_taps(&ldm, &ae, &train, 100, 1).unwrap();
    assert_eq!(taps.len(), 16);
    assert_eq!(taps[6].shape(), &[6, 128, 4, 4]);
    assert!(run_probe_grid(&ldm, &ae, &train, &val, &ProbeGridSpec { blocks: vec![17], ..spec.clone() }, 1, None, |_| {}).is_err());
    assert!(run_probe_grid(&ldm, &ae, &train[..2], &val, &spec, 1, None, |_| {}).is_err());
}
