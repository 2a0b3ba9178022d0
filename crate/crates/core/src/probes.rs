//! Small decoders trained on frozen LDM features at every
//! (block, timestep) pair, scored by average precision.

use std::path::Path;
use std::time::Instant;

use ldz_tensor::nn::{Builder, Conv2d, Init};
use ldz_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffusion::{check_block, forward_diffuse, Ldm, NUM_ATTENTION_MODULES};
use crate::error::{LdzError, Result};
use crate::evalmetrics::average_precision;
use crate::latentae::TrainedAutoencoder;
use crate::rng;
use crate::synthdata::{ImageSample, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeGridSpec {
    pub blocks: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeGridSpec {
    fn default() -> Self {
        ProbeGridSpec {
            blocks: (1..=NUM_ATTENTION_MODULES).collect(),
            timesteps: (1..=10).map(|i| i * 100).collect(),
            n_train: 256,
            n_val: 128,
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            hidden: 32,
            seed: 0,
        }
    }
}

impl ProbeGridSpec {
    pub fn validate(&self, ldm: &Ldm) -> Result<()> {
        for &b in &self.blocks {
            check_block(b)?;
        }
        for &t in &self.timesteps {
            ldm.schedule.check_step(t)?;
        }
        if self.n_train == 0 || self.n_val == 0 || self.steps == 0 || self.batch == 0 || self.hidden == 0 {
            return Err(LdzError::Invalid(format!("degenerate probe grid spec {self:?}")));
        }
        Ok(())
    }

    pub fn cell_seed(&self, block: usize, t: usize) -> u64 {
        rng::derive_seed(self.seed, &format!("probe-cell-b{block}-t{t}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Done,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub block: usize,
    pub timestep: usize,
    pub ap: Option<f64>,
    pub seed: u64,
    pub status: CellStatus,
    pub steps: usize,
    pub lr: f64,
    pub final_loss: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeGridResult {
    pub spec: ProbeGridSpec,
    pub cells: Vec<ProbeCell>,
    pub complete: bool,
    pub wall_clock_s: f64,
    pub ldm_sha256: String,
}

impl ProbeGridResult {
    pub fn cell(&self, block: usize, t: usize) -> Option<&ProbeCell> {
        self.cells.iter().find(|c| c.block == block && c.timestep == t)
    }

    /// Mean AP over the finished cells in `blocks x timesteps`.
    pub fn mean_ap(&self, blocks: &[usize], timesteps: &[usize]) -> Option<f64> {
        let aps: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| blocks.contains(&c.block) && timesteps.contains(&c.timestep))
            .filter_map(|c| c.ap)
            .collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    }

    /// Every cell ran with the spec's step count and learning rate.
    pub fn budget_is_uniform(&self) -> bool {
        self.cells.iter().all(|c| c.steps == self.spec.steps && c.lr == self.spec.lr)
    }

    pub fn ap_matrix(&self) -> Vec<Vec<Option<f64>>> {
        self.spec
            .blocks
            .iter()
            .map(|&b| self.spec.timesteps.iter().map(|&t| self.cell(b, t).and_then(|c| c.ap)).collect())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,timestep,ap,seed\n");
        for c in &self.cells {
            let ap = c.ap.map(|v| format!("{v:.6}")).unwrap_or_else(|| "nan".into());
            out.push_str(&format!("{},{},{},{}\n", c.block, c.timestep, ap, c.seed));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
        let csv = dir.join("probe_grid.csv");
        std::fs::write(&csv, self.to_csv()).map_err(crate::error::io_err(&csv))?;
        checkpoint::write_json(&dir.join("probe_grid.json"), self)
    }

    pub fn read(dir: &Path) -> Result<ProbeGridResult> {
        checkpoint::read_json(&dir.join("probe_grid.json"))
    }
}

/// Seed of the forward noise used for `sample_id` at timestep `t`.
pub fn feature_noise_seed(dataset_seed: u64, sample_id: &str, t: usize) -> u64 {
    rng::derive_seed(dataset_seed, &format!("probe-noise/{sample_id}/t{t}"))
}

/// All sixteen tapped feature maps for `samples`, each `[n, c, h, w]`.
pub fn extract_taps(
    ldm: &Ldm,
    ae: &TrainedAutoencoder,
    samples: &[ImageSample],
    t: usize,
    dataset_seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    ldm.schedule.check_step(t)?;
    let mut per_block: Vec<Vec<Tensor<f32>>> = vec![Vec::with_capacity(samples.len()); NUM_ATTENTION_MODULES];
    for chunk in samples.chunks(16) {
        let latents = ldm.latents(ae, chunk)?;
        let mut noisy = Vec::with_capacity(chunk.len());
        for (s, z) in chunk.iter().zip(&latents) {
            let mut r = rng::seeded(feature_noise_seed(dataset_seed, &s.sample_id, t));
            noisy.push(forward_diffuse(&ldm.schedule, z, t, &mut r)?.z_t);
        }
        let captions: Vec<&str> = chunk.iter().map(|s| s.caption.as_str()).collect();
        let ctx = ldm.context(&captions)?;
        let (_, taps) = ldm.predict_noise(&Tensor::stack(&noisy)?, &vec![t; chunk.len()], &ctx, true)?;
        let taps = taps.expect("taps requested");
        for (b, out) in per_block.iter_mut().enumerate() {
            let f = taps.get(b + 1)?;
            out.extend((0..chunk.len()).map(|i| f.index0(i)));
        }
    }
    per_block.into_iter().map(|v| Ok(Tensor::stack(&v)?)).collect()
}

/// Feature map `[c, h, w]` of one sample at `block` and `t`, with its mask.
pub fn extract_probe_features(
    ldm: &Ldm,
    ae: &TrainedAutoencoder,
    sample: &ImageSample,
    block: usize,
    t: usize,
    dataset_seed: u64,
) -> Result<(Tensor<f32>, Mask)> {
    check_block(block)?;
    let taps = extract_taps(ldm, ae, std::slice::from_ref(sample), t, dataset_seed)?;
    Ok((taps[block - 1].index0(0), sample.mask.clone()))
}

/// Features and masks for one cell.
pub struct ProbeData {
    pub train: Tensor<f32>,
    pub train_masks: Vec<Mask>,
    pub val: Tensor<f32>,
    pub val_masks: Vec<Mask>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
struct ProbeDecoder {
    conv1: Conv2d,
    conv2: Conv2d,
    logit: Conv2d,
    factor: usize,
}

impl ProbeDecoder {
    fn new(b: &mut Builder<'_, f32, rand_chacha::ChaCha8Rng>, channels: usize, hidden: usize, factor: usize) -> Self {
        ProbeDecoder {
            conv1: Conv2d::new(b, "conv1", channels, hidden, 3, 1),
            conv2: Conv2d::new(b, "conv2", hidden, hidden, 3, 1),
            logit: Conv2d::new(b, "logit", hidden, 1, 1, 1),
            factor,
        }
    }

    /// Logits `[n, 1, H, W]`. The 1x1 logit is applied before the
    /// nearest-neighbour upsample, with which it commutes.
    fn forward(&self, g: &Graph<f32>, p: &ParamStore<f32>, x: Var) -> Var {
        let h = g.relu(self.conv1.forward(g, p, x));
        let h = self.conv2.forward(g, p, h);
        let l = self.logit.forward(g, p, h);
        if self.factor == 1 {
            l
        } else {
            g.upsample_nearest(l, self.factor)
        }
    }
}

fn mask_tensor(masks: &[&Mask], h: usize, w: usize) -> Tensor<f32> {
    let data: Vec<f32> = masks.iter().flat_map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 })).collect();
    Tensor::from_vec(&[masks.len(), 1, h, w], data).expect("mask sizes agree")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellOutcome {
    pub ap: f64,
    pub final_loss: f64,
}

/// Trains one probe decoder from scratch and scores it on the val features.
pub fn run_probe_cell(data: &ProbeData, spec: &ProbeGridSpec, seed: u64) -> Result<CellOutcome> {
    let s = data.train.shape().to_vec();
    let (n, c, fh) = (s[0], s[1], s[2]);
    if data.height % fh != 0 {
        return Err(LdzError::Invalid(format!("feature height {fh} does not divide {}", data.height)));
    }
    let mut store = ParamStore::new();
    let mut init_rng = rng::stream(seed, "probe-init");
    let decoder = ProbeDecoder::new(&mut Builder::new(&mut store, &mut init_rng, Init::FanIn(1.0)), c, spec.hidden, data.height / fh);
    let mut opt = Adam::new(AdamConfig { lr: spec.lr, ..Default::default() });
    let mut batch_rng = rng::stream(seed, "probe-batches");
    let mut final_loss = f64::NAN;
    for step in 0..spec.steps {
        let idx = sample_indices(&mut batch_rng, n, spec.batch.min(n)).into_vec();
        let x = Tensor::stack(&idx.iter().map(|&i| data.train.index0(i)).collect::<Vec<_>>())?;
        let y = mask_tensor(&idx.iter().map(|&i| &data.train_masks[i]).collect::<Vec<_>>(), data.height, data.width);
        let g = Graph::new();
        let logits = decoder.forward(&g, &store, g.constant(x));
        let loss = g.bce_with_logits(logits, &y);
        final_loss = g.value(loss).item() as f64;
        if !final_loss.is_finite() {
            return Err(LdzError::Diverged { stage: "probe".into(), step });
        }
        let grads = g.backward(loss);
        opt.step(&mut store, &grads);
    }
    let nv = data.val.shape()[0];
    let mut preds = Vec::with_capacity(nv);
    for start in (0..nv).step_by(32) {
        let end = (start + 32).min(nv);
        let x = Tensor::stack(&(start..end).map(|i| data.val.index0(i)).collect::<Vec<_>>())?;
        let g = Graph::inference();
        let logits = g.value(decoder.forward(&g, &store, g.constant(x)));
        preds.extend(logits.data().chunks(data.height * data.width).map(|c| c.to_vec()));
    }
    let ap = average_precision(&preds, &data.val_masks)?;
    Ok(CellOutcome { ap, final_loss })
}

/// Runs every missing cell of the grid, one timestep at a time, calling
/// `on_cell` with the partial result after each cell.
pub fn run_probe_grid(
    ldm: &Ldm,
    ae: &TrainedAutoencoder,
    train: &[ImageSample],
    val: &[ImageSample],
    spec: &ProbeGridSpec,
    dataset_seed: u64,
    previous: Option<ProbeGridResult>,
    mut on_cell: impl FnMut(&ProbeGridResult),
) -> Result<ProbeGridResult> {
    spec.validate(ldm)?;
    if train.len() < spec.n_train || val.len() < spec.n_val {
        return Err(LdzError::Dataset(format!(
            "probe subsets need {}/{} samples, have {}/{}",
            spec.n_train,
            spec.n_val,
            train.len(),
            val.len()
        )));
    }
    let start = Instant::now();
    let mut result = match previous {
        Some(p) if &p.spec == spec => p,
        _ => ProbeGridResult { spec: spec.clone(), cells: Vec::new(), complete: false, wall_clock_s: 0.0, ldm_sha256: String::new() },
    };
    let elapsed_before = result.wall_clock_s;
    let (train, val) = (&train[..spec.n_train], &val[..spec.n_val]);
    let (h, w) = (train[0].height, train[0].width);
    for &t in &spec.timesteps {
        if spec.blocks.iter().all(|&b| result.cell(b, t).is_some()) {
            continue;
        }
        let tr = extract_taps(ldm, ae, train, t, dataset_seed)?;
        let va = extract_taps(ldm, ae, val, t, dataset_seed)?;
        for &b in &spec.blocks {
            if result.cell(b, t).is_some() {
                continue;
            }
            let data = ProbeData {
                train: tr[b - 1].clone(),
                train_masks: train.iter().map(|s| s.mask.clone()).collect(),
                val: va[b - 1].clone(),
                val_masks: val.iter().map(|s| s.mask.clone()).collect(),
                height: h,
                width: w,
            };
            let seed = spec.cell_seed(b, t);
            let cell_start = Instant::now();
            let (ap, status, final_loss) = match run_probe_cell(&data, spec, seed) {
                Ok(o) => (Some(o.ap), CellStatus::Done, o.final_loss),
                Err(LdzError::Diverged { .. }) => (None, CellStatus::Diverged, f64::NAN),
                Err(e) => return Err(e),
            };
            result.cells.push(ProbeCell {
                block: b,
                timestep: t,
                ap,
                seed,
                status,
                steps: spec.steps,
                lr: spec.lr,
                final_loss,
                wall_clock_s: cell_start.elapsed().as_secs_f64(),
            });
            result.wall_clock_s = elapsed_before + start.elapsed().as_secs_f64();
            on_cell(&result);
        }
    }
    result.complete = result.cells.len() == spec.blocks.len() * spec.timesteps.len()
        && result.cells.iter().all(|c| c.status == CellStatus::Done);
    result.wall_clock_s = elapsed_before + start.elapsed().as_secs_f64();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn toy_data(seed: u64) -> ProbeData {
        let mut r = seeded(seed);
        let make = |n: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let f = Tensor::<f32>::randn(&[n, 3, 4, 4], 1.0, r);
            // Foreground where channel 0 is positive, upsampled x2.
            let masks: Vec<Mask> = (0..n)
                .map(|i| {
                    let fi = f.index0(i);
                    (0..64).map(|p| fi.data()[(p / 8 / 2) * 4 + (p % 8) / 2] > 0.0).collect()
                })
                .collect();
            (f, masks)
        };
        let (train, train_masks) = make(24, &mut r);
        let (val, val_masks) = make(8, &mut r);
        ProbeData { train, train_masks, val, val_masks, height: 8, width: 8 }
    }

    fn small_spec() -> ProbeGridSpec {
        ProbeGridSpec { steps: 60, batch: 8, hidden: 4, lr: 1e-2, ..Default::default() }
    }

    #[test]
    fn cell_learns_a_readable_signal_and_is_reproducible() {
        let data = toy_data(1);
        let spec = small_spec();
        let a = run_probe_cell(&data, &spec, 11).unwrap();
        let b = run_probe_cell(&data, &spec, 11).unwrap();
        assert!((a.ap - b.ap).abs() <= 1e-6);
        assert_eq!(a.final_loss, b.final_loss);
        let prevalence = data.val_masks.iter().flatten().filter(|&&m| m).count() as f64 / (8.0 * 64.0);
        assert!(a.ap > prevalence + 0.2, "ap {} vs prevalence {prevalence}", a.ap);
        assert!((0.0..=1.0).contains(&a.ap));
    }

    #[test]
    fn cell_seeds_are_distinct_per_cell() {
        let spec = ProbeGridSpec::default();
        let mut seeds: Vec<u64> = spec.blocks.iter().flat_map(|&b| spec.timesteps.iter().map(move |&t| (b, t))).map(|(b, t)| spec.cell_seed(b, t)).collect();
        assert_eq!(seeds.len(), 160);
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 160);
    }

    #[test]
    fn summaries_and_csv() {
        let spec = ProbeGridSpec { blocks: vec![1, 7], timesteps: vec![100, 400], ..Default::default() };
        let mk = |block, timestep, ap| ProbeCell {
            block,
            timestep,
            ap,
            seed: 1,
            status: if ap.is_some() { CellStatus::Done } else { CellStatus::Diverged },
            steps: spec.steps,
            lr: spec.lr,
            final_loss: 0.1,
            wall_clock_s: 0.0,
        };
        let r = ProbeGridResult {
            spec: spec.clone(),
            cells: vec![mk(1, 100, Some(0.2)), mk(1, 400, Some(0.4)), mk(7, 100, None), mk(7, 400, Some(0.9))],
            complete: false,
            wall_clock_s: 0.0,
            ldm_sha256: String::new(),
        };
        assert!((r.mean_ap(&[1], &[100, 400]).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(r.mean_ap(&[7], &[100, 400]), Some(0.9));
        assert_eq!(r.mean_ap(&[3], &[100]), None);
        assert!(r.budget_is_uniform());
        assert_eq!(r.ap_matrix(), vec![vec![Some(0.2), Some(0.4)], vec![None, Some(0.9)]]);
        let csv = r.to_csv();
        assert!(csv.starts_with("block,timestep,ap,seed\n1,100,0.200000,1\n"));
        assert!(csv.contains("7,100,nan,1"));
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        assert_eq!(ProbeGridResult::read(dir.path()).unwrap(), r);
    }
}
