//! Stage graph: synth → train-ae → train-ldm → {sample, saliency, probe-grid,
//! train-seg → eval}.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ldznet::checkpoint::{file_hash, write_json, WEIGHTS_FILE};
use ldznet::diffusion::{noise_norm_saliency_seeds, train_ldm, Ldm, LdmConfig};
use ldznet::evalmetrics::{evaluate, EvalConfig, EvalReport};
use ldznet::latentae::{train_autoencoder, AeConfig, TrainedAutoencoder};
use ldznet::probes::{run_probe_grid, ProbeGridResult, ProbeGridSpec};
use ldznet::rng::derive_seed;
use ldznet::segnets::{train_segmodel, SegConfig, SegData, SegModel, SegModelKind};
use ldznet::synthdata::{
    load_split, save_gray_png, save_rgb_png, two_object_scene, write_split, DatasetConfig, Domain, ImageSample,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifact::{self, Artifact, StageKey};
use crate::config::{ExperimentConfig, SaliencySettings, SampleSettings};
use crate::error::{RunError, RunResult};
use crate::report::ComparisonTable;

/// What to do when an upstream stage has not been run yet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upstream {
    /// Refuse, naming the missing artifact.
    Require,
    /// Run it first.
    Build,
}

pub const DOMAINS: [Domain; 2] = [Domain::A, Domain::B];

const AE_DIR: &str = "autoencoder";
const LDM_DIR: &str = "ldm";
const SEG_DIR: &str = "model";

#[derive(Clone, Debug, Serialize)]
struct SampleStage<'a> {
    settings: &'a SampleSettings,
    seed: u64,
}

#[derive(Clone, Debug, Serialize)]
struct SaliencyStage<'a> {
    settings: &'a SaliencySettings,
    seed: u64,
}

#[derive(Clone, Debug, Serialize)]
struct EvalStage {
    model: SegModelKind,
    domain: Domain,
    split: &'static str,
    eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScene {
    pub scene_id: String,
    pub caption: String,
    pub inside_mean: f64,
    pub outside_mean: f64,
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyResult {
    pub timestep: usize,
    pub noise_seeds: usize,
    pub scenes: Vec<SaliencyScene>,
    pub hits: usize,
    pub fraction: f64,
}

/// One experiment's stage graph rooted at `config.out`.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub mode: Upstream,
    pub verbose: bool,
}

fn split_dir(synth: &Artifact, domain: Domain, split: &str) -> PathBuf {
    match domain {
        Domain::A => synth.dir.join(split),
        Domain::B => synth.dir.join(format!("{split}_b")),
    }
}

fn load(synth: &Artifact, domain: Domain, split: &str) -> RunResult<Vec<ImageSample>> {
    Ok(load_split(&split_dir(synth, domain, split))?.1)
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, mode: Upstream) -> Pipeline {
        Pipeline { config, mode, verbose: true }
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[seed {}] {}", self.config.seed, msg.as_ref());
        }
    }

    fn stream_seed(&self, name: &str) -> u64 {
        derive_seed(self.config.seed, name)
    }

    // ---- stage keys -------------------------------------------------------

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.config.data;
        DatasetConfig {
            seed: self.stream_seed("data"),
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            domain: Domain::A,
            height: d.height,
            width: d.width,
        }
    }

    pub fn synth_key(&self) -> StageKey {
        StageKey::new("synth", &self.dataset_config(), &[])
    }

    pub fn ae_config(&self) -> AeConfig {
        AeConfig { seed: self.stream_seed("ae"), ..self.config.ae.clone() }
    }

    pub fn ae_key(&self) -> StageKey {
        StageKey::new("train-ae", &self.ae_config(), &[&self.synth_key()])
    }

    pub fn ldm_config(&self) -> LdmConfig {
        LdmConfig {
            seed: self.stream_seed("ldm"),
            latent_size: self.config.data.height / self.config.ae.factor.max(1),
            ..self.config.ldm.clone()
        }
    }

    pub fn ldm_key(&self) -> StageKey {
        StageKey::new("train-ldm", &self.ldm_config(), &[&self.synth_key(), &self.ae_key()])
    }

    pub fn seg_config(&self, kind: SegModelKind) -> SegConfig {
        let s = &self.config.seg;
        SegConfig {
            kind,
            t_star: s.t_star,
            steps: s.steps,
            batch: s.batch,
            lr: s.lr,
            init_std: s.init_std,
            pool_heads: s.pool_heads,
            stem_channels: s.stem_channels,
            seed: self.stream_seed("seg"),
            eval_noise_seed: s.eval_noise_seed,
        }
    }

    pub fn seg_key(&self, kind: SegModelKind) -> StageKey {
        StageKey::new("train-seg", &self.seg_config(kind), &[&self.synth_key(), &self.ae_key(), &self.ldm_key()])
    }

    fn eval_stage(kind: SegModelKind, domain: Domain) -> EvalStage {
        EvalStage { model: kind, domain, split: "test", eval: EvalConfig::default() }
    }

    pub fn eval_key(&self, kind: SegModelKind, domain: Domain) -> StageKey {
        StageKey::new(
            "eval",
            &Self::eval_stage(kind, domain),
            &[&self.synth_key(), &self.ae_key(), &self.ldm_key(), &self.seg_key(kind)],
        )
    }

    pub fn sample_key(&self) -> StageKey {
        let cfg = SampleStage { settings: &self.config.sample, seed: self.stream_seed("sample") };
        StageKey::new("sample", &cfg, &[&self.ae_key(), &self.ldm_key()])
    }

    pub fn saliency_key(&self) -> StageKey {
        let cfg = SaliencyStage { settings: &self.config.saliency, seed: self.stream_seed("saliency") };
        StageKey::new("saliency", &cfg, &[&self.ae_key(), &self.ldm_key()])
    }

    pub fn probe_spec(&self) -> ProbeGridSpec {
        ProbeGridSpec { seed: self.stream_seed("probe"), ..self.config.probe.clone() }
    }

    pub fn probe_key(&self) -> StageKey {
        StageKey::new("probe-grid", &self.probe_spec(), &[&self.synth_key(), &self.ae_key(), &self.ldm_key()])
    }

    // ---- stage plumbing ---------------------------------------------------

    /// Returns the finished stage for `key`, running `body` in its directory
    /// if it does not exist yet.
    fn stage(
        &self,
        key: &StageKey,
        upstream: &[&Artifact],
        body: impl FnOnce(&Path) -> RunResult<Value>,
    ) -> RunResult<Artifact> {
        if artifact::exists(self.out(), key) {
            let a = artifact::open(self.out(), key)?;
            self.log(format!("{} cached at {}", key.stage, a.dir.display()));
            return Ok(a);
        }
        let dir = artifact::prepare_dir(self.out(), key)?;
        self.log(format!("{} -> {}", key.stage, dir.display()));
        let start = Instant::now();
        let summary = body(&dir)?;
        let a = artifact::finish(key, &dir, &key.stage, upstream, start.elapsed().as_secs_f64(), summary)?;
        self.log(format!("{} done in {:.0}s", key.stage, a.manifest.wall_clock_s));
        Ok(a)
    }

    fn need(&self, key: StageKey, build: impl FnOnce() -> RunResult<Artifact>) -> RunResult<Artifact> {
        match self.mode {
            Upstream::Build => build(),
            Upstream::Require => artifact::open(self.out(), &key),
        }
    }

    fn need_synth(&self) -> RunResult<Artifact> {
        self.need(self.synth_key(), || self.synth())
    }

    fn need_ae(&self) -> RunResult<Artifact> {
        self.need(self.ae_key(), || self.train_ae())
    }

    fn need_ldm(&self) -> RunResult<Artifact> {
        self.need(self.ldm_key(), || self.train_ldm())
    }

    fn need_seg(&self, kind: SegModelKind) -> RunResult<Artifact> {
        self.need(self.seg_key(kind), || self.train_seg(kind))
    }

    fn need_eval(&self, kind: SegModelKind, domain: Domain) -> RunResult<Artifact> {
        self.need(self.eval_key(kind, domain), || self.eval(kind, domain))
    }

    fn load_ae(ae: &Artifact) -> RunResult<(TrainedAutoencoder, String)> {
        let dir = ae.dir.join(AE_DIR);
        Ok((TrainedAutoencoder::load(&dir)?, file_hash(&dir.join(WEIGHTS_FILE))?))
    }

    fn load_ldm(ldm: &Artifact) -> RunResult<Ldm> {
        Ok(Ldm::load(&ldm.dir.join(LDM_DIR))?)
    }

    // ---- stages -----------------------------------------------------------

    pub fn synth(&self) -> RunResult<Artifact> {
        let cfg = self.dataset_config();
        self.stage(&self.synth_key(), &[], |dir| {
            let counts = [cfg.n_train, cfg.n_val, cfg.n_test];
            for (split, n) in ldznet::synthdata::SPLITS.into_iter().zip(counts) {
                write_split(&dir.join(split), &cfg, split, n)?;
            }
            let b = DatasetConfig { domain: Domain::B, ..cfg.clone() };
            write_split(&dir.join("test_b"), &b, "test", cfg.n_test)?;
            Ok(json!({ "dataset_seed": cfg.seed, "train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test }))
        })
    }

    pub fn train_ae(&self) -> RunResult<Artifact> {
        let synth = self.need_synth()?;
        let cfg = self.ae_config();
        self.stage(&self.ae_key(), &[&synth], |dir| {
            let train = load(&synth, Domain::A, "train")?;
            let val = load(&synth, Domain::A, "val")?;
            let ae = train_autoencoder(&cfg, &train, &val, |s, l| self.log(format!("train-ae step {s} loss {l:.5}")))?;
            let hash = ae.save(&dir.join(AE_DIR))?;
            let st = &ae.stats;
            Ok(json!({
                "weights_sha256": hash,
                "val_psnr_db": st.val_psnr_db,
                "latent_global_std": st.latent_global_std,
                "final_train_loss": st.final_train_loss,
            }))
        })
    }

    pub fn train_ldm(&self) -> RunResult<Artifact> {
        let (synth, ae_art) = (self.need_synth()?, self.need_ae()?);
        let cfg = self.ldm_config();
        self.stage(&self.ldm_key(), &[&synth, &ae_art], |dir| {
            let train = load(&synth, Domain::A, "train")?;
            let (ae, ae_hash) = Self::load_ae(&ae_art)?;
            let ldm = train_ldm(&cfg, &train, &ae, &ae_hash, |s, l| self.log(format!("train-ldm step {s} loss {l:.5}")))?;
            let hash = ldm.save(&dir.join(LDM_DIR))?;
            Ok(json!({
                "unet_sha256": hash,
                "initial_loss": ldm.stats.initial_loss,
                "final_loss": ldm.stats.final_loss,
            }))
        })
    }

    pub fn sample(&self) -> RunResult<Artifact> {
        let (ae_art, ldm_art) = (self.need_ae()?, self.need_ldm()?);
        let s = self.config.sample.clone();
        let seed = self.stream_seed("sample");
        self.stage(&self.sample_key(), &[&ae_art, &ldm_art], |dir| {
            let (ae, _) = Self::load_ae(&ae_art)?;
            let ldm = Self::load_ldm(&ldm_art)?;
            let mut files = Vec::new();
            for i in 0..s.count {
                let img = ldm.sample(&ae, &s.prompt, s.steps, s.guidance, derive_seed(seed, &format!("sample-{i}")))?;
                let (h, w) = (img.shape()[1], img.shape()[2]);
                let name = format!("sample-{i}.png");
                save_rgb_png(&dir.join(&name), img.data(), h, w)?;
                files.push(name);
            }
            Ok(json!({ "prompt": s.prompt, "files": files }))
        })
    }

    pub fn saliency(&self) -> RunResult<Artifact> {
        let (ae_art, ldm_art) = (self.need_ae()?, self.need_ldm()?);
        let s = self.config.saliency.clone();
        let seed = self.stream_seed("saliency");
        let (h, w) = (self.config.data.height, self.config.data.width);
        self.stage(&self.saliency_key(), &[&ae_art, &ldm_art], |dir| {
            let (ae, _) = Self::load_ae(&ae_art)?;
            let ldm = Self::load_ldm(&ldm_art)?;
            let noise: Vec<u64> = (0..s.noise_seeds).map(|k| derive_seed(seed, &format!("noise-{k}"))).collect();
            let mut scenes = Vec::with_capacity(s.scenes);
            for i in 0..s.scenes {
                let (_, scene) = two_object_scene(derive_seed(seed, &format!("scene-{i}")), h, w, Domain::A);
                let maps = noise_norm_saliency_seeds(&ldm, &ae, &scene, &scene.caption, s.t, &noise)?;
                let mut mean = vec![0f32; h * w];
                for m in &maps {
                    for (a, b) in mean.iter_mut().zip(m) {
                        *a += b / maps.len() as f32;
                    }
                }
                let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
                for (&v, &k) in mean.iter().zip(&scene.mask) {
                    if k {
                        inside += v as f64;
                        n_in += 1;
                    } else {
                        outside += v as f64;
                        n_out += 1;
                    }
                }
                let (inside_mean, outside_mean) = (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64);
                if i < 8 {
                    save_rgb_png(&dir.join(format!("{}.img.png", scene.sample_id)), &scene.to_chw(), h, w)?;
                    save_gray_png(&dir.join(format!("{}.saliency.png", scene.sample_id)), &mean, h, w)?;
                }
                if i % 10 == 0 {
                    self.log(format!("saliency scene {i}/{}", s.scenes));
                }
                scenes.push(SaliencyScene {
                    scene_id: scene.sample_id.clone(),
                    caption: scene.caption.clone(),
                    inside_mean,
                    outside_mean,
                    hit: inside_mean > outside_mean,
                });
            }
            let hits = scenes.iter().filter(|c| c.hit).count();
            let result = SaliencyResult {
                timestep: s.t,
                noise_seeds: s.noise_seeds,
                fraction: hits as f64 / scenes.len().max(1) as f64,
                hits,
                scenes,
            };
            write_json(&dir.join("saliency.json"), &result)?;
            Ok(json!({ "hits": result.hits, "fraction": result.fraction }))
        })
    }

    pub fn read_saliency(a: &Artifact) -> RunResult<SaliencyResult> {
        Ok(ldznet::checkpoint::read_json(&a.dir.join("saliency.json"))?)
    }

    pub fn probe_grid(&self) -> RunResult<Artifact> {
        let (synth, ae_art, ldm_art) = (self.need_synth()?, self.need_ae()?, self.need_ldm()?);
        let spec = self.probe_spec();
        let dataset_seed = self.dataset_config().seed;
        let key = self.probe_key();
        self.stage(&key, &[&synth, &ae_art, &ldm_art], |dir| {
            let (ae, _) = Self::load_ae(&ae_art)?;
            let ldm = Self::load_ldm(&ldm_art)?;
            let train = load(&synth, Domain::A, "train")?;
            let val = load(&synth, Domain::A, "val")?;
            let previous = ProbeGridResult::read(dir).ok();
            if let Some(p) = &previous {
                self.log(format!("probe-grid resuming with {} cells", p.cells.len()));
            }
            let result = run_probe_grid(&ldm, &ae, &train, &val, &spec, dataset_seed, previous, |partial| {
                if let Err(e) = partial.write(dir) {
                    self.log(format!("probe-grid checkpoint failed: {e}"));
                }
                if let Some(c) = partial.cells.last() {
                    self.log(format!("probe-grid cell b{} t{} ap {:?}", c.block, c.timestep, c.ap));
                }
            })?;
            result.write(dir)?;
            if !result.complete {
                return Err(RunError::Incomplete { stage: key.stage.clone(), path: dir.to_path_buf() });
            }
            Ok(json!({ "cells": result.cells.len(), "wall_clock_s": result.wall_clock_s }))
        })
    }

    pub fn read_probe_grid(a: &Artifact) -> RunResult<ProbeGridResult> {
        Ok(ProbeGridResult::read(&a.dir)?)
    }

    pub fn train_seg(&self, kind: SegModelKind) -> RunResult<Artifact> {
        let (synth, ae_art, ldm_art) = (self.need_synth()?, self.need_ae()?, self.need_ldm()?);
        let cfg = self.seg_config(kind);
        self.stage(&self.seg_key(kind), &[&synth, &ae_art, &ldm_art], |dir| {
            let (ae, ae_hash) = Self::load_ae(&ae_art)?;
            let ldm = Self::load_ldm(&ldm_art)?;
            let train = load(&synth, Domain::A, "train")?;
            let data = SegData::prepare(kind, &ldm, &ae, &train)?;
            let tag = kind.tag();
            let model = train_segmodel(&cfg, &ldm, &ae, &data, |s, l| self.log(format!("train-seg {tag} step {s} loss {l:.5}")))?;
            let hash = model.save(&dir.join(SEG_DIR), &ldm, &ae_hash)?;
            Ok(json!({
                "model": tag,
                "weights_sha256": hash,
                "initial_loss": model.stats.initial_loss,
                "final_loss": model.stats.final_loss,
                "params": model.params.num_scalars(),
            }))
        })
    }

    pub fn eval(&self, kind: SegModelKind, domain: Domain) -> RunResult<Artifact> {
        let seg_art = self.need_seg(kind)?;
        let (synth, ae_art, ldm_art) = (self.need_synth()?, self.need_ae()?, self.need_ldm()?);
        let key = self.eval_key(kind, domain);
        let upstream = [&synth, &ae_art, &ldm_art, &seg_art];
        let provenance = self.provenance(&upstream, kind);
        let factor = self.config.ae.factor;
        self.stage(&key, &upstream, |dir| {
            let (ae, _) = Self::load_ae(&ae_art)?;
            let ldm = Self::load_ldm(&ldm_art)?;
            let seg_dir = seg_art.dir.join(SEG_DIR);
            let model = SegModel::load(&seg_dir, &ldm, factor)?;
            let test = load(&synth, domain, "test")?;
            let data = SegData::prepare(kind, &ldm, &ae, &test)?;
            let preds = model.predict(&ldm, &data)?;
            let gts: Vec<Vec<bool>> = test.iter().map(|s| s.mask.clone()).collect();
            let ids: Vec<String> = test.iter().map(|s| s.sample_id.clone()).collect();
            let stage = Self::eval_stage(kind, domain);
            let (metrics, rows) = evaluate(&preds, &gts, &ids, &stage.eval)?;
            let report = EvalReport {
                model: kind.tag().into(),
                split: stage.split.into(),
                domain: domain.to_string(),
                metrics,
                config: stage.eval,
                dataset_hash: synth.manifest.output_sha256.clone(),
                checkpoint_hash: file_hash(&seg_dir.join(WEIGHTS_FILE))?,
                provenance,
                per_sample: rows,
            };
            report.write_json(&dir.join("eval_report.json"))?;
            let csv = dir.join("per_sample.csv");
            std::fs::write(&csv, report.per_sample_csv()).map_err(ldznet::error::io_err(&csv))?;
            let m = &report.metrics;
            self.log(format!("eval {} {domain}: mIoU {:.4} IoU_FG {:.4} AP {:.4}", kind.tag(), m.miou, m.iou_fg, m.ap));
            Ok(json!({ "miou": m.miou, "iou_fg": m.iou_fg, "ap": m.ap }))
        })
    }

    /// Config and output hashes of every upstream stage back to the dataset seed.
    fn provenance(&self, upstream: &[&Artifact], kind: SegModelKind) -> BTreeMap<String, String> {
        let mut p = BTreeMap::new();
        p.insert("root_seed".into(), self.config.seed.to_string());
        p.insert("dataset_seed".into(), self.dataset_config().seed.to_string());
        p.insert("seg_seed".into(), self.seg_config(kind).seed.to_string());
        for a in upstream {
            let m = &a.manifest;
            p.insert(format!("{}.config_hash", m.stage), m.config_hash.clone());
            p.insert(format!("{}.output_sha256", m.stage), m.output_sha256.clone());
        }
        p
    }

    pub fn read_eval(a: &Artifact) -> RunResult<EvalReport> {
        Ok(EvalReport::read_json(&a.dir.join("eval_report.json"))?)
    }

    /// Every model evaluated on both domains.
    pub fn all_evals(&self) -> RunResult<Vec<EvalReport>> {
        let mut out = Vec::new();
        for kind in SegModelKind::ALL {
            for domain in DOMAINS {
                out.push(Self::read_eval(&self.need_eval(kind, domain)?)?);
            }
        }
        Ok(out)
    }
}

/// Builds (or reuses) the comparison table over `seeds`, each seed run as its
/// own pipeline under one output root.
pub fn report(config: &ExperimentConfig, seeds: &[u64], mode: Upstream, verbose: bool) -> RunResult<(Artifact, ComparisonTable)> {
    let mut per_seed = Vec::new();
    let mut evals = Vec::new();
    for &seed in seeds {
        let p = Pipeline { config: ExperimentConfig { seed, ..config.clone() }, mode, verbose };
        per_seed.push(p.all_evals()?);
        for kind in SegModelKind::ALL {
            for domain in DOMAINS {
                evals.push(p.eval_key(kind, domain).hash);
            }
        }
    }
    let table = ComparisonTable::build(seeds, &per_seed)?;
    let key = StageKey::new("report", &json!({ "seeds": seeds, "evals": evals }), &[]);
    let p = Pipeline { config: config.clone(), mode, verbose };
    let a = p.stage(&key, &[], |dir| {
        write_json(&dir.join("report.json"), &table)?;
        let md = dir.join("report.md");
        std::fs::write(&md, table.to_markdown()).map_err(ldznet::error::io_err(&md))?;
        Ok(serde_json::to_value(&table).expect("table serializes"))
    })?;
    Ok((a, table))
}
