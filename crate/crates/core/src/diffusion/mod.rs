//! DDPM schedule, text-conditioned latent denoiser, guided sampling and the
//! noise-norm saliency probe.

mod unet;

use std::path::Path;
use std::time::Instant;

use ldz_tensor::nn::{Builder, Init};
use ldz_tensor::{bilinear_matrix, Adam, AdamConfig, Graph, ParamStore, Scalar, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{io_err, LdzError, Result};
use crate::latentae::TrainedAutoencoder;
use crate::rng;
use crate::synthdata::ImageSample;
use crate::textenc::{TextEncoder, TextEncoderConfig, Vocab};

pub use unet::{BlockHook, ModuleInfo, ResBlock, SpatialAttention, UNet, UNetConfig, UNetOutput, NUM_ATTENTION_MODULES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

/// Linear-beta DDPM schedule; `alpha_bar(0) = 1`.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn new(config: ScheduleConfig) -> Result<Schedule> {
        let ScheduleConfig { steps, beta_start, beta_end } = config;
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(LdzError::Invalid(format!("bad schedule {config:?}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Schedule { config, betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `prod_{s <= t} alpha_s` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        a / (1.0 - a)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(LdzError::Range { what: "timestep", value: t as i64, lo: 1, hi: self.steps() as i64 });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyLatent<T> {
    pub z_t: Tensor<T>,
    pub noise: Tensor<T>,
    pub t: usize,
}

/// `sqrt(ab_t) z + sqrt(1 - ab_t) noise` with the noise given.
pub fn diffuse_with<T: Scalar>(s: &Schedule, z: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Tensor<T> {
    let ab = s.alpha_bar(t);
    let (a, b) = (T::from_f64c(ab.sqrt()), T::from_f64c((1.0 - ab).sqrt()));
    z.zip_map(noise, |x, e| a * x + b * e)
}

/// Closed-form forward noising at `t` (`t = 0` returns `z` unchanged).
pub fn forward_diffuse<T: Scalar, R: Rng>(s: &Schedule, z: &Tensor<T>, t: usize, rng: &mut R) -> Result<NoisyLatent<T>> {
    if t > s.steps() {
        return Err(LdzError::Range { what: "timestep", value: t as i64, lo: 0, hi: s.steps() as i64 });
    }
    let noise = Tensor::randn(z.shape(), 1.0, rng);
    let z_t = if t == 0 { z.clone() } else { diffuse_with(s, z, t, &noise) };
    Ok(NoisyLatent { z_t, noise, t })
}

/// Guided estimate `(1 - w) uncond + w cond`, exact at `w = 0` and `w = 1`.
pub fn guided<T: Scalar>(uncond: &Tensor<T>, cond: &Tensor<T>, w: f64) -> Tensor<T> {
    let (a, b) = (T::from_f64c(1.0 - w), T::from_f64c(w));
    uncond.zip_map(cond, |u, c| a * u + b * c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdmConfig {
    pub unet: UNetConfig,
    pub text: TextEncoderConfig,
    pub schedule: ScheduleConfig,
    pub latent_size: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for LdmConfig {
    fn default() -> Self {
        LdmConfig {
            unet: UNetConfig::default(),
            text: TextEncoderConfig::default(),
            schedule: ScheduleConfig::default(),
            latent_size: 16,
            steps: 2000,
            batch: 16,
            lr: 2e-4,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LdmStats {
    pub trained_steps: usize,
    pub initial_loss: f64,
    /// Mean loss over the last tenth of training.
    pub final_loss: f64,
    pub loss_history: Vec<(usize, f64)>,
    /// Not persisted.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LdmManifest {
    pub config: LdmConfig,
    pub topology_sha256: String,
    pub vocab: Vec<String>,
    pub latent_scale: f64,
    pub unet_sha256: String,
    pub text_sha256: String,
    pub autoencoder_sha256: String,
    pub stats: LdmStats,
}

/// Per-call capture of the sixteen module outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTapSet {
    features: Vec<Tensor<f32>>,
}

impl FeatureTapSet {
    /// Block `index` in `1..=16`, `[n, c, h, w]`.
    pub fn get(&self, index: usize) -> Result<&Tensor<f32>> {
        check_block(index)?;
        Ok(&self.features[index - 1])
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn check_block(index: usize) -> Result<()> {
    if !(1..=NUM_ATTENTION_MODULES).contains(&index) {
        return Err(LdzError::Range { what: "block", value: index as i64, lo: 1, hi: NUM_ATTENTION_MODULES as i64 });
    }
    Ok(())
}

/// Stage-2 model: UNet, jointly trained text encoder, schedule, latent scale.
pub struct Ldm {
    pub config: LdmConfig,
    pub unet: UNet,
    pub unet_params: ParamStore<f32>,
    pub text: TextEncoder,
    pub text_params: ParamStore<f32>,
    pub schedule: Schedule,
    /// Latents are divided by this before diffusion.
    pub latent_scale: f64,
    pub stats: LdmStats,
    pub autoencoder_sha256: String,
}

impl Ldm {
    /// Fresh, untrained model.
    pub fn build(config: LdmConfig) -> Result<Ldm> {
        if config.unet.context_dim != config.text.dim {
            return Err(LdzError::Invalid(format!(
                "UNet context width {} differs from text width {}",
                config.unet.context_dim, config.text.dim
            )));
        }
        let schedule = Schedule::new(config.schedule)?;
        let mut unet_params = ParamStore::new();
        let mut text_params = ParamStore::new();
        let mut r = rng::stream(config.seed, "ldm-init");
        let unet = UNet::new(&mut Builder::new(&mut unet_params, &mut r, Init::FanIn(1.0)), config.unet.clone());
        let text = TextEncoder::new(&mut Builder::new(&mut text_params, &mut r, Init::FanIn(1.0)), Vocab::from_grammar(), config.text);
        Ok(Ldm {
            config,
            unet,
            unet_params,
            text,
            text_params,
            schedule,
            latent_scale: 1.0,
            stats: LdmStats::default(),
            autoencoder_sha256: String::new(),
        })
    }

    pub fn is_trained(&self) -> bool {
        self.stats.trained_steps > 0
    }

    pub fn freeze(&mut self) {
        self.unet_params.freeze();
        self.text_params.freeze();
    }

    /// Text embeddings `[n, L, d]`.
    pub fn context(&self, captions: &[&str]) -> Result<Tensor<f32>> {
        self.text.encode_batch(&self.text_params, captions)
    }

    /// Noise estimate for `z_t: [n, c, h, w]`; taps are filled iff `tap`.
    pub fn predict_noise(
        &self,
        z_t: &Tensor<f32>,
        timesteps: &[usize],
        context: &Tensor<f32>,
        tap: bool,
    ) -> Result<(Tensor<f32>, Option<FeatureTapSet>)> {
        let n = z_t.shape()[0];
        if timesteps.len() != n || context.shape()[0] != n {
            return Err(LdzError::Invalid("batch sizes of z_t, timesteps and context differ".into()));
        }
        for &t in timesteps {
            self.schedule.check_step(t)?;
        }
        let g = Graph::inference();
        let z = g.constant(z_t.clone());
        let c = g.constant(context.clone());
        let ts: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let out = self.unet.forward(&g, &self.unet_params, z, &ts, c, None);
        let eps = g.value(out.eps).as_ref().clone();
        let taps = tap.then(|| FeatureTapSet { features: out.taps.iter().map(|&v| g.value(v).as_ref().clone()).collect() });
        Ok((eps, taps))
    }

    /// Scaled posterior-mean latents of `images`.
    pub fn latents(&self, ae: &TrainedAutoencoder, samples: &[ImageSample]) -> Result<Vec<Tensor<f32>>> {
        let s = (1.0 / self.latent_scale) as f32;
        Ok(ae.model.encode_samples(&ae.params, samples)?.into_iter().map(|z| z.map(|v| v * s)).collect())
    }

    pub fn topology_hash(&self) -> String {
        checkpoint::sha256_hex(self.config.unet.fingerprint().as_bytes())
    }

    /// DDPM ancestral sampling on `steps` evenly strided timesteps.
    pub fn sample(&self, ae: &TrainedAutoencoder, prompt: &str, steps: usize, w: f64, seed: u64) -> Result<Tensor<f32>> {
        let ts = strided_timesteps(self.schedule.steps(), steps)?;
        let n = self.config.latent_size;
        let shape = [1, self.config.unet.in_channels, n, n];
        let mut r = rng::stream(seed, "sample");
        let mut x: Tensor<f32> = Tensor::randn(&shape, 1.0, &mut r);
        let ctx = Tensor::stack(&[self.context(&[prompt])?.index0(0), self.context(&[""])?.index0(0)])?;
        for (i, &t) in ts.iter().enumerate().rev() {
            let prev = if i == 0 { 0 } else { ts[i - 1] };
            let both = Tensor::stack(&[x.index0(0), x.index0(0)])?;
            let (eps, _) = self.predict_noise(&both, &[t, t], &ctx, false)?;
            let e = guided(&eps.index0(1), &eps.index0(0), w).reshape(&shape)?;
            let (ab, ab_prev) = (self.schedule.alpha_bar(t), self.schedule.alpha_bar(prev));
            let beta = 1.0 - ab / ab_prev;
            let c1 = 1.0 / (1.0 - beta).sqrt();
            let c2 = beta / (1.0 - ab).sqrt();
            let mean = x.zip_map(&e, |xv, ev| ((xv as f64 - c2 * ev as f64) * c1) as f32);
            x = if prev == 0 {
                mean
            } else {
                let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                let noise: Tensor<f32> = Tensor::randn(&shape, sigma, &mut r);
                mean.zip_map(&noise, |m, e| m + e)
            };
        }
        let z = x.map(|v| v * self.latent_scale as f32);
        Ok(ae.model.decode(&ae.params, &z)?.index0(0))
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let unet_sha256 = checkpoint::save_store(&dir.join("unet.bin"), &self.unet_params)?;
        let text_sha256 = checkpoint::save_store(&dir.join("text.bin"), &self.text_params)?;
        let manifest = LdmManifest {
            config: self.config.clone(),
            topology_sha256: self.topology_hash(),
            vocab: self.text.vocab.tokens().to_vec(),
            latent_scale: self.latent_scale,
            unet_sha256: unet_sha256.clone(),
            text_sha256,
            autoencoder_sha256: self.autoencoder_sha256.clone(),
            stats: self.stats.clone(),
        };
        checkpoint::write_json(&dir.join(checkpoint::MANIFEST_FILE), &manifest)?;
        Ok(unet_sha256)
    }

    /// Loads a frozen model.
    pub fn load(dir: &Path) -> Result<Ldm> {
        let manifest: LdmManifest = checkpoint::read_json(&dir.join(checkpoint::MANIFEST_FILE))?;
        let mut ldm = Ldm::build(manifest.config.clone())?;
        if ldm.topology_hash() != manifest.topology_sha256 {
            return Err(LdzError::Checkpoint("UNet topology hash mismatch".into()));
        }
        if ldm.text.vocab.tokens() != manifest.vocab.as_slice() {
            return Err(LdzError::Checkpoint("vocabulary differs from checkpoint".into()));
        }
        for (file, expected) in [("unet.bin", &manifest.unet_sha256), ("text.bin", &manifest.text_sha256)] {
            let found = checkpoint::file_hash(&dir.join(file))?;
            if &found != expected {
                return Err(LdzError::Checkpoint(format!("{file}: expected sha256 {expected}, found {found}")));
            }
        }
        checkpoint::load_store(&dir.join("unet.bin"), &mut ldm.unet_params)?;
        checkpoint::load_store(&dir.join("text.bin"), &mut ldm.text_params)?;
        ldm.latent_scale = manifest.latent_scale;
        ldm.stats = manifest.stats;
        ldm.autoencoder_sha256 = manifest.autoencoder_sha256;
        ldm.freeze();
        Ok(ldm)
    }
}

/// `count` timesteps evenly spread over `1..=total`, ascending, ending at `total`.
pub fn strided_timesteps(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(LdzError::Range { what: "sampling steps", value: count as i64, lo: 1, hi: total as i64 });
    }
    let mut ts: Vec<usize> = (1..=count).map(|i| (i * total).div_ceil(count)).collect();
    ts.dedup();
    Ok(ts)
}

/// Trains the denoiser and the text encoder jointly with epsilon-prediction
/// and condition dropout, then freezes both.
pub fn train_ldm(
    config: &LdmConfig,
    train: &[ImageSample],
    ae: &TrainedAutoencoder,
    ae_sha256: &str,
    mut log: impl FnMut(usize, f64),
) -> Result<Ldm> {
    if train.is_empty() {
        return Err(LdzError::Invalid("LDM needs training samples".into()));
    }
    let start = Instant::now();
    let mut ldm = Ldm::build(config.clone())?;
    let scale = ae.stats.latent_global_std;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(LdzError::Invalid(format!("autoencoder latent std {scale} cannot scale latents")));
    }
    ldm.latent_scale = scale;
    ldm.autoencoder_sha256 = ae_sha256.to_string();
    let latents = ldm.latents(ae, train)?;
    if latents[0].shape()[1] != config.latent_size {
        return Err(LdzError::Invalid("autoencoder latent size differs from LDM config".into()));
    }
    let tokens = train.iter().map(|s| ldm.text.tokenize(&s.caption)).collect::<Result<Vec<_>>>()?;
    let empty = ldm.text.tokenize("")?;
    let mut unet_opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut text_opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut batch_rng = rng::stream(config.seed, "ldm-batches");
    let mut noise_rng = rng::stream(config.seed, "ldm-noise");
    let mut drop_rng = rng::stream(config.seed, "ldm-dropout");
    let t_max = ldm.schedule.steps();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sample_indices(&mut batch_rng, train.len(), config.batch.min(train.len())).into_vec();
        let mut zt = Vec::new();
        let mut eps = Vec::new();
        let mut ts = Vec::new();
        let mut seqs = Vec::new();
        for &i in &idx {
            let t = noise_rng.random_range(1..=t_max);
            let noise: Tensor<f32> = Tensor::randn(latents[i].shape(), 1.0, &mut noise_rng);
            zt.push(diffuse_with(&ldm.schedule, &latents[i], t, &noise));
            eps.push(noise);
            ts.push(t as f64);
            let dropped = drop_rng.random::<f64>() < config.cond_dropout;
            seqs.push(if dropped { empty.clone() } else { tokens[i].clone() });
        }
        let g = Graph::new();
        let ctx = ldm.text.forward(&g, &ldm.text_params, &seqs);
        let z = g.constant(Tensor::stack(&zt)?);
        let target = g.constant(Tensor::stack(&eps)?);
        let out = ldm.unet.forward(&g, &ldm.unet_params, z, &ts, ctx, None);
        let loss = g.mse(out.eps, target);
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(LdzError::Diverged { stage: "ldm".into(), step });
        }
        losses.push(lv);
        if step % 50 == 0 || step + 1 == config.steps {
            ldm.stats.loss_history.push((step, lv));
            log(step, lv);
        }
        let grads = g.backward(loss);
        unet_opt.step(&mut ldm.unet_params, &grads);
        text_opt.step(&mut ldm.text_params, &grads);
    }
    ldm.freeze();
    let tail = (losses.len() / 10).max(1);
    ldm.stats.trained_steps = config.steps;
    ldm.stats.initial_loss = losses.first().copied().unwrap_or(f64::NAN);
    ldm.stats.final_loss = losses[losses.len().saturating_sub(tail)..].iter().sum::<f64>() / tail as f64;
    ldm.stats.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(ldm)
}

/// Per-pixel channel norm of `a - b` for `[c, h, w]` tensors.
fn channel_norm(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let s = a.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    (0..hw)
        .map(|p| {
            (0..c)
                .map(|k| {
                    let d = a.data()[k * hw + p] - b.data()[k * hw + p];
                    d * d
                })
                .sum::<f32>()
                .sqrt()
        })
        .collect()
}

fn min_max(v: &mut [f32]) {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo <= f32::EPSILON * hi.abs().max(1.0) {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    }
}

/// Bilinear `h x w -> fh x fw` upsampling of a single plane.
fn upsample_plane(v: &[f32], h: usize, w: usize, f: usize) -> Vec<f32> {
    let mh: Vec<f32> = bilinear_matrix(h, f);
    let mw: Vec<f32> = bilinear_matrix(w, f);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0f32; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for i in 0..h {
                let ry = mh[y * h + i];
                if ry == 0.0 {
                    continue;
                }
                for j in 0..w {
                    acc += ry * mw[x * w + j] * v[i * w + j];
                }
            }
            out[y * wo + x] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

/// Saliency maps `H x W` in `[0, 1]`, one per noise seed, from the
/// conditional-vs-unconditional noise difference at timestep `t`.
pub fn noise_norm_saliency_seeds(
    ldm: &Ldm,
    ae: &TrainedAutoencoder,
    image: &ImageSample,
    prompt: &str,
    t: usize,
    seeds: &[u64],
) -> Result<Vec<Vec<f32>>> {
    if !ldm.is_trained() {
        return Err(LdzError::Invalid("saliency requires a trained LDM checkpoint".into()));
    }
    ldm.schedule.check_step(t)?;
    let z = ldm.latents(ae, std::slice::from_ref(image))?.remove(0);
    let mut zt = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut r = rng::stream(seed, "saliency");
        zt.push(forward_diffuse(&ldm.schedule, &z, t, &mut r)?.z_t);
    }
    let batch = Tensor::stack(&zt)?;
    let ts = vec![t; seeds.len()];
    let cond = ldm.context(&[prompt])?.index0(0);
    let uncond = ldm.context(&[""])?.index0(0);
    let (ec, _) = ldm.predict_noise(&batch, &ts, &Tensor::stack(&vec![cond; seeds.len()])?, false)?;
    let (eu, _) = ldm.predict_noise(&batch, &ts, &Tensor::stack(&vec![uncond; seeds.len()])?, false)?;
    let s = z.shape();
    let f = image.height / s[1];
    Ok((0..seeds.len())
        .map(|i| {
            let mut m = channel_norm(&ec.index0(i), &eu.index0(i));
            min_max(&mut m);
            upsample_plane(&m, s[1], s[2], f)
        })
        .collect())
}

pub fn noise_norm_saliency(ldm: &Ldm, ae: &TrainedAutoencoder, image: &ImageSample, prompt: &str, t: usize, seed: u64) -> Result<Vec<f32>> {
    Ok(noise_norm_saliency_seeds(ldm, ae, image, prompt, t, &[seed])?.remove(0))
}

#[cfg(test)]
mod tests;
