//! Convolutional KL autoencoder mapping `3 x H x W` images to
//! `c_z x H/f x W/f` latents (tensors are NCHW throughout).

use std::path::Path;
use std::time::Instant;

use ldz_tensor::nn::{Builder, Conv2d, Init};
use ldz_tensor::{Adam, AdamConfig, Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{LdzError, Result};
use crate::rng;
use crate::synthdata::ImageSample;

pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    /// Spatial downsampling factor, a power of two.
    pub factor: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    pub kl_weight: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            factor: 4,
            latent_channels: 4,
            base_channels: 16,
            kl_weight: 1e-3,
            lr: 1e-3,
            steps: 1500,
            batch: 16,
            seed: 0,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return Err(LdzError::Invalid(format!("downsample factor {} is not a power of two", self.factor)));
        }
        if self.kl_weight <= 0.0 {
            return Err(LdzError::Invalid("KL weight must be positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }

    /// Elements of the image over elements of its latent: `3 f^2 / c_z`.
    pub fn compression_ratio(&self) -> f64 {
        3.0 * (self.factor * self.factor) as f64 / self.latent_channels as f64
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AeConfig,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_mid: Conv2d,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl Autoencoder {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, config: AeConfig) -> Result<Self> {
        config.validate()?;
        let levels = config.levels();
        let base = config.base_channels;
        let ch = move |i: usize| base << i;
        let top = ch(levels);
        let cz = config.latent_channels;
        Ok(b.scoped("ae", |b| {
            let enc_in = Conv2d::new(b, "enc_in", 3, ch(0), 3, 1);
            let enc_down = (1..=levels)
                .map(|i| Conv2d::new(b, &format!("enc_down{i}"), ch(i - 1), ch(i), 3, 2))
                .collect();
            let enc_mid = Conv2d::new(b, "enc_mid", top, top, 3, 1);
            let enc_out = Conv2d::new(b, "enc_out", top, 2 * cz, 1, 1);
            let dec_in = Conv2d::new(b, "dec_in", cz, top, 3, 1);
            let dec_mid = Conv2d::new(b, "dec_mid", top, top, 3, 1);
            let dec_up = (0..levels)
                .rev()
                .map(|i| Conv2d::new(b, &format!("dec_up{i}"), ch(i + 1), ch(i), 3, 1))
                .collect();
            let dec_out = Conv2d::new(b, "dec_out", ch(0), 3, 3, 1);
            Autoencoder { config, enc_in, enc_down, enc_mid, enc_out, dec_in, dec_mid, dec_up, dec_out }
        }))
    }

    /// Posterior mean and clamped log-variance.
    pub fn encode_dist<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var) -> (Var, Var) {
        let mut h = g.silu(self.enc_in.forward(g, p, x));
        for c in &self.enc_down {
            h = g.silu(c.forward(g, p, h));
        }
        let h = g.silu(self.enc_mid.forward(g, p, h));
        let out = self.enc_out.forward(g, p, h);
        let cz = self.config.latent_channels;
        let mean = g.narrow(out, 1, 0, cz);
        let logvar = g.narrow(out, 1, cz, cz);
        (mean, g.clamp(logvar, LOGVAR_RANGE.0, LOGVAR_RANGE.1))
    }

    /// Unclamped reconstruction.
    pub fn decode_graph<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, z: Var) -> Var {
        let h = g.silu(self.dec_in.forward(g, p, z));
        let mut h = g.silu(self.dec_mid.forward(g, p, h));
        for c in &self.dec_up {
            let u = g.upsample_nearest(h, 2);
            h = g.silu(c.forward(g, p, u));
        }
        self.dec_out.forward(g, p, h)
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let f = self.config.factor;
        match shape {
            [_, 3, h, w] if h % f == 0 && w % f == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(LdzError::Invalid(format!("image batch {shape:?} is not [n, 3, H, W] with H, W divisible by {f}"))),
        }
    }

    /// Posterior mean for a batch `[n, 3, H, W]`.
    pub fn encode<T: Scalar>(&self, p: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(images.shape())?;
        let g = Graph::inference();
        let x = g.constant(images.clone());
        let (mean, _) = self.encode_dist(&g, p, x);
        Ok(g.value(mean).as_ref().clone())
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn decode<T: Scalar>(&self, p: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        match z.shape() {
            [_, c, _, _] if *c == self.config.latent_channels => {}
            s => return Err(LdzError::Invalid(format!("latent {s:?} does not have {} channels", self.config.latent_channels))),
        }
        let g = Graph::inference();
        let zv = g.constant(z.clone());
        let x = self.decode_graph(&g, p, zv);
        let lo = T::zero();
        let hi = T::one();
        Ok(g.value(x).map(|v| if v.is_nan() { lo } else { v.max(lo).min(hi) }))
    }

    /// Encodes in chunks to bound memory.
    pub fn encode_samples(&self, p: &ParamStore<f32>, samples: &[ImageSample]) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let z = self.encode(p, &image_batch(chunk))?;
            out.extend((0..chunk.len()).map(|i| z.index0(i)));
        }
        Ok(out)
    }
}

/// Stacks samples into `[n, 3, H, W]`.
pub fn image_batch(samples: &[ImageSample]) -> Tensor<f32> {
    let (h, w) = (samples[0].height, samples[0].width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        data.extend(s.to_chw());
    }
    Tensor::from_vec(&[samples.len(), 3, h, w], data).expect("uniform sample sizes")
}

/// `KL(N(mean, exp(logvar)) || N(0, 1))`, averaged over latent elements.
pub fn kl_term<T: Scalar>(g: &Graph<T>, mean: Var, logvar: Var) -> Var {
    let m2 = g.square(mean);
    let var = g.exp(logvar);
    let t = g.add(m2, var);
    let t = g.sub(t, logvar);
    let t = g.add_scalar(t, -1.0);
    let t = g.scale(t, 0.5);
    g.mean_all(t)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AeStats {
    pub final_train_loss: f64,
    pub initial_train_loss: f64,
    pub min_kl: f64,
    pub val_recon_mse: f64,
    pub val_psnr_db: f64,
    pub latent_global_std: f64,
    pub latent_channel_std: Vec<f64>,
    /// `||E(D(z)) - z|| / ||z||` over train-split latents.
    pub latent_roundtrip_rel_error: f64,
    pub loss_history: Vec<(usize, f64)>,
    /// Not persisted.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AeManifest {
    pub config: AeConfig,
    pub stats: AeStats,
    pub weights_sha256: String,
}

/// A trained stage-1 model with its weights and training record.
pub struct TrainedAutoencoder {
    pub model: Autoencoder,
    pub params: ParamStore<f32>,
    pub stats: AeStats,
}

impl TrainedAutoencoder {
    pub fn build(config: AeConfig) -> Result<(Autoencoder, ParamStore<f32>)> {
        let mut params = ParamStore::new();
        let mut r = rng::stream(config.seed, "ae-init");
        let model = Autoencoder::new(&mut Builder::new(&mut params, &mut r, Init::FanIn(1.0)), config)?;
        Ok((model, params))
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
        let hash = checkpoint::save_store(&dir.join(checkpoint::WEIGHTS_FILE), &self.params)?;
        let manifest = AeManifest { config: self.model.config.clone(), stats: self.stats.clone(), weights_sha256: hash.clone() };
        checkpoint::write_json(&dir.join(checkpoint::MANIFEST_FILE), &manifest)?;
        Ok(hash)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: AeManifest = checkpoint::read_json(&dir.join(checkpoint::MANIFEST_FILE))?;
        let (model, mut params) = Self::build(manifest.config)?;
        let wpath = dir.join(checkpoint::WEIGHTS_FILE);
        if checkpoint::file_hash(&wpath)? != manifest.weights_sha256 {
            return Err(LdzError::Checkpoint(format!("{} does not match its manifest hash", wpath.display())));
        }
        checkpoint::load_store(&wpath, &mut params)?;
        params.freeze();
        Ok(TrainedAutoencoder { model, params, stats: manifest.stats })
    }
}

fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse.max(1e-12)).log10()
}

/// Trains with `L2 + kl_weight * KL` on reparameterized samples.
pub fn train_autoencoder(
    config: &AeConfig,
    train: &[ImageSample],
    val: &[ImageSample],
    mut log: impl FnMut(usize, f64),
) -> Result<TrainedAutoencoder> {
    if train.is_empty() || val.is_empty() {
        return Err(LdzError::Invalid("autoencoder needs train and val samples".into()));
    }
    let start = Instant::now();
    let (model, mut params) = TrainedAutoencoder::build(config.clone())?;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut batch_rng = rng::stream(config.seed, "ae-batches");
    let mut noise_rng = rng::stream(config.seed, "ae-noise");
    let mut history = Vec::new();
    let (mut first, mut last, mut min_kl) = (f64::NAN, f64::NAN, f64::INFINITY);
    for step in 0..config.steps {
        let idx = sample_indices(&mut batch_rng, train.len(), config.batch.min(train.len()));
        let batch: Vec<ImageSample> = idx.iter().map(|i| train[i].clone()).collect();
        let x = image_batch(&batch);
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let (mean, logvar) = model.encode_dist(&g, &params, xv);
        let eps = Tensor::randn(&g.shape(mean), 1.0, &mut noise_rng);
        let std = g.exp(g.scale(logvar, 0.5));
        let z = g.add(mean, g.mul(std, g.constant(eps)));
        let recon = model.decode_graph(&g, &params, z);
        let rec = g.mse(recon, xv);
        let kl = kl_term(&g, mean, logvar);
        let loss = g.add(rec, g.scale(kl, config.kl_weight));
        let lv = g.value(loss).item() as f64;
        let klv = g.value(kl).item() as f64;
        if !lv.is_finite() {
            return Err(LdzError::Diverged { stage: "autoencoder".into(), step });
        }
        min_kl = min_kl.min(klv);
        if step == 0 {
            first = lv;
        }
        last = lv;
        if step % 50 == 0 || step + 1 == config.steps {
            history.push((step, lv));
            log(step, lv);
        }
        let grads = g.backward(loss);
        opt.step(&mut params, &grads);
    }
    params.freeze();
    let mut stats = measure(&model, &params, train, val)?;
    stats.initial_train_loss = first;
    stats.final_train_loss = last;
    stats.min_kl = min_kl;
    stats.loss_history = history;
    stats.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(TrainedAutoencoder { model, params, stats })
}

/// Reconstruction quality and latent statistics of a trained model.
pub fn measure(model: &Autoencoder, params: &ParamStore<f32>, train: &[ImageSample], val: &[ImageSample]) -> Result<AeStats> {
    let (mut mse_sum, mut psnr_sum) = (0.0, 0.0);
    for chunk in val.chunks(32) {
        let x = image_batch(chunk);
        let rec = model.decode(params, &model.encode(params, &x)?)?;
        let per = x.numel() / chunk.len();
        for i in 0..chunk.len() {
            let a = &x.data()[i * per..(i + 1) * per];
            let b = &rec.data()[i * per..(i + 1) * per];
            let mse = a.iter().zip(b).map(|(u, v)| ((u - v) as f64).powi(2)).sum::<f64>() / per as f64;
            mse_sum += mse;
            psnr_sum += psnr(mse);
        }
    }
    let latents = model.encode_samples(params, train)?;
    let c = model.config.latent_channels;
    let mut ch = vec![(0.0f64, 0.0f64, 0usize); c];
    let (mut all, mut all2, mut count) = (0.0, 0.0, 0usize);
    for z in &latents {
        let hw = z.numel() / c;
        for (k, acc) in ch.iter_mut().enumerate() {
            for &v in &z.data()[k * hw..(k + 1) * hw] {
                let v = v as f64;
                acc.0 += v;
                acc.1 += v * v;
                acc.2 += 1;
                all += v;
                all2 += v * v;
                count += 1;
            }
        }
    }
    let sd = |s: f64, s2: f64, n: usize| (s2 / n as f64 - (s / n as f64).powi(2)).max(0.0).sqrt();
    let (mut num, mut den) = (0.0, 0.0);
    for chunk in latents.chunks(32) {
        let z = Tensor::stack(chunk)?;
        let back = model.encode(params, &model.decode(params, &z)?)?;
        num += z.data().iter().zip(back.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        den += z.data().iter().map(|&a| (a as f64).powi(2)).sum::<f64>();
    }
    Ok(AeStats {
        final_train_loss: f64::NAN,
        initial_train_loss: f64::NAN,
        min_kl: f64::NAN,
        val_recon_mse: mse_sum / val.len() as f64,
        val_psnr_db: psnr_sum / val.len() as f64,
        latent_global_std: sd(all, all2, count),
        latent_channel_std: ch.iter().map(|&(s, s2, n)| sd(s, s2, n)).collect(),
        latent_roundtrip_rel_error: (num / den.max(1e-30)).sqrt(),
        loss_history: Vec::new(),
        wall_clock_s: 0.0,
    })
}
