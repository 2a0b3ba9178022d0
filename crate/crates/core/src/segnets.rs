//! Text-conditioned segmentation on pixels (RGBNet), on latents (ZNet) and on
//! latents plus injected frozen-LDM features (LD-ZNet and its concat variant).

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ldz_tensor::nn::{Attention, Builder, Conv2d, Init, LayerNorm};
use ldz_tensor::{Adam, AdamConfig, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffusion::{diffuse_with, BlockHook, Ldm, UNet};
use crate::error::{io_err, LdzError, Result};
use crate::latentae::{image_batch, TrainedAutoencoder};
use crate::rng;
use crate::synthdata::{ImageSample, Mask};

/// LDM blocks whose features LD-ZNet consumes.
pub const INJECTED_BLOCKS: [usize; 5] = [6, 7, 8, 9, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegModelKind {
    #[serde(rename = "rgbnet")]
    RgbNet,
    #[serde(rename = "znet")]
    ZNet,
    #[serde(rename = "ldznet")]
    LdZNet,
    #[serde(rename = "ldznet_concat")]
    LdZNetConcat,
}

impl SegModelKind {
    pub const ALL: [SegModelKind; 4] = [SegModelKind::RgbNet, SegModelKind::ZNet, SegModelKind::LdZNet, SegModelKind::LdZNetConcat];

    pub fn tag(self) -> &'static str {
        match self {
            SegModelKind::RgbNet => "rgbnet",
            SegModelKind::ZNet => "znet",
            SegModelKind::LdZNet => "ldznet",
            SegModelKind::LdZNetConcat => "ldznet_concat",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            SegModelKind::RgbNet => "RGBNet",
            SegModelKind::ZNet => "ZNet",
            SegModelKind::LdZNet => "LD-ZNet",
            SegModelKind::LdZNetConcat => "LD-ZNet (concat)",
        }
    }

    pub fn uses_ldm_features(self) -> bool {
        matches!(self, SegModelKind::LdZNet | SegModelKind::LdZNetConcat)
    }

    pub fn injected_blocks(self) -> Vec<usize> {
        if self.uses_ldm_features() {
            INJECTED_BLOCKS.to_vec()
        } else {
            Vec::new()
        }
    }
}

impl fmt::Display for SegModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SegModelKind {
    type Err = LdzError;

    fn from_str(s: &str) -> Result<Self> {
        let canon = |t: &str| t.to_ascii_lowercase().replace(['-', '_', ' '], "");
        SegModelKind::ALL
            .into_iter()
            .find(|k| canon(k.tag()) == canon(s))
            .ok_or_else(|| LdzError::Invalid(format!("unknown model `{s}` (expected rgbnet, znet, ldznet or ldznet_concat)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub kind: SegModelKind,
    /// Feature timestep for the LDM taps.
    pub t_star: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub init_std: f64,
    pub pool_heads: usize,
    pub stem_channels: usize,
    pub seed: u64,
    pub eval_noise_seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            kind: SegModelKind::ZNet,
            t_star: 400,
            steps: 1000,
            batch: 16,
            lr: 1e-4,
            init_std: 0.02,
            pool_heads: 4,
            stem_channels: 32,
            seed: 0,
            eval_noise_seed: 17,
        }
    }
}

/// Attention pool over one LDM feature map, then cross-attention from the
/// ZNet tokens into it, added residually through a zero-initialized output.
#[derive(Clone, Debug)]
pub struct InjectionAdapter {
    pub block: usize,
    pub channels: usize,
    pub length: usize,
    pos: ParamId,
    pool: Attention,
    norm_q: LayerNorm,
    cross: Attention,
}

impl InjectionAdapter {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, block: usize, channels: usize, length: usize, heads: usize) -> Self {
        b.scoped(&format!("adapter{block}"), |b| InjectionAdapter {
            block,
            channels,
            length,
            pos: b.weight("pos", &[length, channels], channels),
            pool: Attention::new(b, "pool", channels, channels, heads),
            norm_q: LayerNorm::new(b, "norm_q", channels),
            cross: Attention::zero_out(b, "cross", channels, channels, heads),
        })
    }

    pub fn num_params(&self) -> usize {
        let c = self.channels;
        self.length * c + self.pool.num_params(c) + 2 * c + self.cross.num_params(c)
    }

    pub fn position_id(&self) -> ParamId {
        self.pos
    }

    /// `features: [n, c, h, w]` -> pooled tokens `[n, h*w, c]`.
    pub fn pool<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, features: Var) -> Var {
        let s = g.shape(features);
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let t = g.permute(g.reshape(features, &[n, c, l]), &[0, 2, 1]);
        let flat = g.reshape(t, &[n, l * c]);
        let pos = g.reshape(g.param(p, self.pos), &[l * c]);
        let x = g.reshape(g.add_channel(flat, pos, 1), &[n, l, c]);
        self.pool.forward(g, p, x, x)
    }

    /// Softmax weights of the pool, `[n * heads, l, l]`.
    pub fn pool_weights<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, features: Var) -> Var {
        let s = g.shape(features);
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let t = g.permute(g.reshape(features, &[n, c, l]), &[0, 2, 1]);
        let flat = g.reshape(t, &[n, l * c]);
        let pos = g.reshape(g.param(p, self.pos), &[l * c]);
        let x = g.reshape(g.add_channel(flat, pos, 1), &[n, l, c]);
        self.pool.forward_with_weights(g, p, x, x).1
    }

    /// Cross-attention update only (without the residual), `[n, lq, c]`.
    pub fn delta<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, tokens: Var, features: Var) -> Var {
        let kv = self.pool(g, p, features);
        let q = self.norm_q.forward(g, p, tokens);
        self.cross.forward(g, p, q, kv)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, tokens: Var, features: Var) -> Var {
        g.add(tokens, self.delta(g, p, tokens, features))
    }
}

/// Channel concat of ZNet and LDM features, projected back by a 1x1 conv
/// that starts as the identity on the ZNet half.
#[derive(Clone, Debug)]
pub struct ConcatAdapter {
    pub block: usize,
    pub channels: usize,
    proj: Conv2d,
}

impl ConcatAdapter {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, block: usize, channels: usize) -> Self {
        let proj = b.scoped(&format!("concat{block}"), |b| Conv2d::with_init(b, "proj", 2 * channels, channels, 1, Init::Zeros));
        let w = b.store.get_mut(proj.weight);
        for o in 0..channels {
            w.data_mut()[o * 2 * channels + o] = T::one();
        }
        ConcatAdapter { block, channels, proj }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels * self.channels + self.channels
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var, features: Var) -> Var {
        self.proj.forward(g, p, g.concat(&[x, features], 1))
    }
}

/// Learnable pixel stem `3 x H x W -> c_z x H/f x W/f`.
#[derive(Clone, Debug)]
struct RgbStem {
    down: Vec<Conv2d>,
    out: Conv2d,
}

impl RgbStem {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, factor: usize, hidden: usize, latent_channels: usize) -> Self {
        b.scoped("stem", |b| {
            let levels = factor.trailing_zeros() as usize;
            let down = (0..levels)
                .map(|i| Conv2d::new(b, &format!("down{i}"), if i == 0 { 3 } else { hidden }, hidden, 3, 2))
                .collect();
            RgbStem { down, out: Conv2d::new(b, "out", hidden, latent_channels, 1, 1) }
        })
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for c in &self.down {
            h = g.silu(c.forward(g, p, h));
        }
        self.out.forward(g, p, h)
    }
}

struct Injector<'a, T: Scalar> {
    model: &'a SegModel,
    p: &'a ParamStore<T>,
    features: &'a [Var],
}

impl<T: Scalar> BlockHook<T> for Injector<'_, T> {
    fn before_attention(&self, g: &Graph<T>, index: usize, x: Var) -> Var {
        match INJECTED_BLOCKS.iter().position(|&b| b == index) {
            Some(i) if self.model.config.kind == SegModelKind::LdZNetConcat => self.model.concat[i].forward(g, self.p, x, self.features[i]),
            _ => x,
        }
    }

    fn after_cross_attention(&self, g: &Graph<T>, index: usize, tokens: Var) -> Var {
        match INJECTED_BLOCKS.iter().position(|&b| b == index) {
            Some(i) if self.model.config.kind == SegModelKind::LdZNet => self.model.adapters[i].forward(g, self.p, tokens, self.features[i]),
            _ => tokens,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegStats {
    pub trained_steps: usize,
    pub initial_loss: f64,
    /// Mean loss over the last tenth of training.
    pub final_loss: f64,
    pub loss_history: Vec<(usize, f64)>,
    /// Not persisted.
    #[serde(skip)]
    pub wall_clock_s: f64,
    /// Parameters initialized from the LDM denoiser.
    pub copied_from_ldm: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegManifest {
    pub config: SegConfig,
    pub kind: SegModelKind,
    pub t_star: usize,
    pub injected_blocks: Vec<usize>,
    pub weights_sha256: String,
    pub ldm_unet_sha256: String,
    pub ldm_text_sha256: String,
    pub autoencoder_sha256: String,
    pub stats: SegStats,
}

/// Model inputs for a set of samples, computed once.
pub struct SegData {
    /// Per sample: `[3, H, W]` pixels (RGBNet) or the scaled latent.
    pub inputs: Vec<Tensor<f32>>,
    /// Scaled latents, kept for the LDM taps.
    pub latents: Vec<Tensor<f32>>,
    pub contexts: Vec<Tensor<f32>>,
    pub masks: Vec<Mask>,
    pub ids: Vec<String>,
    pub height: usize,
    pub width: usize,
}

impl SegData {
    pub fn prepare(kind: SegModelKind, ldm: &Ldm, ae: &TrainedAutoencoder, samples: &[ImageSample]) -> Result<SegData> {
        if samples.is_empty() {
            return Err(LdzError::Invalid("no samples to prepare".into()));
        }
        let needs_latents = kind != SegModelKind::RgbNet;
        let latents = if needs_latents { ldm.latents(ae, samples)? } else { Vec::new() };
        let inputs = if needs_latents {
            latents.clone()
        } else {
            samples.chunks(32).flat_map(|c| {
                let b = image_batch(c);
                (0..c.len()).map(move |i| b.index0(i))
            }).collect()
        };
        let mut contexts = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let caps: Vec<&str> = chunk.iter().map(|s| s.caption.as_str()).collect();
            let ctx = ldm.context(&caps)?;
            contexts.extend((0..chunk.len()).map(|i| ctx.index0(i)));
        }
        Ok(SegData {
            inputs,
            latents,
            contexts,
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
            ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            height: samples[0].height,
            width: samples[0].width,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Noise for the LDM taps: a training stream, or a fixed seed per sample.
pub enum TapNoise<'a> {
    Fresh(&'a mut ChaCha8Rng),
    PerSample(u64),
}

pub struct SegBatch {
    pub input: Tensor<f32>,
    pub context: Tensor<f32>,
    /// One `[n, c, h, w]` map per injected block.
    pub features: Vec<Tensor<f32>>,
    pub targets: Tensor<f32>,
}

pub fn eval_noise_seed(eval_seed: u64, sample_id: &str) -> u64 {
    rng::derive_seed(eval_seed, &format!("seg-eval-noise/{sample_id}"))
}

pub struct SegModel {
    pub config: SegConfig,
    pub unet: UNet,
    pub params: ParamStore<f32>,
    pub adapters: Vec<InjectionAdapter>,
    pub concat: Vec<ConcatAdapter>,
    stem: Option<RgbStem>,
    head: Conv2d,
    factor: usize,
    pub stats: SegStats,
}

impl SegModel {
    /// Fresh model; the backbone copies every LDM denoiser weight whose name
    /// and shape match, the rest is drawn from `N(0, init_std^2)`.
    pub fn new(config: SegConfig, ldm: &Ldm, factor: usize) -> Result<SegModel> {
        if !factor.is_power_of_two() || factor < 2 {
            return Err(LdzError::Invalid(format!("latent factor {factor} is not a power of two >= 2")));
        }
        ldm.schedule.check_step(config.t_star)?;
        let ucfg = ldm.config.unet.clone();
        let mut params = ParamStore::new();
        let mut r = rng::stream(config.seed, "seg-init");
        let mut b = Builder::new(&mut params, &mut r, Init::Normal(config.init_std));
        let unet = UNet::new(&mut b, ucfg.clone());
        let stem = (config.kind == SegModelKind::RgbNet).then(|| RgbStem::new(&mut b, factor, config.stem_channels, ucfg.in_channels));
        let head = Conv2d::new(&mut b, "head", ucfg.base_channels, 1, 1, 1);
        let topology = unet.topology();
        let latent = ldm.config.latent_size;
        let mut adapters = Vec::new();
        let mut concat = Vec::new();
        for &blk in &INJECTED_BLOCKS {
            let m = topology[blk - 1];
            let side = latent / m.stride;
            match config.kind {
                SegModelKind::LdZNet => adapters.push(InjectionAdapter::new(&mut b, blk, m.channels, side * side, config.pool_heads)),
                SegModelKind::LdZNetConcat => concat.push(ConcatAdapter::new(&mut b, blk, m.channels)),
                _ => {}
            }
        }
        let copied = params.copy_matching(&ldm.unet_params).len();
        Ok(SegModel {
            config,
            unet,
            params,
            adapters,
            concat,
            stem,
            head,
            factor,
            stats: SegStats { copied_from_ldm: copied, ..SegStats::default() },
        })
    }

    pub fn kind(&self) -> SegModelKind {
        self.config.kind
    }

    /// Logits `[n, 1, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, input: Var, context: Var, features: &[Var]) -> Var {
        let z = match &self.stem {
            Some(stem) => stem.forward(g, p, input),
            None => input,
        };
        let n = g.shape(z)[0];
        let ts = vec![0.0; n];
        let injector = Injector { model: self, p, features };
        let hook: Option<&dyn BlockHook<T>> = if self.kind().uses_ldm_features() { Some(&injector) } else { None };
        let (h, _) = self.unet.forward_features(g, p, z, &ts, context, hook);
        let low = self.head.forward(g, p, h);
        g.upsample_bilinear(low, self.factor)
    }

    /// Inputs, contexts, LDM taps and targets for the samples `idx`.
    pub fn assemble(&self, ldm: &Ldm, data: &SegData, idx: &[usize], noise: TapNoise<'_>) -> Result<SegBatch> {
        let input = Tensor::stack(&idx.iter().map(|&i| data.inputs[i].clone()).collect::<Vec<_>>())?;
        let context = Tensor::stack(&idx.iter().map(|&i| data.contexts[i].clone()).collect::<Vec<_>>())?;
        let mask: Vec<f32> = idx.iter().flat_map(|&i| data.masks[i].iter().map(|&m| if m { 1.0 } else { 0.0 })).collect();
        let targets = Tensor::from_vec(&[idx.len(), 1, data.height, data.width], mask)?;
        let features = if self.kind().uses_ldm_features() {
            let t = self.config.t_star;
            let mut noisy = Vec::with_capacity(idx.len());
            let mut noise = noise;
            for &i in idx {
                let z = &data.latents[i];
                let eps = match &mut noise {
                    TapNoise::Fresh(r) => Tensor::randn(z.shape(), 1.0, *r),
                    TapNoise::PerSample(seed) => Tensor::randn(z.shape(), 1.0, &mut rng::seeded(eval_noise_seed(*seed, &data.ids[i]))),
                };
                noisy.push(diffuse_with(&ldm.schedule, z, t, &eps));
            }
            let (_, taps) = ldm.predict_noise(&Tensor::stack(&noisy)?, &vec![t; idx.len()], &context, true)?;
            let taps = taps.expect("taps requested");
            INJECTED_BLOCKS.iter().map(|&b| taps.get(b).cloned()).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(SegBatch { input, context, features, targets })
    }

    /// Logits of one assembled batch in inference mode, `[n, 1, H, W]`.
    pub fn logits(&self, batch: &SegBatch) -> Tensor<f32> {
        let g = Graph::inference();
        let feats: Vec<Var> = batch.features.iter().map(|f| g.constant(f.clone())).collect();
        let out = self.forward(&g, &self.params, g.constant(batch.input.clone()), g.constant(batch.context.clone()), &feats);
        g.value(out).as_ref().clone()
    }

    /// Probability masks `H x W` for every sample, with fixed tap noise.
    pub fn predict(&self, ldm: &Ldm, data: &SegData) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(data.len());
        let hw = data.height * data.width;
        let all: Vec<usize> = (0..data.len()).collect();
        for idx in all.chunks(16) {
            let batch = self.assemble(ldm, data, idx, TapNoise::PerSample(self.config.eval_noise_seed))?;
            let logits = self.logits(&batch);
            out.extend(logits.data().chunks(hw).map(|c| c.iter().map(|&v| sigmoid(v)).collect::<Vec<f32>>()));
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, ldm: &Ldm, ae_sha256: &str) -> Result<String> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let weights_sha256 = checkpoint::save_store(&dir.join(checkpoint::WEIGHTS_FILE), &self.params)?;
        let manifest = SegManifest {
            config: self.config.clone(),
            kind: self.kind(),
            t_star: self.config.t_star,
            injected_blocks: self.kind().injected_blocks(),
            weights_sha256: weights_sha256.clone(),
            ldm_unet_sha256: checkpoint::store_hash(&ldm.unet_params),
            ldm_text_sha256: checkpoint::store_hash(&ldm.text_params),
            autoencoder_sha256: ae_sha256.to_string(),
            stats: self.stats.clone(),
        };
        checkpoint::write_json(&dir.join(checkpoint::MANIFEST_FILE), &manifest)?;
        Ok(weights_sha256)
    }

    /// Loads a frozen model; `ldm` must be the checkpoint it was trained on.
    pub fn load(dir: &Path, ldm: &Ldm, factor: usize) -> Result<SegModel> {
        let manifest: SegManifest = checkpoint::read_json(&dir.join(checkpoint::MANIFEST_FILE))?;
        let found = checkpoint::store_hash(&ldm.unet_params);
        if found != manifest.ldm_unet_sha256 {
            return Err(LdzError::Checkpoint(format!("segmentation model was trained on LDM {}, given {found}", manifest.ldm_unet_sha256)));
        }
        let mut model = SegModel::new(manifest.config, ldm, factor)?;
        let path = dir.join(checkpoint::WEIGHTS_FILE);
        let hash = checkpoint::file_hash(&path)?;
        if hash != manifest.weights_sha256 {
            return Err(LdzError::Checkpoint(format!("{}: expected sha256 {}, found {hash}", path.display(), manifest.weights_sha256)));
        }
        checkpoint::load_store(&path, &mut model.params)?;
        model.params.freeze();
        model.stats = manifest.stats;
        Ok(model)
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Trains with per-pixel BCE; the LDM and the text encoder stay frozen.
pub fn train_segmodel(
    config: &SegConfig,
    ldm: &Ldm,
    ae: &TrainedAutoencoder,
    train: &SegData,
    mut log: impl FnMut(usize, f64),
) -> Result<SegModel> {
    if !ldm.unet_params.is_frozen() || !ldm.text_params.is_frozen() {
        return Err(LdzError::Invalid("segmentation training needs a frozen LDM".into()));
    }
    let start = Instant::now();
    let before = (checkpoint::store_hash(&ldm.unet_params), checkpoint::store_hash(&ldm.text_params));
    let mut model = SegModel::new(config.clone(), ldm, ae.model.config.factor)?;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut batch_rng = rng::stream(config.seed, "seg-batches");
    let mut noise_rng = rng::stream(config.seed, "seg-tap-noise");
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sample_indices(&mut batch_rng, train.len(), config.batch.min(train.len())).into_vec();
        let batch = model.assemble(ldm, train, &idx, TapNoise::Fresh(&mut noise_rng))?;
        let g = Graph::new();
        let feats: Vec<Var> = batch.features.iter().map(|f| g.constant(f.clone())).collect();
        let logits = model.forward(&g, &model.params, g.constant(batch.input), g.constant(batch.context), &feats);
        let loss = g.bce_with_logits(logits, &batch.targets);
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(LdzError::Diverged { stage: format!("segmentation/{}", config.kind), step });
        }
        let grads = g.backward(loss);
        assert!(
            !grads.touches(&ldm.unet_params) && !grads.touches(&ldm.text_params),
            "gradient reached frozen LDM parameters"
        );
        opt.step(&mut model.params, &grads);
        losses.push(lv);
        if step % 50 == 0 || step + 1 == config.steps {
            model.stats.loss_history.push((step, lv));
            log(step, lv);
        }
    }
    let after = (checkpoint::store_hash(&ldm.unet_params), checkpoint::store_hash(&ldm.text_params));
    if before != after {
        return Err(LdzError::Invalid("frozen LDM parameters changed during segmentation training".into()));
    }
    model.params.freeze();
    let tail = (losses.len() / 10).max(1);
    model.stats.trained_steps = config.steps;
    model.stats.initial_loss = losses.first().copied().unwrap_or(f64::NAN);
    model.stats.final_loss = losses[losses.len().saturating_sub(tail)..].iter().sum::<f64>() / tail as f64;
    model.stats.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(model)
}
