//! Text-conditioned UNet with sixteen spatial-attention modules.
//!
//! Module order: two per encoder level (1..6), one in the middle (7), three
//! per decoder level (8..16). Every module is self-attention followed by
//! cross-attention against the text context.

use ldz_tensor::nn::{sinusoidal_embedding, Attention, Builder, Conv2d, GroupNorm, Init, LayerNorm, Linear};
use ldz_tensor::{Graph, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const NUM_ATTENTION_MODULES: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub multipliers: Vec<usize>,
    pub heads: usize,
    pub context_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 4,
            base_channels: 32,
            multipliers: vec![1, 2, 4],
            heads: 4,
            context_dim: 64,
            time_dim: 128,
            groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.multipliers[level]
    }

    /// Canonical text used for the topology hash.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Where a spatial-attention module sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleInfo {
    pub index: usize,
    pub level: usize,
    pub channels: usize,
    /// Downsampling of the module's feature map relative to the input.
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, cin: usize, cout: usize, cfg: &UNetConfig) -> Self {
        b.scoped(name, |b| ResBlock {
            norm1: GroupNorm::new(b, "norm1", cfg.groups.min(cin), cin),
            conv1: Conv2d::new(b, "conv1", cin, cout, 3, 1),
            time: Linear::new(b, "time", cfg.time_dim, cout, true),
            norm2: GroupNorm::new(b, "norm2", cfg.groups.min(cout), cout),
            conv2: Conv2d::new(b, "conv2", cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(b, "skip", cin, cout, 1, 1)),
        })
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var, temb: Var) -> Var {
        let h = g.silu(self.norm1.forward(g, p, x));
        let h = self.conv1.forward(g, p, h);
        let t = self.time.forward(g, p, temb);
        let h = g.add_per_sample_channel(h, t);
        let h = g.silu(self.norm2.forward(g, p, h));
        let h = self.conv2.forward(g, p, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, p, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Extension points inside a spatial-attention module.
pub trait BlockHook<T: Scalar> {
    /// Replaces the module input `[n, c, h, w]` before attention.
    fn before_attention(&self, _g: &Graph<T>, _index: usize, x: Var) -> Var {
        x
    }

    /// Adjusts the token sequence `[n, h*w, c]` right after the text
    /// cross-attention residual.
    fn after_cross_attention(&self, _g: &Graph<T>, _index: usize, tokens: Var) -> Var {
        tokens
    }
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub index: usize,
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
}

impl SpatialAttention {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, index: usize, ch: usize, cfg: &UNetConfig) -> Self {
        b.scoped(&format!("attn{index}"), |b| SpatialAttention {
            index,
            norm_self: LayerNorm::new(b, "norm_self", ch),
            self_attn: Attention::new(b, "self", ch, ch, cfg.heads),
            norm_cross: LayerNorm::new(b, "norm_cross", ch),
            cross_attn: Attention::new(b, "cross", ch, cfg.context_dim, cfg.heads),
        })
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var, context: Var, hook: Option<&dyn BlockHook<T>>) -> Var {
        let x = match hook {
            Some(h) => h.before_attention(g, self.index, x),
            None => x,
        };
        let s = g.shape(x);
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let t = g.permute(g.reshape(x, &[n, c, hw]), &[0, 2, 1]);
        let h = self.norm_self.forward(g, p, t);
        let t = g.add(t, self.self_attn.forward(g, p, h, h));
        let h = self.norm_cross.forward(g, p, t);
        let mut t = g.add(t, self.cross_attn.forward(g, p, h, context));
        if let Some(h) = hook {
            t = h.after_cross_attention(g, self.index, t);
        }
        let out = g.permute(t, &[0, 2, 1]);
        g.reshape(out, &s)
    }

    /// Self- and cross-attention weights for one input (for normalization
    /// checks).
    pub fn attention_weights<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, x: Var, context: Var) -> (Var, Var) {
        let s = g.shape(x);
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let t = g.permute(g.reshape(x, &[n, c, hw]), &[0, 2, 1]);
        let h = self.norm_self.forward(g, p, t);
        let (so, sw) = self.self_attn.forward_with_weights(g, p, h, h);
        let t = g.add(t, so);
        let h = self.norm_cross.forward(g, p, t);
        let (_, cw) = self.cross_attn.forward_with_weights(g, p, h, context);
        (sw, cw)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down_res: Vec<ResBlock>,
    down_attn: Vec<SpatialAttention>,
    downsample: Vec<Conv2d>,
    mid_res1: ResBlock,
    mid_attn: SpatialAttention,
    mid_res2: ResBlock,
    up_res: Vec<ResBlock>,
    up_attn: Vec<SpatialAttention>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Noise estimate plus the output of every spatial-attention module.
pub struct UNetOutput {
    pub eps: Var,
    /// Index `i` holds module `i + 1`.
    pub taps: Vec<Var>,
}

impl UNet {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, config: UNetConfig) -> Self {
        let cfg = config.clone();
        let levels = cfg.multipliers.len();
        b.scoped("unet", |b| {
            let time1 = Linear::new(b, "time1", cfg.base_channels, cfg.time_dim, true);
            let time2 = Linear::new(b, "time2", cfg.time_dim, cfg.time_dim, true);
            let conv_in = Conv2d::new(b, "conv_in", cfg.in_channels, cfg.base_channels, 3, 1);
            let mut skip_ch = vec![cfg.base_channels];
            let (mut down_res, mut down_attn, mut downsample) = (Vec::new(), Vec::new(), Vec::new());
            let mut ch = cfg.base_channels;
            let mut index = 1;
            for level in 0..levels {
                let out = cfg.level_channels(level);
                for j in 0..2 {
                    down_res.push(ResBlock::new(b, &format!("down{level}.res{j}"), ch, out, &cfg));
                    down_attn.push(SpatialAttention::new(b, index, out, &cfg));
                    index += 1;
                    ch = out;
                    skip_ch.push(ch);
                }
                if level + 1 < levels {
                    downsample.push(Conv2d::new(b, &format!("down{level}.sample"), ch, ch, 3, 2));
                    skip_ch.push(ch);
                }
            }
            let mid_res1 = ResBlock::new(b, "mid.res1", ch, ch, &cfg);
            let mid_attn = SpatialAttention::new(b, index, ch, &cfg);
            index += 1;
            let mid_res2 = ResBlock::new(b, "mid.res2", ch, ch, &cfg);
            let (mut up_res, mut up_attn, mut upsample) = (Vec::new(), Vec::new(), Vec::new());
            for level in (0..levels).rev() {
                let out = cfg.level_channels(level);
                for j in 0..3 {
                    let skip = skip_ch.pop().expect("skip stack matches decoder");
                    up_res.push(ResBlock::new(b, &format!("up{level}.res{j}"), ch + skip, out, &cfg));
                    up_attn.push(SpatialAttention::new(b, index, out, &cfg));
                    index += 1;
                    ch = out;
                }
                if level > 0 {
                    upsample.push(Conv2d::new(b, &format!("up{level}.sample"), ch, ch, 3, 1));
                }
            }
            debug_assert!(skip_ch.is_empty());
            let norm_out = GroupNorm::new(b, "norm_out", cfg.groups.min(ch), ch);
            let conv_out = Conv2d::with_init(b, "conv_out", ch, cfg.in_channels, 3, Init::Zeros);
            UNet {
                config: cfg.clone(),
                time1,
                time2,
                conv_in,
                down_res,
                down_attn,
                downsample,
                mid_res1,
                mid_attn,
                mid_res2,
                up_res,
                up_attn,
                upsample,
                norm_out,
                conv_out,
            }
        })
    }

    /// Module placement derived from the built layers.
    pub fn topology(&self) -> Vec<ModuleInfo> {
        let levels = self.config.multipliers.len();
        let mut out = Vec::new();
        for (k, _) in self.down_attn.iter().enumerate() {
            let level = k / 2;
            out.push(ModuleInfo { index: k + 1, level, channels: self.config.level_channels(level), stride: 1 << level });
        }
        let deepest = levels - 1;
        out.push(ModuleInfo {
            index: self.mid_attn.index,
            level: deepest,
            channels: self.config.level_channels(deepest),
            stride: 1 << deepest,
        });
        for (k, a) in self.up_attn.iter().enumerate() {
            let level = deepest - k / 3;
            out.push(ModuleInfo { index: a.index, level, channels: self.config.level_channels(level), stride: 1 << level });
        }
        out
    }

    pub fn attention_module(&self, index: usize) -> &SpatialAttention {
        let nd = self.down_attn.len();
        if index <= nd {
            &self.down_attn[index - 1]
        } else if index == nd + 1 {
            &self.mid_attn
        } else {
            &self.up_attn[index - nd - 2]
        }
    }

    pub fn time_embedding<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, timesteps: &[f64]) -> Var {
        let e = g.constant(sinusoidal_embedding(timesteps, self.config.base_channels));
        let e = g.silu(self.time1.forward(g, p, e));
        self.time2.forward(g, p, e)
    }

    /// `z: [n, c_in, h, w]`, `context: [n, L, context_dim]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &ParamStore<T>,
        z: Var,
        timesteps: &[f64],
        context: Var,
        hook: Option<&dyn BlockHook<T>>,
    ) -> UNetOutput {
        let (h, taps) = self.forward_features(g, p, z, timesteps, context, hook);
        UNetOutput { eps: self.conv_out.forward(g, p, h), taps }
    }

    /// Normalized final activations `[n, base, h, w]` (the input of the
    /// output convolution) and the module taps.
    pub fn forward_features<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &ParamStore<T>,
        z: Var,
        timesteps: &[f64],
        context: Var,
        hook: Option<&dyn BlockHook<T>>,
    ) -> (Var, Vec<Var>) {
        let temb = g.silu(self.time_embedding(g, p, timesteps));
        let mut taps = Vec::with_capacity(NUM_ATTENTION_MODULES);
        let mut h = self.conv_in.forward(g, p, z);
        let mut skips = vec![h];
        let levels = self.config.multipliers.len();
        for level in 0..levels {
            for j in 0..2 {
                let k = level * 2 + j;
                h = self.down_res[k].forward(g, p, h, temb);
                h = self.down_attn[k].forward(g, p, h, context, hook);
                taps.push(h);
                skips.push(h);
            }
            if level + 1 < levels {
                h = self.downsample[level].forward(g, p, h);
                skips.push(h);
            }
        }
        h = self.mid_res1.forward(g, p, h, temb);
        h = self.mid_attn.forward(g, p, h, context, hook);
        taps.push(h);
        h = self.mid_res2.forward(g, p, h, temb);
        for (li, level) in (0..levels).rev().enumerate() {
            for j in 0..3 {
                let k = li * 3 + j;
                let s = skips.pop().expect("skip per decoder block");
                let cat = g.concat(&[h, s], 1);
                h = self.up_res[k].forward(g, p, cat, temb);
                h = self.up_attn[k].forward(g, p, h, context, hook);
                taps.push(h);
            }
            if level > 0 {
                let u = g.upsample_nearest(h, 2);
                h = self.upsample[li].forward(g, p, u);
            }
        }
        (g.silu(self.norm_out.forward(g, p, h)), taps)
    }
}
