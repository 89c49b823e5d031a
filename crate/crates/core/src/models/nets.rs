//! The transforms of the hyperprior codec, the conditioning decoder and the
//! noise-predicting UNet.

use rand::Rng;

use super::config::CodecConfig;
use super::layers::{Attention, Builder, Conv, Dense, Norm};
use crate::error::{Error, Result};
use crate::grad::{timestep_embedding, ParamId, ParamStore, Tape, Var};
use crate::prob::SCALE_FLOOR;

/// Analysis, synthesis, hyper transforms and the factorized prior.
pub(crate) struct CodecNets {
    g_a: Vec<Conv>,
    g_s: Vec<Conv>,
    h_a: [Conv; 2],
    h_s: [Conv; 2],
    mu_head: Conv,
    sigma_head: Conv,
    prior_loc: ParamId,
    prior_scale: ParamId,
}

impl CodecNets {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, c: &CodecConfig) -> Result<Self> {
        let s = c.analysis_stages;
        let width = |i: usize, last: usize| if i == s - 1 { last } else { c.codec_filters };
        let mut g_a = Vec::with_capacity(s);
        let mut cin = c.image_channels;
        for i in 0..s {
            let cout = width(i, c.latent_channels);
            g_a.push(b.conv(&format!("g_a.{i}"), cin, cout, 5, 2, 1.0)?);
            cin = cout;
        }
        let (cy, cz) = (c.latent_channels, c.hyper_channels);
        let h_a = [
            b.conv("h_a.0", cy, cz, 3, 1, 1.0)?,
            b.conv("h_a.1", cz, cz, 3, 2, 1.0)?,
        ];
        let h_s = [b.up("h_s.0", cz, cz)?, b.conv("h_s.1", cz, cy, 3, 1, 1.0)?];
        let mu_head = b.conv("h_s.mu", cy, cy, 3, 1, 0.5)?;
        let sigma_head = b.conv("h_s.sigma", cy, cy, 3, 1, 0.5)?;
        let mut g_s = Vec::with_capacity(s);
        let mut cin = cy;
        for i in 0..s {
            let cout = width(i, c.image_channels);
            g_s.push(b.up(&format!("g_s.{i}"), cin, cout)?);
            cin = cout;
        }
        // softplus(0.55) + 0.11 is close to 1
        let prior_loc = b.vector("prior.loc", cz, 0.0)?;
        let prior_scale = b.vector("prior.scale_raw", cz, 0.55)?;
        Ok(Self {
            g_a,
            g_s,
            h_a,
            h_s,
            mu_head,
            sigma_head,
            prior_loc,
            prior_scale,
        })
    }

    fn chain(t: &Tape, s: &ParamStore, layers: &[Conv], mut x: Var) -> Result<Var> {
        for (i, l) in layers.iter().enumerate() {
            x = l.apply(t, s, x)?;
            if i + 1 < layers.len() {
                x = t.relu(x);
            }
        }
        Ok(x)
    }

    pub fn analyze(&self, t: &Tape, s: &ParamStore, x: Var) -> Result<Var> {
        Self::chain(t, s, &self.g_a, x)
    }

    pub fn synthesize(&self, t: &Tape, s: &ParamStore, y: Var) -> Result<Var> {
        Self::chain(t, s, &self.g_s, y)
    }

    pub fn hyper_analyze(&self, t: &Tape, s: &ParamStore, y: Var) -> Result<Var> {
        Self::chain(t, s, &self.h_a, y)
    }

    pub fn hyper_synthesize(&self, t: &Tape, s: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let h = t.relu(Self::chain(t, s, &self.h_s, z)?);
        let mu = self.mu_head.apply(t, s, h)?;
        let raw = self.sigma_head.apply(t, s, h)?;
        let sigma = t.add_scalar(t.softplus(raw), SCALE_FLOOR);
        Ok((mu, sigma))
    }

    pub fn prior(&self, t: &Tape, s: &ParamStore) -> (Var, Var) {
        let loc = t.param(s, self.prior_loc);
        let raw = t.param(s, self.prior_scale);
        (loc, t.add_scalar(t.softplus(raw), SCALE_FLOOR))
    }
}

struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn apply(&self, t: &Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let h = t.relu(self.a.apply(t, s, x)?);
        t.add(x, self.b.apply(t, s, h)?)
    }
}

/// Maps a quantized latent to full-resolution conditioning features.
pub(crate) struct CondDecoder {
    input: Conv,
    blocks: Vec<ResBlock>,
    ups: Vec<Conv>,
}

impl CondDecoder {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, c: &CodecConfig) -> Result<Self> {
        let f = c.cond_features;
        let input = b.conv("g_dec.in", c.latent_channels, f, 3, 1, 1.0)?;
        let mut blocks = Vec::new();
        let mut ups = Vec::new();
        for l in 0..c.cond_decoder_levels {
            blocks.push(ResBlock {
                a: b.conv(&format!("g_dec.{l}.a"), f, f, 3, 1, 1.0)?,
                b: b.conv(&format!("g_dec.{l}.b"), f, f, 3, 1, 0.5)?,
            });
            if l + 1 < c.cond_decoder_levels {
                ups.push(b.up(&format!("g_dec.{l}.up"), f, f)?);
            }
        }
        Ok(Self { input, blocks, ups })
    }

    pub fn apply(&self, t: &Tape, s: &ParamStore, y: Var) -> Result<Var> {
        let mut h = self.input.apply(t, s, y)?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.apply(t, s, h)?;
            if let Some(up) = self.ups.get(i) {
                h = t.relu(up.apply(t, s, h)?);
            }
        }
        Ok(h)
    }
}

struct UnetBlock {
    norm1: Norm,
    conv1: Conv,
    time: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    attention: Option<Attention>,
}

impl UnetBlock {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, cin: usize, cout: usize, temb: usize, attn: bool) -> Result<Self> {
        Ok(Self {
            norm1: b.norm(&format!("{name}.norm1"), cin)?,
            conv1: b.conv(&format!("{name}.conv1"), cin, cout, 3, 1, 1.0)?,
            time: b.dense(&format!("{name}.time"), temb, cout)?,
            norm2: b.norm(&format!("{name}.norm2"), cout)?,
            conv2: b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 0.5)?,
            skip: if cin == cout {
                None
            } else {
                Some(b.conv(&format!("{name}.skip"), cin, cout, 1, 1, 0.7)?)
            },
            attention: if attn {
                Some(b.attention(&format!("{name}.attn"), cout)?)
            } else {
                None
            },
        })
    }

    fn apply(&self, t: &Tape, s: &ParamStore, x: Var, temb: Var) -> Result<Var> {
        let h = t.silu(self.norm1.apply(t, s, x)?);
        let h = self.conv1.apply(t, s, h)?;
        let h = t.add_channel(h, self.time.apply(t, s, temb)?)?;
        let h = t.silu(self.norm2.apply(t, s, h)?);
        let h = self.conv2.apply(t, s, h)?;
        let skip = match &self.skip {
            Some(c) => c.apply(t, s, x)?,
            None => x,
        };
        let out = t.add(skip, h)?;
        match &self.attention {
            Some(a) => a.apply(t, s, out),
            None => Ok(out),
        }
    }
}

/// Noise predictor over the concatenation of the noisy image and the
/// conditioning features.
pub(crate) struct UNet {
    embed_dim: usize,
    input: Conv,
    time: [Dense; 2],
    down: Vec<Vec<UnetBlock>>,
    downsample: Vec<Conv>,
    mid: [UnetBlock; 2],
    up: Vec<Vec<UnetBlock>>,
    upsample: Vec<Conv>,
    norm_out: Norm,
    output: Conv,
}

impl UNet {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, c: &CodecConfig) -> Result<Self> {
        let levels = c.unet_levels;
        let ch = |l: usize| c.unet_channels(l);
        let (embed_dim, temb) = (c.base_filters, c.time_embed_dim());
        let input = b.conv("unet.in", c.image_channels + c.cond_features, ch(1), 3, 1, 1.0)?;
        let time = [b.dense("unet.time.0", embed_dim, temb)?, b.dense("unet.time.1", temb, temb)?];
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cin = ch(1);
        for l in 1..=levels {
            let mut blocks = Vec::new();
            for k in 0..c.unet_blocks_per_level {
                let name = format!("unet.down.{l}.{k}");
                blocks.push(UnetBlock::new(b, &name, cin, ch(l), temb, c.has_attention(l))?);
                cin = ch(l);
            }
            down.push(blocks);
            if l < levels {
                downsample.push(b.conv(&format!("unet.down.{l}.pool"), cin, cin, 3, 2, 1.0)?);
            }
        }
        let bottleneck = c.has_attention(levels);
        let mid = [
            UnetBlock::new(b, "unet.mid.0", cin, cin, temb, bottleneck)?,
            UnetBlock::new(b, "unet.mid.1", cin, cin, temb, false)?,
        ];
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for l in (1..=levels).rev() {
            let mut blocks = Vec::new();
            for k in 0..c.unet_blocks_per_level {
                let name = format!("unet.up.{l}.{k}");
                blocks.push(UnetBlock::new(b, &name, cin + ch(l), ch(l), temb, c.has_attention(l))?);
                cin = ch(l);
            }
            up.push(blocks);
            if l > 1 {
                upsample.push(b.up(&format!("unet.up.{l}.unpool"), cin, ch(l - 1))?);
                cin = ch(l - 1);
            }
        }
        Ok(Self {
            embed_dim,
            input,
            time,
            down,
            downsample,
            mid,
            up,
            upsample,
            norm_out: b.norm("unet.out.norm", cin)?,
            output: b.conv("unet.out", cin, c.image_channels, 3, 1, 0.1)?,
        })
    }

    /// Predicts the noise in `x_n: [B, C, H, W]` given features `[B, F, H, W]`.
    pub fn apply(&self, t: &Tape, s: &ParamStore, x_n: Var, features: Var, n: usize) -> Result<Var> {
        let batch = t.shape(x_n)[0];
        let e = timestep_embedding(n, self.embed_dim)?;
        let e = crate::tensor::Tensor::from_fn(&[batch, self.embed_dim], |i| e.data()[i % self.embed_dim]);
        let temb = t.silu(self.time[0].apply(t, s, t.constant(e))?);
        let temb = t.silu(self.time[1].apply(t, s, temb)?);

        let mut h = self.input.apply(t, s, t.concat_channels(x_n, features)?)?;
        let mut skips = Vec::new();
        for (l, blocks) in self.down.iter().enumerate() {
            for block in blocks {
                h = block.apply(t, s, h, temb)?;
                skips.push(h);
            }
            if let Some(pool) = self.downsample.get(l) {
                h = pool.apply(t, s, h)?;
            }
        }
        for block in &self.mid {
            h = block.apply(t, s, h, temb)?;
        }
        for (l, blocks) in self.up.iter().enumerate() {
            for block in blocks {
                let skip = skips.pop().ok_or_else(|| Error::Config("unbalanced UNet skips".into()))?;
                h = block.apply(t, s, t.concat_channels(h, skip)?, temb)?;
            }
            if let Some(unpool) = self.upsample.get(l) {
                h = unpool.apply(t, s, h)?;
            }
        }
        let h = t.silu(self.norm_out.apply(t, s, h)?);
        self.output.apply(t, s, h)
    }
}
