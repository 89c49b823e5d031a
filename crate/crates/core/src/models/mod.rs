//! The hyperprior codec with its two decoders.

mod config;
pub mod file;
mod layers;
mod nets;

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{config_hash, lambda_for_qp, CodecConfig, Preset};

use crate::diffusion::{Denoiser, NoiseSchedule, ScheduleConfig};
use crate::entropy::latent::{
    clamp_to_supports, decode_factorized, decode_gaussian, encode_factorized, encode_gaussian, gaussian_supports,
    logistic_supports,
};
use crate::entropy::{Bitstream, Header};
use crate::error::{Error, Result};
use crate::grad::{ParamStore, Tape, Var};
use crate::samplers::{sample, SamplerConfig};
use crate::tensor::Tensor;
use layers::Builder;
use nets::{CodecNets, CondDecoder, UNet};

/// How continuous latents become integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantization {
    /// Nearest integer, ties away from zero.
    Round,
    /// Additive `U[-0.5, 0.5)` noise, the training-time proxy.
    Noise,
}

pub fn quantize<R: Rng + ?Sized>(y: &Tensor, mode: Quantization, rng: &mut R) -> Tensor {
    match mode {
        Quantization::Round => y.map(f64::round),
        Quantization::Noise => {
            let u = Tensor::uniform(y.shape(), -0.5, 0.5, rng);
            y.add(&u).expect("same shape")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoder {
    Standard,
    Diffusion(SamplerConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Standard,
    Diffusion,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Standard => "standard",
            DecoderKind::Diffusion => "diffusion",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(DecoderKind::Standard),
            "diffusion" => Ok(DecoderKind::Diffusion),
            other => Err(Error::Config(format!(
                "unknown decoder {other:?} (expected standard or diffusion)"
            ))),
        }
    }
}

/// Result of compressing one image.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bitstream: Bitstream,
    /// Quantized latent `[C_y, h, w]`, as the decoder will reconstruct it.
    pub y_hat: Tensor,
}

/// Entropy parameters of the main latent, flattened in `[C_y, h, w]` order.
#[derive(Clone, Debug)]
pub struct LatentParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub struct CodecModel {
    config: CodecConfig,
    schedule_config: ScheduleConfig,
    schedule: NoiseSchedule,
    qp: u8,
    params: ParamStore,
    codec: CodecNets,
    cond: CondDecoder,
    unet: UNet,
}

impl fmt::Debug for CodecModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CodecModel")
            .field("config", &self.config)
            .field("schedule", &self.schedule_config)
            .field("qp", &self.qp)
            .field("params", &self.params.numel())
            .finish()
    }
}

impl CodecModel {
    /// Builds a model with freshly initialized weights.
    pub fn new(config: CodecConfig, schedule_config: ScheduleConfig, qp: u8, seed: u64) -> Result<Self> {
        config.validate()?;
        lambda_for_qp(qp)?;
        let schedule = schedule_config.build()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
        };
        let codec = CodecNets::new(&mut b, &config)?;
        let cond = CondDecoder::new(&mut b, &config)?;
        let unet = UNet::new(&mut b, &config)?;
        Ok(Self {
            config,
            schedule_config,
            schedule,
            qp,
            params,
            codec,
            cond,
            unet,
        })
    }

    pub fn preset(preset: Preset, qp: u8, seed: u64) -> Result<Self> {
        let schedule = match preset {
            Preset::Desk => ScheduleConfig::DESK,
            Preset::Paper => ScheduleConfig::PAPER,
        };
        Self::new(CodecConfig::for_preset(preset), schedule, qp, seed)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn schedule_config(&self) -> &ScheduleConfig {
        &self.schedule_config
    }

    pub fn qp(&self) -> u8 {
        self.qp
    }

    pub fn lambda(&self) -> f64 {
        lambda_for_qp(self.qp).expect("qp validated at construction")
    }

    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config, &self.schedule_config)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    // -----------------------------------------------------------------
    // differentiable pieces, all on `[B, C, H, W]` batches

    pub fn analyze(&self, t: &Tape, x: Var) -> Result<Var> {
        self.codec.analyze(t, &self.params, x)
    }

    pub fn hyper_analyze(&self, t: &Tape, y: Var) -> Result<Var> {
        self.codec.hyper_analyze(t, &self.params, y)
    }

    /// `(mu, sigma)` of the main latent, with `sigma >= 0.11`.
    pub fn hyper_synthesize(&self, t: &Tape, z_hat: Var) -> Result<(Var, Var)> {
        self.codec.hyper_synthesize(t, &self.params, z_hat)
    }

    /// Per-channel `(loc, scale)` of the factorized hyper-latent prior.
    pub fn prior(&self, t: &Tape) -> (Var, Var) {
        self.codec.prior(t, &self.params)
    }

    /// Low-distortion reconstruction, unclamped.
    pub fn synthesize(&self, t: &Tape, y_hat: Var) -> Result<Var> {
        self.codec.synthesize(t, &self.params, y_hat)
    }

    /// Full-resolution conditioning features `[B, F, H, W]`.
    pub fn condition_features(&self, t: &Tape, y_hat: Var) -> Result<Var> {
        self.cond.apply(t, &self.params, y_hat)
    }

    /// Predicted noise for `x_n` at step `n` given conditioning features.
    pub fn denoise(&self, t: &Tape, x_n: Var, features: Var, n: usize) -> Result<Var> {
        self.schedule.beta(n)?;
        self.unet.apply(t, &self.params, x_n, features, n)
    }

    // -----------------------------------------------------------------
    // single images, `[C, H, W]`

    fn check_image(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = x.dims3("image")?;
        if c != self.config.image_channels {
            return Err(Error::shape(
                "image",
                format!("{c} channels, model expects {}", self.config.image_channels),
            ));
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "image",
                format!("{w}x{h} is not a positive multiple of {m} in both dimensions"),
            ));
        }
        if h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(Error::shape("image", format!("{w}x{h} exceeds 65535")));
        }
        Ok((h, w))
    }

    fn run1(&self, x: &Tensor, f: impl FnOnce(&Tape, Var) -> Result<Var>) -> Result<Tensor> {
        let t = Tape::inference();
        let v = t.constant(x.unsqueeze0());
        let out = f(&t, v)?;
        let out = t.value(out).squeeze0()?;
        Ok(out)
    }

    /// Continuous latent `[C_y, H/f, W/f]` of an image.
    pub fn analyze_image(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        self.run1(x, |t, v| self.analyze(t, v))
    }

    /// Entropy parameters of the main latent given a quantized hyper-latent.
    pub fn latent_params(&self, z_hat: &Tensor) -> Result<LatentParams> {
        let t = Tape::inference();
        let (mu, sigma) = self.hyper_synthesize(&t, t.constant(z_hat.unsqueeze0()))?;
        let out = LatentParams {
            mu: t.value(mu).data().to_vec(),
            sigma: t.value(sigma).data().to_vec(),
        };
        Ok(out)
    }

    fn prior_values(&self) -> (Vec<f64>, Vec<f64>) {
        let t = Tape::inference();
        let (loc, scale) = self.prior(&t);
        let out = (t.value(loc).data().to_vec(), t.value(scale).data().to_vec());
        out
    }

    /// Quantizes the hyper-latent of `y` and returns it with the resulting
    /// entropy parameters.
    pub fn hyper_roundtrip(&self, y: &Tensor) -> Result<(Tensor, LatentParams)> {
        let z = self.run1(y, |t, v| self.hyper_analyze(t, v))?;
        let (loc, scale) = self.prior_values();
        let per = z.len() / self.config.hyper_channels;
        let supports: Vec<_> = logistic_supports(&loc, &scale)
            .into_iter()
            .flat_map(|s| std::iter::repeat_n(s, per))
            .collect();
        let sym = clamp_to_supports(z.data(), &supports);
        let z_hat = Tensor::new(z.shape().to_vec(), sym.iter().map(|&s| s as f64).collect())?;
        let params = self.latent_params(&z_hat)?;
        Ok((z_hat, params))
    }

    pub fn encode(&self, x: &Tensor) -> Result<Encoded> {
        let (h, w) = self.check_image(x)?;
        let y = self.run1(x, |t, v| self.analyze(t, v))?;
        let (z_hat, p) = self.hyper_roundtrip(&y)?;
        let (loc, scale) = self.prior_values();
        let cz = self.config.hyper_channels;
        let z_sym: Vec<i32> = z_hat.data().iter().map(|&v| v as i32).collect();
        let hyper = encode_factorized(&z_sym, cz, &loc, &scale)?;
        let cy = self.config.latent_channels;
        let supports = gaussian_supports(&p.mu, &p.sigma, cy)?;
        let y_sym = clamp_to_supports(y.data(), &supports);
        let main = encode_gaussian(&y_sym, &p.mu, &p.sigma, cy)?;
        let y_hat = Tensor::new(y.shape().to_vec(), y_sym.iter().map(|&s| s as f64).collect())?;
        let header = Header {
            qp: self.qp,
            width: w as u16,
            height: h as u16,
            image_channels: self.config.image_channels as u8,
            latent_channels: cy as u16,
            hyper_channels: cz as u16,
        };
        Ok(Encoded {
            bitstream: Bitstream { header, hyper, main },
            y_hat,
        })
    }

    fn check_header(&self, h: &Header) -> Result<()> {
        let c = &self.config;
        let mismatch = |what: &str, file: usize, model: usize| {
            Error::ConfigMismatch(format!("{what}: bitstream has {file}, model has {model}"))
        };
        if h.qp != self.qp {
            return Err(mismatch("qp", h.qp as usize, self.qp as usize));
        }
        if h.image_channels as usize != c.image_channels {
            return Err(mismatch("image channels", h.image_channels as usize, c.image_channels));
        }
        if h.latent_channels as usize != c.latent_channels {
            return Err(mismatch("latent channels", h.latent_channels as usize, c.latent_channels));
        }
        if h.hyper_channels as usize != c.hyper_channels {
            return Err(mismatch("hyper channels", h.hyper_channels as usize, c.hyper_channels));
        }
        let m = c.size_multiple();
        if h.width == 0 || h.height == 0 || h.width as usize % m != 0 || h.height as usize % m != 0 {
            return Err(Error::Format(format!(
                "image size {}x{} is not a multiple of {m}",
                h.width, h.height
            )));
        }
        Ok(())
    }

    /// Entropy-decodes the quantized latent `[C_y, h, w]`.
    pub fn decode_latent(&self, bs: &Bitstream) -> Result<Tensor> {
        let hd = &bs.header;
        self.check_header(hd)?;
        let f = self.config.latent_factor();
        let (h, w) = (hd.height as usize / f, hd.width as usize / f);
        let (cy, cz) = (self.config.latent_channels, self.config.hyper_channels);
        let (loc, scale) = self.prior_values();
        let z_sym = decode_factorized(&bs.hyper, cz * (h / 2) * (w / 2), cz, &loc, &scale)?;
        let z_hat = Tensor::new(vec![cz, h / 2, w / 2], z_sym.iter().map(|&s| s as f64).collect())?;
        let p = self.latent_params(&z_hat)?;
        let y_sym = decode_gaussian(&bs.main, &p.mu, &p.sigma, cy)?;
        Tensor::new(vec![cy, h, w], y_sym.iter().map(|&s| s as f64).collect())
    }

    /// Standard reconstruction of a quantized latent, clamped to `[0, 1]`.
    pub fn synthesize_image(&self, y_hat: &Tensor) -> Result<Tensor> {
        Ok(self.run1(y_hat, |t, v| self.synthesize(t, v))?.clamp(0.0, 1.0))
    }

    /// Diffusion reconstruction of a quantized latent, clamped to `[0, 1]`.
    pub fn sample_image(&self, y_hat: &Tensor, sampler: &SamplerConfig) -> Result<Tensor> {
        let (_, h, w) = y_hat.dims3("latent")?;
        let f = self.config.latent_factor();
        let shape = [self.config.image_channels, h * f, w * f];
        sample(&self.denoiser(), y_hat, sampler, &self.schedule, &shape)
    }

    pub fn reconstruct(&self, y_hat: &Tensor, decoder: &Decoder) -> Result<Tensor> {
        match decoder {
            Decoder::Standard => self.synthesize_image(y_hat),
            Decoder::Diffusion(s) => self.sample_image(y_hat, s),
        }
    }

    pub fn decode(&self, bs: &Bitstream, decoder: &Decoder) -> Result<Tensor> {
        let y_hat = self.decode_latent(bs)?;
        self.reconstruct(&y_hat, decoder)
    }

    /// Noise predictor for `[C, H, W]` states conditioned on `y_hat`,
    /// caching the conditioning features of the last latent seen.
    pub fn denoiser(&self) -> ConditionalDenoiser<'_> {
        ConditionalDenoiser {
            model: self,
            cache: RefCell::new(None),
        }
    }
}

pub struct ConditionalDenoiser<'a> {
    model: &'a CodecModel,
    cache: RefCell<Option<(Tensor, Tensor)>>,
}

impl Denoiser for ConditionalDenoiser<'_> {
    fn predict_noise(&self, x_n: &Tensor, y: &Tensor, n: usize) -> Result<Tensor> {
        let mut cache = self.cache.borrow_mut();
        let hit = matches!(&*cache, Some((cy, _)) if cy == y);
        if !hit {
            let feats = self.model.run1(y, |t, v| self.model.condition_features(t, v))?;
            *cache = Some((y.clone(), feats));
        }
        let feats = &cache.as_ref().expect("filled above").1;
        let t = Tape::inference();
        let x = t.constant(x_n.unsqueeze0());
        let f = t.constant(feats.unsqueeze0());
        let out = self.model.denoise(&t, x, f, n)?;
        let out = t.value(out).squeeze0()?;
        Ok(out)
    }
}
