use rand::Rng;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grad::{ParamStore, Tape, Var};
use crate::models::CodecModel;
use crate::perception::{perceptual_distance, FeatureExtractor};
use crate::tensor::Tensor;

/// Parameter prefixes of the standard codec, frozen during diffusion training.
pub const CODEC_PREFIXES: [&str; 5] = ["g_a.", "h_a.", "h_s.", "g_s.", "prior."];

/// Parameter prefixes of the diffusion decoder.
pub const DIFFUSION_PREFIXES: [&str; 2] = ["g_dec.", "unet."];

pub(crate) fn has_prefix(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

/// Errors if any standard-codec parameter is still trainable.
pub fn check_codec_frozen(params: &ParamStore) -> Result<()> {
    match params
        .iter()
        .find(|(_, p)| p.trainable && has_prefix(&p.name, &CODEC_PREFIXES))
    {
        Some((_, p)) => Err(Error::TrainableFrozen(p.name.clone())),
        None => Ok(()),
    }
}

/// One example's rate-distortion objective.
#[derive(Clone, Copy, Debug)]
pub struct RdTerms {
    pub loss: Var,
    pub distortion: f64,
    pub bpp: f64,
    /// `lambda * bpp`, the rate part of `loss`.
    pub rate_term: f64,
}

/// `mse(x_hat, x) + lambda * bits / pixels`.
pub fn rd_objective(t: &Tape, x: Var, x_hat: Var, bits: Var, pixels: usize, lambda: f64) -> Result<RdTerms> {
    let distortion = t.mse(x_hat, x)?;
    let bpp = t.scale(bits, 1.0 / pixels as f64);
    let loss = t.add(distortion, t.scale(bpp, lambda))?;
    let (d, b) = (t.value(distortion).item(), t.value(bpp).item());
    Ok(RdTerms {
        loss,
        distortion: d,
        bpp: b,
        rate_term: lambda * b,
    })
}

/// Rate-distortion loss of a `[B, C, H, W]` batch with noise-relaxed latents.
pub fn rd_loss<R: Rng + ?Sized>(model: &CodecModel, t: &Tape, x: Var, lambda: f64, rng: &mut R) -> Result<RdTerms> {
    let shape = t.shape(x);
    let pixels = shape[0] * shape[2] * shape[3];
    let y = model.analyze(t, x)?;
    let z = model.hyper_analyze(t, y)?;
    let y_noisy = t.add(y, t.constant(Tensor::uniform(&t.shape(y), -0.5, 0.5, rng)))?;
    let z_noisy = t.add(z, t.constant(Tensor::uniform(&t.shape(z), -0.5, 0.5, rng)))?;
    let (mu, sigma) = model.hyper_synthesize(t, z_noisy)?;
    let (loc, scale) = model.prior(t);
    let bits = t.add(t.gaussian_bits(y_noisy, mu, sigma)?, t.logistic_bits(z_noisy, loc, scale)?)?;
    let x_hat = model.synthesize(t, y_noisy)?;
    rd_objective(t, x, x_hat, bits, pixels, lambda)
}

#[derive(Clone, Copy, Debug)]
pub struct DiffusionTerms {
    pub loss: Var,
    pub l_simple: f64,
    pub perceptual: f64,
    pub n: usize,
}

/// `mse(eps_hat, eps) + weight * perceptual(x0, x0_hat)` where `x0_hat` is
/// recovered from `x_n` and `eps_hat`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_objective(
    t: &Tape,
    s: &NoiseSchedule,
    x0: &Tensor,
    x_n: &Tensor,
    eps: &Tensor,
    eps_hat: Var,
    n: usize,
    weight: f64,
    ext: &dyn FeatureExtractor,
) -> Result<DiffusionTerms> {
    let l_simple = t.mse(eps_hat, t.constant(eps.clone()))?;
    let (c0, c1) = s.x0_coefficients(n)?;
    let x0_hat = t.add(t.scale(eps_hat, -c1), t.constant(x_n.scale(c0)))?;
    let perceptual = perceptual_distance(t, t.constant(x0.clone()), x0_hat, ext)?;
    let loss = t.add(l_simple, t.scale(perceptual, weight))?;
    let (l, p) = (t.value(l_simple).item(), t.value(perceptual).item());
    Ok(DiffusionTerms {
        loss,
        l_simple: l,
        perceptual: p,
        n,
    })
}

/// Diffusion-decoder loss of a `[B, C, H, W]` batch at one random step,
/// conditioned on the rounded latent of the frozen analysis transform.
pub fn diffusion_loss<R: Rng + ?Sized>(
    model: &CodecModel,
    t: &Tape,
    x0: &Tensor,
    weight: f64,
    ext: &dyn FeatureExtractor,
    rng: &mut R,
) -> Result<DiffusionTerms> {
    check_codec_frozen(model.params())?;
    let y_hat = {
        let off = Tape::inference();
        let y = model.analyze(&off, off.constant(x0.clone()))?;
        let r = off.value(y).map(f64::round);
        r
    };
    let s = model.schedule();
    let n = rng.random_range(1..=s.len());
    let eps = Tensor::randn(x0.shape(), rng);
    let x_n = s.forward_sample(x0, n, &eps)?;
    let feats = model.condition_features(t, t.constant(y_hat))?;
    let eps_hat = model.denoise(t, t.constant(x_n.clone()), feats, n)?;
    diffusion_objective(t, s, x0, &x_n, &eps, eps_hat, n, weight, ext)
}
