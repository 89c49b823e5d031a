//! Reverse-process samplers over a strided step subsequence.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::Config(format!("unknown sampler {other:?} (expected ddpm or ddim)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// DDIM stochasticity; ignored by DDPM.
    pub eta: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn ddim(steps: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps,
            eta: 0.0,
            seed,
        }
    }

    pub fn ddpm(steps: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            steps,
            eta: 0.0,
            seed,
        }
    }

    fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > s.len() {
            return Err(Error::range("sampler steps", self.steps, format!("[1, {}]", s.len())));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::range("eta", self.eta, "[0, 1]"));
        }
        Ok(())
    }

    fn draws_noise(&self) -> bool {
        self.kind == SamplerKind::Ddpm || self.eta > 0.0
    }
}

/// `tau_i = round(i * N / K)` for `i = 1..=K`.
pub fn step_subsequence(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::range("subsequence length", k, format!("[1, {n}]")));
    }
    // round-half-up of i*N/K in exact integer arithmetic
    Ok((1..=k).map(|i| (2 * i * n + k) / (2 * k)).collect())
}

/// One DDIM update from `n_cur` to `n_prev` (`n_prev = 0` is the clean image).
pub fn ddim_step(
    s: &NoiseSchedule,
    xn: &Tensor,
    eps_hat: &Tensor,
    n_cur: usize,
    n_prev: usize,
    eta: f64,
    z: &Tensor,
) -> Result<Tensor> {
    if n_prev >= n_cur {
        return Err(Error::range("previous step", n_prev, format!("< {n_cur}")));
    }
    let (ab, ab_prev) = (s.alpha_bar(n_cur)?, s.alpha_bar(n_prev)?);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let mut dir2 = 1.0 - ab_prev - sigma * sigma;
    if dir2 < 0.0 {
        if dir2 < -1e-12 {
            return Err(Error::range("ddim sigma^2", sigma * sigma, format!("<= {}", 1.0 - ab_prev)));
        }
        dir2 = 0.0;
    }
    let x0 = s.predict_x0(xn, eps_hat, n_cur)?;
    let (a, d) = (ab_prev.sqrt(), dir2.sqrt());
    let mean = x0.zip_map(eps_hat, |x, e| a * x + d * e)?;
    if sigma == 0.0 {
        return Ok(mean);
    }
    mean.zip_map(z, |m, zi| m + sigma * zi)
}

/// Ancestral step from `n_cur` to `n_prev` with the respaced
/// `beta' = 1 - abar_cur / abar_prev` and posterior variance.
pub fn ddpm_step_between(
    s: &NoiseSchedule,
    xn: &Tensor,
    eps_hat: &Tensor,
    n_cur: usize,
    n_prev: usize,
    z: &Tensor,
) -> Result<Tensor> {
    if n_prev >= n_cur {
        return Err(Error::range("previous step", n_prev, format!("< {n_cur}")));
    }
    let (ab, ab_prev) = (s.alpha_bar(n_cur)?, s.alpha_bar(n_prev)?);
    let beta = 1.0 - ab / ab_prev;
    let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
    if var == 0.0 && z.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Config("final reverse step must be noiseless (z = 0)".into()));
    }
    let (c, k) = (1.0 / (1.0 - beta).sqrt(), beta / (1.0 - ab).sqrt());
    let sd = var.sqrt();
    let mean = xn.zip_map(eps_hat, |x, e| c * (x - k * e))?;
    if sd == 0.0 {
        return Ok(mean);
    }
    mean.zip_map(z, |m, zi| m + sd * zi)
}

/// Single-index ancestral step `n -> n - 1`.
pub fn ddpm_step(s: &NoiseSchedule, xn: &Tensor, eps_hat: &Tensor, n: usize, z: &Tensor) -> Result<Tensor> {
    s.beta(n)?;
    ddpm_step_between(s, xn, eps_hat, n, n - 1, z)
}

/// Runs the reverse chain and clamps the result to `[0, 1]`.
pub fn sample(
    denoiser: &dyn Denoiser,
    y: &Tensor,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
    shape: &[usize],
) -> Result<Tensor> {
    Ok(sample_raw(denoiser, y, cfg, s, shape, |_, _| {})?.clamp(0.0, 1.0))
}

/// Runs the reverse chain without the final clamp, calling `observe(n, x)`
/// after each update with the step index just reached.
pub fn sample_raw(
    denoiser: &dyn Denoiser,
    y: &Tensor,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
    shape: &[usize],
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    cfg.validate(s)?;
    let taus = step_subsequence(s.len(), cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::randn(shape, &mut rng);
    for i in (0..taus.len()).rev() {
        let n_cur = taus[i];
        let n_prev = if i == 0 { 0 } else { taus[i - 1] };
        let eps_hat = denoiser.predict_noise(&x, y, n_cur)?;
        if eps_hat.shape() != shape {
            return Err(Error::shape(
                "sample",
                format!("denoiser returned {:?}, state is {:?}", eps_hat.shape(), shape),
            ));
        }
        let z = if n_prev > 0 && cfg.draws_noise() {
            Tensor::randn(shape, &mut rng)
        } else {
            Tensor::zeros(shape)
        };
        x = match cfg.kind {
            SamplerKind::Ddim => ddim_step(s, &x, &eps_hat, n_cur, n_prev, cfg.eta, &z)?,
            SamplerKind::Ddpm => ddpm_step_between(s, &x, &eps_hat, n_cur, n_prev, &z)?,
        };
        observe(n_prev, &x);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand() -> NoiseSchedule {
        NoiseSchedule::linear(4, 0.1, 0.4).unwrap()
    }

    #[test]
    fn subsequences() {
        assert_eq!(
            step_subsequence(1000, 10).unwrap(),
            (1..=10).map(|i| i * 100).collect::<Vec<_>>()
        );
        assert_eq!(step_subsequence(7, 7).unwrap(), (1..=7).collect::<Vec<_>>());
        assert_eq!(step_subsequence(10, 2).unwrap(), vec![5, 10]);
        assert!(step_subsequence(10, 11).is_err());
        assert!(step_subsequence(10, 0).is_err());
    }

    #[test]
    fn ddpm_hand_values() {
        let s = hand();
        let one = Tensor::ones(&[1]);
        let zero = Tensor::zeros(&[1]);
        let v = ddpm_step(&s, &one, &one, 2, &zero).unwrap().item();
        let want = (1.0 / 0.8f64.sqrt()) * (1.0 - 0.2 / 0.28f64.sqrt());
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.69538).abs() < 1e-4);
        let r = ddpm_step(&s, &Tensor::full(&[1], 2.0), &zero, 3, &zero).unwrap().item();
        assert!((r - 2.0 / 0.7f64.sqrt()).abs() < 1e-15);
        assert!(ddpm_step(&s, &one, &one, 1, &one).is_err());
        assert!(ddpm_step(&s, &one, &one, 1, &zero).is_ok());
    }

    #[test]
    fn ddim_eta_one_single_step_matches_ddpm() {
        let s = hand();
        let x = Tensor::from_fn(&[3], |i| 0.3 * i as f64 - 0.2);
        let e = Tensor::from_fn(&[3], |i| 1.0 - 0.7 * i as f64);
        let z = Tensor::from_fn(&[3], |i| (i as f64).cos());
        for n in 2..=4 {
            let a = ddim_step(&s, &x, &e, n, n - 1, 1.0, &z).unwrap();
            let b = ddpm_step(&s, &x, &e, n, &z).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn ddim_oracle_step_reaches_x0() {
        let s = hand();
        let x0 = Tensor::from_fn(&[4], |i| 0.25 * i as f64);
        let eps = Tensor::from_fn(&[4], |i| (i as f64 * 1.3).sin());
        let xn = s.forward_sample(&x0, 4, &eps).unwrap();
        let zero = Tensor::zeros(&[4]);
        let back = ddim_step(&s, &xn, &eps, 4, 0, 0.0, &zero).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-12);
        let mid = ddim_step(&s, &xn, &eps, 4, 2, 0.0, &zero).unwrap();
        assert!(mid.max_abs_diff(&s.forward_sample(&x0, 2, &eps).unwrap()).unwrap() < 1e-12);
    }
}
