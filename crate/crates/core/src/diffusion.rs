//! Variance schedules, the forward corruption process and the noise
//! prediction loss.
//!
//! Step indices are 1-based: `n` ranges over `1..=N` and `alpha_bar(0)` is 1.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that predicts the noise component of `x_n` given conditioning `y`.
pub trait Denoiser {
    fn predict_noise(&self, x_n: &Tensor, y: &Tensor, n: usize) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &Tensor, usize) -> Result<Tensor>,
{
    fn predict_noise(&self, x_n: &Tensor, y: &Tensor, n: usize) -> Result<Tensor> {
        self(x_n, y, n)
    }
}

/// Parameters from which a [`NoiseSchedule`] is rebuilt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub const DESK: Self = Self {
        steps: 100,
        beta_start: 1e-4,
        beta_end: 0.05,
    };

    pub const PAPER: Self = Self {
        steps: 1000,
        beta_start: 1e-4,
        beta_end: 0.02,
    };

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::range("schedule steps", steps, ">= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::range(
                "beta range",
                format!("[{beta_start}, {beta_end}]"),
                "0 < start <= end < 1",
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// The horizon `N`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.len() {
            return Err(Error::range("diffusion step", n, format!("[1, {}]", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, n: usize) -> Result<f64> {
        self.check(n)?;
        Ok(self.betas[n - 1])
    }

    /// Cumulative product of `1 - beta` up to `n`; 1 at `n = 0`.
    pub fn alpha_bar(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Ok(1.0);
        }
        self.check(n)?;
        Ok(self.alpha_bar[n - 1])
    }

    /// Posterior variance `(1 - abar_{n-1}) / (1 - abar_n) * beta_n`.
    pub fn posterior_variance(&self, n: usize) -> Result<f64> {
        let (ab, ab_prev) = (self.alpha_bar(n)?, self.alpha_bar(n - 1)?);
        Ok((1.0 - ab_prev) / (1.0 - ab) * self.betas[n - 1])
    }

    /// `sqrt(abar_n) x0 + sqrt(1 - abar_n) eps`.
    pub fn forward_sample(&self, x0: &Tensor, n: usize, eps: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(n)?;
        self.check(n)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// Inverts [`forward_sample`](Self::forward_sample) for a predicted noise.
    pub fn predict_x0(&self, xn: &Tensor, eps_hat: &Tensor, n: usize) -> Result<Tensor> {
        self.check(n)?;
        let (a, b) = self.x0_coefficients(n)?;
        xn.zip_map(eps_hat, |x, e| a * x - b * e)
    }

    /// `(1 / sqrt(abar_n), sqrt(1 - abar_n) / sqrt(abar_n))`, so that
    /// `x0 = c0 * x_n - c1 * eps`.
    pub fn x0_coefficients(&self, n: usize) -> Result<(f64, f64)> {
        self.check(n)?;
        let ab = self.alpha_bar[n - 1];
        Ok((1.0 / ab.sqrt(), (1.0 - ab).sqrt() / ab.sqrt()))
    }

    /// Mean squared error between `eps` and the denoiser's prediction at the
    /// corrupted input `x_n(x0)`.
    pub fn l_simple(&self, denoiser: &dyn Denoiser, x0: &Tensor, y: &Tensor, n: usize, eps: &Tensor) -> Result<f64> {
        let xn = self.forward_sample(x0, n, eps)?;
        let pred = denoiser.predict_noise(&xn, y, n)?;
        let d = pred.sub(eps)?;
        Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand() -> NoiseSchedule {
        NoiseSchedule::linear(4, 0.1, 0.4).unwrap()
    }

    #[test]
    fn hand_schedule() {
        let s = hand();
        let want_b = [0.1, 0.2, 0.3, 0.4];
        let want_ab = [0.9, 0.72, 0.504, 0.3024];
        for i in 0..4 {
            assert!((s.betas()[i] - want_b[i]).abs() < 1e-15);
            assert!((s.alpha_bars()[i] - want_ab[i]).abs() < 1e-15);
        }
        assert_eq!(s.posterior_variance(1).unwrap(), 0.0);
    }

    #[test]
    fn single_step_and_thousand_step_default() {
        let s = NoiseSchedule::linear(1, 0.3, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.3]);
        assert!((s.alpha_bar(1).unwrap() - 0.7).abs() < 1e-15);
        let p = ScheduleConfig::PAPER.build().unwrap();
        assert!((p.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_and_inverse_by_hand() {
        let s = hand();
        let one = Tensor::ones(&[1]);
        let xn = s.forward_sample(&one, 2, &one).unwrap().item();
        assert!((xn - 1.37768).abs() < 1e-5);
        let x0 = s.predict_x0(&Tensor::full(&[1], 1.37768), &one, 2).unwrap().item();
        assert!((x0 - 1.0).abs() < 1e-5);
        assert!(s.forward_sample(&one, 0, &one).is_err());
        assert!(s.forward_sample(&one, 5, &one).is_err());
        assert!(s.predict_x0(&one, &one, 5).is_err());
    }

    #[test]
    fn zero_noise_and_zero_signal() {
        let s = hand();
        let x = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let z = Tensor::zeros(&[4]);
        let ab: f64 = 0.504;
        assert_eq!(s.forward_sample(&x, 3, &z).unwrap(), x.scale(ab.sqrt()));
        assert_eq!(s.forward_sample(&z, 3, &x).unwrap(), x.scale((1.0 - ab).sqrt()));
        assert_eq!(s.predict_x0(&x, &z, 3).unwrap(), x.scale(1.0 / ab.sqrt()));
    }

    #[test]
    fn l_simple_reference_values() {
        let s = hand();
        let x0 = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1);
        let eps = Tensor::ones(&[2, 3]);
        let y = Tensor::zeros(&[1]);
        let zero = |x: &Tensor, _: &Tensor, _: usize| Ok(Tensor::zeros(x.shape()));
        assert_eq!(s.l_simple(&zero, &x0, &y, 2, &eps).unwrap(), 1.0);
        let e2 = eps.clone();
        let oracle = move |_: &Tensor, _: &Tensor, _: usize| Ok(e2.clone());
        assert_eq!(s.l_simple(&oracle, &x0, &y, 2, &eps).unwrap(), 0.0);
        let e3 = eps.clone();
        let off = move |_: &Tensor, _: &Tensor, _: usize| Ok(e3.map(|v| v + 0.3));
        assert!((s.l_simple(&off, &x0, &y, 2, &eps).unwrap() - 0.09).abs() < 1e-15);
    }
}
