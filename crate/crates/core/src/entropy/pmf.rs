use crate::error::{Error, Result};
use crate::prob::{self, normal_cdf, sigmoid, SCALE_FLOOR};

/// Mass of integer `k` under `N(mu, sigma^2)` discretized to unit bins.
pub fn discretized_gaussian_pmf(mu: f64, sigma: f64, k: i32) -> Result<f64> {
    if !(sigma >= SCALE_FLOOR) {
        return Err(Error::range("sigma", sigma, format!(">= {SCALE_FLOOR}")));
    }
    Ok(prob::gaussian_bin(k as f64, mu, sigma).0)
}

/// Mass of integer `k` under a logistic with location `loc` and scale `s`,
/// discretized to unit bins.
pub fn discretized_logistic_pmf(loc: f64, s: f64, k: i32) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::range("logistic scale", s, "> 0"));
    }
    Ok(prob::logistic_bin(k as f64, loc, s).0)
}

/// Gaussian pmf over `lo..=hi` with the tails folded into the edge symbols,
/// so the result sums to one.
pub fn gaussian_pmf_on(mu: f64, sigma: f64, lo: i32, hi: i32) -> Vec<f64> {
    clipped_pmf(lo, hi, |k| prob::gaussian_bin(k as f64, mu, sigma).0, |x| {
        normal_cdf((x - mu) / sigma)
    })
}

/// Logistic analogue of [`gaussian_pmf_on`].
pub fn logistic_pmf_on(loc: f64, s: f64, lo: i32, hi: i32) -> Vec<f64> {
    clipped_pmf(lo, hi, |k| prob::logistic_bin(k as f64, loc, s).0, |x| {
        sigmoid((x - loc) / s)
    })
}

fn clipped_pmf(lo: i32, hi: i32, bin: impl Fn(i32) -> f64, cdf: impl Fn(f64) -> f64) -> Vec<f64> {
    if lo == hi {
        return vec![1.0];
    }
    let mut p: Vec<f64> = (lo..=hi).map(bin).collect();
    p[0] = cdf(lo as f64 + 0.5);
    let last = p.len() - 1;
    p[last] = 1.0 - cdf(hi as f64 - 0.5);
    p
}

/// `sum -log2 pmf` of integer symbols under elementwise Gaussians.
pub fn estimate_rate_bits(symbols: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if symbols.len() != mu.len() || symbols.len() != sigma.len() {
        return Err(Error::shape(
            "estimate_rate_bits",
            format!("{} symbols, {} means, {} scales", symbols.len(), mu.len(), sigma.len()),
        ));
    }
    Ok(symbols
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&y, &m), &s)| prob::bits_of(prob::gaussian_bin(y, m, s).0).0)
        .sum())
}

/// `sum -log2 pmf` of `[C, H, W]` symbols under per-channel logistics.
pub fn estimate_rate_bits_factorized(symbols: &[f64], channels: usize, loc: &[f64], scale: &[f64]) -> Result<f64> {
    if channels == 0 || symbols.len() % channels != 0 || loc.len() != channels || scale.len() != channels {
        return Err(Error::shape(
            "estimate_rate_bits_factorized",
            format!("{} symbols over {channels} channels, {} locations, {} scales", symbols.len(), loc.len(), scale.len()),
        ));
    }
    let per = symbols.len() / channels;
    Ok(symbols
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let c = i / per;
            prob::bits_of(prob::logistic_bin(z, loc[c], scale[c]).0).0
        })
        .sum())
}
