//! Entropy coding of quantized latent tensors laid out as `[C, H, W]`.

use super::cdf::{CdfTable, DEFAULT_PRECISION};
use super::pmf::{gaussian_pmf_on, logistic_pmf_on};
use super::range_coder::{range_decode, range_encode};
use crate::error::{Error, Result};

/// Half-width of a symbol's support in units of the channel's largest scale.
pub const SUPPORT_SCALES: f64 = 16.0;

/// Global bound on the magnitude of any coded symbol.
pub const SYMBOL_LIMIT: i32 = 255;

fn support(centre: f64, spread: f64) -> (i32, i32) {
    let lim = SYMBOL_LIMIT as f64;
    let lo = (centre - SUPPORT_SCALES * spread).floor().clamp(-lim, lim) as i32;
    let hi = (centre + SUPPORT_SCALES * spread).ceil().clamp(-lim, lim) as i32;
    (lo, hi)
}

fn check_layout(op: &'static str, n: usize, channels: usize, others: &[usize]) -> Result<usize> {
    if channels == 0 || n % channels != 0 || others.iter().any(|&m| m != n) {
        return Err(Error::shape(
            op,
            format!("{n} symbols over {channels} channels with parameter lengths {others:?}"),
        ));
    }
    Ok(n / channels)
}

/// Per-symbol supports for a Gaussian-conditioned latent: centred on each
/// mean, with width set by the largest scale in that symbol's channel.
pub fn gaussian_supports(mu: &[f64], sigma: &[f64], channels: usize) -> Result<Vec<(i32, i32)>> {
    let per = check_layout("gaussian_supports", mu.len(), channels, &[sigma.len()])?;
    let mut out = Vec::with_capacity(mu.len());
    for c in 0..channels {
        let range = c * per..(c + 1) * per;
        let smax = sigma[range.clone()].iter().copied().fold(0.0, f64::max);
        out.extend(mu[range].iter().map(|&m| support(m, smax)));
    }
    Ok(out)
}

/// Rounds and clamps latent values into their coding supports.
pub fn clamp_to_supports(values: &[f64], supports: &[(i32, i32)]) -> Vec<i32> {
    values
        .iter()
        .zip(supports)
        .map(|(&v, &(lo, hi))| (v.round() as i64).clamp(lo as i64, hi as i64) as i32)
        .collect()
}

fn gaussian_tables(mu: &[f64], sigma: &[f64], supports: &[(i32, i32)]) -> Result<Vec<CdfTable>> {
    mu.iter()
        .zip(sigma)
        .zip(supports)
        .map(|((&m, &s), &(lo, hi))| CdfTable::from_pmf(lo, &gaussian_pmf_on(m, s, lo, hi), DEFAULT_PRECISION))
        .collect()
}

pub fn encode_gaussian(symbols: &[i32], mu: &[f64], sigma: &[f64], channels: usize) -> Result<Vec<u8>> {
    check_layout("encode_gaussian", symbols.len(), channels, &[mu.len(), sigma.len()])?;
    let supports = gaussian_supports(mu, sigma, channels)?;
    let tables = gaussian_tables(mu, sigma, &supports)?;
    range_encode(symbols, &tables.iter().collect::<Vec<_>>())
}

pub fn decode_gaussian(bytes: &[u8], mu: &[f64], sigma: &[f64], channels: usize) -> Result<Vec<i32>> {
    check_layout("decode_gaussian", mu.len(), channels, &[sigma.len()])?;
    let supports = gaussian_supports(mu, sigma, channels)?;
    let tables = gaussian_tables(mu, sigma, &supports)?;
    range_decode(bytes, &tables.iter().collect::<Vec<_>>())
}

/// Quantized cross-entropy of `symbols` under the tables the coder would use.
pub fn gaussian_table_bits(symbols: &[i32], mu: &[f64], sigma: &[f64], channels: usize) -> Result<f64> {
    check_layout("gaussian_table_bits", symbols.len(), channels, &[mu.len(), sigma.len()])?;
    let supports = gaussian_supports(mu, sigma, channels)?;
    let tables = gaussian_tables(mu, sigma, &supports)?;
    symbols
        .iter()
        .zip(&tables)
        .map(|(&s, t)| {
            t.bits(s).ok_or(Error::SymbolOutOfSupport {
                symbol: s,
                lo: t.lo(),
                hi: t.hi(),
            })
        })
        .sum()
}

/// Per-channel supports for the factorized hyper-latent prior.
pub fn logistic_supports(loc: &[f64], scale: &[f64]) -> Vec<(i32, i32)> {
    loc.iter().zip(scale).map(|(&l, &s)| support(l, s)).collect()
}

fn logistic_tables(loc: &[f64], scale: &[f64]) -> Result<Vec<CdfTable>> {
    loc.iter()
        .zip(scale)
        .zip(logistic_supports(loc, scale))
        .map(|((&l, &s), (lo, hi))| CdfTable::from_pmf(lo, &logistic_pmf_on(l, s, lo, hi), DEFAULT_PRECISION))
        .collect()
}

pub fn encode_factorized(symbols: &[i32], channels: usize, loc: &[f64], scale: &[f64]) -> Result<Vec<u8>> {
    let per = check_layout("encode_factorized", symbols.len(), channels, &[])?;
    check_layout("encode_factorized", channels, channels, &[loc.len(), scale.len()])?;
    let tables = logistic_tables(loc, scale)?;
    let refs: Vec<&CdfTable> = (0..symbols.len()).map(|i| &tables[i / per]).collect();
    range_encode(symbols, &refs)
}

pub fn decode_factorized(bytes: &[u8], count: usize, channels: usize, loc: &[f64], scale: &[f64]) -> Result<Vec<i32>> {
    let per = check_layout("decode_factorized", count, channels, &[])?;
    check_layout("decode_factorized", channels, channels, &[loc.len(), scale.len()])?;
    let tables = logistic_tables(loc, scale)?;
    let refs: Vec<&CdfTable> = (0..count).map(|i| &tables[i / per]).collect();
    range_decode(bytes, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn supports_follow_channel_max_scale() {
        let mu = [0.2, 3.0, -1.0, 0.0];
        let sigma = [0.5, 1.0, 0.2, 0.2];
        let s = gaussian_supports(&mu, &sigma, 2).unwrap();
        assert_eq!(s[0], (-16, 17));
        assert_eq!(s[1], (-13, 19));
        assert_eq!(s[2], (-5, 3));
        let wide = gaussian_supports(&[0.0], &[100.0], 1).unwrap();
        assert_eq!(wide[0], (-255, 255));
        assert_eq!(clamp_to_supports(&[40.0, -0.5], &[(-16, 17), (-3, 3)]), vec![17, -1]);
    }

    #[test]
    fn factorized_roundtrip() {
        let z: Vec<i32> = (0..24).map(|i| (i % 5) - 2).collect();
        let loc = [0.0, 0.5, -0.3];
        let scale = [1.0, 0.7, 2.0];
        let bytes = encode_factorized(&z, 3, &loc, &scale).unwrap();
        assert_eq!(decode_factorized(&bytes, 24, 3, &loc, &scale).unwrap(), z);
    }
}
