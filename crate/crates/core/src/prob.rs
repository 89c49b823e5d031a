//! Scalar probability helpers shared by the differentiable rate terms and
//! the entropy coder's table construction.

use std::f64::consts::{LN_2, SQRT_2};

/// Smallest likelihood used when converting probabilities to bits.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Lower bound applied to every scale parameter of the latent models.
pub const SCALE_FLOOR: f64 = 0.11;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF, computed from `erfc` so lower-tail values keep
/// relative precision.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Mass of the unit-width bin centred on `y` under `N(mu, sigma^2)`, with its
/// partial derivatives `(d/dy, d/dmu, d/dsigma)`.
///
/// The mass is evaluated on the lower tail (`|y - mu|` folded) so that bins
/// far from the mean keep their relative accuracy.
pub fn gaussian_bin(y: f64, mu: f64, sigma: f64) -> (f64, [f64; 3]) {
    let v = (y - mu).abs();
    let p = normal_cdf((0.5 - v) / sigma) - normal_cdf((-0.5 - v) / sigma);
    let u = (y + 0.5 - mu) / sigma;
    let l = (y - 0.5 - mu) / sigma;
    let (pu, pl) = (normal_pdf(u), normal_pdf(l));
    let dy = (pu - pl) / sigma;
    let ds = -(pu * u - pl * l) / sigma;
    (p, [dy, -dy, ds])
}

/// Logistic analogue of [`gaussian_bin`] with location `loc` and scale `s`.
pub fn logistic_bin(z: f64, loc: f64, s: f64) -> (f64, [f64; 3]) {
    let v = (z - loc).abs();
    let p = sigmoid((0.5 - v) / s) - sigmoid((-0.5 - v) / s);
    let u = (z + 0.5 - loc) / s;
    let l = (z - 0.5 - loc) / s;
    let du = sigmoid(u) * (1.0 - sigmoid(u));
    let dl = sigmoid(l) * (1.0 - sigmoid(l));
    let dz = (du - dl) / s;
    let ds = -(du * u - dl * l) / s;
    (p, [dz, -dz, ds])
}

/// `-log2(max(p, floor))` and its derivative with respect to `p`.
pub fn bits_of(p: f64) -> (f64, f64) {
    if p > LIKELIHOOD_FLOOR {
        (-p.log2(), -1.0 / (p * LN_2))
    } else {
        (-LIKELIHOOD_FLOOR.log2(), 0.0)
    }
}
