//! Discretized likelihoods, rate estimates, quantized tables, the range
//! coder and the `.dpc` container.

pub mod bitstream;
mod cdf;
pub mod latent;
mod pmf;
mod range_coder;

pub use bitstream::{Bitstream, Header};
pub use cdf::{CdfTable, DEFAULT_PRECISION};
pub use pmf::{
    discretized_gaussian_pmf, discretized_logistic_pmf, estimate_rate_bits, estimate_rate_bits_factorized,
    gaussian_pmf_on, logistic_pmf_on,
};
pub use range_coder::{range_decode, range_encode, RangeDecoder, RangeEncoder};
