use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoidal embedding of a diffusion step index.
///
/// The first `dim / 2` entries are `sin(n * f_i)` and the rest `cos(n * f_i)`,
/// with frequencies `f_i` spaced geometrically from 1 down to 1/10000.
pub fn timestep_embedding(n: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::range("embedding dim", dim, "positive even"));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let arg = n as f64 * 10000f64.powf(-frac);
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::new(vec![dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_is_sin0_cos0() {
        let e = timestep_embedding(0, 8).unwrap();
        assert!(e.data()[..4].iter().all(|&v| v == 0.0));
        assert!(e.data()[4..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn neighbouring_steps_differ() {
        let a = timestep_embedding(1, 16).unwrap();
        let b = timestep_embedding(2, 16).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
        assert_eq!(a, timestep_embedding(1, 16).unwrap());
    }

    #[test]
    fn frequencies_span_one_to_ten_thousandth() {
        let e = timestep_embedding(1, 6).unwrap();
        assert!((e.data()[0] - 1f64.sin()).abs() < 1e-15);
        assert!((e.data()[2] - 1e-4f64.sin()).abs() < 1e-15);
        assert!(timestep_embedding(3, 5).is_err());
    }
}
