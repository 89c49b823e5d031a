use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean squared error over all elements.
pub fn mse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    x.check_same_shape("mse", x_hat)?;
    Ok(x.data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` flags identical inputs.
pub fn psnr(x: &Tensor, x_hat: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::range("peak", peak, "> 0"));
    }
    Ok(psnr_from_mse(mse(x, x_hat)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// GMSD constant for intensities in `[0, 1]`.
pub const GMSD_C: f64 = 0.0026;

/// `[C, H, W]` with one or three channels to a single luma plane.
pub fn luma(x: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = x.dims3("luma")?;
    let plane = h * w;
    let d = x.data();
    match c {
        1 => Ok((d.to_vec(), h, w)),
        3 => Ok((
            (0..plane)
                .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
                .collect(),
            h,
            w,
        )),
        _ => Err(Error::shape("luma", format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// Prewitt gradient magnitude over the valid `(H-2) x (W-2)` interior.
fn prewitt_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| p[y * w + x];
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (at(y - 1, x - 1) + at(y, x - 1) + at(y + 1, x - 1)
                - at(y - 1, x + 1)
                - at(y, x + 1)
                - at(y + 1, x + 1))
                / 3.0;
            let gy = (at(y - 1, x - 1) + at(y - 1, x) + at(y - 1, x + 1)
                - at(y + 1, x - 1)
                - at(y + 1, x)
                - at(y + 1, x + 1))
                / 3.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Gradient magnitude similarity deviation: the standard deviation of the
/// pointwise gradient-magnitude similarity map.
pub fn gmsd(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    x.check_same_shape("gmsd", x_hat)?;
    let (a, h, w) = luma(x)?;
    let (b, _, _) = luma(x_hat)?;
    if h < 3 || w < 3 {
        return Err(Error::shape("gmsd", format!("image {h}x{w} smaller than 3x3")));
    }
    let (ma, mb) = (prewitt_magnitude(&a, h, w), prewitt_magnitude(&b, h, w));
    let map: Vec<f64> = ma
        .iter()
        .zip(&mb)
        .map(|(&m1, &m2)| (2.0 * m1 * m2 + GMSD_C) / (m1 * m1 + m2 * m2 + GMSD_C))
        .collect();
    let n = map.len() as f64;
    let mean = map.iter().sum::<f64>() / n;
    Ok((map.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_reference_values() {
        let a = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Tensor::ones(&[1, 2, 2]);
        assert!((psnr(&a, &b, 255.0).unwrap() - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
        assert!(psnr(&a, &Tensor::ones(&[1, 4]), 1.0).is_err());
    }

    #[test]
    fn gmsd_reference_cases() {
        let x = Tensor::from_fn(&[3, 5, 6], |i| ((i * 37) % 11) as f64 / 10.0);
        let y = Tensor::from_fn(&[3, 5, 6], |i| ((i * 13) % 7) as f64 / 6.0);
        assert_eq!(gmsd(&x, &x).unwrap(), 0.0);
        assert_eq!(gmsd(&x, &y).unwrap(), gmsd(&y, &x).unwrap());
        assert!(gmsd(&x, &y).unwrap() > 0.0);
        let g1 = Tensor::full(&[1, 4, 4], 0.3);
        let g2 = Tensor::full(&[1, 4, 4], 0.8);
        assert_eq!(gmsd(&g1, &g2).unwrap(), 0.0);
        assert!(gmsd(&Tensor::zeros(&[1, 2, 5]), &Tensor::zeros(&[1, 2, 5])).is_err());
    }
}
