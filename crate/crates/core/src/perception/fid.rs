use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Non-overlapping `patch x patch` crops of a `[C, H, W]` image in row-major
/// grid order; partial patches at the right and bottom are dropped.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = image.dims3("patchify")?;
    if patch == 0 || patch > h.min(w) {
        return Err(Error::range("patch size", patch, format!("[1, {}]", h.min(w))));
    }
    let mut out = Vec::with_capacity((h / patch) * (w / patch));
    for py in 0..h / patch {
        for px in 0..w / patch {
            out.push(Tensor::from_fn(&[c, patch, patch], |i| {
                let (ch, r) = (i / (patch * patch), i % (patch * patch));
                let (y, x) = (py * patch + r / patch, px * patch + r % patch);
                image.data()[(ch * h + y) * w + x]
            }));
        }
    }
    Ok(out)
}

fn gaussian_fit(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(Error::range("feature set size", set.len(), ">= 2"));
    }
    let d = set[0].len();
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::shape("fid_proxy", "feature vectors differ in length"));
    }
    let n = set.len() as f64;
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

/// Square root of a symmetric PSD matrix with negative eigenvalues clipped.
fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid_proxy(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(a)?;
    let (mu_b, cov_b) = gaussian_fit(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::shape(
            "fid_proxy",
            format!("feature dims {} vs {}", mu_a.len(), mu_b.len()),
        ));
    }
    let root_a = psd_sqrt(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner
        .symmetric_eigenvalues()
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}
