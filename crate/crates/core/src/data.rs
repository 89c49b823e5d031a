//! Seeded synthetic images: smooth backgrounds with Gaussian blobs,
//! oriented sinusoid textures and filled polygons.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn colour<R: Rng>(rng: &mut R, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.random::<f64>()).collect()
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// One `[channels, size, size]` image in `[0, 1]`.
pub fn synthetic_image<R: Rng>(channels: usize, size: usize, rng: &mut R) -> Tensor {
    let s = size as f64;
    let plane = size * size;
    let mut img = vec![0.0; channels * plane];

    // linear gradient between two colours
    let (c0, c1) = (colour(rng, channels), colour(rng, channels));
    let theta = rng.random::<f64>() * 2.0 * PI;
    let (gx, gy) = (theta.cos(), theta.sin());
    for yy in 0..size {
        for xx in 0..size {
            let t = 0.5 + 0.5 * ((xx as f64 / s - 0.5) * gx + (yy as f64 / s - 0.5) * gy) * std::f64::consts::SQRT_2;
            for c in 0..channels {
                img[c * plane + yy * size + xx] = c0[c] + (c1[c] - c0[c]) * t;
            }
        }
    }

    for _ in 0..rng.random_range(1..=3) {
        let (cx, cy) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
        let sd = s * rng.random_range(0.05..0.25);
        let amp: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.6..0.6)).collect();
        for yy in 0..size {
            for xx in 0..size {
                let r2 = (xx as f64 - cx).powi(2) + (yy as f64 - cy).powi(2);
                let g = (-r2 / (2.0 * sd * sd)).exp();
                for c in 0..channels {
                    img[c * plane + yy * size + xx] += amp[c] * g;
                }
            }
        }
    }

    // a textured disc
    let (cx, cy) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
    let radius = s * rng.random_range(0.2..0.5);
    let period = rng.random_range(3.0..10.0);
    let phi = rng.random::<f64>() * PI;
    let (kx, ky) = (phi.cos() * 2.0 * PI / period, phi.sin() * 2.0 * PI / period);
    let amp: Vec<f64> = (0..channels).map(|_| rng.random_range(0.1..0.35)).collect();
    for yy in 0..size {
        for xx in 0..size {
            let (dx, dy) = (xx as f64 - cx, yy as f64 - cy);
            if dx * dx + dy * dy < radius * radius {
                let wave = (kx * xx as f64 + ky * yy as f64).sin();
                for c in 0..channels {
                    img[c * plane + yy * size + xx] += amp[c] * wave;
                }
            }
        }
    }

    for _ in 0..rng.random_range(1..=2) {
        let (cx, cy) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
        let sides = rng.random_range(3..=6);
        let r = s * rng.random_range(0.1..0.3);
        let start = rng.random::<f64>() * 2.0 * PI;
        let poly: Vec<(f64, f64)> = (0..sides)
            .map(|k| {
                let a = start + 2.0 * PI * k as f64 / sides as f64;
                let rr = r * rng.random_range(0.6..1.0);
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        let fill = colour(rng, channels);
        for yy in 0..size {
            for xx in 0..size {
                if inside(&poly, xx as f64 + 0.5, yy as f64 + 0.5) {
                    for c in 0..channels {
                        img[c * plane + yy * size + xx] = fill[c];
                    }
                }
            }
        }
    }

    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![channels, size, size], img).expect("sized above")
}

/// `count` images from one seeded stream.
pub fn synthetic_set(count: usize, channels: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    if size == 0 || channels == 0 {
        return Err(Error::Config("synthetic images need positive size and channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| synthetic_image(channels, size, &mut rng)).collect())
}

/// Bilinear resize of a `[C, H, W]` image with half-pixel centres.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3("resize_bilinear")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("resize_bilinear", format!("{h}x{w} -> {out_h}x{out_w}")));
    }
    let src = |len: usize, out: usize, i: usize| {
        let p = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(len - 1), p - i0 as f64)
    };
    let d = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..out_h {
            let (y0, y1, fy) = src(h, out_h, oy);
            for ox in 0..out_w {
                let (x0, x1, fx) = src(w, out_w, ox);
                let top = d[base + y0 * w + x0] * (1.0 - fx) + d[base + y0 * w + x1] * fx;
                let bot = d[base + y1 * w + x0] * (1.0 - fx) + d[base + y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
