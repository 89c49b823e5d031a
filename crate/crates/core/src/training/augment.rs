use rand::Rng;

use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rescales by a factor drawn from `[1, min(H, W) / out]` and takes a
/// uniformly placed `out x out` crop.
pub fn random_crop_rescale<R: Rng + ?Sized>(image: &Tensor, out: usize, rng: &mut R) -> Result<Tensor> {
    let (c, h, w) = image.dims3("random_crop_rescale")?;
    if out == 0 || h < out || w < out {
        return Err(Error::shape(
            "random_crop_rescale",
            format!("{w}x{h} image is smaller than the {out}x{out} crop"),
        ));
    }
    let max_scale = h.min(w) as f64 / out as f64;
    let scale = rng.random_range(1.0..=max_scale);
    let (nh, nw) = (
        ((h as f64 / scale).round() as usize).max(out),
        ((w as f64 / scale).round() as usize).max(out),
    );
    let resized;
    let src = if (nh, nw) == (h, w) {
        image
    } else {
        resized = resize_bilinear(image, nh, nw)?;
        &resized
    };
    let oy = rng.random_range(0..=nh - out);
    let ox = rng.random_range(0..=nw - out);
    let d = src.data();
    let mut crop = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        for y in 0..out {
            let row = ch * nh * nw + (oy + y) * nw + ox;
            crop.extend_from_slice(&d[row..row + out]);
        }
    }
    Tensor::new(vec![c, out, out], crop)
}
