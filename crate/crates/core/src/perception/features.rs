use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::tensor::Tensor;

/// A fixed network whose intermediate activations define perceptual distances
/// and whose pooled output defines patch embeddings.
pub trait FeatureExtractor {
    /// Feature maps of a `[B, C, H, W]` input, shallowest first.
    fn feature_maps(&self, tape: &Tape, x: Var) -> Result<Vec<Var>>;

    /// Fixed-length embedding of one `[C, H, W]` image.
    fn embed(&self, x: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let v = tape.constant(x.unsqueeze0());
        let maps = self.feature_maps(&tape, v)?;
        let last = maps.last().ok_or_else(|| Error::Config("extractor produced no feature maps".into()))?;
        let t = tape.value(*last);
        let (_, c, h, w) = match *t.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::shape("embed", format!("feature map {:?} is not rank 4", t.shape()))),
        };
        let hw = h * w;
        Ok((0..c)
            .map(|ch| t.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect())
    }
}

pub const STANDARD_EXTRACTOR_SEED: u64 = 0x5eed_f00d;

pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];

/// Untrained stride-2 convolution stack with seeded He-normal weights.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    seed: u64,
    in_channels: usize,
    layers: Vec<(Tensor, Tensor)>,
}

impl RandomConvExtractor {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = in_channels;
        let layers = FEATURE_CHANNELS
            .iter()
            .map(|&cout| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::randn(&[cout, cin, 3, 3], &mut rng).scale(std);
                cin = cout;
                (w, Tensor::zeros(&[cout]))
            })
            .collect();
        Self {
            seed,
            in_channels,
            layers,
        }
    }

    /// The extractor used by diffusion training and by evaluation.
    pub fn standard(in_channels: usize) -> Self {
        Self::new(in_channels, STANDARD_EXTRACTOR_SEED)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn feature_maps(&self, tape: &Tape, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
            h = tape.relu(tape.conv2d(h, wv, bv, 2, 1)?);
            out.push(h);
        }
        Ok(out)
    }
}

/// Differentiable perceptual distance between two `[B, C, H, W]` batches.
///
/// Each layer's maps are normalized to unit length along channels; the layer
/// score is the spatial mean of the channel-summed squared difference, and
/// the result averages the layer scores.
pub fn perceptual_distance(tape: &Tape, x: Var, x_hat: Var, ext: &dyn FeatureExtractor) -> Result<Var> {
    let fa = ext.feature_maps(tape, x)?;
    let fb = ext.feature_maps(tape, x_hat)?;
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(Error::Config("extractor returned mismatched layer lists".into()));
    }
    let layers = fa.len() as f64;
    let mut total: Option<Var> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let channels = tape.shape(a)[1] as f64;
        let d = tape.mse(tape.unit_normalize_channels(a)?, tape.unit_normalize_channels(b)?)?;
        let d = tape.scale(d, channels / layers);
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Value-only [`perceptual_distance`] for a pair of `[C, H, W]` images.
pub fn perceptual_distance_value(x: &Tensor, x_hat: &Tensor, ext: &dyn FeatureExtractor) -> Result<f64> {
    x.check_same_shape("perceptual_distance", x_hat)?;
    let tape = Tape::inference();
    let (a, b) = (tape.constant(x.unsqueeze0()), tape.constant(x_hat.unsqueeze0()));
    let d = perceptual_distance(&tape, a, b, ext)?;
    let v = tape.value(d).item();
    Ok(v)
}
