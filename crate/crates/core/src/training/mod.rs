//! Two-phase optimization: the rate-distortion codec first, then the
//! diffusion decoder on top of the frozen codec.

mod adam;
mod augment;
mod losses;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use augment::random_crop_rescale;
pub use losses::{
    check_codec_frozen, diffusion_loss, diffusion_objective, rd_loss, rd_objective, DiffusionTerms, RdTerms,
    CODEC_PREFIXES, DIFFUSION_PREFIXES,
};

use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::models::{lambda_for_qp, CodecModel};
use crate::perception::RandomConvExtractor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Base,
    Diffusion,
}

impl Phase {
    /// Names of the two reported loss components.
    pub fn term_names(self) -> [&'static str; 2] {
        match self {
            Phase::Base => ["distortion", "rate_bpp"],
            Phase::Diffusion => ["l_simple", "perceptual"],
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Base => "base",
            Phase::Diffusion => "diffusion",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Phase::Base),
            "diffusion" => Ok(Phase::Diffusion),
            other => Err(Error::Config(format!("unknown phase {other:?} (expected base or diffusion)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Rate weight; only the base phase uses it.
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub qp: u8,
    /// Weight of the perceptual term in the diffusion loss.
    pub perceptual_weight: f64,
    /// Checkpoint interval in steps; 0 means only at the end.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn desk(phase: Phase, qp: u8) -> Result<Self> {
        let (learning_rate, steps) = match phase {
            Phase::Base => (1e-3, 5000),
            Phase::Diffusion => (5e-4, 20000),
        };
        Ok(Self {
            phase,
            lambda: lambda_for_qp(qp)?,
            learning_rate,
            steps,
            batch_size: 16,
            crop_size: 32,
            seed: 0,
            qp,
            perceptual_weight: 1.0,
            checkpoint_every: 0,
        })
    }

    pub fn validate(&self, model: &CodecModel) -> Result<()> {
        if self.phase == Phase::Base && !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::range("lambda", self.lambda, "(0, inf)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::range("learning_rate", self.learning_rate, "(0, inf)"));
        }
        if self.batch_size == 0 {
            return Err(Error::range("batch_size", self.batch_size, ">= 1"));
        }
        let m = model.config().size_multiple();
        if self.crop_size == 0 || self.crop_size % m != 0 {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of {m}",
                self.crop_size
            )));
        }
        if self.qp != model.qp() {
            return Err(Error::Config(format!(
                "training qp {} does not match the model's qp {}",
                self.qp,
                model.qp()
            )));
        }
        if !(self.perceptual_weight >= 0.0 && self.perceptual_weight.is_finite()) {
            return Err(Error::range("perceptual_weight", self.perceptual_weight, "[0, inf)"));
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "phase" => self.phase = value.parse()?,
            "lambda" => self.lambda = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "crop_size" => self.crop_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "qp" => self.qp = parse(key, value)?,
            "perceptual_weight" => self.perceptual_weight = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }
}

/// Batch-mean losses after one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    /// `[distortion, rate_bpp]` or `[l_simple, perceptual]`.
    pub terms: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub phase: Phase,
    pub records: Vec<StepRecord>,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let [a, b] = self.phase.term_names();
        let mut out = format!("step,total,{a},{b}\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.terms[0], r.terms[1]));
        }
        out
    }

    fn window(&self, first: bool, len: usize, f: impl Fn(&StepRecord) -> f64) -> Option<f64> {
        let n = self.records.len();
        if n == 0 {
            return None;
        }
        let len = len.min(n);
        let slice = if first {
            &self.records[..len]
        } else {
            &self.records[n - len..]
        };
        Some(slice.iter().map(f).sum::<f64>() / len as f64)
    }

    /// Mean total loss over the first `len` steps.
    pub fn head_mean(&self, len: usize) -> Option<f64> {
        self.window(true, len, |r| r.total)
    }

    /// Mean total loss over the last `len` steps.
    pub fn tail_mean(&self, len: usize) -> Option<f64> {
        self.window(false, len, |r| r.total)
    }

    /// Mean of one loss component over the last `len` steps.
    pub fn tail_term_mean(&self, term: usize, len: usize) -> Option<f64> {
        self.window(false, len, |r| r.terms[term])
    }
}

/// Marks parameters trainable for `phase`: the codec in the base phase, the
/// conditioning decoder and UNet in the diffusion phase.
pub fn set_phase_trainable(model: &mut CodecModel, phase: Phase) {
    let base = phase == Phase::Base;
    for p in CODEC_PREFIXES {
        model.params_mut().set_trainable_prefix(p, base);
    }
    for p in DIFFUSION_PREFIXES {
        model.params_mut().set_trainable_prefix(p, !base);
    }
}

fn check_finite(model: &CodecModel, what: &str, values: &[(&str, f64)]) -> Result<()> {
    if let Some((name, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: {name}")));
    }
    for (_, p) in model.params().iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("{what}: gradient of {}", p.name)));
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite(format!("{what}: parameter {}", p.name)));
        }
    }
    Ok(())
}

/// Runs `cfg.steps` Adam steps on random crops of `data`, calling
/// `on_step` after each one.
pub fn train(
    model: &mut CodecModel,
    data: &[Tensor],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &CodecModel) -> Result<()>,
) -> Result<Trace> {
    cfg.validate(model)?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    set_phase_trainable(model, cfg.phase);
    let ext = RandomConvExtractor::standard(model.config().image_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.steps);
    let inv = 1.0 / cfg.batch_size as f64;
    for step in 1..=cfg.steps {
        model.params_mut().zero_grads();
        let mut sums = [0.0; 3];
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            let crop = random_crop_rescale(&data[idx], cfg.crop_size, &mut rng)?.unsqueeze0();
            let t = Tape::new();
            let (loss, a, b) = match cfg.phase {
                Phase::Base => {
                    let r = rd_loss(model, &t, t.constant(crop), cfg.lambda, &mut rng)?;
                    (r.loss, r.distortion, r.bpp)
                }
                Phase::Diffusion => {
                    let r = diffusion_loss(model, &t, &crop, cfg.perceptual_weight, &ext, &mut rng)?;
                    (r.loss, r.l_simple, r.perceptual)
                }
            };
            let total = t.value(loss).item();
            let [na, nb] = cfg.phase.term_names();
            if let Some((name, _)) = [("total loss", total), (na, a), (nb, b)].iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite(format!("step {step}, image {idx}: {name}")));
            }
            let grads = t.backward(loss)?;
            model.params_mut().accumulate(&grads, inv)?;
            sums[0] += total;
            sums[1] += a;
            sums[2] += b;
        }
        check_finite(model, &format!("step {step}"), &[])?;
        opt.step(model.params_mut());
        let rec = StepRecord {
            step,
            total: sums[0] * inv,
            terms: [sums[1] * inv, sums[2] * inv],
        };
        records.push(rec);
        on_step(&rec, model)?;
    }
    Ok(Trace {
        phase: cfg.phase,
        records,
    })
}
