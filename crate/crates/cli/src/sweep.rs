//! Distortion/perception sweep over decoders and samplers.

use std::fmt::Write as _;
use std::path::Path;

use dpcodec::entropy::Bitstream;
use dpcodec::models::{CodecModel, Decoder};
use dpcodec::perception::{fid_proxy, gmsd, mse, patchify, perceptual_distance_value, psnr_from_mse, FeatureExtractor, RandomConvExtractor};
use dpcodec::samplers::{SamplerConfig, SamplerKind};
use dpcodec::Tensor;

use crate::error::{CliError, CliResult};
use crate::image_io::write_image;

pub const CSV_HEADER: &str = "qp,decoder,sampler,steps,bpp,psnr_db,gmsd,perceptual_proxy,fid_proxy";

/// Side of the square patches pooled for the FID proxy.
pub const FID_PATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub qp: u8,
    /// `None` for the standard decoder.
    pub sampler: Option<(SamplerKind, usize)>,
    pub bpp: f64,
    pub mse: f64,
    pub psnr_db: f64,
    pub gmsd: f64,
    pub perceptual: f64,
    pub fid: f64,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let (decoder, sampler, steps) = match self.sampler {
            None => ("standard", String::new(), String::new()),
            Some((k, s)) => ("diffusion", k.to_string(), s.to_string()),
        };
        format!(
            "{},{decoder},{sampler},{steps},{},{},{},{},{}",
            self.qp, self.bpp, self.psnr_db, self.gmsd, self.perceptual, self.fid
        )
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.csv_line()).expect("string write");
    }
    out
}

/// The four standard configurations, defined on a 1000-step horizon and
/// rescaled to `horizon` (at least one step each).
pub fn default_samplers(horizon: usize) -> Vec<(SamplerKind, usize)> {
    [
        (SamplerKind::Ddim, 10),
        (SamplerKind::Ddim, 100),
        (SamplerKind::Ddpm, 100),
        (SamplerKind::Ddpm, 1000),
    ]
    .into_iter()
    .map(|(k, s)| (k, ((s * horizon + 500) / 1000).max(1)))
    .collect()
}

/// Parses `kind:steps`.
pub fn parse_sampler(s: &str) -> CliResult<(SamplerKind, usize)> {
    let (k, n) = s
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("sampler {s:?}: expected kind:steps")))?;
    let kind = k.trim().parse()?;
    let steps = n
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("sampler {s:?}: bad step count")))?;
    Ok((kind, steps))
}

fn embed_patches(ext: &dyn FeatureExtractor, images: &[Tensor]) -> CliResult<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for img in images {
        for p in patchify(img, FID_PATCH)? {
            out.push(ext.embed(&p)?);
        }
    }
    Ok(out)
}

/// Evaluates one model on every image with the standard decoder and each
/// sampler. Diffusion sampling of image `i` uses seed `seed + i`.
pub fn sweep_model(
    model: &CodecModel,
    images: &[Tensor],
    samplers: &[(SamplerKind, usize)],
    seed: u64,
    recon_dir: Option<&Path>,
) -> CliResult<Vec<SweepRow>> {
    let n = model.schedule().len();
    if let Some((k, s)) = samplers.iter().find(|(_, s)| *s == 0 || *s > n) {
        return Err(CliError::Usage(format!("sampler {k}:{s} needs 1..={n} steps")));
    }
    let ext = RandomConvExtractor::standard(model.config().image_channels);
    let mut latents = Vec::with_capacity(images.len());
    let mut bpp = 0.0;
    for img in images {
        let bytes = model.encode(img)?.bitstream.to_bytes()?;
        let bs = Bitstream::parse(&bytes)?;
        bpp += bs.bpp();
        latents.push(model.decode_latent(&bs)?);
    }
    bpp /= images.len() as f64;
    let reference = embed_patches(&ext, images)?;
    if reference.len() < 2 {
        return Err(CliError::Data(format!(
            "the FID proxy needs at least 2 patches of {FID_PATCH}x{FID_PATCH}; the image set has {}",
            reference.len()
        )));
    }

    let configs: Vec<Option<(SamplerKind, usize)>> =
        std::iter::once(None).chain(samplers.iter().copied().map(Some)).collect();
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut recons = Vec::with_capacity(images.len());
        for (i, y_hat) in latents.iter().enumerate() {
            let decoder = match cfg {
                None => Decoder::Standard,
                Some((kind, steps)) => Decoder::Diffusion(SamplerConfig {
                    kind,
                    steps,
                    eta: 0.0,
                    seed: seed.wrapping_add(i as u64),
                }),
            };
            recons.push(model.reconstruct(y_hat, &decoder)?);
        }
        let count = images.len() as f64;
        let (mut m, mut g, mut p) = (0.0, 0.0, 0.0);
        for (x, r) in images.iter().zip(&recons) {
            m += mse(x, r)?;
            g += gmsd(x, r)?;
            p += perceptual_distance_value(x, r, &ext)?;
        }
        let m = m / count;
        let fid = fid_proxy(&reference, &embed_patches(&ext, &recons)?)?;
        if let Some(dir) = recon_dir {
            let tag = match cfg {
                None => "standard".to_string(),
                Some((k, s)) => format!("{k}{s}"),
            };
            for (i, r) in recons.iter().enumerate() {
                write_image(&dir.join(format!("qp{}_{tag}_{i:04}.ppm", model.qp())), r)?;
            }
        }
        rows.push(SweepRow {
            qp: model.qp(),
            sampler: cfg,
            bpp,
            mse: m,
            psnr_db: psnr_from_mse(m, 1.0),
            gmsd: g / count,
            perceptual: p / count,
            fid,
        });
    }
    Ok(rows)
}
