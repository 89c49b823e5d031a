use std::fs;
use std::path::{Path, PathBuf};

use dpcodec::data::synthetic_set;
use dpcodec::diffusion::ScheduleConfig;
use dpcodec::entropy::Bitstream;
use dpcodec::models::{CodecConfig, CodecModel, Decoder, DecoderKind, Preset};
use dpcodec::samplers::{SamplerConfig, SamplerKind};
use dpcodec::training::{train, TrainConfig};
use dpcodec::Tensor;

use crate::args::{DecodeArgs, EncodeArgs, GenDataArgs, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::image_io::{read_image, write_image};

const TRAIN_KEYS: [&str; 9] = [
    "lambda",
    "learning_rate",
    "steps",
    "batch_size",
    "crop_size",
    "seed",
    "perceptual_weight",
    "checkpoint_every",
    "phase",
];
const SCHEDULE_KEYS: [&str; 3] = ["schedule_steps", "beta_start", "beta_end"];

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    if a.size == 0 || a.size % 8 != 0 {
        return Err(CliError::Usage(format!("--size {} must be a positive multiple of 8", a.size)));
    }
    if a.channels != 1 && a.channels != 3 {
        return Err(CliError::Usage("--channels must be 1 or 3".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let ext = if a.channels == 1 { "pgm" } else { "ppm" };
    for (i, img) in synthetic_set(a.count, a.channels, a.size, a.seed)?.iter().enumerate() {
        write_image(&a.out.join(format!("img_{i:04}.{ext}")), img)?;
    }
    eprintln!("wrote {} images to {}", a.count, a.out.display());
    Ok(())
}

/// PGM/PPM files in a directory, sorted by file name.
pub fn image_paths(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("{}: no .ppm or .pgm images", dir.display())));
    }
    Ok(paths)
}

pub fn load_images(dir: &Path) -> CliResult<Vec<Tensor>> {
    image_paths(dir)?.iter().map(|p| Ok(read_image(p)?)).collect()
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_overrides(text: &str, origin: &str) -> CliResult<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value, got {l:?}", i + 1)))
        })
        .collect()
}

fn load_model(path: &Path) -> CliResult<CodecModel> {
    if !path.exists() {
        return Err(CliError::Data(format!("{}: model file not found", path.display())));
    }
    CodecModel::load(path).map_err(|e| match e {
        dpcodec::Error::Io(source) => CliError::io(path, source),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

pub fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let mut kv = Vec::new();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        kv.extend(parse_overrides(&text, &p.display().to_string())?);
    }
    for s in &a.overrides {
        kv.extend(parse_overrides(s, "--set")?);
    }
    let (train_kv, arch_kv): (Vec<_>, Vec<_>) = kv.into_iter().partition(|(k, _)| TRAIN_KEYS.contains(&k.as_str()));

    let mut model = match &a.init {
        Some(p) => {
            if let Some((k, _)) = arch_kv.first() {
                return Err(CliError::Usage(format!(
                    "{k} cannot be overridden when starting from --init (the architecture comes from the file)"
                )));
            }
            let m = load_model(p)?;
            if a.qp.is_some_and(|q| q != m.qp()) {
                return Err(CliError::Usage(format!(
                    "--qp {} does not match the initial model's qp {}",
                    a.qp.unwrap(),
                    m.qp()
                )));
            }
            m
        }
        None => {
            let mut cfg = CodecConfig::for_preset(a.preset);
            let mut sched = match a.preset {
                Preset::Desk => ScheduleConfig::DESK,
                Preset::Paper => ScheduleConfig::PAPER,
            };
            for (k, v) in &arch_kv {
                if SCHEDULE_KEYS.contains(&k.as_str()) {
                    let bad = || CliError::Usage(format!("{k}: cannot parse {v:?}"));
                    match k.as_str() {
                        "schedule_steps" => sched.steps = v.parse().map_err(|_| bad())?,
                        "beta_start" => sched.beta_start = v.parse().map_err(|_| bad())?,
                        _ => sched.beta_end = v.parse().map_err(|_| bad())?,
                    }
                } else {
                    cfg.set(k, v)?;
                }
            }
            CodecModel::new(cfg, sched, a.qp.unwrap_or(1), a.seed)?
        }
    };

    let mut tc = TrainConfig::desk(a.phase, model.qp())?;
    tc.seed = a.seed;
    for (k, v) in &train_kv {
        tc.set(k, v)?;
    }
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    let data = load_images(&a.data)?;
    let every = (tc.steps / 10).max(1);
    let out = a.out.clone();
    let checkpoint = tc.checkpoint_every;
    let trace = train(&mut model, &data, &tc, |r, m| {
        if r.step % every == 0 || r.step == 1 {
            eprintln!("step {:>6}  loss {:.6}  [{:.6}, {:.6}]", r.step, r.total, r.terms[0], r.terms[1]);
        }
        if checkpoint > 0 && r.step % checkpoint == 0 {
            m.save(&out)?;
        }
        Ok(())
    })?;
    model.save(&a.out).map_err(|e| match e {
        dpcodec::Error::Io(source) => CliError::io(&a.out, source),
        other => other.into(),
    })?;
    let trace_path = a.trace.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    fs::write(&trace_path, trace.to_csv()).map_err(|e| CliError::io(&trace_path, e))?;
    eprintln!("saved {} and {}", a.out.display(), trace_path.display());
    Ok(())
}

pub fn encode_cmd(a: &EncodeArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let img = read_image(&a.image)?;
    let enc = model
        .encode(&img)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.image.display())))?;
    let bytes = enc.bitstream.to_bytes()?;
    fs::write(&a.out, &bytes).map_err(|e| CliError::io(&a.out, e))?;
    println!("bpp={:.6} bytes={}", enc.bitstream.bpp(), bytes.len());
    Ok(())
}

/// Resolves sampler flags; unset fields default to DDIM, a tenth of the
/// horizon, eta 0 and seed 0.
pub fn sampler_config(a: &crate::args::SamplerArgs, horizon: usize) -> SamplerConfig {
    SamplerConfig {
        kind: a.sampler.unwrap_or(SamplerKind::Ddim),
        steps: a.steps.unwrap_or((horizon / 10).max(1)),
        eta: a.eta.unwrap_or(0.0),
        seed: a.seed.unwrap_or(0),
    }
}

pub fn decode_cmd(a: &DecodeArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let bytes = fs::read(&a.bitstream).map_err(|e| CliError::io(&a.bitstream, e))?;
    let bs = Bitstream::parse(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", a.bitstream.display())))?;
    let decoder = match a.decoder {
        DecoderKind::Standard => {
            let s = &a.sampler;
            if s.sampler.is_some() || s.steps.is_some() || s.eta.is_some() || s.seed.is_some() {
                eprintln!("warning: the standard decoder ignores sampler flags");
            }
            Decoder::Standard
        }
        DecoderKind::Diffusion => Decoder::Diffusion(sampler_config(&a.sampler, model.schedule().len())),
    };
    let img = model.decode(&bs, &decoder)?;
    write_image(&a.out, &img)?;
    Ok(())
}
