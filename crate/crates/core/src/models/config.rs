use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn tag(self) -> u8 {
        match self {
            Preset::Desk => 0,
            Preset::Paper => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Preset::Desk),
            1 => Ok(Preset::Paper),
            t => Err(Error::Format(format!("unknown preset tag {t}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

/// Architecture of every network in a [`CodecModel`](super::CodecModel).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CodecConfig {
    pub preset: Preset,
    pub image_channels: usize,
    /// Width of the analysis/synthesis transforms.
    pub codec_filters: usize,
    /// Number of stride-2 stages in the analysis transform.
    pub analysis_stages: usize,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    /// UNet channels at level 1; level `l` uses `base * min(2^(l-1), max_mult)`.
    pub base_filters: usize,
    pub unet_max_mult: usize,
    pub unet_levels: usize,
    pub unet_blocks_per_level: usize,
    /// 1-based UNet levels followed by self-attention.
    pub attention_levels: Vec<usize>,
    pub cond_decoder_levels: usize,
    pub cond_features: usize,
}

impl CodecConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            image_channels: 3,
            codec_filters: 32,
            analysis_stages: 2,
            latent_channels: 16,
            hyper_channels: 8,
            base_filters: 16,
            unet_max_mult: 2,
            unet_levels: 3,
            unet_blocks_per_level: 2,
            attention_levels: vec![3],
            cond_decoder_levels: 3,
            cond_features: 32,
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            image_channels: 3,
            codec_filters: 128,
            analysis_stages: 4,
            latent_channels: 192,
            hyper_channels: 128,
            base_filters: 32,
            unet_max_mult: 4,
            unet_levels: 5,
            unet_blocks_per_level: 3,
            attention_levels: vec![4, 5],
            cond_decoder_levels: 5,
            cond_features: 32,
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_channels", self.image_channels),
            ("codec_filters", self.codec_filters),
            ("analysis_stages", self.analysis_stages),
            ("latent_channels", self.latent_channels),
            ("hyper_channels", self.hyper_channels),
            ("base_filters", self.base_filters),
            ("unet_max_mult", self.unet_max_mult),
            ("unet_blocks_per_level", self.unet_blocks_per_level),
            ("cond_features", self.cond_features),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.unet_levels < 2 {
            return Err(Error::Config(format!("unet_levels must be >= 2, got {}", self.unet_levels)));
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l == 0 || l > self.unet_levels) {
            return Err(Error::Config(format!(
                "attention level {l} outside 1..={}",
                self.unet_levels
            )));
        }
        if self.cond_decoder_levels != self.analysis_stages + 1 {
            return Err(Error::Config(format!(
                "cond_decoder_levels ({}) must be analysis_stages + 1 ({}) to reach full resolution",
                self.cond_decoder_levels,
                self.analysis_stages + 1
            )));
        }
        for l in 1..=self.unet_levels {
            let c = self.unet_channels(l);
            if c % c.min(8) != 0 {
                return Err(Error::Config(format!("UNet level {l} width {c} is not divisible into groups of 8")));
            }
        }
        if self.image_channels > u8::MAX as usize {
            return Err(Error::Config("image_channels must fit in u8".into()));
        }
        if self.latent_channels > u16::MAX as usize || self.hyper_channels > u16::MAX as usize {
            return Err(Error::Config("latent channel counts must fit in u16".into()));
        }
        Ok(())
    }

    pub fn unet_channels(&self, level: usize) -> usize {
        self.base_filters * (1usize << (level - 1)).min(self.unet_max_mult)
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.base_filters
    }

    /// Spatial factor between the image and the main latent.
    pub fn latent_factor(&self) -> usize {
        1 << self.analysis_stages
    }

    /// Every image side must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        let hyper = self.latent_factor() * 2;
        hyper.max(1 << (self.unet_levels - 1))
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    /// Canonical little-endian encoding of every field, shared by model files
    /// and the config hash.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.preset.tag()];
        for v in [
            self.image_channels,
            self.codec_filters,
            self.analysis_stages,
            self.latent_channels,
            self.hyper_channels,
            self.base_filters,
            self.unet_max_mult,
            self.unet_levels,
            self.unet_blocks_per_level,
            self.cond_decoder_levels,
            self.cond_features,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.attention_levels.len() as u8);
        out.extend(self.attention_levels.iter().map(|&l| l as u8));
        out
    }

    pub(crate) fn from_reader(r: &mut super::file::Reader<'_>) -> Result<Self> {
        let preset = Preset::from_tag(r.u8()?)?;
        let mut f = [0usize; 11];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let n = r.u8()? as usize;
        let attention_levels = (0..n).map(|_| r.u8().map(|l| l as usize)).collect::<Result<_>>()?;
        let cfg = Self {
            preset,
            image_channels: f[0],
            codec_filters: f[1],
            analysis_stages: f[2],
            latent_channels: f[3],
            hyper_channels: f[4],
            base_filters: f[5],
            unet_max_mult: f[6],
            unet_levels: f[7],
            unet_blocks_per_level: f[8],
            cond_decoder_levels: f[9],
            cond_features: f[10],
            attention_levels,
        };
        cfg.validate().map_err(|e| Error::Format(format!("model header: {e}")))?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
        };
        match key {
            "preset" => self.preset = value.parse()?,
            "image_channels" => self.image_channels = num()?,
            "codec_filters" => self.codec_filters = num()?,
            "analysis_stages" => self.analysis_stages = num()?,
            "latent_channels" => self.latent_channels = num()?,
            "hyper_channels" => self.hyper_channels = num()?,
            "base_filters" => self.base_filters = num()?,
            "unet_max_mult" => self.unet_max_mult = num()?,
            "unet_levels" => self.unet_levels = num()?,
            "unet_blocks_per_level" => self.unet_blocks_per_level = num()?,
            "cond_decoder_levels" => self.cond_decoder_levels = num()?,
            "cond_features" => self.cond_features = num()?,
            "attention_levels" => {
                self.attention_levels = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("attention_levels: bad entry {s:?}")))
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown codec key {key:?}"))),
        }
        Ok(())
    }
}

/// Hash of the architecture and schedule; models and decoders must agree on it.
pub fn config_hash(cfg: &CodecConfig, schedule: &ScheduleConfig) -> u64 {
    let mut h = Sha256::new();
    h.update(cfg.to_bytes());
    h.update((schedule.steps as u32).to_le_bytes());
    h.update(schedule.beta_start.to_le_bytes());
    h.update(schedule.beta_end.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Rate weight for a quality preset.
pub fn lambda_for_qp(qp: u8) -> Result<f64> {
    match qp {
        1 => Ok(0.0018),
        2 => Ok(0.0035),
        3 => Ok(0.0067),
        _ => Err(Error::range("qp", qp, "{1, 2, 3}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        CodecConfig::desk().validate().unwrap();
        CodecConfig::paper().validate().unwrap();
        assert_eq!(CodecConfig::desk().latent_factor(), 4);
        assert_eq!(CodecConfig::paper().latent_factor(), 16);
        let mut bad = CodecConfig::desk();
        bad.attention_levels = vec![4];
        assert!(bad.validate().is_err());
        let mut bad = CodecConfig::desk();
        bad.unet_levels = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hash_depends_on_every_part() {
        let d = CodecConfig::desk();
        let h = config_hash(&d, &ScheduleConfig::DESK);
        assert_eq!(h, config_hash(&d.clone(), &ScheduleConfig::DESK));
        assert_ne!(h, config_hash(&d, &ScheduleConfig::PAPER));
        let mut e = d.clone();
        e.set("cond_features", "16").unwrap();
        assert_ne!(h, config_hash(&e, &ScheduleConfig::DESK));
        assert!(e.set("nonsense", "1").is_err());
    }

    #[test]
    fn qp_lambdas() {
        assert_eq!(lambda_for_qp(2).unwrap(), 0.0035);
        assert!(lambda_for_qp(0).is_err());
    }
}
