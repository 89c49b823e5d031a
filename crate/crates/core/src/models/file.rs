//! `.dpm` model files: an architecture header followed by a weights block.

use std::path::Path;

use super::config::{config_hash, CodecConfig};
use super::CodecModel;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::grad::ParamStore;

pub const MODEL_MAGIC: [u8; 4] = *b"DPM1";
pub const MODEL_VERSION: u8 = 1;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl CodecModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MODEL_MAGIC.to_vec();
        out.push(MODEL_VERSION);
        out.push(self.qp);
        out.extend(self.config.to_bytes());
        let s = &self.schedule_config;
        out.extend_from_slice(&(s.steps as u32).to_le_bytes());
        out.extend_from_slice(&s.beta_start.to_le_bytes());
        out.extend_from_slice(&s.beta_end.to_le_bytes());
        out.extend_from_slice(&self.config_hash().to_le_bytes());
        self.params.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: MODEL_MAGIC,
                found: magic,
            });
        }
        let version = r.u8()?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let qp = r.u8()?;
        let config = CodecConfig::from_reader(&mut r)?;
        let schedule = ScheduleConfig {
            steps: r.u32()? as usize,
            beta_start: r.f64()?,
            beta_end: r.f64()?,
        };
        let stored = r.u64()?;
        let computed = config_hash(&config, &schedule);
        if stored != computed {
            return Err(Error::ConfigMismatch(format!(
                "model header hash {stored:016x} does not match its configuration ({computed:016x})"
            )));
        }
        let weights = ParamStore::from_bytes(&bytes[r.pos..])?;
        let mut model = CodecModel::new(config, schedule, qp, 0)?;
        model.params.load_values(&weights)?;
        if weights.len() != model.params.len() {
            return Err(Error::Format(format!(
                "model file has {} parameters, architecture has {}",
                weights.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
