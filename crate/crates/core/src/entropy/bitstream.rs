//! The `.dpc` container: a fixed header followed by two range-coded payloads.

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DPC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 2 + 1 + 2 + 2 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub qp: u8,
    pub width: u16,
    pub height: u16,
    pub image_channels: u8,
    pub latent_channels: u16,
    pub hyper_channels: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
}

impl Bitstream {
    /// Payload bits per pixel; the header is not counted.
    pub fn bpp(&self) -> f64 {
        let pixels = self.header.width as f64 * self.header.height as f64;
        8.0 * (self.hyper.len() + self.main.len()) as f64 / pixels
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let len32 = |n: usize| {
            u32::try_from(n).map_err(|_| Error::Format(format!("payload of {n} bytes exceeds u32")))
        };
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.hyper.len() + self.main.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(h.qp);
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.push(h.image_channels);
        out.extend_from_slice(&h.latent_channels.to_le_bytes());
        out.extend_from_slice(&h.hyper_channels.to_le_bytes());
        out.extend_from_slice(&len32(self.hyper.len())?.to_le_bytes());
        out.extend_from_slice(&len32(self.main.len())?.to_le_bytes());
        out.extend_from_slice(&self.hyper);
        out.extend_from_slice(&self.main);
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let header = Header {
            qp: bytes[5],
            width: u16_at(6),
            height: u16_at(8),
            image_channels: bytes[10],
            latent_channels: u16_at(11),
            hyper_channels: u16_at(13),
        };
        let (hyper_len, main_len) = (u32_at(15), u32_at(19));
        let declared = HEADER_LEN + hyper_len + main_len;
        if declared != bytes.len() {
            return Err(Error::LengthMismatch {
                declared,
                actual: bytes.len(),
            });
        }
        let body = &bytes[HEADER_LEN..];
        Ok(Self {
            header,
            hyper: body[..hyper_len].to_vec(),
            main: body[hyper_len..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: Header {
                qp: 2,
                width: 32,
                height: 32,
                image_channels: 3,
                latent_channels: 16,
                hyper_channels: 8,
            },
            hyper: vec![1, 2, 3],
            main: (0..40).collect(),
        }
    }

    #[test]
    fn roundtrip_and_layout() {
        let b = sample();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 43);
        assert_eq!(&bytes[..6], b"DPC1\x01\x02");
        assert_eq!(&bytes[6..8], &32u16.to_le_bytes());
        assert_eq!(&bytes[15..19], &3u32.to_le_bytes());
        assert_eq!(Bitstream::parse(&bytes).unwrap(), b);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes().unwrap();
        let mut m = bytes.clone();
        m[1] ^= 0xFF;
        assert!(matches!(Bitstream::parse(&m), Err(Error::BadMagic { .. })));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Bitstream::parse(&v), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(
            Bitstream::parse(&bytes[..bytes.len() - 1]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(Bitstream::parse(&bytes[..7]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn bpp_counts_payload_only() {
        let b = Bitstream {
            hyper: vec![0; 256],
            main: vec![0; 256],
            ..sample()
        };
        assert_eq!(b.bpp(), 4.0);
        let b = Bitstream {
            hyper: vec![0; 128],
            main: vec![0; 128],
            ..sample()
        };
        assert_eq!(b.bpp(), 2.0);
    }
}
