//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::fs;
use std::path::Path;

use dpcodec::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Malformed { path: String, msg: String },
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM file (expected P5 or P6)".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n') | Some(b'\r')) {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][i];
        if start == pos {
            return Err(format!("header byte {start}: expected {name}"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| format!("{name} {text} is too large"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("header must end with a single whitespace byte".into());
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (only 255)"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos + 1,
    })
}

/// Decodes PGM/PPM bytes into a `[C, H, W]` tensor with values in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor, String> {
    let h = parse_header(bytes)?;
    let n = h.channels * h.width * h.height;
    let body = &bytes[h.data_start..];
    if body.len() != n {
        return Err(format!("expected {n} sample bytes, found {}", body.len()));
    }
    let plane = h.width * h.height;
    let mut data = vec![0.0; n];
    for (i, &b) in body.iter().enumerate() {
        let (pix, c) = (i / h.channels, i % h.channels);
        data[c * plane + pix] = b as f64 / 255.0;
    }
    Tensor::new(vec![h.channels, h.height, h.width], data).map_err(|e| e.to_string())
}

/// Encodes a `[1 | 3, H, W]` tensor; values are clamped to `[0, 1]` and
/// rounded half away from zero.
pub fn encode_image(x: &Tensor) -> Result<Vec<u8>, String> {
    let (c, h, w) = x.dims3("encode_image").map_err(|e| e.to_string())?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(format!("{c} channels cannot be written as PGM/PPM")),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = x.data();
    out.reserve(c * plane);
    for pix in 0..plane {
        for ch in 0..c {
            out.push((d[ch * plane + pix].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor, ImageError> {
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes).map_err(|msg| ImageError::Malformed {
        path: path.display().to_string(),
        msg,
    })
}

pub fn write_image(path: &Path, x: &Tensor) -> Result<(), ImageError> {
    let bytes = encode_image(x).map_err(|msg| ImageError::Malformed {
        path: path.display().to_string(),
        msg,
    })?;
    fs::write(path, bytes).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut ppm = b"P6\n# comment\n3 2\n255\n".to_vec();
        ppm.extend((0..18).map(|i| (i * 14) as u8));
        let img = decode_image(&ppm).unwrap();
        assert_eq!(img.shape(), &[3, 2, 3]);
        let back = encode_image(&img).unwrap();
        assert_eq!(decode_image(&back).unwrap(), img);
        assert_eq!(&back[back.len() - 18..], &ppm[ppm.len() - 18..]);

        let pgm = b"P5 1 1 255 \x80".to_vec();
        let one = decode_image(&pgm).unwrap();
        assert_eq!(one.shape(), &[1, 1, 1]);
        assert_eq!(encode_image(&one).unwrap(), b"P5\n1 1\n255\n\x80");
    }

    #[test]
    fn every_level_survives() {
        let x = Tensor::from_fn(&[1, 1, 256], |i| i as f64 / 255.0);
        let b = encode_image(&x).unwrap();
        assert_eq!(&b[b.len() - 256..], (0..=255u8).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_image(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err().contains("maxval"));
        assert!(decode_image(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(decode_image(b"P5\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_image(b"P5\n2").is_err());
        assert!(decode_image(b"P5\n0 2\n255\n").is_err());
        assert!(encode_image(&Tensor::zeros(&[2, 1, 1])).is_err());
    }
}
