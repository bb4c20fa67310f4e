//! Binary PPM (`P6`) and PGM (`P5`) images with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

/// Clamps to `[0, 1]` and rounds half up on `v * 255`.
pub fn quantize<T: Real>(v: T) -> u8 {
    let x = v.to_f64().unwrap_or(0.0);
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (x * 255.0 + 0.5).floor() as u8
}

/// `C x H x W` (C = 1 or 3) or `H x W` image as a P5/P6 byte stream.
pub fn encode<T: Real>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = match *img.shape() {
        [h, w] => (1, h, w),
        [c, h, w] | [1, c, h, w] if c == 1 || c == 3 => (c, h, w),
        _ => {
            return Err(Error::invalid(
                "write_image",
                format!("need 1 or 3 channels, got shape {:?}", img.shape()),
            ))
        }
    };
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    out.reserve(c * hw);
    let d = img.data();
    for p in 0..hw {
        for ch in 0..c {
            out.push(quantize(d[ch * hw + p]));
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn error(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            kind: "pnm",
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| Header { bytes: self.bytes, pos: start }.error(format!("invalid {what}")))
    }
}

/// Decodes a P5/P6 stream into `C x H x W` values in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut hd = Header { bytes, pos: 0 };
    let c = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(hd.error("expected magic P5 or P6")),
    };
    hd.pos = 2;
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let max_at = hd.pos;
    let maxval = hd.number("maxval")?;
    if maxval != 255 {
        hd.pos = max_at;
        hd.skip_space();
        return Err(hd.error(format!("maxval {maxval} unsupported, need 255")));
    }
    match bytes.get(hd.pos) {
        Some(b) if b.is_ascii_whitespace() => hd.pos += 1,
        _ => return Err(hd.error("expected whitespace after maxval")),
    }
    let hw = h * w;
    let need = c * hw;
    let payload = &bytes[hd.pos..];
    if payload.len() < need {
        hd.pos = bytes.len();
        return Err(hd.error(format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    let mut data = vec![0.0; need];
    for p in 0..hw {
        for ch in 0..c {
            data[ch * hw + p] = payload[p * c + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[c, h, w], data)
}

pub fn write_image<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_image_has_zero_payload() {
        let bytes = encode(&Tensor::<f64>::zeros(&[3, 2, 4])).unwrap();
        assert!(bytes.starts_with(b"P6\n4 2\n255\n"));
        assert!(bytes[11..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 11 + 24);
    }

    #[test]
    fn round_trip_is_quantization_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn(&[3, 5, 7], |_| rng.random_range(0.0..1.0));
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
        let q = Tensor::new(img.shape(), img.data().iter().map(|&v| quantize(v) as f64 / 255.0).collect())
            .unwrap();
        assert_eq!(back, q);
        let gray = Tensor::from_fn(&[4, 4], |i| i as f64 / 15.0);
        let back = decode(&encode(&gray).unwrap()).unwrap();
        assert_eq!(back.shape(), &[1, 4, 4]);
    }

    #[test]
    fn quantize_rounds_half_up_and_clamps() {
        assert_eq!(quantize(0.5f64), 128);
        assert_eq!(quantize(-3.0f64), 0);
        assert_eq!(quantize(2.0f64), 255);
        assert_eq!(quantize(1.5f64 / 255.0), 2);
    }

    #[test]
    fn header_errors_carry_offsets() {
        let err = decode(b"P5\n2 2\n65535\n\0\0\0\0").unwrap_err().to_string();
        assert!(err.contains("byte 7") && err.contains("maxval"), "{err}");
        let err = decode(b"P6\n2 2\n255\n\0\0\0").unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(decode(b"P3\n1 1\n255\n0").is_err());
        let err = decode(b"P5\n# comment\nx 2\n255\n").unwrap_err().to_string();
        assert!(err.contains("byte 13"), "{err}");
        let ok = decode(b"P5 # c\n1 1 255 \x80").unwrap();
        assert_eq!(ok.data(), &[128.0 / 255.0]);
    }
}
