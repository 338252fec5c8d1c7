//! Binary PPM (P6) and PGM (P5) I/O, maxval 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write a `[3,H,W]` tensor with values in [0,1] as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::MalformedImage(format!(
            "PPM writer expects [3,H,W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut buf = Vec::with_capacity(32 + 3 * h * w);
    write!(buf, "P6\n{w} {h}\n255\n")?;
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(quantize(data[(c * h + y) * w + x]));
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Write a single-channel map (any shape with H×W trailing layout collapsed
/// to `h`×`w`) as binary PGM.
pub fn write_pgm(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::MalformedImage(format!(
            "PGM writer got {} values for {h}x{w}",
            values.len()
        )));
    }
    let mut buf = Vec::with_capacity(32 + h * w);
    write!(buf, "P5\n{w} {h}\n255\n")?;
    buf.extend(values.iter().map(|&v| quantize(v)));
    fs::write(path, buf)?;
    Ok(())
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedImage("truncated PPM header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::MalformedImage("non-ASCII PPM header".into()))
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::MalformedImage(format!("bad number `{tok}` in PPM header")))
    }
}

/// Read a binary PPM into a `[3,H,W]` tensor with values in [0,1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut p = HeaderParser {
        bytes: &bytes,
        pos: 0,
    };
    let magic = p.token()?;
    if magic != "P6" {
        return Err(Error::MalformedImage(format!(
            "expected P6 magic, got `{magic}`"
        )));
    }
    let w = p.number()?;
    let h = p.number()?;
    let maxval = p.number()?;
    if maxval != 255 {
        return Err(Error::MalformedImage(format!(
            "unsupported maxval {maxval}, expected 255"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::MalformedImage("empty PPM image".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    p.pos += 1;
    let need = 3 * w * h;
    let raster = bytes
        .get(p.pos..p.pos + need)
        .ok_or_else(|| Error::MalformedImage("truncated PPM raster".into()))?;
    let mut data = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = raster[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_at_u8_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let data: Vec<f64> = (0..3 * 4 * 2)
            .map(|v| (v as f64 * 11.0 % 256.0) / 255.0)
            .collect();
        let img = Tensor::new(&[3, 4, 2], data).unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 0.5 / 255.0);
        }
    }

    #[test]
    fn read_rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P5\n2 2\n255\n....").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::MalformedImage(_))));
        std::fs::write(&path, b"P6\n4 4\n255\nxx").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::MalformedImage(_))));
    }

    #[test]
    fn read_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# a comment\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.shape(), &[3, 1, 1]);
        assert!((img.data()[0] - 10.0 / 255.0).abs() < 1e-12);
    }
}
