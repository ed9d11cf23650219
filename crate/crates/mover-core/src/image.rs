//! Linear-radiance RGB images with binary PPM (P6) persistence.
//!
//! Files store gamma-2.2 encoded 8-bit values; everything in memory is
//! linear. Quantization is fixed: `round(255 * clamp(c,0,1)^(1/2.2))`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("format error in {path} at byte {offset}: {message}")]
    Format { path: String, offset: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// row-major, linear radiance
    pub pixels: Vec<[f64; 3]>,
}

const GAMMA: f64 = 2.2;

pub fn encode_channel(c: f64) -> u8 {
    (255.0 * c.clamp(0.0, 1.0).powf(1.0 / GAMMA)).round() as u8
}

pub fn decode_channel(b: u8) -> f64 {
    (b as f64 / 255.0).powf(GAMMA)
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![[0.0; 3]; width * height] }
    }

    pub fn constant(width: usize, height: usize, color: [f64; 3]) -> Self {
        Image { width, height, pixels: vec![color; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    /// Quantizes through the on-disk encoding and back, so saved and
    /// reloaded images compare bit-identically.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|p| [0, 1, 2].map(|i| decode_channel(encode_channel(p[i]))))
                .collect(),
        }
    }

    pub fn save_ppm(&self, path: &Path) -> Result<(), ImageError> {
        let mut buf = Vec::with_capacity(self.pixels.len() * 3 + 32);
        write!(buf, "P6\n{} {}\n255\n", self.width, self.height).expect("in-memory write");
        for p in &self.pixels {
            buf.extend_from_slice(&[0, 1, 2].map(|i| encode_channel(p[i])));
        }
        fs::write(path, buf).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_ppm(path: &Path) -> Result<Image, ImageError> {
        let data = fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let p = path.display().to_string();
        let fmt = |offset: usize, message: &str| ImageError::Format {
            path: p.clone(),
            offset,
            message: message.to_string(),
        };
        let mut pos = 0usize;
        let mut token = |data: &[u8]| -> Result<(usize, String), ImageError> {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(fmt(start, "unexpected end of header"));
            }
            Ok((start, String::from_utf8_lossy(&data[start..pos]).into_owned()))
        };
        let (off, magic) = token(&data)?;
        if magic != "P6" {
            return Err(fmt(off, "not a P6 ppm"));
        }
        let (off_w, w) = token(&data)?;
        let width: usize = w.parse().map_err(|_| fmt(off_w, "bad width"))?;
        let (off_h, h) = token(&data)?;
        let height: usize = h.parse().map_err(|_| fmt(off_h, "bad height"))?;
        let (off_m, m) = token(&data)?;
        if m != "255" {
            return Err(fmt(off_m, "maxval must be 255"));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if data.len() < pos + need {
            return Err(fmt(data.len(), "truncated pixel data"));
        }
        let pixels = data[pos..pos + need]
            .chunks_exact(3)
            .map(|c| [decode_channel(c[0]), decode_channel(c[1]), decode_channel(c[2])])
            .collect();
        Ok(Image { width, height, pixels })
    }
}
