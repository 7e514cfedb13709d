//! Grayscale images and portable graymap (PGM) IO.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Row-major grayscale pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(
                "GrayImage::new",
                format!("{} pixels for {height}x{width}", pixels.len()),
            ));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        GrayImage {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.width + c] = v;
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Zero mean and unit variance over all pixels; a constant image maps to
    /// all zeros.
    pub fn standardized(&self) -> GrayImage {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().sum::<f64>() / n;
        let var = self.pixels.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| (p - mean) * inv).collect(),
        }
    }

    /// Non-overlapping `patch x patch` tiles in raster order, one per row.
    pub fn patches(&self, patch: usize) -> Result<Mat> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::IndivisibleImage {
                height: self.height,
                width: self.width,
                patch,
            });
        }
        let (ph, pw) = (self.height / patch, self.width / patch);
        let mut out = Mat::zeros(ph * pw, patch * patch);
        for pr in 0..ph {
            for pc in 0..pw {
                let row = out.row_mut(pr * pw + pc);
                for y in 0..patch {
                    for x in 0..patch {
                        row[y * patch + x] = self.get(pr * patch + y, pc * patch + x);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Binary (`P5`) 8-bit graymap.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.to_u8());
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads binary (`P5`) or ASCII (`P2`) graymaps.
    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&bytes).map_err(|message| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message,
        })
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM number {s:?}"));
    let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    let scale = maxval as f64;
    let pixels: Vec<f64> = match header[0].as_str() {
        "P5" => {
            let data = &bytes[(pos + 1).min(bytes.len())..];
            if data.len() < width * height {
                return Err("truncated PGM pixel data".into());
            }
            data[..width * height]
                .iter()
                .map(|&b| f64::from(b) / scale)
                .collect()
        }
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: std::result::Result<Vec<f64>, String> = text
                .split_whitespace()
                .take(width * height)
                .map(|t| num(t).map(|v| v as f64 / scale))
                .collect();
            let vals = vals?;
            if vals.len() < width * height {
                return Err("truncated PGM pixel data".into());
            }
            vals
        }
        other => return Err(format!("unsupported PGM magic {other:?}")),
    };
    GrayImage::new(height, width, pixels).map_err(|e| e.to_string())
}
