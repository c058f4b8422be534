//! 8-bit RGB images and PPM (P6) encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Length {
                expected: width * height * 3,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width * 3) {
            for px in row.chunks(3).rev() {
                pixels.extend_from_slice(px);
            }
        }
        Self {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// Bilinear resampling of the window `(x0, y0, w, h)` (in source pixels)
    /// to `out_w × out_h`, using pixel-centre alignment.
    pub fn crop_resize(&self, x0: f32, y0: f32, w: f32, h: f32, out_w: usize, out_h: usize) -> Self {
        let sx = w / out_w as f32;
        let sy = h / out_h as f32;
        let mut pixels = Vec::with_capacity(out_w * out_h * 3);
        for oy in 0..out_h {
            let fy = (y0 + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(self.height - 1);
            let ty = fy - y_lo as f32;
            for ox in 0..out_w {
                let fx = (x0 + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(self.width - 1);
                let tx = fx - x_lo as f32;
                for c in 0..3 {
                    let p = |x: usize, y: usize| self.pixels[(y * self.width + x) * 3 + c] as f32;
                    let top = p(x_lo, y_lo) * (1.0 - tx) + p(x_hi, y_lo) * tx;
                    let bottom = p(x_lo, y_hi) * (1.0 - tx) + p(x_hi, y_hi) * tx;
                    let v = top * (1.0 - ty) + bottom * ty;
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Self {
            width: out_w,
            height: out_h,
            pixels,
        }
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Self {
        if (out_w, out_h) == (self.width, self.height) {
            return self.clone();
        }
        self.crop_resize(0.0, 0.0, self.width as f32, self.height as f32, out_w, out_h)
    }

    pub fn to_gray(&self) -> Vec<f32> {
        self.pixels
            .chunks(3)
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect()
    }

    /// CHW floats scaled to roughly [-2, 2].
    pub fn write_chw(&self, out: &mut Vec<f32>) {
        let plane = self.width * self.height;
        for c in 0..3 {
            out.extend((0..plane).map(|i| (self.pixels[i * 3 + c] as f32 / 255.0 - 0.5) * 4.0));
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut v = Vec::with_capacity(self.pixels.len());
        self.write_chw(&mut v);
        Tensor::from_parts(vec![1, 3, self.height, self.width], v)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token(bytes)?;
        if magic != "P6" {
            return Err(format!("bad magic {magic:?}, expected P6"));
        }
        let num = |s: String, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
        let width = num(token(bytes)?, "width")?;
        let height = num(token(bytes)?, "height")?;
        let maxval = num(token(bytes)?, "maxval")?;
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        if width == 0 || height == 0 {
            return Err("zero image dimension".into());
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let need = width * height * 3;
        if bytes.len() < start || bytes.len() - start != need {
            return Err(format!(
                "raster length mismatch: expected {need} bytes, found {}",
                bytes.len().saturating_sub(start)
            ));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[start..].to_vec(),
        })
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::decode_ppm(&bytes).map_err(|message| Error::Decode {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode_ppm())?;
        Ok(())
    }
}
