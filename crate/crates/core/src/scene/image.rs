use std::path::Path;

use crate::error::{Error, Result};

/// Linear RGB image with channels in `[0, 1]`, stored row-major from the top-left pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Data(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Decodes an 8-bit PNG, compositing any alpha channel onto `background`.
    pub fn read_png(path: &Path, background: [f64; 3]) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgba8();
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| {
                let a = p[3] as f64 / 255.0;
                let mut c = [0.0; 3];
                for (k, ck) in c.iter_mut().enumerate() {
                    *ck = p[k] as f64 / 255.0 * a + background[k] * (1.0 - a);
                }
                c
            })
            .collect();
        RgbImage::new(w as usize, h as usize, pixels)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    /// Rounded to the nearest 8-bit level, exactly as [`RgbImage::write_png`] stores it.
    pub fn quantized(&self) -> Self {
        let pixels = self
            .to_rgb8()
            .chunks_exact(3)
            .map(|p| [0, 1, 2].map(|c| p[c] as f64 / 255.0))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer sized from dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Integer-factor area-averaging downscale; trailing rows/columns that do not fill a block
    /// are dropped.
    pub fn downscale(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::config("downscale", "factor must be at least 1"));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = (factor * factor) as f64;
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.get(x * factor + dx, y * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                pixels.push(acc.map(|v| v / norm));
            }
        }
        RgbImage::new(w, h, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_downscale_averages_blocks() {
        let img = RgbImage::new(
            2,
            2,
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0; 3]],
        )
        .unwrap();
        let small = img.downscale(2).unwrap();
        assert_eq!(small.dims(), (1, 1));
        assert_eq!(small.pixels[0], [0.5, 0.5, 0.25]);
    }

    #[test]
    fn png_round_trip_through_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = RgbImage::new(2, 1, vec![[0.0, 0.5, 1.0], [1.0, 1.0, 0.0]]).unwrap();
        img.write_png(&path).unwrap();
        let back = RgbImage::read_png(&path, [1.0; 3]).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }
}
