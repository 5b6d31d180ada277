use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// An 8-bit RGB raster, row-major and channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("image must be non-empty, got {width}×{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image::new(width, height, pixels).expect("non-empty")
    }

    /// Builds an image from three `width·height` channel planes (R, G, B).
    pub fn from_planes(width: usize, height: usize, planes: &[u8]) -> Result<Self> {
        let n = width * height;
        if planes.len() != 3 * n {
            return Err(Error::Dimension(format!(
                "planar image needs {} bytes, got {}",
                3 * n,
                planes.len()
            )));
        }
        let mut pixels = Vec::with_capacity(3 * n);
        for i in 0..n {
            pixels.extend([planes[i], planes[n + i], planes[2 * n + i]]);
        }
        Image::new(width, height, pixels)
    }

    /// The R, G and B planes concatenated.
    pub fn to_planes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len());
        for c in 0..3 {
            out.extend(self.pixels.iter().skip(c).step_by(3));
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_grayscale(&self) -> bool {
        self.pixels.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2])
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, 0, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, 0, e))
    }
}
