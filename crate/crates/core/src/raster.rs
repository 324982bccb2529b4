//! Plain raster containers shared by the image-facing modules.
//!
//! All rasters are row-major. `Grid` holds one real-valued channel (heatmaps,
//! saliency maps, distance maps), `BinaryMask` a set of pixels and
//! `ColorRaster` an interleaved RGB image with real-valued intensities on the
//! 0..=255 scale.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Min-max normalisation into [0, 1]. A constant grid maps to all zeros.
    pub fn normalized(&self) -> Grid {
        let lo = self.min();
        let hi = self.max();
        let span = hi - lo;
        let data = if !(span > 0.0) || !span.is_finite() {
            vec![0.0; self.data.len()]
        } else {
            self.data.iter().map(|v| (v - lo) / span).collect()
        };
        Grid {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Grid {
        let data = resize_bilinear_planar(&self.data, self.width, self.height, 1, width, height);
        Grid {
            width,
            height,
            data,
        }
    }

    /// Quantise a [0, 1] grid to 8-bit grayscale.
    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    /// Inverse of [`Grid::to_gray8`] (values divided by 255).
    pub fn from_gray8(img: &GrayImage) -> Grid {
        Grid {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        }
    }

    /// Raw 0..=255 intensities of a grayscale image.
    pub fn from_gray8_raw(img: &GrayImage) -> Grid {
        Grid {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p.0[0] as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }

    /// Nearest-neighbour resampling (pixel centres mapped half-pixel aligned).
    pub fn resize_nearest(&self, width: usize, height: usize) -> BinaryMask {
        let mut out = BinaryMask::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            for x in 0..width {
                let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
                out.set(x, y, self.get(src_x, src_y));
            }
        }
        out
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    pub fn from_gray8(img: &GrayImage) -> BinaryMask {
        BinaryMask {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p.0[0] >= 128).collect(),
        }
    }
}

/// Interleaved RGB raster with intensities on the 0..=255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ColorRaster {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, v: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8))
        })
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> ColorRaster {
        let data = resize_bilinear_planar(&self.data, self.width, self.height, 3, width, height);
        ColorRaster {
            width,
            height,
            data,
        }
    }
}

/// Bilinear resampling of an interleaved raster using half-pixel centres
/// (source coordinate `(dst + 0.5) * scale - 0.5`, clamped at the borders).
pub fn resize_bilinear_planar(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    channels: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dst_w * dst_h * channels];
    if src_w == 0 || src_h == 0 {
        return out;
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let scale = src_len as f64 / dst_len as f64;
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let xs: Vec<_> = (0..dst_w).map(|x| axis(x, src_w, dst_w)).collect();
    for y in 0..dst_h {
        let (y0, y1, fy) = axis(y, src_h, dst_h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..channels {
                let at = |xx: usize, yy: usize| src[(yy * src_w + xx) * channels + c];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out[(y * dst_w + x) * channels + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Write bytes to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_png_gray(path: &Path, img: &GrayImage) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    write_atomic(path, buf.get_ref())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)?.to_luma8())
}

pub fn save_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    write_atomic(path, buf.get_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_constant_grid_is_zero() {
        let g = Grid::new(4, 3, 7.0);
        assert!(g.normalized().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_identity_when_same_size() {
        let g = Grid::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(g.resize_bilinear(3, 2), g);
    }

    #[test]
    fn nearest_mask_resize_keeps_halves() {
        let mut m = BinaryMask::new(4, 4);
        for y in 2..4 {
            for x in 0..4 {
                m.set(x, y, true);
            }
        }
        let r = m.resize_nearest(8, 8);
        assert_eq!(r.count(), 32);
        assert!(r.get(0, 7) && !r.get(0, 0));
    }
}
