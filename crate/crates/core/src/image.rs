//! Floating-point images in `[0, 1]` and their 8-bit PNG representation.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Gray,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb => 3,
            ColorSpace::Gray => 1,
        }
    }
}

/// An `H x W x C` image with interleaved channels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    color: ColorSpace,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, color: ColorSpace, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        let expected = height * width * color.channels();
        if data.len() != expected {
            return Err(Error::SizeMismatch(format!(
                "{} samples for a {height}x{width}x{} image",
                data.len(),
                color.channels()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            color,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: ColorSpace, value: f64) -> Self {
        ImageTensor {
            height,
            width,
            color,
            data: vec![value; height * width * color.channels()],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        color: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let c = color.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        ImageTensor {
            height,
            width,
            color,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    pub fn color(&self) -> ColorSpace {
        self.color
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.color == other.color
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels() + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        let c = self.channels();
        self.data[(y * self.width + x) * c + ch] = v;
    }

    /// Extracts channel `ch` as a dense `H x W` plane.
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        let c = self.channels();
        self.data.iter().skip(ch).step_by(c).copied().collect()
    }

    pub fn set_plane(&mut self, ch: usize, plane: &[f64]) {
        let c = self.channels();
        for (dst, src) in self.data.iter_mut().skip(ch).step_by(c).zip(plane) {
            *dst = *src;
        }
    }

    pub fn clamp01(mut self) -> Self {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w}+{y0}+{x0} outside {}x{} image",
                self.height, self.width
            )));
        }
        Ok(ImageTensor::from_fn(h, w, self.color, |y, x, c| {
            self.get(y0 + y, x0 + x, c)
        }))
    }

    /// ITU-R BT.601 luma for RGB input; grayscale input is returned as is.
    pub fn luma(&self) -> ImageTensor {
        match self.color {
            ColorSpace::Gray => self.clone(),
            ColorSpace::Rgb => ImageTensor::from_fn(self.height, self.width, ColorSpace::Gray, |y, x, _| {
                0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
            }),
        }
    }

    pub fn to_rgb(&self) -> ImageTensor {
        match self.color {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::Gray => ImageTensor::from_fn(self.height, self.width, ColorSpace::Rgb, |y, x, _| {
                self.get(y, x, 0)
            }),
        }
    }

    /// Quantizes to 8 bits the same way a PNG round trip would.
    pub fn quantized(&self) -> ImageTensor {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = to_u8(*v) as f64 / 255.0;
        }
        out
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        match self.color {
            ColorSpace::Rgb => DynamicImage::ImageRgb8(
                RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
                    .expect("buffer matches dimensions"),
            ),
            ColorSpace::Gray => DynamicImage::ImageLuma8(
                GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
                    .expect("buffer matches dimensions"),
            ),
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> ImageTensor {
        let has_color = img.color().has_color();
        if has_color {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
            ImageTensor {
                height: h as usize,
                width: w as usize,
                color: ColorSpace::Rgb,
                data,
            }
        } else {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
            ImageTensor {
                height: h as usize,
                width: w as usize,
                color: ColorSpace::Gray,
                data,
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ImageTensor> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes)?;
        Ok(ImageTensor::from_dynamic(&img))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut buf, image::ImageFormat::Png)?;
        std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
    }
}

/// `round(v * 255)` after clamping to `[0, 1]`.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Places images side by side, separated by a one-pixel white gutter.
pub fn hstack(images: &[&ImageTensor]) -> Result<ImageTensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
    let h = first.height;
    let color = if images.iter().any(|i| i.color == ColorSpace::Rgb) {
        ColorSpace::Rgb
    } else {
        ColorSpace::Gray
    };
    if images.iter().any(|i| i.height != h) {
        return Err(Error::SizeMismatch("stacked images differ in height".into()));
    }
    let converted: Vec<ImageTensor> = images
        .iter()
        .map(|i| if color == ColorSpace::Rgb { i.to_rgb() } else { (*i).clone() })
        .collect();
    let w: usize = converted.iter().map(|i| i.width).sum::<usize>() + converted.len() - 1;
    let mut out = ImageTensor::filled(h, w, color, 1.0);
    let mut x0 = 0;
    for img in &converted {
        for y in 0..h {
            for x in 0..img.width {
                for c in 0..color.channels() {
                    out.set(y, x0 + x, c, img.get(y, x, c));
                }
            }
        }
        x0 += img.width + 1;
    }
    Ok(out)
}
