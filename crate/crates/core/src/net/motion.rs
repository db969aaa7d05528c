use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Per-pixel displacement `(u, v)` in pixels, `u` horizontal, stored
/// interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 2 {
            return Err(Error::SizeMismatch(format!(
                "flow of {height}x{width} needs {} values, got {}",
                height * width * 2,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("flow contains non-finite values".into()));
        }
        Ok(FlowField { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        FlowField {
            height,
            width,
            data: [u, v].repeat(height * width),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<FlowField> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::SizeMismatch("flow crop out of bounds".into()));
        }
        let mut data = Vec::with_capacity(h * w * 2);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 2;
            data.extend_from_slice(&self.data[start..start + w * 2]);
        }
        FlowField::new(h, w, data)
    }

    /// `(1, 2, H, W)` tensor, channel 0 horizontal.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_vec(self.data.clone(), (self.height, self.width, 2), &Device::Cpu)?;
        Ok(t.permute((2, 0, 1))?.unsqueeze(0)?.to_dtype(dtype)?.contiguous()?)
    }
}

/// A smoothly varying flow: an affine function of position whose magnitude
/// stays below `max_len` pixels.
pub fn random_linear_flow(height: usize, width: usize, max_len: f64, seed: u64) -> FlowField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // base displacement plus horizontal and vertical gradients, each at most
    // a third of the budget
    let mut coef = [0.0f64; 6];
    for c in &mut coef {
        *c = rng.random_range(-1.0..1.0) * max_len / 3.0;
    }
    let mut data = Vec::with_capacity(height * width * 2);
    for y in 0..height {
        let ty = if height > 1 { y as f64 / (height - 1) as f64 - 0.5 } else { 0.0 };
        for x in 0..width {
            let tx = if width > 1 { x as f64 / (width - 1) as f64 - 0.5 } else { 0.0 };
            data.push(coef[0] + 2.0 * coef[1] * tx + 2.0 * coef[2] * ty);
            data.push(coef[3] + 2.0 * coef[4] * tx + 2.0 * coef[5] * ty);
        }
    }
    FlowField {
        height,
        width,
        data,
    }
}

fn bilinear(img: &ImageTensor, y: f64, x: f64, ch: usize) -> f64 {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
    let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Averages `steps` bilinear samples along the segment from `-flow/2` to
/// `+flow/2` around each pixel. Samples sit at the centers of `steps` equal
/// sub-intervals of the segment (midpoint rule for the exposure integral).
/// Coordinates outside the image are clamped to the border.
pub fn synthesize_motion_blur(sharp: &ImageTensor, flow: &FlowField, steps: usize) -> Result<ImageTensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if flow.height != sharp.height() || flow.width != sharp.width() {
        return Err(Error::SizeMismatch(format!(
            "flow is {}x{}, image is {}x{}",
            flow.height,
            flow.width,
            sharp.height(),
            sharp.width()
        )));
    }
    if flow.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("flow contains non-finite values".into()));
    }
    let ts: Vec<f64> = (0..steps)
        .map(|i| (i as f64 + 0.5) / steps as f64 - 0.5)
        .collect();
    let mut out = sharp.clone();
    for y in 0..sharp.height() {
        for x in 0..sharp.width() {
            let (u, v) = flow.at(y, x);
            if u == 0.0 && v == 0.0 {
                continue;
            }
            for ch in 0..sharp.channels() {
                let acc: f64 = ts
                    .iter()
                    .map(|t| bilinear(sharp, y as f64 + t * v, x as f64 + t * u, ch))
                    .sum();
                out.set(y, x, ch, acc / steps as f64);
            }
        }
    }
    Ok(out)
}
