//! Parametric blur kernels: Gaussian construction, the default 16-kernel
//! bank, distances between kernels and the `KERN1` binary file format.
//!
//! Kernels are square, odd-sized and stored row-major. Index `(i, j)` is
//! row `i` (y, pointing down) and column `j` (x, pointing right); the
//! geometric center is `c = (size - 1) / 2`. Gaussians are sampled at the
//! integer grid points, truncated to the window and renormalized.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KERNEL_SIZE: usize = 17;

const KERN_MAGIC: &[u8; 5] = b"KERN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurKind {
    Isotropic,
    Anisotropic,
}

/// Parameters of a (possibly rotated) Gaussian blur kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    pub kind: BlurKind,
    pub size: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Rotation of the `sigma_x` axis in radians, counterclockwise in the
    /// (x right, y down) grid frame.
    pub theta: f64,
}

impl BlurSpec {
    pub fn isotropic(size: usize, sigma: f64) -> Self {
        BlurSpec {
            kind: BlurKind::Isotropic,
            size,
            sigma_x: sigma,
            sigma_y: sigma,
            theta: 0.0,
        }
    }

    pub fn anisotropic(size: usize, sigma_x: f64, sigma_y: f64, theta: f64) -> Self {
        BlurSpec {
            kind: BlurKind::Anisotropic,
            size,
            sigma_x,
            sigma_y,
            theta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_size(self.size)?;
        check_sigma(self.sigma_x)?;
        check_sigma(self.sigma_y)?;
        if !self.theta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "theta must be finite, got {}",
                self.theta
            )));
        }
        if self.kind == BlurKind::Isotropic && (self.sigma_x != self.sigma_y || self.theta != 0.0)
        {
            return Err(Error::InvalidArgument(
                "isotropic spec requires sigma_x == sigma_y and theta == 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_kernel(&self) -> Result<BlurKernel> {
        self.validate()?;
        let mut k = match self.kind {
            BlurKind::Isotropic => make_isotropic_gaussian(self.size, self.sigma_x)?,
            BlurKind::Anisotropic => {
                make_anisotropic_gaussian(self.size, self.sigma_x, self.sigma_y, self.theta)?
            }
        };
        k.spec = Some(*self);
        Ok(k)
    }
}

/// A normalized, non-negative square blur kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    values: Vec<f64>,
    pub spec: Option<BlurSpec>,
}

impl BlurKernel {
    /// Builds a kernel from raw row-major values, clamping negatives to
    /// zero and renormalizing to unit sum.
    pub fn from_raw(size: usize, mut values: Vec<f64>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::InvalidKernelSize(size));
        }
        if values.len() != size * size {
            return Err(Error::SizeMismatch(format!(
                "{} values for a {size}x{size} kernel",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("kernel contains non-finite values".into()));
        }
        for v in values.iter_mut() {
            *v = v.max(0.0);
        }
        let sum: f64 = values.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Numerical(
                "kernel has no positive mass after clamping".into(),
            ));
        }
        for v in values.iter_mut() {
            *v /= sum;
        }
        Ok(BlurKernel {
            size,
            values,
            spec: None,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn center(&self) -> usize {
        (self.size - 1) / 2
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Center of mass as `(row, col)`.
    pub fn centroid(&self) -> (f64, f64) {
        centroid(self.size, &self.values)
    }

    /// Second central moments `[[cov_xx, cov_xy], [cov_xy, cov_yy]]`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let (cy, cx) = self.centroid();
        let mass = self.sum();
        let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
        for i in 0..self.size {
            for j in 0..self.size {
                let w = self.at(i, j);
                let dx = j as f64 - cx;
                let dy = i as f64 - cy;
                xx += w * dx * dx;
                xy += w * dx * dy;
                yy += w * dy * dy;
            }
        }
        [[xx / mass, xy / mass], [xy / mass, yy / mass]]
    }

    /// Orientation of the dominant second-moment axis in radians, in `[0, π)`.
    pub fn principal_axis(&self) -> f64 {
        let [[xx, xy], [_, yy]] = self.covariance();
        let angle = 0.5 * (2.0 * xy).atan2(xx - yy);
        angle.rem_euclid(PI)
    }

    /// Point reflection through the center.
    pub fn flipped(&self) -> BlurKernel {
        let mut values = self.values.clone();
        values.reverse();
        BlurKernel {
            size: self.size,
            values,
            spec: None,
        }
    }

    pub fn write_kern1(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(KERN_MAGIC)?;
        w.write_all(&(self.size as u32).to_le_bytes())?;
        w.write_all(&(self.size as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a `KERN1` stream. Values are taken verbatim (no renormalization)
    /// so that a write/read/write cycle is bit-exact.
    pub fn read_kern1(r: &mut impl Read) -> Result<BlurKernel> {
        let bad = |reason: String| Error::Format {
            what: "KERN1 file",
            reason,
        };
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|e| bad(format!("reading magic: {e}")))?;
        if &magic != KERN_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|e| bad(format!("reading height: {e}")))?;
        let height = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)
            .map_err(|e| bad(format!("reading width: {e}")))?;
        let width = u32::from_le_bytes(word) as usize;
        if height != width {
            return Err(bad(format!("non-square kernel {height}x{width}")));
        }
        if height.is_multiple_of(2) || height == 0 {
            return Err(Error::InvalidKernelSize(height));
        }
        let mut values = Vec::with_capacity(height * width);
        for _ in 0..height * width {
            r.read_exact(&mut word)
                .map_err(|e| bad(format!("truncated payload: {e}")))?;
            let v = f32::from_le_bytes(word) as f64;
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!("invalid entry {v}")));
            }
            values.push(v);
        }
        Ok(BlurKernel {
            size: height,
            values,
            spec: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(13 + 4 * self.values.len());
        self.write_kern1(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BlurKernel> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        BlurKernel::read_kern1(&mut bytes.as_slice())
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 3 || size.is_multiple_of(2) {
        return Err(Error::InvalidKernelSize(size));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidSigma(sigma));
    }
    Ok(())
}

pub(crate) fn centroid(size: usize, values: &[f64]) -> (f64, f64) {
    let (mut m, mut cy, mut cx) = (0.0, 0.0, 0.0);
    for i in 0..size {
        for j in 0..size {
            let w = values[i * size + j];
            m += w;
            cy += w * i as f64;
            cx += w * j as f64;
        }
    }
    (cy / m, cx / m)
}

/// Fills a `size x size` grid from a function of the centered offsets
/// `(dx, dy)` and normalizes it.
fn sample_normalized(size: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let c = ((size - 1) / 2) as f64;
    let mut values = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            values.push(f(j as f64 - c, i as f64 - c));
        }
    }
    let sum: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= sum);
    values
}

pub fn make_isotropic_gaussian(size: usize, sigma: f64) -> Result<BlurKernel> {
    check_size(size)?;
    check_sigma(sigma)?;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let values = sample_normalized(size, |dx, dy| (-(dx * dx + dy * dy) * inv).exp());
    Ok(BlurKernel {
        size,
        values,
        spec: Some(BlurSpec::isotropic(size, sigma)),
    })
}

/// Bivariate Gaussian with covariance `R(θ) diag(σx², σy²) R(θ)ᵀ`.
pub fn make_anisotropic_gaussian(
    size: usize,
    sigma_x: f64,
    sigma_y: f64,
    theta: f64,
) -> Result<BlurKernel> {
    check_size(size)?;
    check_sigma(sigma_x)?;
    check_sigma(sigma_y)?;
    if !theta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "theta must be finite, got {theta}"
        )));
    }
    let theta = theta.rem_euclid(PI);
    let (s, c) = theta.sin_cos();
    let (vx, vy) = (sigma_x * sigma_x, sigma_y * sigma_y);
    // Precision matrix R diag(1/vx, 1/vy) Rᵀ.
    let a = c * c / vx + s * s / vy;
    let b = c * s * (1.0 / vx - 1.0 / vy);
    let d = s * s / vx + c * c / vy;
    let values = sample_normalized(size, |dx, dy| {
        (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + d * dy * dy)).exp()
    });
    Ok(BlurKernel {
        size,
        values,
        spec: Some(BlurSpec::anisotropic(size, sigma_x, sigma_y, theta)),
    })
}

pub fn delta_kernel(size: usize) -> Result<BlurKernel> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::InvalidKernelSize(size));
    }
    let mut values = vec![0.0; size * size];
    values[(size / 2) * size + size / 2] = 1.0;
    Ok(BlurKernel {
        size,
        values,
        spec: None,
    })
}

/// Specs of the default 16-kernel bank: four isotropic Gaussians of
/// increasing width followed by twelve elongated ones at six orientations.
pub fn default_bank_specs() -> Vec<BlurSpec> {
    let size = DEFAULT_KERNEL_SIZE;
    let mut specs: Vec<BlurSpec> = [1.0, 2.0, 3.0, 4.0]
        .iter()
        .map(|&s| BlurSpec::isotropic(size, s))
        .collect();
    for &(sx, sy) in &[(3.0, 1.0), (4.0, 1.5)] {
        for step in 0..6 {
            let theta = step as f64 * PI / 6.0;
            specs.push(BlurSpec::anisotropic(size, sx, sy, theta));
        }
    }
    specs
}

pub fn make_default_bank() -> Vec<BlurKernel> {
    make_bank(&default_bank_specs()).expect("default bank specs are valid")
}

pub fn make_bank(specs: &[BlurSpec]) -> Result<Vec<BlurKernel>> {
    specs.iter().map(BlurSpec::to_kernel).collect()
}

pub fn bank_to_json(specs: &[BlurSpec]) -> Result<String> {
    Ok(serde_json::to_string_pretty(specs)?)
}

pub fn bank_from_json(text: &str) -> Result<Vec<BlurSpec>> {
    let specs: Vec<BlurSpec> = serde_json::from_str(text)?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<Vec<BlurSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    bank_from_json(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelDistance {
    /// Plain Euclidean distance between the value grids.
    pub l2: f64,
    /// Minimum L2 over integer translations of `b` within ±2 px.
    pub shift_tolerant: f64,
}

pub const SHIFT_TOLERANCE: isize = 2;

pub fn kernel_distance(a: &BlurKernel, b: &BlurKernel) -> Result<KernelDistance> {
    if a.size != b.size {
        return Err(Error::SizeMismatch(format!(
            "kernel distance between {0}x{0} and {1}x{1}",
            a.size, b.size
        )));
    }
    let l2 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();

    // Shifts are evaluated on the unbounded plane (zero outside both
    // windows) so that no mass is lost and the result stays symmetric.
    let n = a.size as isize;
    let r = SHIFT_TOLERANCE;
    let mut best = f64::INFINITY;
    for sy in -r..=r {
        for sx in -r..=r {
            let mut acc = 0.0;
            for i in -r..n + r {
                for j in -r..n + r {
                    let va = sample(a, i, j);
                    let vb = sample(b, i - sy, j - sx);
                    acc += (va - vb) * (va - vb);
                }
            }
            best = best.min(acc.sqrt());
        }
    }
    Ok(KernelDistance {
        l2,
        shift_tolerant: best,
    })
}

fn sample(k: &BlurKernel, i: isize, j: isize) -> f64 {
    let n = k.size as isize;
    if i < 0 || j < 0 || i >= n || j >= n {
        0.0
    } else {
        k.values[(i * n + j) as usize]
    }
}
