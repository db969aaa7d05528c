//! From the generator's kernel to the image's kernel.
//!
//! The generator maps the 2x-downscaled image `D(a * B)` (binomial prefilter
//! `a`, decimation `D`) to patches that look like `B`. Writing `B = k * S`
//! for a scale-invariant `S`, a generator `g` that matches the statistics
//! satisfies `K(w) = G(w) A(w/2) K(w/2)`, which unrolls into
//!
//! ```text
//! K(w) = prod_{j >= 0} G(w / 2^j) A(w / 2^(j+1))
//! ```
//!
//! The product is evaluated as a DTFT on a fine grid, truncated after
//! [`DEPTH`] factors (the remaining ones are within float precision of 1
//! for smooth kernels), and brought back to the pixel domain.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier::fft2;
use crate::kernel::BlurKernel;

const GRID: usize = 64;
const DEPTH: usize = 8;

/// Binomial prefilter taps applied before decimation.
pub const PREFILTER: [f64; 3] = [0.25, 0.5, 0.25];

fn frequencies() -> Vec<f64> {
    (0..GRID)
        .map(|i| {
            let f = if i < GRID / 2 { i as f64 } else { i as f64 - GRID as f64 };
            2.0 * std::f64::consts::PI * f / GRID as f64
        })
        .collect()
}

/// DTFT of a centered `n x n` kernel at `(scale * wy, scale * wx)` for all
/// grid frequencies, as a row-major `GRID x GRID` plane.
fn dtft(g: &[f64], n: usize, w: &[f64], scale: f64) -> Vec<Complex64> {
    let c = (n / 2) as f64;
    // separable phase factors e^{-i w (t - c)}
    let phase: Vec<Complex64> = w
        .iter()
        .flat_map(|&wi| {
            (0..n).map(move |t| Complex64::from_polar(1.0, -wi * scale * (t as f64 - c)))
        })
        .collect();
    // rows first: tmp[fy][b] = sum_a phase[fy][a] g[a][b]
    let mut tmp = vec![Complex64::new(0.0, 0.0); GRID * n];
    for fy in 0..GRID {
        for a in 0..n {
            let p = phase[fy * n + a];
            for b in 0..n {
                tmp[fy * n + b] += p * g[a * n + b];
            }
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); GRID * GRID];
    for fy in 0..GRID {
        for fx in 0..GRID {
            let mut acc = Complex64::new(0.0, 0.0);
            for b in 0..n {
                acc += tmp[fy * n + b] * phase[fx * n + b];
            }
            out[fy * GRID + fx] = acc;
        }
    }
    out
}

fn prefilter_response(w: f64) -> f64 {
    // symmetric taps: a0 + 2 a1 cos w
    PREFILTER[1] + 2.0 * PREFILTER[0] * w.cos()
}

/// Recovers the full-resolution blur kernel (`size x size`, clamped and
/// normalized) from a raw generator kernel (`n x n`, row-major).
pub fn recover_absolute_kernel(g: &[f64], n: usize, size: usize) -> Result<BlurKernel> {
    if g.len() != n * n || n.is_multiple_of(2) {
        return Err(Error::SizeMismatch(format!(
            "{} values for an odd {n}x{n} kernel",
            g.len()
        )));
    }
    if size > GRID {
        return Err(Error::InvalidKernelSize(size));
    }
    let w = frequencies();
    let mut spectrum = vec![Complex64::new(1.0, 0.0); GRID * GRID];
    for j in 0..DEPTH {
        let gj = dtft(g, n, &w, 0.5f64.powi(j as i32));
        let sa = 0.5f64.powi(j as i32 + 1);
        for fy in 0..GRID {
            let ay = prefilter_response(w[fy] * sa);
            for fx in 0..GRID {
                let ax = prefilter_response(w[fx] * sa);
                spectrum[fy * GRID + fx] *= gj[fy * GRID + fx] * (ay * ax);
            }
        }
    }
    fft2(&mut spectrum, GRID, GRID, true);
    let half = size / 2;
    let mut values = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            // spatial offset (i - half, j - half) wraps around the origin
            let y = (i as isize - half as isize).rem_euclid(GRID as isize) as usize;
            let x = (j as isize - half as isize).rem_euclid(GRID as isize) as usize;
            values.push(spectrum[y * GRID + x].re);
        }
    }
    BlurKernel::from_raw(size, values)
}
