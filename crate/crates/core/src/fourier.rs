//! Small 2-D FFT helpers over row-major complex planes.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

pub(crate) fn fft2(data: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    debug_assert_eq!(data.len(), height * width);
    let mut planner = FftPlanner::<f64>::new();
    let row = if inverse {
        planner.plan_fft_inverse(width)
    } else {
        planner.plan_fft_forward(width)
    };
    for r in data.chunks_exact_mut(width) {
        row.process(r);
    }
    let col = if inverse {
        planner.plan_fft_inverse(height)
    } else {
        planner.plan_fft_forward(height)
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            buf[y] = data[y * width + x];
        }
        col.process(&mut buf);
        for y in 0..height {
            data[y * width + x] = buf[y];
        }
    }
    if inverse {
        let scale = 1.0 / (height * width) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

pub(crate) fn to_complex(plane: &[f64]) -> Vec<Complex64> {
    plane.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Embeds a centered `size x size` kernel into an `height x width` plane
/// with its center at the origin (wrapping negative offsets), which is the
/// layout whose DFT is the kernel's transfer function.
pub(crate) fn kernel_transfer(
    kernel: &[f64],
    size: usize,
    height: usize,
    width: usize,
) -> Vec<Complex64> {
    let c = (size / 2) as isize;
    let mut plane = vec![Complex64::new(0.0, 0.0); height * width];
    for i in 0..size {
        for j in 0..size {
            let y = (i as isize - c).rem_euclid(height as isize) as usize;
            let x = (j as isize - c).rem_euclid(width as isize) as usize;
            plane[y * width + x].re += kernel[i * size + j];
        }
    }
    fft2(&mut plane, height, width, false);
    plane
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_inverse_round_trip() {
        let plane: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut c = to_complex(&plane);
        fft2(&mut c, 5, 6, false);
        fft2(&mut c, 5, 6, true);
        for (a, b) in c.iter().zip(&plane) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_kernel_has_unit_dc_gain() {
        let k = vec![1.0 / 9.0; 9];
        let t = kernel_transfer(&k, 3, 8, 8);
        assert!((t[0].re - 1.0).abs() < 1e-12);
    }
}
