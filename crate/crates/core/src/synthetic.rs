//! Procedural test imagery.
//!
//! The dead-leaves model paints occluding disks whose radii follow a
//! power law, which gives sharp edges at every scale and an approximately
//! scale-invariant spectrum, the statistics blur estimation relies on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{ColorSpace, ImageTensor};

/// RGB dead-leaves image, fully determined by `(height, width, seed)`.
pub fn dead_leaves(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ImageTensor::filled(height, width, ColorSpace::Rgb, 0.5);
    let rmin: f64 = 2.0;
    let rmax = (height.max(width) as f64 / 3.0).max(rmin + 1.0);
    let count = (height * width / 16).max(32);
    let (a, b) = (rmin.powi(-2), rmax.powi(-2));
    for _ in 0..count {
        let u: f64 = rng.random();
        let r = (a + u * (b - a)).powf(-0.5);
        let cy = rng.random_range(-rmax..height as f64 + rmax);
        let cx = rng.random_range(-rmax..width as f64 + rmax);
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as isize).clamp(0, height as isize) as usize;
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as isize).clamp(0, width as isize) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx < r * r {
                    for (c, v) in color.iter().enumerate() {
                        img.set(y, x, c, *v);
                    }
                }
            }
        }
    }
    img
}
