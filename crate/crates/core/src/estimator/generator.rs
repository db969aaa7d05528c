use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::kernel::BlurKernel;
use crate::nn::{self, Init, ParamStore};

/// Fraction of impulse-response mass allowed outside the crop window before
/// [`extract_kernel`] warns.
pub const OUTSIDE_MASS_LIMIT: f64 = 0.05;

/// A purely linear stack of single-stride convolutions without bias. Its
/// composition is one convolution, the blur kernel it models.
pub struct GeneratorParams {
    store: ParamStore,
    sizes: Vec<usize>,
}

impl GeneratorParams {
    /// Randomly initialized generator with `width` hidden channels.
    pub fn new(sizes: &[usize], width: usize, dtype: DType, seed: u64) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut store = ParamStore::new(dtype, seed);
        let n = sizes.len();
        for (l, &k) in sizes.iter().enumerate() {
            let cin = if l == 0 { 1 } else { width };
            let cout = if l + 1 == n { 1 } else { width };
            let bound = 1.0 / ((cin * k * k) as f64).sqrt();
            store.add(&layer_name(l), &[cout, cin, k, k], Init::Uniform(bound))?;
        }
        Ok(GeneratorParams {
            store,
            sizes: sizes.to_vec(),
        })
    }

    /// Generator whose composition is the identity: a centered unit tap
    /// routed through channel 0 of every layer.
    pub fn delta(sizes: &[usize], width: usize, dtype: DType) -> Result<Self> {
        let g = GeneratorParams::new(sizes, width, dtype, 0)?;
        for (l, &k) in sizes.iter().enumerate() {
            let t = g.store.get(&layer_name(l))?;
            let (cout, cin, _, _) = t.dims4()?;
            let mut v = vec![0.0f64; cout * cin * k * k];
            v[(k / 2) * k + k / 2] = 1.0;
            g.store.set(
                &layer_name(l),
                &Tensor::from_vec(v, (cout, cin, k, k), &Device::Cpu)?,
            )?;
        }
        Ok(g)
    }

    /// Generator made of explicit layer weights `(cout, cin, k, k)`.
    pub fn from_layers(layers: Vec<Tensor>) -> Result<Self> {
        let dtype = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("generator needs at least one layer".into()))?
            .dtype();
        let mut store = ParamStore::new(dtype, 0);
        let mut sizes = Vec::new();
        let mut prev = 1;
        for (l, w) in layers.iter().enumerate() {
            let (cout, cin, kh, kw) = w.dims4()?;
            if kh != kw || kh % 2 == 0 || cin != prev {
                return Err(Error::SizeMismatch(format!(
                    "layer {l} has shape {:?}; expected odd square kernels chaining from {prev} channels",
                    w.dims()
                )));
            }
            prev = cout;
            sizes.push(kh);
            store.add(&layer_name(l), w.dims(), Init::Zeros)?;
            store.set(&layer_name(l), w)?;
        }
        if prev != 1 {
            return Err(Error::SizeMismatch("last generator layer must have one channel".into()));
        }
        Ok(GeneratorParams { store, sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub(crate) fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn layers(&self) -> Result<Vec<&Tensor>> {
        (0..self.sizes.len()).map(|l| self.store.get(&layer_name(l))).collect()
    }

    /// Side length of the composed convolution.
    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.sizes)
    }

    /// Applies the stack to `(batch, 1, H, W)` without padding; the output
    /// loses `receptive_field() - 1` pixels in each dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for w in self.layers()? {
            h = nn::conv(&h, w, None, 0, 1)?;
        }
        Ok(h)
    }

    /// The composed kernel as a `(rf, rf)` tensor in true-convolution
    /// orientation: `forward(x)` equals convolving `x` with it.
    pub fn impulse_response(&self) -> Result<Tensor> {
        let rf = self.receptive_field();
        let n = 2 * rf - 1;
        let mut d = vec![0.0f32; n * n];
        d[(rf - 1) * n + rf - 1] = 1.0;
        let delta = Tensor::from_vec(d, (1, 1, n, n), &Device::Cpu)?.to_dtype(self.store.dtype())?;
        // the response to a unit impulse is the convolution kernel itself
        Ok(self.forward(&delta)?.reshape((rf, rf))?)
    }

    /// Applies the stack through its composed kernel: one convolution.
    /// Mathematically identical to [`forward`](Self::forward).
    pub fn forward_composed(&self, x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
        let k = kernel.dim(0)?;
        let w = kernel.flip(&[0, 1])?.reshape((1, 1, k, k))?;
        nn::conv(x, &w, None, 0, 1)
    }
}

fn layer_name(l: usize) -> String {
    format!("layer{l}")
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() || sizes.iter().any(|k| k % 2 == 0) {
        return Err(Error::InvalidArgument(format!(
            "generator layer sizes must be odd and non-empty, got {sizes:?}"
        )));
    }
    Ok(())
}

pub fn receptive_field(sizes: &[usize]) -> usize {
    sizes.iter().map(|k| k - 1).sum::<usize>() + 1
}

/// Result of [`extract_kernel`].
#[derive(Debug, Clone)]
pub struct Extracted {
    pub kernel: BlurKernel,
    /// Fraction of absolute impulse-response mass outside the crop window.
    pub outside_mass: f64,
}

/// Crops a raw kernel (row-major, `n x n`) to `size x size` about its
/// centroid and returns the crop with the fraction of absolute mass left
/// outside.
pub fn crop_about_centroid(raw: &[f64], n: usize, size: usize) -> (Vec<f64>, f64) {
    if n <= size {
        let pad = (size - n) / 2;
        let mut out = vec![0.0; size * size];
        for i in 0..n {
            for j in 0..n {
                out[(i + pad) * size + j + pad] = raw[i * n + j];
            }
        }
        return (out, 0.0);
    }
    let (mut m, mut cy, mut cx) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let w = raw[i * n + j];
            m += w;
            cy += w * i as f64;
            cx += w * j as f64;
        }
    }
    let half = size / 2;
    let center = |c: f64| {
        let c = if m.abs() > 1e-12 { (c / m).round() } else { (n / 2) as f64 };
        (c as isize).clamp(half as isize, (n - 1 - half) as isize) as usize
    };
    let (y0, x0) = (center(cy) - half, center(cx) - half);
    let total: f64 = raw.iter().map(|v| v.abs()).sum();
    let mut out = Vec::with_capacity(size * size);
    for i in y0..y0 + size {
        out.extend_from_slice(&raw[i * n + x0..i * n + x0 + size]);
    }
    let inside: f64 = out.iter().map(|v| v.abs()).sum();
    let outside = if total > 0.0 { 1.0 - inside / total } else { 0.0 };
    (out, outside.max(0.0))
}

/// The generator's blur kernel: the impulse response of the stack, cropped
/// to `size x size` about its centroid, clamped at zero and renormalized.
pub fn extract_kernel(gen: &GeneratorParams, size: usize) -> Result<Extracted> {
    let rf = gen.receptive_field();
    let raw = gen
        .impulse_response()?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let (values, outside_mass) = crop_about_centroid(&raw, rf, size);
    if outside_mass > OUTSIDE_MASS_LIMIT {
        log::warn!(
            "{:.1}% of the generator's kernel mass lies outside the {size}x{size} window",
            100.0 * outside_mass
        );
    }
    Ok(Extracted {
        kernel: BlurKernel::from_raw(size, values)?,
        outside_mass,
    })
}
