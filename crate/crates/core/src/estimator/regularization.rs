use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset inside the sparsity power, keeping its gradient finite at zero.
const SPARSITY_EPS: f64 = 1e-8;
/// Radius (pixels from the center) inside which mass is not penalized.
const BOUNDARY_RADIUS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub sum_to_one: f64,
    pub boundary: f64,
    pub sparsity: f64,
    pub centrality: f64,
    /// Exponent of the sparsity penalty, in (0, 1).
    #[serde(default = "default_power")]
    pub sparsity_power: f64,
}

fn default_power() -> f64 {
    0.5
}

impl Default for RegWeights {
    fn default() -> Self {
        RegWeights {
            sum_to_one: 0.5,
            boundary: 0.5,
            sparsity: 5.0,
            centrality: 1.0,
            sparsity_power: 0.5,
        }
    }
}

/// Unweighted penalty terms as scalar tensors.
pub(crate) struct RegTensors {
    pub sum_to_one: Tensor,
    pub boundary: Tensor,
    pub sparsity: Tensor,
    pub centrality: Tensor,
}

impl RegTensors {
    pub fn total(&self, w: &RegWeights) -> Result<Tensor> {
        let t = ((&self.sum_to_one * w.sum_to_one)? + (&self.boundary * w.boundary)?)?;
        let t = (t + (&self.sparsity * w.sparsity)?)?;
        Ok((t + (&self.centrality * w.centrality)?)?)
    }
}

/// Penalty values for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegTerms {
    pub sum_to_one: f64,
    pub boundary: f64,
    pub sparsity: f64,
    pub centrality: f64,
    pub total: f64,
}

/// Differentiable penalties on a square raw kernel `(n, n)`:
///
/// - `(sum k - 1)^2`,
/// - `sum |k| * max(r - 5, 0)` with `r` the distance to the center,
/// - `mean((|k| + e)^p - e^p)`,
/// - squared distance between the centroid and the center.
///
/// The centroid term is zero when the kernel has (numerically) no mass.
pub(crate) fn regularization_tensors(k: &Tensor, power: f64) -> Result<RegTensors> {
    let (n, m) = k.dims2()?;
    if n != m {
        return Err(Error::SizeMismatch(format!("kernel must be square, got {n}x{m}")));
    }
    let dtype = k.dtype();
    let c = (n as f64 - 1.0) / 2.0;
    let coords: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let col = Tensor::from_vec(coords.clone(), (1, n), &Device::Cpu)?.to_dtype(dtype)?;
    let row = Tensor::from_vec(coords, (n, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let ring: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = ((idx / n) as f64, (idx % n) as f64);
            (((i - c).powi(2) + (j - c).powi(2)).sqrt() - BOUNDARY_RADIUS).max(0.0)
        })
        .collect();
    let ring = Tensor::from_vec(ring, (n, n), &Device::Cpu)?.to_dtype(dtype)?;

    let mass = k.sum_all()?;
    let sum_to_one = (&mass - 1.0)?.sqr()?;
    let abs = k.abs()?;
    let boundary = (&abs * &ring)?.sum_all()?;
    let sparsity = ((&abs + SPARSITY_EPS)?.powf(power)? - SPARSITY_EPS.powf(power))?.mean_all()?;
    let mass_value = mass.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let centrality = if mass_value.abs() > 1e-12 {
        let cx = (k.broadcast_mul(&col)?.sum_all()? / &mass)?;
        let cy = (k.broadcast_mul(&row)?.sum_all()? / &mass)?;
        ((cx - c)?.sqr()? + (cy - c)?.sqr()?)?
    } else {
        mass.zeros_like()?
    };
    Ok(RegTensors {
        sum_to_one,
        boundary,
        sparsity,
        centrality,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Evaluates the kernel penalties on a raw row-major `size x size` array.
pub fn kernel_regularization(values: &[f64], size: usize, weights: &RegWeights) -> Result<RegTerms> {
    if values.len() != size * size {
        return Err(Error::SizeMismatch(format!(
            "{} values for a {size}x{size} kernel",
            values.len()
        )));
    }
    let k = Tensor::from_vec(values.to_vec(), (size, size), &Device::Cpu)?;
    let t = regularization_tensors(&k, weights.sparsity_power)?;
    Ok(RegTerms {
        sum_to_one: scalar(&t.sum_to_one)?,
        boundary: scalar(&t.boundary)?,
        sparsity: scalar(&t.sparsity)?,
        centrality: scalar(&t.centrality)?,
        total: scalar(&t.total(weights)?)?,
    })
}
