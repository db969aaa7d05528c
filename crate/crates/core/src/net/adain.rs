use candle_core::Tensor;

use crate::error::{Error, Result};

pub const ADAIN_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization over the spatial dimensions
/// (biased variance).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    Ok(centered.broadcast_div(&(var + ADAIN_EPS)?.sqrt()?)?)
}

/// Instance norm followed by an externally supplied affine map.
/// `scale` and `bias` have shape `(batch, channels)`.
pub fn adain(x: &Tensor, scale: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    for (what, t) in [("scale", scale), ("bias", bias)] {
        if t.dims() != [n, c] {
            return Err(Error::SizeMismatch(format!(
                "adain {what} has shape {:?}, features have {n} samples of {c} channels",
                t.dims()
            )));
        }
    }
    let scale = scale.reshape((n, c, 1, 1))?;
    let bias = bias.reshape((n, c, 1, 1))?;
    Ok(instance_norm(x)?.broadcast_mul(&scale)?.broadcast_add(&bias)?)
}
