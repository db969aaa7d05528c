use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamStore};

const BN_EPS: f64 = 1e-5;
const FIRST_KERNEL: usize = 7;

/// Fully convolutional patch discriminator: a 7x7 convolution followed by
/// 1x1 convolutions with batch norm and ReLU, ending in a sigmoid. Every
/// convolution is spectrally normalized with one power iteration per
/// training step.
pub struct Discriminator {
    store: ParamStore,
    /// Left singular vector estimates, one per convolution, never
    /// differentiated through.
    u: Vec<Tensor>,
    convs: usize,
}

impl Discriminator {
    pub fn new(width: usize, layers: usize, dtype: DType, seed: u64) -> Result<Self> {
        if layers < 2 || width == 0 {
            return Err(Error::InvalidArgument(
                "the discriminator needs at least two layers of positive width".into(),
            ));
        }
        let mut store = ParamStore::new(dtype, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut u = Vec::with_capacity(layers);
        for l in 0..layers {
            let (cin, cout, k) = match l {
                0 => (1, width, FIRST_KERNEL),
                _ if l + 1 == layers => (width, 1, 1),
                _ => (width, width, 1),
            };
            let fan_in = cin * k * k;
            let bound = 1.0 / (fan_in as f64).sqrt();
            store.add(&format!("conv{l}.weight"), &[cout, cin, k, k], Init::Uniform(bound))?;
            store.add(&format!("conv{l}.bias"), &[cout], Init::Uniform(bound))?;
            if l > 0 && l + 1 < layers {
                store.add(&format!("bn{l}.gamma"), &[cout], Init::Ones)?;
                store.add(&format!("bn{l}.beta"), &[cout], Init::Zeros)?;
            }
            let v: Vec<f64> = (0..cout).map(|_| StandardNormal.sample(&mut rng)).collect();
            u.push(normalize(&Tensor::from_vec(v, cout, &Device::Cpu)?.to_dtype(dtype)?)?);
        }
        Ok(Discriminator {
            store,
            u,
            convs: layers,
        })
    }

    pub(crate) fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Pixels lost at each border: the output is `P - margin` wide.
    pub fn margin(&self) -> usize {
        FIRST_KERNEL - 1
    }

    /// Advances the power iteration and returns the spectrally normalized
    /// weights for this step (differentiable w.r.t. the raw weights).
    pub fn normalized_weights(&mut self) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.convs);
        for l in 0..self.convs {
            let w = self.store.get(&format!("conv{l}.weight"))?;
            let cout = w.dim(0)?;
            let mat = w.reshape((cout, ()))?;
            let frozen = mat.detach();
            let v = normalize(&frozen.t()?.matmul(&self.u[l].unsqueeze(1)?)?.squeeze(1)?)?;
            let u = normalize(&frozen.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
            let sigma = u
                .unsqueeze(0)?
                .matmul(&mat.matmul(&v.unsqueeze(1)?)?)?
                .reshape(())?;
            out.push(w.broadcast_div(&sigma)?);
            self.u[l] = u;
        }
        Ok(out)
    }

    /// Per-pixel realness in (0, 1) for `(batch, 1, P, P)` patches.
    pub fn forward(&self, x: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
        let mut h = x.clone();
        for (l, w) in weights.iter().enumerate() {
            let b = self.store.get(&format!("conv{l}.bias"))?;
            h = nn::conv(&h, w, Some(b), 0, 1)?;
            if l > 0 && l + 1 < self.convs {
                h = batch_norm(
                    &h,
                    self.store.get(&format!("bn{l}.gamma"))?,
                    self.store.get(&format!("bn{l}.beta"))?,
                )?
                .relu()?;
            }
        }
        nn::sigmoid(&h)
    }
}

fn normalize(v: &Tensor) -> Result<Tensor> {
    let norm = v.sqr()?.sum_all()?.sqrt()?;
    Ok(v.broadcast_div(&(norm + 1e-12)?)?)
}

/// Training-mode batch norm: statistics over batch and space.
fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
    let y = centered.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
    Ok(y
        .broadcast_mul(&gamma.reshape((1, c, 1, 1))?)?
        .broadcast_add(&beta.reshape((1, c, 1, 1))?)?)
}
