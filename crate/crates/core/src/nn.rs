//! Shared neural-network plumbing on top of `candle-core`: a named,
//! deterministically initialized parameter store, a few layer helpers and
//! the Adam optimizer.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// He-uniform for a given fan-in, multiplied by `gain`.
    He { fan_in: usize, gain: f64 },
    Uniform(f64),
}

/// Named parameters, iterated in name order. Initial values are drawn
/// from a seeded stream in insertion order, so two stores built by the same
/// code with the same seed are identical.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::He { fan_in, gain } => {
                let bound = gain * (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..bound)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(Var::as_tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Sum of scalar counts over parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites a parameter's value; shapes must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::SizeMismatch(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Re-draws every parameter uniformly in `[-bound, bound]`.
    pub fn randomize(&mut self, bound: f64) -> Result<()> {
        for var in self.params.values() {
            let n = var.elem_count();
            let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
            let t = Tensor::from_vec(values, var.dims(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn values_f32(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.params {
            let data = v
                .as_tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            out.insert(k.clone(), (v.dims().to_vec(), data));
        }
        Ok(out)
    }
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg = x.neg()?.relu()?;
    Ok((pos - neg.affine(LEAKY_SLOPE, 0.0)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// 2-D convolution (cross-correlation) with optional per-channel bias and
/// zero padding. Lowered to a gather plus one matrix product: the backward
/// pass of candle's CPU `conv2d` is much slower than that of `matmul`.
pub fn conv(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cout, cin, kh, kw) = weight.dims4()?;
    if cin != c {
        return Err(Error::SizeMismatch(format!(
            "convolution expects {cin} input channels, got {c}"
        )));
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < kh || wp < kw || stride == 0 {
        return Err(Error::SizeMismatch(format!(
            "a {kh}x{kw} kernel does not fit a {hp}x{wp} input"
        )));
    }
    let x = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?
    } else {
        x.clone()
    };
    let (ho, wo) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
    let cols = if kh == 1 && kw == 1 && stride == 1 {
        x.reshape((n, c, hp * wp))?
    } else {
        let mut idx = Vec::with_capacity(c * kh * kw * ho * wo);
        for ci in 0..c {
            for a in 0..kh {
                for b in 0..kw {
                    for y in 0..ho {
                        let row = ci * hp * wp + (y * stride + a) * wp + b;
                        idx.extend((0..wo).map(|xo| (row + xo * stride) as u32));
                    }
                }
            }
        }
        let idx = Tensor::from_vec(idx, c * kh * kw * ho * wo, x.device())?;
        x.reshape((n, c * hp * wp))?
            .index_select(&idx, 1)?
            .reshape((n, c * kh * kw, ho * wo))?
    };
    let y = weight
        .reshape((cout, cin * kh * kw))?
        .broadcast_matmul(&cols)?
        .reshape((n, cout, ho, wo))?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, cout, 1, 1))?)?),
        None => Ok(y),
    }
}

pub fn conv_transpose(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let y = x.conv_transpose2d(weight, padding, 0, stride, 1)?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
        None => Ok(y),
    }
}

pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&weight.t()?)?.broadcast_add(bias)?)
}

/// Adam with bias correction. Moments are kept per parameter name.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients still reference the forward graph; keeping them in
            // the moments would chain every step's graph together
            let g = g.detach();
            let g = &g;
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)? / denom)?;
            let next = (var.as_tensor() - (update * lr)?)?;
            var.set(&next)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stores_are_reproducible() {
        let build = |seed| {
            let mut s = ParamStore::new(DType::F32, seed);
            s.add("a", &[3, 4], Init::He { fan_in: 4, gain: 1.0 }).unwrap();
            s.add("b", &[4], Init::Zeros).unwrap();
            s.values_f32().unwrap()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
        let mut s = ParamStore::new(DType::F32, 0);
        s.add("a", &[2], Init::Ones).unwrap();
        assert!(s.add("a", &[2], Init::Ones).is_err());
        assert_eq!(s.num_scalars(), 2);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &Device::Cpu).unwrap();
        let y = lrelu(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![-0.4, 0.0, 3.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = ParamStore::new(DType::F64, 0);
        s.add("x", &[2], Init::Ones).unwrap();
        let target = Tensor::new(&[3.0f64, -1.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(0.9, 0.999);
        for _ in 0..2000 {
            let loss = (s.get("x").unwrap() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step(&s, &g, 0.01).unwrap();
        }
        let x = s.get("x").unwrap().to_vec1::<f64>().unwrap();
        assert!((x[0] - 3.0).abs() < 1e-3 && (x[1] + 1.0).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn conv_matches_candle_conv2d() {
        let dev = Device::Cpu;
        for (k, pad, stride, cin, cout) in [(3, 1, 1, 2, 4), (4, 1, 2, 3, 2), (1, 0, 1, 5, 3), (7, 0, 1, 1, 2)] {
            let x = Tensor::randn(0f64, 1.0, (2, cin, 11, 9), &dev).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (cout, cin, k, k), &dev).unwrap()).unwrap();
            let ours = conv(&x, &w, None, pad, stride).unwrap();
            let theirs = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            let diff = |a: &Tensor, b: &Tensor| {
                (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
            };
            assert!(diff(&ours, &theirs) < 1e-12);
            let g1 = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = theirs.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            assert!(diff(g1.get(&w).unwrap(), g2.get(&w).unwrap()) < 1e-9);
        }
    }
}
