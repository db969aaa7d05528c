//! The kernel-conditioned restoration network.
//!
//! A full-resolution trunk: a stem lifts the blurred image to `width`
//! channels, a chain of residual encoder/decoder blocks processes it, and a
//! head predicts a correction that is added back to the input. Each block
//! squeezes its input by 4x, normalizes the bottleneck with per-channel
//! scale and bias produced from the blur kernel by a small MLP, mixes in the
//! stem features (the long-term skip) and decodes back to full resolution.
//!
//! In motion mode the kernel MLP is replaced by a per-pixel flow field that
//! is concatenated to every bottleneck.

mod adain;
mod checkpoint;
mod motion;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImageTensor};
use crate::kernel::{BlurKernel, DEFAULT_KERNEL_SIZE};
use crate::nn::{self, Init, ParamStore};

pub use adain::{adain, instance_norm, ADAIN_EPS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use motion::{random_linear_flow, synthesize_motion_blur, FlowField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    KernelAdain,
    MotionConcat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoKernelAe,
    NoLts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub mode: Mode,
    pub blocks: usize,
    pub width: usize,
    #[serde(default)]
    pub ablate: Vec<Ablation>,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_mapping_width")]
    pub mapping_width: usize,
    #[serde(default = "default_mapping_layers")]
    pub mapping_layers: usize,
}

fn default_kernel_size() -> usize {
    DEFAULT_KERNEL_SIZE
}

fn default_mapping_width() -> usize {
    256
}

fn default_mapping_layers() -> usize {
    4
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            mode: Mode::KernelAdain,
            blocks: 8,
            width: 64,
            ablate: Vec::new(),
            kernel_size: DEFAULT_KERNEL_SIZE,
            mapping_width: 256,
            mapping_layers: 4,
        }
    }
}

impl NetConfig {
    pub fn desk() -> Self {
        NetConfig {
            blocks: 2,
            width: 16,
            ..NetConfig::default()
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        if !self.ablate.contains(&a) {
            self.ablate.push(a);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("blocks and width must be positive".into()));
        }
        if self.mapping_layers < 2 || self.mapping_width == 0 {
            return Err(Error::InvalidArgument(
                "the mapping network needs at least 2 layers of positive width".into(),
            ));
        }
        if self.mode == Mode::MotionConcat && self.ablate.contains(&Ablation::NoKernelAe) {
            return Err(Error::InvalidArgument(
                "no_kernel_ae cannot be combined with motion mode".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size < 3 {
            return Err(Error::InvalidKernelSize(self.kernel_size));
        }
        Ok(())
    }

    /// True when the bottlenecks are conditioned on the kernel via AdaIN.
    pub fn uses_mapping(&self) -> bool {
        self.mode == Mode::KernelAdain && !self.ablate.contains(&Ablation::NoKernelAe)
    }

    pub fn uses_skip(&self) -> bool {
        !self.ablate.contains(&Ablation::NoLts)
    }

    pub fn bottleneck(&self) -> usize {
        4 * self.width
    }

    /// Length of the mapping network's output: a scale and a bias vector
    /// for both conditioned layers of every block.
    pub fn style_len(&self) -> usize {
        self.blocks * 2 * 2 * self.bottleneck()
    }

    fn mapping_dims(&self) -> Vec<usize> {
        let k2 = self.kernel_size * self.kernel_size;
        let mut dims = vec![k2];
        dims.extend(std::iter::repeat_n(self.mapping_width, self.mapping_layers - 1));
        dims.push(self.style_len());
        dims
    }

    /// Exact scalar count of the mapping network.
    pub fn mapping_param_count(&self) -> usize {
        self.mapping_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Exact scalar count of all long-term skip projections.
    pub fn skip_param_count(&self) -> usize {
        self.blocks * (self.width * self.bottleneck() + self.bottleneck())
    }
}

/// Per-block AdaIN parameters for the two conditioned bottleneck layers.
/// Each tensor has shape `(batch, 4 * width)`.
#[derive(Debug, Clone)]
pub struct BlockStyle {
    pub scale0: Tensor,
    pub bias0: Tensor,
    pub scale1: Tensor,
    pub bias1: Tensor,
}

/// What the trunk is conditioned on.
pub enum Conditioning<'a> {
    /// Flattened kernels, shape `(batch, kernel_size^2)`.
    Kernel(&'a Tensor),
    /// Flow fields, shape `(batch, 2, H, W)`, channel 0 horizontal.
    Flow(&'a Tensor),
    /// Only valid with the kernel ablation.
    None,
}

pub struct Bikanet {
    config: NetConfig,
    store: ParamStore,
}

fn conv_params(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Result<()> {
    store.add(
        &format!("{name}.weight"),
        &[cout, cin, k, k],
        Init::He { fan_in: cin * k * k, gain },
    )?;
    store.add(&format!("{name}.bias"), &[cout], Init::Zeros)?;
    Ok(())
}

fn conv_t_params(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Result<()> {
    // a stride-2 transposed conv with a 4x4 kernel feeds each output from 4 taps
    store.add(
        &format!("{name}.weight"),
        &[cin, cout, k, k],
        Init::He { fan_in: cin * k * k / 4, gain },
    )?;
    store.add(&format!("{name}.bias"), &[cout], Init::Zeros)?;
    Ok(())
}

impl Bikanet {
    /// Builds a freshly initialized network. The head's last layer and the
    /// mapping network's last layer start at zero, so the untrained network
    /// is the identity and every AdaIN starts as plain instance norm.
    pub fn new(config: NetConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let f = config.width;
        let b = config.bottleneck();
        conv_params(&mut store, "stem.0", 3, f, 3, 1.0)?;
        conv_params(&mut store, "stem.1", f, f, 3, 1.0)?;
        for i in 0..config.blocks {
            let p = format!("blocks.{i}");
            conv_params(&mut store, &format!("{p}.enc0"), f, 2 * f, 3, 1.0)?;
            conv_params(&mut store, &format!("{p}.enc1"), 2 * f, b, 3, 1.0)?;
            if config.mode == Mode::MotionConcat {
                conv_params(&mut store, &format!("{p}.fuse"), b + 2, b, 1, 1.0)?;
            }
            conv_params(&mut store, &format!("{p}.mid0"), b, b, 3, 1.0)?;
            conv_params(&mut store, &format!("{p}.mid1"), b, b, 3, 1.0)?;
            if config.uses_skip() {
                conv_params(&mut store, &format!("{p}.skip_proj"), f, b, 1, 1.0)?;
            }
            conv_t_params(&mut store, &format!("{p}.dec0"), b, 2 * f, 4, 1.0)?;
            conv_t_params(&mut store, &format!("{p}.dec1"), 2 * f, f, 4, 0.1)?;
        }
        if config.uses_mapping() {
            let dims = config.mapping_dims();
            let last = dims.len() - 2;
            for (l, w) in dims.windows(2).enumerate() {
                let init = if l == last {
                    Init::Zeros
                } else {
                    Init::He { fan_in: w[0], gain: 1.0 }
                };
                store.add(&format!("mapping.{l}.weight"), &[w[1], w[0]], init)?;
                store.add(&format!("mapping.{l}.bias"), &[w[1]], Init::Zeros)?;
            }
        }
        conv_params(&mut store, "head.0", f, f, 3, 1.0)?;
        store.add("head.1.weight", &[3, f, 3, 3], Init::Zeros)?;
        store.add("head.1.bias", &[3], Init::Zeros)?;
        Ok(Bikanet { config, store })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.store.get(name)
    }

    fn conv(&self, name: &str, x: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
        nn::conv(
            x,
            self.p(&format!("{name}.weight"))?,
            Some(self.p(&format!("{name}.bias"))?),
            pad,
            stride,
        )
    }

    fn conv_t(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        nn::conv_transpose(
            x,
            self.p(&format!("{name}.weight"))?,
            Some(self.p(&format!("{name}.bias"))?),
            1,
            2,
        )
    }

    /// Maps flattened kernels `(batch, k^2)` to one [`BlockStyle`] per block.
    pub fn mapping_forward(&self, kernels: &Tensor) -> Result<Vec<BlockStyle>> {
        if !self.config.uses_mapping() {
            return Err(Error::InvalidArgument("this network has no mapping network".into()));
        }
        let k2 = self.config.kernel_size * self.config.kernel_size;
        if kernels.rank() != 2 || kernels.dim(1)? != k2 {
            return Err(Error::SizeMismatch(format!(
                "expected flattened {0}x{0} kernels, got shape {1:?}",
                self.config.kernel_size,
                kernels.dims()
            )));
        }
        // kernel entries are O(1/k^2); rescale so the first layer sees O(1) inputs
        let mut h = (kernels.to_dtype(self.dtype())? * k2 as f64)?;
        let layers = self.config.mapping_layers;
        for l in 0..layers {
            h = nn::linear(
                &h,
                self.p(&format!("mapping.{l}.weight"))?,
                self.p(&format!("mapping.{l}.bias"))?,
            )?;
            if l + 1 < layers {
                h = nn::lrelu(&h)?;
            }
        }
        let c = self.config.bottleneck();
        (0..self.config.blocks)
            .map(|i| {
                let at = |j: usize| h.narrow(1, (4 * i + j) * c, c);
                Ok(BlockStyle {
                    scale0: (at(0)? + 1.0)?,
                    bias0: at(1)?,
                    scale1: (at(2)? + 1.0)?,
                    bias1: at(3)?,
                })
            })
            .collect()
    }

    /// One residual encoder/decoder block. `x` and `coarse` are
    /// `(batch, width, H, W)` with `H` and `W` multiples of 4. `flow` is the
    /// flow field already resampled to the bottleneck grid (motion mode).
    pub fn block_forward(
        &self,
        index: usize,
        x: &Tensor,
        style: Option<&BlockStyle>,
        coarse: &Tensor,
        flow: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.width {
            return Err(Error::SizeMismatch(format!(
                "block expects {} channels, got {c}",
                self.config.width
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::SizeMismatch(format!(
                "block input {h}x{w} is not a multiple of 4"
            )));
        }
        if coarse.dims() != x.dims() {
            return Err(Error::SizeMismatch("coarse features must match the block input".into()));
        }
        let p = format!("blocks.{index}");
        let mut z = nn::lrelu(&self.conv(&format!("{p}.enc0"), x, 1, 2)?)?;
        z = nn::lrelu(&self.conv(&format!("{p}.enc1"), &z, 1, 2)?)?;
        if let Some(flow) = flow {
            z = self.conv(&format!("{p}.fuse"), &Tensor::cat(&[&z, flow], 1)?, 0, 1)?;
        }
        z = self.conv(&format!("{p}.mid0"), &z, 1, 1)?;
        z = match style {
            Some(s) => adain(&z, &s.scale0, &s.bias0)?,
            None => instance_norm(&z)?,
        };
        z = nn::lrelu(&z)?;
        if self.config.uses_skip() {
            let pooled = coarse.avg_pool2d(4)?;
            z = (z + self.conv(&format!("{p}.skip_proj"), &pooled, 0, 1)?)?;
        }
        z = self.conv(&format!("{p}.mid1"), &z, 1, 1)?;
        z = match style {
            Some(s) => adain(&z, &s.scale1, &s.bias1)?,
            None => instance_norm(&z)?,
        };
        z = nn::lrelu(&z)?;
        z = nn::lrelu(&self.conv_t(&format!("{p}.dec0"), &z)?)?;
        z = self.conv_t(&format!("{p}.dec1"), &z)?;
        Ok((x + z)?)
    }

    /// Full forward pass on a batch `(batch, 3, H, W)` of any spatial size.
    /// Inputs are replicate-padded to a multiple of 4 and the output is
    /// cropped back.
    pub fn forward_tensor(&self, blurred: &Tensor, cond: Conditioning<'_>) -> Result<Tensor> {
        let (n, c, h, w) = blurred.dims4()?;
        if c != 3 {
            return Err(Error::SizeMismatch(format!("expected 3 channels, got {c}")));
        }
        let styles = match (&cond, self.config.mode) {
            (Conditioning::Kernel(k), Mode::KernelAdain) => {
                if k.dim(0)? != n {
                    return Err(Error::SizeMismatch("kernel batch differs from image batch".into()));
                }
                if self.config.uses_mapping() {
                    Some(self.mapping_forward(k)?)
                } else {
                    None
                }
            }
            (Conditioning::None, Mode::KernelAdain) if !self.config.uses_mapping() => None,
            (Conditioning::Flow(f), Mode::MotionConcat) => {
                if f.dims() != [n, 2, h, w] {
                    return Err(Error::SizeMismatch(format!(
                        "flow shape {:?} does not match image {n}x{h}x{w}",
                        f.dims()
                    )));
                }
                None
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "conditioning does not match the network mode".into(),
                ))
            }
        };
        let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
        let x = pad_to(&blurred.to_dtype(self.dtype())?, ph, pw)?;
        let flow = match cond {
            Conditioning::Flow(f) => {
                let f = pad_to(&f.to_dtype(self.dtype())?, ph, pw)?;
                // displacements are measured in pixels of the grid they live on
                Some((f.avg_pool2d(4)? / 4.0)?)
            }
            _ => None,
        };
        let coarse = nn::lrelu(&self.conv("stem.0", &x, 1, 1)?)?;
        let coarse = self.conv("stem.1", &coarse, 1, 1)?;
        let mut feat = coarse.clone();
        for i in 0..self.config.blocks {
            feat = self.block_forward(
                i,
                &feat,
                styles.as_ref().map(|s| &s[i]),
                &coarse,
                flow.as_ref(),
            )?;
        }
        let y = nn::lrelu(&self.conv("head.0", &feat, 1, 1)?)?;
        let y = self.conv("head.1", &y, 1, 1)?;
        let out = (x + y)?;
        Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    /// Restores one image given its (estimated or true) blur kernel.
    pub fn forward(&self, blurred: &ImageTensor, kernel: &BlurKernel) -> Result<ImageTensor> {
        if kernel.size() != self.config.kernel_size {
            return Err(Error::SizeMismatch(format!(
                "network expects {0}x{0} kernels, got {1}x{1}",
                self.config.kernel_size,
                kernel.size()
            )));
        }
        let x = image_to_tensor(blurred, self.dtype())?;
        let k = kernel_to_tensor(kernel, self.dtype())?;
        let out = self.forward_tensor(&x, Conditioning::Kernel(&k))?;
        tensor_to_image(&out)
    }

    /// Restores one image given its per-pixel motion flow.
    pub fn motion_forward(&self, blurred: &ImageTensor, flow: &FlowField) -> Result<ImageTensor> {
        if flow.height() != blurred.height() || flow.width() != blurred.width() {
            return Err(Error::SizeMismatch(format!(
                "flow is {}x{}, image is {}x{}",
                flow.height(),
                flow.width(),
                blurred.height(),
                blurred.width()
            )));
        }
        let x = image_to_tensor(blurred, self.dtype())?;
        let f = flow.to_tensor(self.dtype())?;
        let out = self.forward_tensor(&x, Conditioning::Flow(&f))?;
        tensor_to_image(&out)
    }
}

fn pad_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    let mut x = x.clone();
    if h > xh {
        x = x.pad_with_same(2, 0, h - xh)?;
    }
    if w > xw {
        x = x.pad_with_same(3, 0, w - xw)?;
    }
    Ok(x)
}

/// `(1, 3, H, W)` tensor from an image; gray images are replicated to RGB.
pub fn image_to_tensor(img: &ImageTensor, dtype: DType) -> Result<Tensor> {
    let rgb = match img.color() {
        ColorSpace::Rgb => img.clone(),
        ColorSpace::Gray => img.to_rgb(),
    };
    let (h, w) = (rgb.height(), rgb.width());
    let t = Tensor::from_vec(rgb.into_data(), (h, w, 3), &Device::Cpu)?;
    Ok(t.permute((2, 0, 1))?.unsqueeze(0)?.to_dtype(dtype)?.contiguous()?)
}

/// Stacks equally sized images into a `(batch, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
    let parts = images
        .iter()
        .map(|i| image_to_tensor(i, dtype))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// First image of a `(batch, 3, H, W)` tensor, clamped to `[0, 1]`.
pub fn tensor_to_image(t: &Tensor) -> Result<ImageTensor> {
    let (_, c, h, w) = t.dims4()?;
    let hwc = t
        .get(0)?
        .permute((1, 2, 0))?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let color = if c == 1 { ColorSpace::Gray } else { ColorSpace::Rgb };
    Ok(ImageTensor::new(h, w, color, hwc)?.clamp01())
}

pub fn kernel_to_tensor(kernel: &BlurKernel, dtype: DType) -> Result<Tensor> {
    let n = kernel.values().len();
    Ok(Tensor::from_vec(kernel.values().to_vec(), (1, n), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mae,
    Mse,
}

pub fn reconstruction_loss(restored: &Tensor, sharp: &Tensor, kind: LossKind) -> Result<Tensor> {
    if restored.dims() != sharp.dims() {
        return Err(Error::SizeMismatch(format!(
            "restored {:?} vs sharp {:?}",
            restored.dims(),
            sharp.dims()
        )));
    }
    let diff = (restored - sharp)?;
    let per = match kind {
        LossKind::Mae => diff.abs()?,
        LossKind::Mse => diff.sqr()?,
    };
    Ok(per.flatten_all()?.mean(D::Minus1)?)
}
