//! Per-image blur-kernel estimation with an internal patch GAN.
//!
//! A linear generator learns to turn patches of the 2x-downscaled blurred
//! image into patches a discriminator cannot tell apart from patches of the
//! blurred image itself. The generator then encodes how the blur relates
//! across scales, and the image's own kernel follows from it (see
//! [`recover_absolute_kernel`]).
//!
//! Comparing the generator's output against the image at the *same* scale
//! does not work: passing the image through unchanged (a delta kernel)
//! already reproduces its patch distribution exactly.

mod dataset;
mod discriminator;
mod generator;
mod recover;
mod regularization;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{convolve, Boundary};
use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImageTensor};
use crate::kernel::{kernel_distance, make_isotropic_gaussian, BlurKernel, KernelDistance, DEFAULT_KERNEL_SIZE};
use crate::nn::Adam;

pub use dataset::{estimate_dataset_kernels, DatasetEstimation, KERNEL_DIR};
pub use discriminator::Discriminator;
pub use generator::{crop_about_centroid, extract_kernel, receptive_field, Extracted, GeneratorParams, OUTSIDE_MASS_LIMIT};
pub use recover::{recover_absolute_kernel, PREFILTER};
pub use regularization::{kernel_regularization, RegTerms, RegWeights};

/// Smallest usable patch side.
pub const MIN_PATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub iterations: usize,
    pub patch_size: usize,
    pub batch: usize,
    /// `[generator, discriminator]`.
    pub learning_rates: [f64; 2],
    pub reg_weights: RegWeights,
    pub seed: u64,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_gen_sizes")]
    pub gen_sizes: Vec<usize>,
    #[serde(default = "default_gen_width")]
    pub gen_width: usize,
    #[serde(default = "default_disc_width")]
    pub disc_width: usize,
    #[serde(default = "default_disc_layers")]
    pub disc_layers: usize,
    /// Adam steps fitting the generator to a Gaussian before training.
    #[serde(default = "default_prefit_steps")]
    pub prefit_steps: usize,
    #[serde(default = "default_prefit_sigma")]
    pub prefit_sigma: f64,
    /// Fraction of final iterations whose generator kernels are averaged.
    #[serde(default = "default_tail")]
    pub average_tail: f64,
}

fn default_kernel_size() -> usize {
    DEFAULT_KERNEL_SIZE
}
fn default_gen_sizes() -> Vec<usize> {
    vec![9, 5, 3, 3, 1]
}
fn default_gen_width() -> usize {
    16
}
fn default_disc_width() -> usize {
    32
}
fn default_disc_layers() -> usize {
    6
}
fn default_prefit_steps() -> usize {
    300
}
fn default_prefit_sigma() -> f64 {
    1.0
}
fn default_tail() -> f64 {
    1.0 / 3.0
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            iterations: 3000,
            patch_size: 64,
            batch: 1,
            learning_rates: [2e-4, 2e-4],
            reg_weights: RegWeights::default(),
            seed: 0,
            kernel_size: default_kernel_size(),
            gen_sizes: default_gen_sizes(),
            gen_width: default_gen_width(),
            disc_width: default_disc_width(),
            disc_layers: default_disc_layers(),
            prefit_steps: default_prefit_steps(),
            prefit_sigma: default_prefit_sigma(),
            average_tail: default_tail(),
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.patch_size < MIN_PATCH {
            return bad("patch size must be at least 16");
        }
        if self.learning_rates.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return bad("learning rates must be positive");
        }
        let w = &self.reg_weights;
        if [w.sum_to_one, w.boundary, w.sparsity, w.centrality].iter().any(|v| *v < 0.0) {
            return bad("regularization weights must be non-negative");
        }
        if !(w.sparsity_power > 0.0 && w.sparsity_power < 1.0) {
            return bad("sparsity power must lie in (0, 1)");
        }
        if !(self.average_tail > 0.0 && self.average_tail <= 1.0) {
            return bad("average_tail must lie in (0, 1]");
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size < 3 {
            return Err(Error::InvalidKernelSize(self.kernel_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub sum: f64,
    pub centroid: (f64, f64),
    pub covariance: [[f64; 2]; 2],
    pub principal_axis_deg: f64,
}

impl KernelStats {
    pub fn of(k: &BlurKernel) -> Self {
        KernelStats {
            sum: k.sum(),
            centroid: k.centroid(),
            covariance: k.covariance(),
            principal_axis_deg: k.principal_axis().to_degrees(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub iterations: usize,
    pub patch_size: usize,
    pub constant_input: bool,
    pub generator_loss: f64,
    pub discriminator_loss: f64,
    pub regularization: RegTerms,
    pub outside_mass: f64,
    pub kernel: KernelStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_to_reference: Option<KernelDistance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_baseline_distance: Option<KernelDistance>,
    pub warnings: Vec<String>,
}

fn tensor_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn plane_tensor(plane: &[f64], h: usize, w: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(plane.to_vec(), (1, 1, h, w), &Device::Cpu)?.to_dtype(DType::F32)?)
}

/// Binomial prefilter followed by dropping every other row and column.
pub fn downscale(plane: &ImageTensor) -> Result<ImageTensor> {
    let taps: Vec<f64> = PREFILTER
        .iter()
        .flat_map(|a| PREFILTER.iter().map(move |b| a * b))
        .collect();
    let filter = BlurKernel::from_raw(3, taps)?;
    let smooth = convolve(plane, &filter, Boundary::Replicate)?;
    let (h, w) = (plane.height().div_ceil(2), plane.width().div_ceil(2));
    Ok(ImageTensor::from_fn(h, w, plane.color(), |y, x, c| {
        smooth.get(2 * y, 2 * x, c)
    }))
}

fn fit_gaussian(gen: &GeneratorParams, sigma: f64, steps: usize) -> Result<()> {
    let rf = gen.receptive_field();
    let target = make_isotropic_gaussian(rf, sigma)?;
    let target = Tensor::from_vec(target.values().to_vec(), (rf, rf), &Device::Cpu)?.to_dtype(DType::F32)?;
    let mut opt = Adam::new(0.9, 0.999);
    for _ in 0..steps {
        let loss = (gen.impulse_response()? - &target)?.sqr()?.sum_all()?;
        opt.step(gen.params(), &loss.backward()?, 1e-3)?;
    }
    Ok(())
}

fn sample_patches(
    src: &Tensor,
    side: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (_, _, h, w) = src.dims4()?;
    let parts = (0..count)
        .map(|_| {
            let y = rng.random_range(0..=h - side);
            let x = rng.random_range(0..=w - side);
            Ok(src.narrow(2, y, side)?.narrow(3, x, side)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// Estimates the blur kernel of a single blurred image.
pub fn estimate_kernel(blurred: &ImageTensor, config: &EstimationConfig) -> Result<BlurKernel> {
    Ok(estimate_kernel_report(blurred, config, None)?.0)
}

/// [`estimate_kernel`] plus a report; `reference` adds distances to a
/// known kernel and to the delta baseline.
pub fn estimate_kernel_report(
    blurred: &ImageTensor,
    config: &EstimationConfig,
    reference: Option<&BlurKernel>,
) -> Result<(BlurKernel, EstimationReport)> {
    config.validate()?;
    let gray = match blurred.color() {
        ColorSpace::Gray => blurred.clone(),
        ColorSpace::Rgb => blurred.luma(),
    };
    let (h, w) = (gray.height(), gray.width());
    let gen = GeneratorParams::new(&config.gen_sizes, config.gen_width, DType::F32, config.seed)?;
    let rf = gen.receptive_field();
    let n = (h * w) as f64;
    let mean = gray.data().iter().sum::<f64>() / n;
    let var = gray.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut warnings = Vec::new();
    let mut opt_g = Adam::new(0.5, 0.999);
    fit_gaussian(&gen, config.prefit_sigma, config.prefit_steps)?;

    if var < 1e-12 {
        let msg = "input image is constant; returning the regularization optimum".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
        for _ in 0..config.iterations {
            let k = gen.impulse_response()?;
            let loss = regularization::regularization_tensors(&k, config.reg_weights.sparsity_power)?
                .total(&config.reg_weights)?;
            check_finite("regularization", &loss)?;
            opt_g.step(gen.params(), &loss.backward()?, config.learning_rates[0])?;
        }
        let raw = to_vec(&gen.impulse_response()?)?;
        let terms = kernel_regularization(&raw, rf, &config.reg_weights)?;
        let extracted = extract_kernel(&gen, config.kernel_size)?;
        let report = build_report(
            config,
            0,
            true,
            (0.0, 0.0),
            terms,
            &extracted,
            &extracted.kernel,
            reference,
            warnings,
        )?;
        return Ok((extracted.kernel, report));
    }

    let small = downscale(&gray)?;
    let patch = config
        .patch_size
        .min((h.min(w) / 2).saturating_sub(rf - 1));
    let mut disc = Discriminator::new(config.disc_width, config.disc_layers, DType::F32, config.seed.wrapping_add(1))?;
    if patch < MIN_PATCH || patch <= disc.margin() {
        return Err(Error::SizeMismatch(format!(
            "a {h}x{w} image is too small to estimate a kernel with a {rf}-pixel generator"
        )));
    }
    if patch < config.patch_size {
        let msg = format!("patch size reduced from {} to {patch} to fit the image", config.patch_size);
        log::info!("{msg}");
        warnings.push(msg);
    }
    let full = plane_tensor(gray.data(), h, w)?;
    let coarse = plane_tensor(small.data(), small.height(), small.width())?;
    let mut opt_d = Adam::new(0.5, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6b65_726e);
    let tail = ((config.iterations as f64 * config.average_tail).ceil() as usize).clamp(1, config.iterations);
    let tail_start = config.iterations - tail;
    let mut sum = vec![0.0f64; rf * rf];
    let (mut last_g, mut last_d) = (0.0, 0.0);
    let [lr_g, lr_d] = config.learning_rates;
    for it in 0..config.iterations {
        let gin = sample_patches(&coarse, patch + rf - 1, config.batch, &mut rng)?;
        let real = sample_patches(&full, patch, config.batch, &mut rng)?;

        let k = gen.impulse_response()?;
        let fake = gen.forward_composed(&gin, &k)?;
        let weights = disc.normalized_weights()?;
        let adv = (disc.forward(&fake, &weights)? - 1.0)?.sqr()?.mean_all()?;
        let reg = regularization::regularization_tensors(&k, config.reg_weights.sparsity_power)?
            .total(&config.reg_weights)?;
        let loss_g = (&adv + reg)?;
        check_finite("generator", &loss_g)?;
        opt_g.step(gen.params(), &loss_g.backward()?, lr_g)?;

        let fake = fake.detach();
        let on_real = (disc.forward(&real, &weights)? - 1.0)?.sqr()?.mean_all()?;
        let on_fake = disc.forward(&fake, &weights)?.sqr()?.mean_all()?;
        let loss_d = (on_real + on_fake)?;
        check_finite("discriminator", &loss_d)?;
        opt_d.step(disc.params(), &loss_d.backward()?, lr_d)?;

        if it >= tail_start {
            for (s, v) in sum.iter_mut().zip(to_vec(&k)?) {
                *s += v;
            }
        }
        last_g = tensor_scalar(&loss_g)?;
        last_d = tensor_scalar(&loss_d)?;
        if it % 500 == 0 {
            log::debug!("iteration {it}: generator {last_g:.4}, discriminator {last_d:.4}");
        }
    }
    let raw: Vec<f64> = sum.iter().map(|s| s / tail as f64).collect();
    let terms = kernel_regularization(&raw, rf, &config.reg_weights)?;
    let (cropped, outside_mass) = crop_about_centroid(&raw, rf, config.kernel_size);
    if outside_mass > OUTSIDE_MASS_LIMIT {
        warnings.push(format!(
            "{:.1}% of the generator kernel lies outside the {size}x{size} window",
            100.0 * outside_mass,
            size = config.kernel_size
        ));
    }
    let relative = Extracted {
        kernel: BlurKernel::from_raw(config.kernel_size, cropped.clone())?,
        outside_mass,
    };
    let kernel = recover_absolute_kernel(&cropped, config.kernel_size, config.kernel_size)?;
    let report = build_report(
        config,
        patch,
        false,
        (last_g, last_d),
        terms,
        &relative,
        &kernel,
        reference,
        warnings,
    )?;
    Ok((kernel, report))
}

fn check_finite(what: &str, loss: &Tensor) -> Result<()> {
    let v = tensor_scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("{what} loss became {v}")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    config: &EstimationConfig,
    patch: usize,
    constant_input: bool,
    losses: (f64, f64),
    regularization: RegTerms,
    relative: &Extracted,
    kernel: &BlurKernel,
    reference: Option<&BlurKernel>,
    warnings: Vec<String>,
) -> Result<EstimationReport> {
    let (distance_to_reference, delta_baseline_distance) = match reference {
        Some(r) => {
            let delta = crate::kernel::delta_kernel(r.size())?;
            (Some(kernel_distance(kernel, r)?), Some(kernel_distance(&delta, r)?))
        }
        None => (None, None),
    };
    Ok(EstimationReport {
        iterations: config.iterations,
        patch_size: patch,
        constant_input,
        generator_loss: losses.0,
        discriminator_loss: losses.1,
        regularization,
        outside_mass: relative.outside_mass,
        kernel: KernelStats::of(kernel),
        distance_to_reference,
        delta_baseline_distance,
        warnings,
    })
}
