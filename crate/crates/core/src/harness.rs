//! Training, evaluation and baseline commands over a dataset manifest.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::degradation::wiener_deconvolve;
use crate::error::{Error, Result};
use crate::image::{hstack, ColorSpace, ImageTensor};
use crate::kernel::BlurKernel;
use crate::metrics::{evaluate, MetricReport};
use crate::net::{
    image_to_tensor, kernel_to_tensor, load_checkpoint, random_linear_flow, reconstruction_loss,
    save_checkpoint, synthesize_motion_blur, Ablation, Bikanet, Conditioning, FlowField, LossKind,
    Mode, NetConfig,
};
use crate::nn::Adam;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "BIKA_SEED";
pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSource {
    GroundTruth,
    Estimated,
}

impl std::str::FromStr for KernelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" | "gt" => Ok(KernelSource::GroundTruth),
            "estimated" => Ok(KernelSource::Estimated),
            other => Err(Error::InvalidArgument(format!("unknown kernel source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub blocks: usize,
    pub width: usize,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: LossKind,
    #[serde(default)]
    pub ablate: Vec<Ablation>,
    pub kernel_source: KernelSource,
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Side of the random training crops.
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Largest displacement of the synthetic flows in motion mode (pixels).
    #[serde(default = "default_max_flow")]
    pub max_flow: f64,
    #[serde(default = "default_motion_steps")]
    pub motion_steps: usize,
}

fn default_patch() -> usize {
    64
}
fn default_log_every() -> usize {
    50
}
fn default_checkpoint_every() -> usize {
    500
}
fn default_max_flow() -> f64 {
    6.0
}
fn default_motion_steps() -> usize {
    17
}

impl TrainConfig {
    /// Full-scale settings, mirrored by `configs/paper.json`.
    pub fn paper() -> Self {
        TrainConfig {
            mode: Mode::KernelAdain,
            blocks: 8,
            width: 64,
            iterations: 200_000,
            batch: 16,
            lr: 2e-4,
            loss: LossKind::Mae,
            ablate: Vec::new(),
            kernel_source: KernelSource::GroundTruth,
            seed: 0,
            dataset: None,
            checkpoint_dir: None,
            patch: 128,
            log_every: default_log_every(),
            checkpoint_every: default_checkpoint_every(),
            max_flow: default_max_flow(),
            motion_steps: default_motion_steps(),
        }
    }

    /// Small settings that train on one CPU core in minutes.
    pub fn desk() -> Self {
        TrainConfig {
            blocks: 2,
            width: 16,
            iterations: 2000,
            batch: 4,
            patch: 64,
            ..TrainConfig::paper()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            mode: self.mode,
            blocks: self.blocks,
            width: self.width,
            ablate: self.ablate.clone(),
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch == 0 || self.patch < 4 {
            return bad("batch must be positive and patch at least 4");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log and checkpoint intervals must be positive");
        }
        if self.motion_steps == 0 || !(self.max_flow >= 0.0) {
            return bad("motion settings must be positive");
        }
        self.net_config().validate()
    }
}

/// Holds the checkpoint directory for one training run.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::InvalidArgument(format!(
                        "{} is locked by another training run (remove {} if stale)",
                        dir.display(),
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        Ok(DirLock(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// A sample ready for the network: the degraded input, its target and
/// what the network is conditioned on.
pub struct Prepared {
    pub id: String,
    pub blurred: ImageTensor,
    pub sharp: ImageTensor,
    pub kernel: Option<BlurKernel>,
    pub flow: Option<FlowField>,
}

/// The kernel a sample is conditioned on.
pub fn sample_kernel(manifest: &DatasetManifest, index: usize, source: KernelSource) -> Result<BlurKernel> {
    match source {
        KernelSource::GroundTruth => manifest.ground_truth_kernel(index),
        KernelSource::Estimated => manifest.estimated_kernel(index)?.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "sample {} has no estimated kernel; run `bikanet estimate-kernels --dataset {}` first",
                manifest.samples[index].id,
                manifest.root.display()
            ))
        }),
    }
}

/// Loads every sample. In motion mode the input is re-synthesized from the
/// sharp image with a per-sample linear flow.
pub fn prepare_samples(
    manifest: &DatasetManifest,
    mode: Mode,
    source: KernelSource,
    max_flow: f64,
    motion_steps: usize,
) -> Result<Vec<Prepared>> {
    (0..manifest.samples.len())
        .map(|i| {
            let s = manifest.sample(i)?;
            let sharp = s.sharp.to_rgb();
            match mode {
                Mode::KernelAdain => Ok(Prepared {
                    id: s.id,
                    blurred: s.blurred.to_rgb(),
                    sharp,
                    kernel: Some(sample_kernel(manifest, i, source)?),
                    flow: None,
                }),
                Mode::MotionConcat => {
                    let seed = manifest.samples[i].per_sample_seed;
                    let flow = random_linear_flow(sharp.height(), sharp.width(), max_flow, seed);
                    let blurred = synthesize_motion_blur(&sharp, &flow, motion_steps)?.quantized();
                    Ok(Prepared {
                        id: s.id,
                        blurred,
                        sharp,
                        kernel: None,
                        flow: Some(flow),
                    })
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    /// Training loss of every iteration.
    pub losses: Vec<f64>,
}

fn cosine_lr(base: f64, it: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * it as f64 / total as f64).cos())
}

fn checkpoint_name(it: usize) -> String {
    format!("ckpt_{it:07}.safetensors")
}

/// Trains a network from scratch. Batches are drawn from a generator
/// seeded by `(seed, iteration)`, so the run is reproducible and the order
/// does not depend on anything else.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no dataset given".into()))?;
    let out = config
        .checkpoint_dir
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no checkpoint directory given".into()))?;
    let manifest = DatasetManifest::load(dataset)?;
    if manifest.samples.is_empty() {
        return Err(Error::InvalidArgument("dataset has no samples".into()));
    }
    let samples = prepare_samples(&manifest, config.mode, config.kernel_source, config.max_flow, config.motion_steps)?;
    let min_side = samples
        .iter()
        .map(|s| s.blurred.height().min(s.blurred.width()))
        .min()
        .unwrap_or(0);
    let patch = config.patch.min(min_side);
    if patch < 4 {
        return Err(Error::InvalidArgument("training images are too small".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let _lock = DirLock::acquire(out)?;

    let dtype = DType::F32;
    let inputs = samples
        .iter()
        .map(|s| image_to_tensor(&s.blurred, dtype))
        .collect::<Result<Vec<_>>>()?;
    let targets = samples
        .iter()
        .map(|s| image_to_tensor(&s.sharp, dtype))
        .collect::<Result<Vec<_>>>()?;
    let conds = samples
        .iter()
        .map(|s| match (&s.kernel, &s.flow) {
            (Some(k), _) => kernel_to_tensor(k, dtype),
            (_, Some(f)) => f.to_tensor(dtype),
            _ => unreachable!("every prepared sample carries a kernel or a flow"),
        })
        .collect::<Result<Vec<_>>>()?;

    let net = Bikanet::new(config.net_config(), dtype, config.seed)?;
    let mut opt = Adam::new(0.9, 0.999);
    // paths are left out so identical runs in different places produce
    // identical checkpoints
    let mut recorded = config.clone();
    recorded.dataset = None;
    recorded.checkpoint_dir = None;
    let extra = serde_json::json!({ "train": recorded });
    let log_path = out.join(LOSS_LOG);
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "iteration,loss,lr").map_err(|e| Error::io(&log_path, e))?;

    let mut losses = Vec::with_capacity(config.iterations);
    let mut window = 0.0;
    for it in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (it as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut xs = Vec::with_capacity(config.batch);
        let mut ys = Vec::with_capacity(config.batch);
        let mut cs = Vec::with_capacity(config.batch);
        // distinct samples within a batch, repeating only when the batch is
        // larger than the dataset
        let picks = rand::seq::index::sample(&mut rng, samples.len(), config.batch.min(samples.len())).into_vec();
        for b in 0..config.batch {
            let i = picks[b % picks.len()];
            let (_, _, h, w) = inputs[i].dims4()?;
            let y0 = rng.random_range(0..=h - patch);
            let x0 = rng.random_range(0..=w - patch);
            let crop = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(2, y0, patch)?.narrow(3, x0, patch)?) };
            xs.push(crop(&inputs[i])?);
            ys.push(crop(&targets[i])?);
            cs.push(match config.mode {
                Mode::KernelAdain => conds[i].clone(),
                Mode::MotionConcat => crop(&conds[i])?,
            });
        }
        let x = Tensor::cat(&xs, 0)?;
        let y = Tensor::cat(&ys, 0)?;
        let c = Tensor::cat(&cs, 0)?;
        let cond = match config.mode {
            Mode::KernelAdain if net.config().uses_mapping() => Conditioning::Kernel(&c),
            Mode::KernelAdain => Conditioning::None,
            Mode::MotionConcat => Conditioning::Flow(&c),
        };
        let pred = net.forward_tensor(&x, cond)?;
        let loss = reconstruction_loss(&pred, &y, config.loss)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss became {value} at iteration {it}; the last periodic checkpoint in {} is intact",
                out.display()
            )));
        }
        let lr = cosine_lr(config.lr, it, config.iterations);
        opt.step(net.params(), &loss.backward()?, lr)?;
        losses.push(value);
        window += value;
        let done = it + 1;
        if done % config.log_every == 0 || done == config.iterations {
            let n = if done % config.log_every == 0 { config.log_every } else { done % config.log_every };
            writeln!(log, "{done},{:.8},{:.8e}", window / n as f64, lr).map_err(|e| Error::io(&log_path, e))?;
            window = 0.0;
            log::info!("iteration {done}: loss {:.5}", losses[it]);
        }
        if done % config.checkpoint_every == 0 && done < config.iterations {
            save_checkpoint(out.join(checkpoint_name(done)), &net, &opt, done as u64, &extra)?;
        }
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &net, &opt, config.iterations as u64, &extra)?;
    Ok(TrainOutcome {
        final_checkpoint,
        loss_log: log_path,
        losses,
    })
}

/// Grayscale rendering of a kernel, scaled so its peak is white and
/// enlarged `scale` times.
pub fn kernel_image(k: &BlurKernel, scale: usize) -> ImageTensor {
    let peak = k.values().iter().cloned().fold(0.0, f64::max).max(1e-12);
    let n = k.size() * scale;
    ImageTensor::from_fn(n, n, ColorSpace::Gray, |y, x, _| k.at(y / scale, x / scale) / peak)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub kernel_source: KernelSource,
    /// Only used in motion mode.
    pub max_flow: f64,
    pub motion_steps: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            kernel_source: KernelSource::Estimated,
            max_flow: default_max_flow(),
            motion_steps: default_motion_steps(),
        }
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Restores every sample with a trained network and scores the result.
/// Writes `restored/`, `grids/` (blurred | restored | sharp), `kernels/`
/// (ground truth | estimate) and `report.json` under `out_dir`.
pub fn eval(checkpoint: &Path, dataset: &Path, out_dir: &Path, opts: &EvalOptions) -> Result<MetricReport> {
    let ck = load_checkpoint(checkpoint, DType::F32)?;
    let net = ck.net;
    let manifest = DatasetManifest::load(dataset)?;
    let mode = net.config().mode;
    let samples = prepare_samples(&manifest, mode, opts.kernel_source, opts.max_flow, opts.motion_steps)?;
    let restored_dir = out_dir.join("restored");
    let grid_dir = out_dir.join("grids");
    let kernel_dir = out_dir.join("kernels");
    for d in [&restored_dir, &grid_dir, &kernel_dir] {
        ensure_dir(d)?;
    }
    for (i, s) in samples.iter().enumerate() {
        let restored = match mode {
            Mode::KernelAdain => {
                let k = s.kernel.as_ref().expect("kernel-mode samples carry kernels");
                net.forward(&s.blurred, k)?
            }
            Mode::MotionConcat => {
                net.motion_forward(&s.blurred, s.flow.as_ref().expect("motion samples carry flows"))?
            }
        };
        restored.save_png(restored_dir.join(format!("{}.png", s.id)))?;
        hstack(&[&s.blurred, &restored, &s.sharp])?.save_png(grid_dir.join(format!("{}.png", s.id)))?;
        if mode == Mode::KernelAdain {
            let gt = manifest.ground_truth_kernel(i)?;
            let mut tiles = vec![kernel_image(&gt, 8)];
            if let Some(est) = manifest.estimated_kernel(i)? {
                tiles.push(kernel_image(&est, 8));
            }
            let refs: Vec<&ImageTensor> = tiles.iter().collect();
            hstack(&refs)?.save_png(kernel_dir.join(format!("{}.png", s.id)))?;
        }
    }
    let mut report = evaluate(&manifest, &restored_dir)?;
    report.checkpoint = checkpoint.file_name().map(|n| n.to_string_lossy().into_owned());
    report.save(out_dir.join("report.json"))?;
    Ok(report)
}

/// Scores the blurred inputs themselves against the sharp images.
pub fn blurred_baseline(dataset: &Path) -> Result<MetricReport> {
    let manifest = DatasetManifest::load(dataset)?;
    let mut report = evaluate(&manifest, &manifest.resolve("blurred"))?;
    report.checkpoint = None;
    Ok(report)
}

/// Non-blind Wiener restoration of one image file.
pub fn wiener_file(image: &Path, kernel: &Path, nsr: f64, out: &Path) -> Result<PathBuf> {
    let img = ImageTensor::load(image)?;
    let k = BlurKernel::load(kernel)?;
    wiener_deconvolve(&img, &k, nsr)?.save_png(out)?;
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse() {
        let dir = env!("CARGO_MANIFEST_DIR");
        let paper = TrainConfig::load(format!("{dir}/configs/paper.json")).unwrap();
        let desk = TrainConfig::load(format!("{dir}/configs/desk.json")).unwrap();
        assert_eq!(paper, TrainConfig::paper());
        assert_eq!(desk, TrainConfig::desk());
        paper.validate().unwrap();
        desk.validate().unwrap();
    }

    #[test]
    fn motion_mode_rejects_kernel_ablation() {
        let mut c = TrainConfig::desk();
        c.mode = Mode::MotionConcat;
        c.ablate = vec![Ablation::NoKernelAe];
        assert!(c.validate().is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0, 100), 2e-4);
        assert!((cosine_lr(2e-4, 50, 100) - 1e-4).abs() < 1e-12);
        assert!(cosine_lr(2e-4, 99, 100) > 0.0);
    }

    #[test]
    fn kernel_source_parsing() {
        assert_eq!("estimated".parse::<KernelSource>().unwrap(), KernelSource::Estimated);
        assert_eq!("ground_truth".parse::<KernelSource>().unwrap(), KernelSource::GroundTruth);
        assert!("x".parse::<KernelSource>().is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        DirLock::acquire(dir.path()).unwrap();
    }
}
