//! Synthetic blurred/sharp dataset generation and the JSON manifest that
//! describes a generated dataset on disk.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::synthesize_blur;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::kernel::{BlurKernel, BlurSpec};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_CROP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One entry of a manifest. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub sharp_path: String,
    pub blurred_path: String,
    pub kernel_index: usize,
    pub per_sample_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_kernel_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: Split,
    pub seed: u64,
    pub crop: usize,
    pub noise_sigma: f64,
    pub bank: Vec<BlurSpec>,
    pub samples: Vec<SampleRecord>,
    /// Directory the relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

/// Where a sample's ground-truth kernel comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelRef {
    Spec(BlurSpec),
    File(PathBuf),
}

/// A fully materialized sample.
#[derive(Debug, Clone)]
pub struct DatasetSample {
    pub id: String,
    pub sharp: ImageTensor,
    pub blurred: ImageTensor,
    pub kernel: KernelRef,
    pub noise_sigma: f64,
    pub estimated_kernel: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format {
                what: "dataset manifest",
                reason: format!("unsupported version {}", m.version),
            });
        }
        for s in &m.samples {
            if s.kernel_index >= m.bank.len() {
                return Err(Error::Format {
                    what: "dataset manifest",
                    reason: format!("sample {} references kernel {}", s.id, s.kernel_index),
                });
            }
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `manifest.json` into the manifest root.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn name(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| ".".into())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn ground_truth_kernel(&self, index: usize) -> Result<BlurKernel> {
        let rec = &self.samples[index];
        self.bank[rec.kernel_index].to_kernel()
    }

    pub fn estimated_kernel(&self, index: usize) -> Result<Option<BlurKernel>> {
        match &self.samples[index].estimated_kernel_path {
            Some(p) => Ok(Some(BlurKernel::load(self.resolve(p))?)),
            None => Ok(None),
        }
    }

    pub fn sample(&self, index: usize) -> Result<DatasetSample> {
        let rec = self.samples.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("sample index {index} out of range"))
        })?;
        Ok(DatasetSample {
            id: rec.id.clone(),
            sharp: ImageTensor::load(self.resolve(&rec.sharp_path))?,
            blurred: ImageTensor::load(self.resolve(&rec.blurred_path))?,
            kernel: KernelRef::Spec(self.bank[rec.kernel_index]),
            noise_sigma: self.noise_sigma,
            estimated_kernel: rec
                .estimated_kernel_path
                .as_ref()
                .map(|p| self.resolve(p)),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub bank: Vec<BlurSpec>,
    pub crop: usize,
    pub count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub split: Split,
}

/// Lists decodable-looking image files of a directory in sorted order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        let ext = p
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if p.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Per-sample seed: the run seed XOR the sample index, so the output of a
/// sample never depends on the order in which samples are produced.
pub fn per_sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

struct Plan {
    source: usize,
    y0: usize,
    x0: usize,
    kernel_index: usize,
    noise_seed: u64,
}

fn plan_sample(seed: u64, sources: &[ImageTensor], crop: usize, bank_len: usize) -> Plan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel_index = rng.random_range(0..bank_len);
    let source = rng.random_range(0..sources.len());
    let img = &sources[source];
    let y0 = rng.random_range(0..=img.height() - crop);
    let x0 = rng.random_range(0..=img.width() - crop);
    let noise_seed = rng.next_u64();
    Plan {
        source,
        y0,
        x0,
        kernel_index,
        noise_seed,
    }
}

/// Kernel indices `generate_dataset` would draw, without touching images.
pub fn planned_kernel_indices(seed: u64, count: usize, bank_len: usize) -> Vec<usize> {
    (0..count)
        .map(|i| {
            // the kernel is the first draw of `plan_sample`
            let mut rng = ChaCha8Rng::seed_from_u64(per_sample_seed(seed, i));
            rng.random_range(0..bank_len)
        })
        .collect()
}

/// Crops random windows of the sharp images in `sharp_dir`, blurs each with
/// a kernel drawn uniformly from the bank, and writes PNGs plus
/// `manifest.json` into `out_dir`.
pub fn generate_dataset(
    sharp_dir: &Path,
    out_dir: &Path,
    opts: &GenerateOptions,
) -> Result<DatasetManifest> {
    if opts.bank.is_empty() {
        return Err(Error::InvalidArgument("kernel bank is empty".into()));
    }
    for s in &opts.bank {
        s.validate()?;
    }
    if opts.count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let max_kernel = opts.bank.iter().map(|s| s.size).max().unwrap_or(0);
    if opts.crop < max_kernel {
        return Err(Error::InvalidArgument(format!(
            "crop {} is smaller than the largest kernel ({max_kernel})",
            opts.crop
        )));
    }
    let files = list_images(sharp_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no images found in {}",
            sharp_dir.display()
        )));
    }
    let mut sources = Vec::with_capacity(files.len());
    for f in &files {
        let img = ImageTensor::load(f)?;
        if img.height() < opts.crop || img.width() < opts.crop {
            return Err(Error::InvalidArgument(format!(
                "crop {} too large for {} ({}x{})",
                opts.crop,
                f.display(),
                img.height(),
                img.width()
            )));
        }
        sources.push(img);
    }

    for sub in ["sharp", "blurred"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut samples = Vec::with_capacity(opts.count);
    for index in 0..opts.count {
        let seed = per_sample_seed(opts.seed, index);
        let plan = plan_sample(seed, &sources, opts.crop, opts.bank.len());
        let sharp = sources[plan.source].crop(plan.y0, plan.x0, opts.crop, opts.crop)?;
        let pair = synthesize_blur(
            &sharp,
            &opts.bank[plan.kernel_index],
            opts.noise_sigma,
            plan.noise_seed,
        )?;
        let id = format!("{index:06}");
        let sharp_path = format!("sharp/{id}.png");
        let blurred_path = format!("blurred/{id}.png");
        pair.sharp.save_png(out_dir.join(&sharp_path))?;
        pair.blurred.save_png(out_dir.join(&blurred_path))?;
        samples.push(SampleRecord {
            id,
            sharp_path,
            blurred_path,
            kernel_index: plan.kernel_index,
            per_sample_seed: seed,
            estimated_kernel_path: None,
            estimation_error: None,
        });
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split: opts.split,
        seed: opts.seed,
        crop: opts.crop,
        noise_sigma: opts.noise_sigma,
        bank: opts.bank.clone(),
        samples,
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::default_bank_specs;
    use crate::synthetic::dead_leaves;

    fn write_sources(dir: &Path, n: usize, size: usize) {
        for i in 0..n {
            dead_leaves(size, size + 8, i as u64)
                .save_png(dir.join(format!("src{i}.png")))
                .unwrap();
        }
    }

    fn opts(count: usize, seed: u64) -> GenerateOptions {
        GenerateOptions {
            bank: default_bank_specs(),
            crop: 48,
            count,
            noise_sigma: 0.0,
            seed,
            split: Split::Train,
        }
    }

    #[test]
    fn generates_reproducible_manifests() {
        let src = tempfile::tempdir().unwrap();
        write_sources(src.path(), 4, 64);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(src.path(), a.path(), &opts(32, 1)).unwrap();
        let mb = generate_dataset(src.path(), b.path(), &opts(32, 1)).unwrap();
        assert_eq!(ma.samples.len(), 32);
        assert_eq!(
            std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        for rec in &ma.samples {
            assert_eq!(
                std::fs::read(a.path().join(&rec.blurred_path)).unwrap(),
                std::fs::read(b.path().join(&rec.blurred_path)).unwrap()
            );
        }
        let indices: Vec<usize> = ma.samples.iter().map(|s| s.kernel_index).collect();
        assert_eq!(indices, planned_kernel_indices(1, 32, 16));

        let loaded = DatasetManifest::load(a.path()).unwrap();
        assert_eq!(loaded, ma);
        let s = loaded.sample(3).unwrap();
        assert_eq!(s.sharp.height(), 48);
        assert!(s.sharp.same_shape(&s.blurred));
        assert_eq!(mb.bank.len(), 16);
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        assert!(generate_dataset(empty.path(), out.path(), &opts(2, 0)).is_err());

        let src = tempfile::tempdir().unwrap();
        write_sources(src.path(), 1, 32);
        let mut big = opts(2, 0);
        big.crop = 40;
        assert!(generate_dataset(src.path(), out.path(), &big).is_err());

        std::fs::write(src.path().join("broken.png"), b"not a png").unwrap();
        let mut ok = opts(2, 0);
        ok.crop = 24;
        assert!(matches!(
            generate_dataset(src.path(), out.path(), &ok),
            Err(Error::Image(_))
        ));
    }

    #[test]
    fn kernel_choice_is_uniform() {
        let mut counts = [0usize; 16];
        for seed in 0..16u64 {
            for k in planned_kernel_indices(seed * 7919, 100, 16) {
                counts[k] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        assert_eq!(total, 1600);
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 1.0 / 16.0).abs() <= 0.03, "frequency {f}");
        }
    }
}
