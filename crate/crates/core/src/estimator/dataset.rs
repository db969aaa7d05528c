use serde::{Deserialize, Serialize};

use super::{estimate_kernel, EstimationConfig};
use crate::dataset::DatasetManifest;
use crate::error::Result;
use crate::image::ImageTensor;

/// Directory (relative to the manifest root) holding estimated kernels.
pub const KERNEL_DIR: &str = "kernels";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetEstimation {
    pub computed: usize,
    pub skipped: usize,
    pub failed: Vec<String>,
}

/// Estimates a kernel for every sample that does not have one yet and
/// records it in the manifest, which is saved after each sample so an
/// interrupted run resumes where it stopped. Each sample runs with
/// `config.seed ^ per_sample_seed`. A failing sample is recorded in its
/// `estimation_error` field and the rest continue.
pub fn estimate_dataset_kernels(
    manifest: &mut DatasetManifest,
    config: &EstimationConfig,
) -> Result<DatasetEstimation> {
    config.validate()?;
    let dir = manifest.resolve(KERNEL_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| crate::error::Error::io(&dir, e))?;
    let mut summary = DatasetEstimation::default();
    for i in 0..manifest.samples.len() {
        let rec = &manifest.samples[i];
        if let Some(p) = &rec.estimated_kernel_path {
            if manifest.resolve(p).is_file() {
                summary.skipped += 1;
                continue;
            }
        }
        let rel = format!("{KERNEL_DIR}/{}.kern", rec.id);
        let mut cfg = config.clone();
        cfg.seed = config.seed ^ rec.per_sample_seed;
        let outcome = ImageTensor::load(manifest.resolve(&rec.blurred_path))
            .and_then(|img| estimate_kernel(&img, &cfg))
            .and_then(|k| k.save(manifest.resolve(&rel)));
        let rec = &mut manifest.samples[i];
        match outcome {
            Ok(()) => {
                log::info!("estimated kernel for {}", rec.id);
                rec.estimated_kernel_path = Some(rel);
                rec.estimation_error = None;
                summary.computed += 1;
            }
            Err(e) => {
                log::error!("kernel estimation failed for {}: {e}", rec.id);
                rec.estimated_kernel_path = None;
                rec.estimation_error = Some(e.to_string());
                summary.failed.push(rec.id.clone());
            }
        }
        manifest.save()?;
    }
    Ok(summary)
}
