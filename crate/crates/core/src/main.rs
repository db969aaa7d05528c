use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bikanet::dataset::{generate_dataset, DatasetManifest, GenerateOptions, Split};
use bikanet::estimator::{estimate_dataset_kernels, estimate_kernel_report, EstimationConfig};
use bikanet::harness::{self, EvalOptions, KernelSource, TrainConfig};
use bikanet::image::ImageTensor;
use bikanet::kernel::{default_bank_specs, BlurKernel, BlurSpec};
use bikanet::metrics::MetricReport;
use bikanet::net::{Ablation, LossKind, Mode};
use bikanet::{Error, Result};

#[derive(Parser)]
#[command(name = "bikanet", version, about = "Blind deblurring with estimated kernels and a kernel-conditioned network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut sharp crops and blur them with the kernel bank.
    Generate(GenerateArgs),
    /// Estimate the blur kernel of a single image.
    EstimateKernel(EstimateKernelArgs),
    /// Estimate kernels for every sample of a dataset.
    EstimateKernels(EstimateKernelsArgs),
    /// Train a restoration network.
    Train(TrainArgs),
    /// Restore and score a dataset with a checkpoint.
    Eval(EvalArgs),
    /// Non-blind Wiener restoration of one image.
    Wiener(WienerArgs),
    /// Pretty-print a metric report.
    Report {
        report: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    sharp_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    crop: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the added Gaussian noise, in [0,1] units.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// JSON list of blur specs replacing the default bank.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    split: Split,
}

#[derive(Args, Clone)]
struct EstimationArgs {
    /// JSON estimation config; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    gen_width: Option<usize>,
    #[arg(long)]
    disc_width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl EstimationArgs {
    fn resolve(&self) -> Result<EstimationConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
                serde_json::from_str(&text)?
            }
            None => EstimationConfig::default(),
        };
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = self.gen_width {
            cfg.gen_width = v;
        }
        if let Some(v) = self.disc_width {
            cfg.disc_width = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EstimateKernelArgs {
    #[arg(long)]
    image: PathBuf,
    /// Where to write the kernel (.kern).
    #[arg(long)]
    out: PathBuf,
    /// Optional PNG rendering of the kernel.
    #[arg(long)]
    png: Option<PathBuf>,
    /// Reference kernel to measure the estimate against.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    estimation: EstimationArgs,
}

#[derive(Args)]
struct EstimateKernelsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    estimation: EstimationArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Repeatable: no_kernel_ae, no_lts.
    #[arg(long, value_parser = parse_ablation)]
    ablate: Vec<Ablation>,
    #[arg(long, value_parser = parse_source)]
    kernel_source: Option<KernelSource>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::desk(),
        };
        if let Some(v) = &self.dataset {
            c.dataset = Some(v.clone());
        }
        if let Some(v) = &self.checkpoint_dir {
            c.checkpoint_dir = Some(v.clone());
        }
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(mode, blocks, width, iterations, batch, patch, lr, loss, kernel_source, seed);
        for a in &self.ablate {
            if !c.ablate.contains(a) {
                c.ablate.push(*a);
            }
        }
        // the environment has the last word on the seed
        c.apply_env()?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "estimated", value_parser = parse_source)]
    kernel_source: KernelSource,
    /// Also score the blurred inputs and write `baseline.json`.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct WienerArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    kernel: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    nsr: f64,
    #[arg(long)]
    out: PathBuf,
}

fn io_error(p: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io {
        path: p.to_path_buf(),
        source: e,
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("expected train or test, got {s:?}")),
    }
}

fn parse_json_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    parse_json_enum(s)
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    parse_json_enum(s)
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    parse_json_enum(s)
}

fn parse_source(s: &str) -> Result<KernelSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let bank = match &a.bank {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            serde_json::from_str::<Vec<BlurSpec>>(&text)?
        }
        None => default_bank_specs(),
    };
    let opts = GenerateOptions {
        bank,
        crop: a.crop,
        count: a.count,
        noise_sigma: a.noise,
        seed: a.seed,
        split: a.split,
    };
    let m = generate_dataset(&a.sharp_dir, &a.out, &opts)?;
    println!(
        "wrote {} ({} samples, crop {}, {} kernels, noise {})",
        m.path().display(),
        m.samples.len(),
        m.crop,
        m.bank.len(),
        m.noise_sigma
    );
    Ok(())
}

fn estimate_one(a: EstimateKernelArgs) -> Result<()> {
    let cfg = a.estimation.resolve()?;
    let img = ImageTensor::load(&a.image)?;
    let reference = a.reference.as_ref().map(BlurKernel::load).transpose()?;
    let (k, report) = estimate_kernel_report(&img, &cfg, reference.as_ref())?;
    k.save(&a.out)?;
    if let Some(p) = &a.png {
        harness::kernel_image(&k, 8).save_png(p)?;
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn estimate_many(a: EstimateKernelsArgs) -> Result<()> {
    let cfg = a.estimation.resolve()?;
    let mut m = DatasetManifest::load(&a.dataset)?;
    let s = estimate_dataset_kernels(&mut m, &cfg)?;
    println!(
        "{} estimated, {} already present, {} failed",
        s.computed,
        s.skipped,
        s.failed.len()
    );
    for id in &s.failed {
        println!("  failed: {id}");
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let out = harness::train(&cfg)?;
    println!(
        "trained {} iterations, final loss {:.5}",
        out.losses.len(),
        out.losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", out.final_checkpoint.display());
    println!("loss log: {}", out.loss_log.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        kernel_source: a.kernel_source,
        ..EvalOptions::default()
    };
    let report = harness::eval(&a.checkpoint, &a.dataset, &a.out, &opts)?;
    print!("{}", report.render());
    if a.baseline {
        let base = harness::blurred_baseline(&a.dataset)?;
        base.save(a.out.join("baseline.json"))?;
        println!("blurred baseline:");
        print!("{}", base.render());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::EstimateKernel(a) => estimate_one(a),
        Command::EstimateKernels(a) => estimate_many(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Wiener(a) => {
            let p = harness::wiener_file(&a.image, &a.kernel, a.nsr, &a.out)?;
            println!("wrote {}", p.display());
            Ok(())
        }
        Command::Report { report } => {
            print!("{}", MetricReport::load(report)?.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
