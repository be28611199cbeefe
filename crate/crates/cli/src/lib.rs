//! Offline command surface over the harmonization pipeline. Every subcommand
//! is seeded and single-threaded by default, so identical invocations produce
//! byte-identical artifacts.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::ChaCha8Rng;

use arhnet_core::augment::{copy_paste, sample_perturbation, PlacementPolicy};
use arhnet_core::classic::{composite_identity, histogram_match, HmOptions};
use arhnet_core::gradcheck;
use arhnet_core::io::{list_volume_files, load_mask, load_volume_auto, save_volume, VolumeFormat};
use arhnet_core::metrics::{harmonization_report, segmentation_report};
use arhnet_core::networks::load_checkpoint;
use arhnet_core::synth::{generate_dataset, SynthOptions};
use arhnet_core::train::{self, derive_rng, TrainConfig, TrainError, Trainer};
use arhnet_core::volume::{insert_patch, read_patch, PatchSpec};
use arhnet_core::{Mask3D, Perturbation, Volume3D};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser)]
#[command(name = "arhnet", version, about = "Foreground harmonization for 3D lesion volumes")]
struct Cli {
    /// Seed for any randomness the subcommand uses.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread count; 1 guarantees bit-reproducible output (and is the
    /// only mode currently implemented, so other values still run serially).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt the foreground: clamp01((1+alpha) I + lambda) inside the mask.
    Perturb {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Explicit multiplicative shift; sampled from the seed when absent.
        #[arg(long, requires = "lambda")]
        alpha: Option<f32>,
        /// Explicit additive shift; sampled from the seed when absent.
        #[arg(long, requires = "alpha")]
        lambda: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paste a donor lesion into a host scan at a random valid offset.
    Composite {
        #[arg(long)]
        host: PathBuf,
        #[arg(long)]
        host_mask: PathBuf,
        #[arg(long)]
        donor: PathBuf,
        #[arg(long)]
        donor_mask: PathBuf,
        #[arg(long)]
        out_image: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
    },
    /// Harmonize the foreground of a composite or perturbed volume.
    Harmonize {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained generator weights (model method only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Histogram-matching context shell radius (hm method).
        #[arg(long, default_value_t = 8)]
        context_radius: usize,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Run the training loop from a config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value settings applied on top of the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write per-case metric CSVs comparing prediction and ground-truth dirs.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Foreground masks (harmonization metrics only).
        #[arg(long)]
        mask_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        metrics: MetricsKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one axis-aligned slice as an 8-bit binary PGM.
    SliceExport {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = Axis::Z)]
        axis: Axis,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient verification.
    Gradcheck {
        /// Check name, or "all".
        #[arg(long, default_value = "all")]
        op: String,
    },
    /// Generate the synthetic sphere-lesion dataset.
    SynthData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 24)]
        size: usize,
    },
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Method {
    Identity,
    Hm,
    Model,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MetricsKind {
    Harmonization,
    Segmentation,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Axis {
    X,
    Y,
    Z,
}

/// Generator architecture flags for loading a checkpoint outside training.
#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value = "arh")]
    norm_kind: String,
    #[arg(long, default_value = "masked")]
    std_style: String,
    #[arg(long, default_value_t = 3)]
    disc_layers: usize,
    #[arg(long, default_value_t = 8)]
    disc_base: usize,
}

#[derive(Debug)]
enum CliError {
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Parse and execute; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Perturb { image, mask, alpha, lambda, out } => {
            let img = load_volume_auto(&image).map_err(data)?;
            let m = load_mask(&mask).map_err(data)?;
            let pert = match (alpha, lambda) {
                (Some(a), Some(l)) => Perturbation { alpha: a, lambda: l },
                _ => sample_perturbation(&mut derive_rng(seed, "perturb", 0, 0)),
            };
            let result = arhnet_core::augment::perturb_foreground(&img, &m, pert).map_err(data)?;
            save_out(&result, &out)?;
            println!("perturbed with alpha={} lambda={} -> {}", pert.alpha, pert.lambda, out.display());
            Ok(())
        }
        Command::Composite { host, host_mask, donor, donor_mask, out_image, out_mask } => {
            let h = load_volume_auto(&host).map_err(data)?;
            let hm = load_mask(&host_mask).map_err(data)?;
            let d = load_volume_auto(&donor).map_err(data)?;
            let dm = load_mask(&donor_mask).map_err(data)?;
            let mut rng: ChaCha8Rng = derive_rng(seed, "composite", 0, 0);
            let (img, m) =
                copy_paste(&h, &hm, &d, &dm, &PlacementPolicy::default(), &mut rng).map_err(data)?;
            save_out(&img, &out_image)?;
            save_out(&m.to_volume(), &out_mask)?;
            println!("composite -> {} / {}", out_image.display(), out_mask.display());
            Ok(())
        }
        Command::Harmonize { method, image, mask, out, checkpoint, context_radius, net } => {
            let img = load_volume_auto(&image).map_err(data)?;
            let m = load_mask(&mask).map_err(data)?;
            let result = match method {
                Method::Identity => composite_identity(&img),
                Method::Hm => {
                    let opts = HmOptions { context_radius, ..HmOptions::default() };
                    histogram_match(&img, &m, &opts).map_err(data)?
                }
                Method::Model => {
                    let path = checkpoint.ok_or_else(|| {
                        CliError::Data("--checkpoint is required with --method model".into())
                    })?;
                    harmonize_model(&img, &m, &path, &net)?
                }
            };
            save_out(&result, &out)?;
            let name = match method {
                Method::Identity => "identity",
                Method::Hm => "hm",
                Method::Model => "model",
            };
            println!("harmonized ({name}) -> {}", out.display());
            Ok(())
        }
        Command::Train { config, overrides } => {
            let mut cfg = TrainConfig::from_sources(config.as_deref(), &overrides)?;
            if cfg.seed == TrainConfig::desk().seed && seed != 0 {
                cfg.seed = seed;
            }
            let result = train::train(&cfg)?;
            println!(
                "trained {} iterations; log {} ; final checkpoint {}",
                result.iterations,
                result.log_path.display(),
                result.final_checkpoint.display()
            );
            Ok(())
        }
        Command::Eval { pred_dir, gt_dir, mask_dir, metrics, out } => {
            run_eval(&pred_dir, &gt_dir, mask_dir.as_deref(), metrics, &out)
        }
        Command::SliceExport { image, axis, index, out } => {
            let img = load_volume_auto(&image).map_err(data)?;
            let pgm = slice_pgm(&img, axis, index)?;
            std::fs::write(&out, pgm).map_err(data)?;
            println!("slice -> {}", out.display());
            Ok(())
        }
        Command::Gradcheck { op } => run_gradcheck(&op),
        Command::SynthData { out_dir, n, size } => {
            generate_dataset(&out_dir, &SynthOptions { n, size, seed, lesion_offset: 0.15 })
                .map_err(data)?;
            println!("wrote {n} cases of size {size} under {}", out_dir.display());
            Ok(())
        }
    }
}

fn save_out(v: &Volume3D, path: &Path) -> Result<(), CliError> {
    let format = VolumeFormat::infer(path).map_err(data)?;
    save_volume(v, path, format).map_err(data)
}

/// Crop a network-divisible patch around the lesion, run the generator, and
/// paste the harmonized patch back.
fn harmonize_model(
    img: &Volume3D,
    mask: &Mask3D,
    checkpoint: &Path,
    net: &NetArgs,
) -> Result<Volume3D, CliError> {
    let cfg = TrainConfig {
        levels: net.levels,
        base_channels: net.base_channels,
        norm_kind: net.norm_kind.clone(),
        std_style: net.std_style.clone(),
        disc_layers: net.disc_layers,
        disc_base: net.disc_base,
        ..TrainConfig::desk()
    };
    let ckpt = load_checkpoint(checkpoint).map_err(data)?;
    let trainer = Trainer::from_checkpoint(cfg, &ckpt)?;

    let div = 1usize << (net.levels - 1);
    let (lo, hi) = mask
        .bounding_box()
        .ok_or_else(|| CliError::Data("mask has no foreground to harmonize".into()))?;
    let spec = patch_around(img.dims, lo, hi, div)?;
    let (patch_img, patch_mask) = read_patch(img, mask, spec).map_err(data)?;
    let (_, harmonized) =
        arhnet_core::networks::generator_forward(&patch_img, &patch_mask, &trainer.gen)
            .map_err(data)?;
    insert_patch(img, &harmonized, spec).map_err(data)
}

/// Smallest axis-aligned patch that covers [lo, hi] with a margin, snapped up
/// to a multiple of `div` and clamped inside `dims`.
fn patch_around(
    dims: (usize, usize, usize),
    lo: (usize, usize, usize),
    hi: (usize, usize, usize),
    div: usize,
) -> Result<PatchSpec, CliError> {
    let one = |dim: usize, l: usize, h: usize| -> Result<(usize, usize), CliError> {
        if dim % div != 0 && dim < div {
            return Err(CliError::Data(format!(
                "volume extent {dim} is smaller than the network granularity {div}"
            )));
        }
        let want = (h - l + 1) + 4;
        let size = want.div_ceil(div) * div;
        let size = size.min((dim / div) * div);
        if size == 0 {
            return Err(CliError::Data(format!(
                "volume extent {dim} is smaller than the network granularity {div}"
            )));
        }
        let center = (l + h) / 2;
        let origin = center.saturating_sub(size / 2).min(dim - size);
        Ok((origin, size))
    };
    let (oi, si) = one(dims.0, lo.0, hi.0)?;
    let (oj, sj) = one(dims.1, lo.1, hi.1)?;
    let (ok, sk) = one(dims.2, lo.2, hi.2)?;
    Ok(PatchSpec { origin: (oi, oj, ok), size: (si, sj, sk) })
}

fn slice_pgm(v: &Volume3D, axis: Axis, index: usize) -> Result<Vec<u8>, CliError> {
    let (h, w, d) = v.dims;
    let (rows, cols, bound) = match axis {
        Axis::X => (w, d, h),
        Axis::Y => (h, d, w),
        Axis::Z => (h, w, d),
    };
    if index >= bound {
        return Err(CliError::Data(format!("slice index {index} out of range (< {bound})")));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for c in 0..cols {
            let val = match axis {
                Axis::X => v.get(index, r, c),
                Axis::Y => v.get(r, index, c),
                Axis::Z => v.get(r, c, index),
            };
            out.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn run_gradcheck(op: &str) -> Result<(), CliError> {
    let reports = if op == "all" {
        gradcheck::run_all()
    } else {
        match gradcheck::run_one(op) {
            Some(r) => vec![r],
            None => {
                return Err(CliError::Data(format!(
                    "unknown op '{op}'; available: all, {}",
                    gradcheck::available().join(", ")
                )))
            }
        }
    };
    let mut failed = false;
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{status} {:<20} max_rel {:.3e} (tol {:.0e})", r.name, r.max_rel, r.tol);
        failed |= !r.passed();
    }
    if failed {
        Err(CliError::Numeric("gradient check failed".into()))
    } else {
        Ok(())
    }
}

fn paired_cases(
    pred_dir: &Path,
    gt_dir: &Path,
) -> Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    let preds = list_volume_files(pred_dir).map_err(data)?;
    let gts = list_volume_files(gt_dir).map_err(data)?;
    if preds.is_empty() {
        return Err(CliError::Data(format!("no volumes under {}", pred_dir.display())));
    }
    preds
        .into_iter()
        .map(|(name, pred)| {
            let gt = gts
                .iter()
                .find(|(stem, _)| *stem == name)
                .map(|(_, p)| p.clone())
                .ok_or_else(|| CliError::Data(format!("no ground truth for case {name}")))?;
            Ok((name, pred, gt))
        })
        .collect()
}

fn run_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    mask_dir: Option<&Path>,
    metrics: MetricsKind,
    out: &Path,
) -> Result<(), CliError> {
    let cases = paired_cases(pred_dir, gt_dir)?;
    let mut csv = String::new();
    let mut sums = vec![0.0f64; 4];
    let mut rows = 0usize;
    match metrics {
        MetricsKind::Harmonization => {
            let mask_dir = mask_dir
                .ok_or_else(|| CliError::Data("--mask-dir is required for harmonization metrics".into()))?;
            let masks = list_volume_files(mask_dir).map_err(data)?;
            csv.push_str("case,mae,fmae,psnr,fpsnr\n");
            for (name, pred_path, gt_path) in &cases {
                let pred = load_volume_auto(pred_path).map_err(data)?;
                let gt = load_volume_auto(gt_path).map_err(data)?;
                let mask_path = masks
                    .iter()
                    .find(|(stem, _)| stem == name)
                    .map(|(_, p)| p.clone())
                    .ok_or_else(|| CliError::Data(format!("no mask for case {name}")))?;
                let mask = load_mask(&mask_path).map_err(data)?;
                let r = harmonization_report(&gt, &pred, &mask).map_err(data)?;
                csv.push_str(&format!(
                    "{name},{:.6},{:.6},{:.6},{:.6}\n",
                    r.mae, r.fmae, r.psnr_db, r.fpsnr_db
                ));
                for (s, v) in sums.iter_mut().zip([r.mae, r.fmae, r.psnr_db, r.fpsnr_db]) {
                    *s += v;
                }
                rows += 1;
            }
        }
        MetricsKind::Segmentation => {
            csv.push_str("case,dice,asd,hd95\n");
            for (name, pred_path, gt_path) in &cases {
                let gt_vol = load_volume_auto(gt_path).map_err(data)?;
                let pred = load_mask(pred_path).map_err(data)?;
                let gt = Mask3D::from_volume(&gt_vol);
                let r = segmentation_report(&pred, &gt, gt_vol.spacing).map_err(data)?;
                csv.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", r.dice, r.asd_mm, r.hd95_mm));
                for (s, v) in sums.iter_mut().zip([r.dice, r.asd_mm, r.hd95_mm, 0.0]) {
                    *s += v;
                }
                rows += 1;
            }
        }
    }
    let n = rows as f64;
    match metrics {
        MetricsKind::Harmonization => csv.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6}\n",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        )),
        MetricsKind::Segmentation => csv.push_str(&format!(
            "mean,{:.6},{:.6},{:.6}\n",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n
        )),
    }
    std::fs::write(out, csv).map_err(data)?;
    println!("wrote {} case rows to {}", rows, out.display());
    Ok(())
}
