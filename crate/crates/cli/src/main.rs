//! `cinerst`: phantom generation, Cartesian undersampling, two-stage
//! training, reconstruction, and evaluation from the command line. Every
//! randomized command is deterministic under a fixed `--seed`. Exit codes:
//! 0 on success, 2 for validation problems (bad flags, malformed or
//! mismatched input files), 1 for runtime failures.

use cinerst_core::diffcore::{gradcheck, ParamStore};
use cinerst_core::error::{Error, Result};
use cinerst_core::kspace::{dft2_frames, make_vista_mask, undersample, zero_filled_recon, SamplingMask};
use cinerst_core::metrics;
use cinerst_core::phantom::{generate_cine, DynamicImage, PhantomSpec};
use cinerst_core::rst::{RstConfig, RstNet, RstVariant};
use cinerst_core::sadxnet::{SadxConfig, SadxNet};
use cinerst_core::trainer::{
    self, frame_pairs, ssim_params_for, undersampled_pair, Pipeline, SequencePair, Stage,
    TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Acceleration used to build training pairs when neither the config nor
/// `--mask-r` specifies one.
const DEFAULT_MASK_R: f64 = 4.0;

#[derive(Parser)]
#[command(name = "cinerst", version, about = "Cine MRI reconstruction pipeline")]
struct Cli {
    /// Seed for every randomized step; commands are deterministic given it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cine phantom sequence (DMT4 float32, T x H x W x Z).
    Phantom(PhantomArgs),
    /// Generate a Cartesian row-sampling mask (DMT4 uint8, T x H x W).
    Mask(MaskArgs),
    /// Transform a sequence to k-space, apply a mask, and reconstruct the
    /// zero-filled baseline.
    Undersample(UndersampleArgs),
    /// Train one pipeline stage on a directory of ground-truth sequences.
    Train(TrainArgs),
    /// Run checkpointed models on a zero-filled sequence.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against ground truth and emit metrics JSON.
    Eval(EvalArgs),
    /// Finite-difference verification of the autodiff primitives.
    Gradcheck(GradcheckArgs),
    /// Export one (frame, slice) as an 8-bit grayscale PNG, min-max scaled.
    ExportPng(ExportPngArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 18)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    slices: usize,
    #[arg(long, default_value_t = 3)]
    n_ellipses: usize,
    /// Peak motion excursion as a fraction of image height.
    #[arg(long, default_value_t = 0.08)]
    motion_amplitude: f64,
    /// Cycle length in frames.
    #[arg(long)]
    period_frames: Option<f64>,
    /// Std of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    t: usize,
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    /// Acceleration factor.
    #[arg(long)]
    r: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UndersampleArgs {
    /// Input sequence (DMT4 float32).
    #[arg(long)]
    image: PathBuf,
    /// Sampling mask (DMT4 uint8).
    #[arg(long)]
    mask: PathBuf,
    /// Where to write the undersampled k-space (DMT4 complex64).
    #[arg(long)]
    out_kspace: Option<PathBuf>,
    /// Where to write the zero-filled reconstruction (DMT4 float32).
    #[arg(long)]
    out_zerofilled: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Pipeline stage, "sadxnet" or "rst".
    #[arg(long)]
    stage: String,
    /// Optional JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of ground-truth sequences (*.dmt4), undersampled on the
    /// fly at the configured acceleration.
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint directory; also receives arch.json, loss.csv, and the
    /// resolved train_config.json.
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// RST architecture: "t", "s", "b", "l", "micro", or "t-reduced".
    #[arg(long)]
    variant: Option<String>,
    /// Frozen stage-1 checkpoint whose restorations feed RST training.
    #[arg(long)]
    sadxnet_checkpoint: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Acceleration factor for the training masks.
    #[arg(long)]
    mask_r: Option<f64>,
    /// Enable paired augmentation (requires --crop-h/--crop-w).
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    crop_h: Option<usize>,
    #[arg(long)]
    crop_w: Option<usize>,
    /// Channel schedule for the sadxnet stage as seven comma-separated
    /// counts ending in the slice count, e.g. 8,16,24,32,24,16,1.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Zero-filled input sequence (DMT4 float32).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    sadxnet_checkpoint: Option<PathBuf>,
    #[arg(long)]
    rst_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// "all" or one primitive's name (a prefix like "conv2d" works).
    #[arg(long, default_value = "all")]
    op: String,
}

#[derive(Args)]
struct ExportPngArgs {
    /// Input sequence (DMT4 float32).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 0)]
    slice: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Architecture descriptor saved next to every checkpoint so reconstruct
/// can rebuild the network without guessing.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ArchFile {
    Sadxnet { config: SadxConfig },
    Rst { config: RstConfig },
}

impl ArchFile {
    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        Ok(std::fs::write(
            dir.join("arch.json"),
            serde_json::to_string_pretty(self)?,
        )?)
    }

    fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("arch.json");
        if !path.is_file() {
            return Err(Error::Config(format!(
                "{} is not a checkpoint directory (missing arch.json)",
                dir.display()
            )));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Load a sequence file, folding shape complaints into validation errors
/// so bad inputs exit with code 2.
fn load_image(path: &Path) -> Result<DynamicImage> {
    DynamicImage::load(path).map_err(|e| match e {
        Error::Shape(msg) => Error::Config(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}

fn load_sadxnet(dir: &Path) -> Result<(SadxNet, ParamStore<f32>)> {
    let config = match ArchFile::load(dir)? {
        ArchFile::Sadxnet { config } => config,
        ArchFile::Rst { .. } => {
            return Err(Error::Config(format!(
                "{} holds an RST checkpoint, not a SADXNet one",
                dir.display()
            )))
        }
    };
    let net = SadxNet::new(config.clone())?;
    let store = ParamStore::load(dir)?;
    if store.n_values() != config.param_count() {
        return Err(Error::Config(format!(
            "checkpoint {} does not match its declared architecture ({} values vs {})",
            dir.display(),
            store.n_values(),
            config.param_count()
        )));
    }
    Ok((net, store))
}

fn load_rst(dir: &Path) -> Result<(RstNet, ParamStore<f32>)> {
    let config = match ArchFile::load(dir)? {
        ArchFile::Rst { config } => config,
        ArchFile::Sadxnet { .. } => {
            return Err(Error::Config(format!(
                "{} holds a SADXNet checkpoint, not an RST one",
                dir.display()
            )))
        }
    };
    let net = RstNet::new(config.clone())?;
    let store = ParamStore::load(dir)?;
    if store.n_values() != config.param_count() {
        return Err(Error::Config(format!(
            "checkpoint {} does not match its declared architecture ({} values vs {})",
            dir.display(),
            store.n_values(),
            config.param_count()
        )));
    }
    Ok((net, store))
}

/// All *.dmt4 sequences in a directory, sorted by filename for
/// deterministic ordering.
fn load_truths(dir: &Path) -> Result<Vec<(String, DynamicImage)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "dmt4"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_image(&p)?))
        })
        .collect()
}

fn cmd_phantom(args: &PhantomArgs, seed: u64) -> Result<()> {
    let spec = PhantomSpec {
        frames: args.frames,
        height: args.height,
        width: args.width,
        slices: args.slices,
        n_ellipses: args.n_ellipses,
        motion_amplitude: args.motion_amplitude,
        period_frames: args.period_frames.unwrap_or(args.frames as f64),
        noise_sigma: args.noise_sigma,
        seed,
    };
    let img = generate_cine(&spec)?;
    img.save(&args.out)?;
    let (t, h, w, z) = img.dims();
    println!("wrote phantom {}x{}x{}x{} to {}", t, h, w, z, args.out.display());
    Ok(())
}

fn cmd_mask(args: &MaskArgs, seed: u64) -> Result<()> {
    let mask = make_vista_mask(args.t, args.h, args.w, args.r, seed)?;
    mask.save(&args.out)?;
    let rows: usize = (0..args.t).map(|t| mask.rows(t).len()).sum();
    println!(
        "wrote mask {}x{}x{} ({} sampled rows) to {}",
        args.t,
        args.h,
        args.w,
        rows,
        args.out.display()
    );
    Ok(())
}

fn cmd_undersample(args: &UndersampleArgs) -> Result<()> {
    if args.out_kspace.is_none() && args.out_zerofilled.is_none() {
        return Err(Error::Config(
            "nothing to write; pass --out-kspace and/or --out-zerofilled".into(),
        ));
    }
    let img = load_image(&args.image)?;
    let mask = SamplingMask::load(&args.mask)?;
    let under = undersample(&dft2_frames(&img), &mask)?;
    if let Some(path) = &args.out_kspace {
        under.save(path)?;
        println!("wrote undersampled k-space to {}", path.display());
    }
    if let Some(path) = &args.out_zerofilled {
        zero_filled_recon(&under)?.save(path)?;
        println!("wrote zero-filled reconstruction to {}", path.display());
    }
    Ok(())
}

fn resolve_train_config(args: &TrainArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let stage = Stage::parse(&args.stage)?;
    let mut cfg = match &args.config {
        Some(path) => {
            let cfg = TrainConfig::from_json(path)?;
            if cfg.stage != stage {
                return Err(Error::Config(format!(
                    "config stage {} does not match --stage {}",
                    cfg.stage, stage
                )));
            }
            cfg
        }
        None => TrainConfig::for_stage(stage),
    };
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.mask_r {
        cfg.mask_r = Some(v);
    }
    if let Some(v) = &args.variant {
        cfg.variant = Some(v.clone());
    }
    if args.augment {
        cfg.augment = true;
    }
    if let (Some(h), Some(w)) = (args.crop_h, args.crop_w) {
        cfg.crop = Some((h, w));
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.checkpoint_dir = Some(args.out_checkpoint.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn rst_config_for(tag: &str, z: usize) -> Result<RstConfig> {
    match tag {
        "micro" => Ok(RstConfig::micro(z)),
        "t-reduced" | "t_reduced" => Ok(RstConfig::reduced_t(z)),
        other => Ok(RstVariant::parse(other)?.config(z)),
    }
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_train_config(args, seed)?;
    let truths = load_truths(&args.data_dir)?;
    if truths.is_empty() {
        return Err(Error::Config(format!(
            "no .dmt4 sequences found in {}",
            args.data_dir.display()
        )));
    }
    let r = cfg.mask_r.unwrap_or(DEFAULT_MASK_R);
    let pairs: Vec<SequencePair> = truths
        .iter()
        .enumerate()
        .map(|(i, (_, truth))| undersampled_pair(truth, r, cfg.seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let out = &args.out_checkpoint;
    let z = truths[0].1.dims().3;
    if args.schedule.is_some() && cfg.stage == Stage::Rst {
        return Err(Error::Config(
            "--schedule applies to the sadxnet stage only".into(),
        ));
    }

    let log = match cfg.stage {
        Stage::Sadxnet => {
            let arch = match &args.schedule {
                Some(schedule) => SadxConfig {
                    schedule: schedule.clone(),
                    z,
                },
                None => SadxConfig::desk(z),
            };
            let net = SadxNet::new(arch.clone())?;
            let mut store = ParamStore::new();
            net.register_params(&mut store, cfg.seed)?;
            ArchFile::Sadxnet { config: arch }.save(out)?;
            let frames = frame_pairs(&pairs)?;
            trainer::train_sadxnet(&cfg, &net, &mut store, &frames)?
        }
        Stage::Rst => {
            let arch = rst_config_for(cfg.variant.as_deref().unwrap_or("t"), z)?;
            let net = RstNet::new(arch.clone())?;
            let mut store = ParamStore::new();
            net.register_params(&mut store, cfg.seed)?;
            ArchFile::Rst { config: arch }.save(out)?;
            let loaded = match &args.sadxnet_checkpoint {
                Some(dir) => Some(load_sadxnet(dir)?),
                None => None,
            };
            let frozen = loaded.as_ref().map(|(n, s)| (n, s));
            trainer::train_rst(&cfg, &net, &mut store, frozen, &pairs)?
        }
    };
    log.save_csv(out.join("loss.csv"))?;
    std::fs::write(
        out.join("train_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    println!(
        "trained {} for {} steps (loss {} -> {}); checkpoint at {}",
        cfg.stage,
        cfg.steps,
        log.first_loss().unwrap_or(f32::NAN),
        log.last_loss().unwrap_or(f32::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    if args.sadxnet_checkpoint.is_none() && args.rst_checkpoint.is_none() {
        return Err(Error::Config(
            "pass --sadxnet-checkpoint and/or --rst-checkpoint".into(),
        ));
    }
    let input = load_image(&args.input)?;
    let sadx = match &args.sadxnet_checkpoint {
        Some(dir) => Some(load_sadxnet(dir)?),
        None => None,
    };
    let rst = match &args.rst_checkpoint {
        Some(dir) => Some(load_rst(dir)?),
        None => None,
    };
    let pipe = Pipeline {
        sadxnet: sadx.as_ref().map(|(n, s)| (n, s)),
        rst: rst.as_ref().map(|(n, s)| (n, s)),
    };
    let recon = pipe.reconstruct(&input)?;
    recon.save(&args.out)?;
    println!("wrote reconstruction to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let pred = load_image(&args.pred)?;
    let truth = load_image(&args.truth)?;
    let (_, h, w, _) = truth.dims();
    let report = metrics::evaluate(&pred, &truth, &ssim_params_for(h, w))?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out_json {
        Some(path) => {
            std::fs::write(path, &json)?;
            println!("wrote metrics to {}", path.display());
        }
        None => println!("{}", json),
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let reports = gradcheck::run_all();
    let selected: Vec<_> = if args.op == "all" {
        reports.iter().collect()
    } else {
        reports
            .iter()
            .filter(|r| r.op == args.op || r.op.starts_with(&format!("{} ", args.op)))
            .collect()
    };
    if selected.is_empty() {
        let names: Vec<&str> = reports.iter().map(|r| r.op.as_str()).collect();
        return Err(Error::Config(format!(
            "unknown op {:?}; available: {}",
            args.op,
            names.join(", ")
        )));
    }
    let mut failed = 0;
    for r in &selected {
        println!("{}", r);
        if !r.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Divergence(format!(
            "{} of {} gradient checks failed",
            failed,
            selected.len()
        )));
    }
    Ok(())
}

fn cmd_export_png(args: &ExportPngArgs) -> Result<()> {
    let img = load_image(&args.input)?;
    let (t_n, h, w, z_n) = img.dims();
    if args.frame >= t_n || args.slice >= z_n {
        return Err(Error::Config(format!(
            "frame {} / slice {} out of range for a {}x{}x{}x{} sequence",
            args.frame, args.slice, t_n, h, w, z_n
        )));
    }
    let frame = img.frame_at(args.frame)?;
    let data = frame.data();
    let mut values = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            values[y * w + x] = data[(y * w + x) * z_n + args.slice];
        }
    }
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    let png = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer sized to dims");
    png.save_with_format(&args.out, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    println!("wrote {}x{} PNG to {}", w, h, args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(a, seed),
        Cmd::Mask(a) => cmd_mask(a, seed),
        Cmd::Undersample(a) => cmd_undersample(a),
        Cmd::Train(a) => cmd_train(a, cli.seed),
        Cmd::Reconstruct(a) => cmd_reconstruct(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::ExportPng(a) => cmd_export_png(a),
    }
}

fn main() -> ExitCode {
    // die quietly like cat/grep when the downstream consumer hangs up,
    // instead of panicking on a broken pipe
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
