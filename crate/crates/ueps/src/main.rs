//! Command-line shell: synthetic data generation, reconstruction, training,
//! evaluation, the attention benchmark, and the CSM-robustness experiment.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ueps::acquisition::{
    full_kspace, make_csm, make_equispaced_mask, make_phantom, rss, zero_filled, PhantomKind,
    PhantomPhase, PhantomSpec, SamplingMask,
};
use ueps::denoiser::DenoiserConfig;
use ueps::error::{Error, Result};
use ueps::harness::{
    bench_attention, checkpoint_id, csm_robustness, evaluate_manifest, plot_bench,
    plot_robustness, write_bench_csv, write_robustness_csv, ReconMethod,
};
use ueps::io::{self, DatasetManifest, GenParams, MaskInfo, SliceEntry};
use ueps::rng::SeededRng;
use ueps::training::{load_checkpoint, load_dataset, train, TrainConfig};
use ueps::unrolled::{run_pipeline, upsample_to_full, PipelineConfig, Variant};

#[derive(Parser)]
#[command(
    name = "ueps",
    about = "Unrolled multi-coil MRI reconstruction: simulation, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-coil Cartesian dataset with a manifest.
    GenData(GenDataArgs),
    /// Reconstruct one slice from a checkpoint.
    Recon(ReconArgs),
    /// Train a pipeline on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the zero-filled baseline) over a manifest.
    Eval(EvalArgs),
    /// Time full vs row-band attention over square token grids.
    BenchAttn(BenchArgs),
    /// Measure reconstruction PSNR under coil-map perturbation.
    CsmRobustness(RobustnessArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 16)]
    num_slices: usize,
    /// Grid size as HxW, e.g. 64x64.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 4)]
    coils: usize,
    #[arg(long, default_value_t = 4.0)]
    accel: f64,
    #[arg(long, default_value_t = 0.08)]
    center_frac: f64,
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Phantom family: random-ellipses or shepp-logan.
    #[arg(long, default_value = "random-ellipses")]
    phantom: String,
    /// Phase style: smooth or none.
    #[arg(long, default_value = "smooth")]
    phase: String,
}

#[derive(Args)]
struct ReconArgs {
    #[arg(long)]
    variant: String,
    /// Optional pipeline config JSON; defaults to the checkpoint sidecar.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint stem (without .cgrid/.json extension).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    kspace: PathBuf,
    /// Manifest supplying the sampling mask (and coil maps for dum).
    #[arg(long)]
    mask_from_manifest: PathBuf,
    /// Output CGRID magnitude image.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dump_intermediates: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    variant: String,
    /// Optional pipeline config JSON; defaults to a desk-scale config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (containing manifest.json) or manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for per-epoch PSNR logging.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3e-4)]
    base_lr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint stem; omit for --variant zero-filled.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// dum, ue, uep, ueps, or zero-filled.
    #[arg(long)]
    variant: String,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated token counts; each must be a perfect square.
    #[arg(long, default_value = "100,400,1600,6400")]
    tokens: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    band: usize,
    #[arg(long, default_value_t = 256)]
    sparse_threshold: usize,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct RobustnessArgs {
    /// Checkpoint stem of the dum variant.
    #[arg(long)]
    dum: PathBuf,
    /// Checkpoint stem of a CSM-free variant.
    #[arg(long)]
    ue: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "0,0.05,0.1,0.2,0.4")]
    deltas: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 2 {
        return Err(Error::arg(format!("size '{s}' must look like 64x64")));
    }
    let h = parts[0]
        .parse()
        .map_err(|_| Error::arg(format!("bad height in '{s}'")))?;
    let w = parts[1]
        .parse()
        .map_err(|_| Error::arg(format!("bad width in '{s}'")))?;
    Ok((h, w))
}

fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| Error::arg(format!("bad {what} entry '{tok}'")))
        })
        .collect()
}

/// Desk-scale default pipeline for a full grid size; used when no config
/// JSON is given.
fn default_pipeline(variant: Variant, h: usize, w: usize) -> Result<PipelineConfig> {
    let denoiser = DenoiserConfig {
        patch_size: 8,
        depth: 3,
        width: 64,
        heads: 4,
        mlp_hidden: 128,
        band_halfwidth: 1,
        sparse_threshold: 256,
        full_layer_indices: DenoiserConfig::default_full_layers(3),
    };
    if variant.is_progressive() {
        let (h0, w0) = (h / 2, w / 2);
        if h0 % denoiser.patch_size != 0 || w0 % denoiser.patch_size != 0 {
            return Err(Error::arg(format!(
                "half-size stage ({h0}, {w0}) not divisible by patch size; pass --config"
            )));
        }
        PipelineConfig::progressive(variant, denoiser, vec![(h0, w0), (h, w)])
    } else {
        PipelineConfig::standard(variant, 2, denoiser, h, w)
    }
}

fn load_pipeline_config(path: &Path) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = serde_json::from_reader(std::fs::File::open(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let (height, width) = parse_size(&args.size)?;
    let kind = match args.phantom.as_str() {
        "random-ellipses" => PhantomKind::RandomEllipses,
        "shepp-logan" => PhantomKind::SheppLogan,
        other => return Err(Error::arg(format!("unknown phantom '{other}'"))),
    };
    let phase = match args.phase.as_str() {
        "smooth" => PhantomPhase::SmoothRandom,
        "none" => PhantomPhase::None,
        other => return Err(Error::arg(format!("unknown phase style '{other}'"))),
    };
    std::fs::create_dir_all(&args.out)?;
    let mask = make_equispaced_mask(width, args.accel, args.center_frac, 0)?;
    let root = SeededRng::new(args.seed);

    let mut entries = Vec::with_capacity(args.num_slices);
    let mut data_max: f64 = 0.0;
    for i in 0..args.num_slices {
        // Independent substream per slice.
        let mut rng = root.split(i as u64);
        let m = make_phantom(&PhantomSpec {
            kind,
            height,
            width,
            phase,
            seed: args.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        })?;
        let csm = make_csm(args.coils, height, width, &mut rng)?;
        let k_full = full_kspace(&m, &csm, args.noise_sigma, &mut rng)?;
        let k0 = mask.apply(&k_full)?;
        let target = rss(&zero_filled(&k_full)?)?;
        data_max = data_max.max(target.max_value());

        let kspace_name = format!("slice_{i:04}_kspace.cgrid");
        let csm_name = format!("slice_{i:04}_csm.cgrid");
        let gt_name = format!("slice_{i:04}_gt.cgrid");
        io::save_complex_grid(&args.out.join(&kspace_name), &k0)?;
        io::save_complex_grid(&args.out.join(&csm_name), csm.maps())?;
        io::save_real_grid(&args.out.join(&gt_name), &target)?;
        entries.push(SliceEntry {
            kspace: kspace_name,
            csm: csm_name,
            ground_truth: gt_name,
        });
    }

    let manifest = DatasetManifest {
        params: GenParams {
            num_slices: args.num_slices,
            height,
            width,
            coils: args.coils,
            acceleration: args.accel,
            center_fraction: args.center_frac,
            noise_sigma: args.noise_sigma,
            seed: args.seed,
        },
        mask: MaskInfo {
            width,
            lines: mask.sampled_indices(),
            acceleration: args.accel,
            center_fraction: args.center_frac,
            effective_acceleration: mask.effective_acceleration(),
        },
        data_max,
        slices: entries,
    };
    let manifest_path = args.out.join("manifest.json");
    manifest.save(&manifest_path)?;
    println!(
        "wrote {} slices ({height}x{width}, {} coils, R={:.1}, {} lines sampled, effective {:.2}) to {}",
        args.num_slices,
        args.coils,
        args.accel,
        mask.num_sampled(),
        mask.effective_acceleration(),
        args.out.display()
    );
    Ok(())
}

fn recon(args: ReconArgs) -> Result<()> {
    let variant: Variant = args.variant.parse()?;
    let (ckpt_config, params) = load_checkpoint(&args.checkpoint)?;
    let config = match &args.config {
        Some(path) => load_pipeline_config(path)?,
        None => ckpt_config,
    };
    if config.variant != variant {
        return Err(Error::arg(format!(
            "--variant {} does not match the checkpoint variant {}",
            variant.as_str(),
            config.variant.as_str()
        )));
    }
    let manifest_path = resolve_manifest(&args.mask_from_manifest);
    let manifest = DatasetManifest::load(&manifest_path)?;
    let mask = SamplingMask::from_sampled_indices(
        manifest.mask.width,
        &manifest.mask.lines,
        manifest.mask.acceleration,
        manifest.mask.center_fraction,
    )?;
    let k0 = io::load_complex_grid(&args.kspace)?;

    let csm = if variant.needs_csm() {
        // Locate the slice entry matching the given k-space file.
        let want = args
            .kspace
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let entry = manifest
            .slices
            .iter()
            .find(|e| {
                e.kspace == want || manifest.resolve(&manifest_path, &e.kspace) == args.kspace
            })
            .ok_or_else(|| {
                Error::arg(format!(
                    "k-space file '{want}' not found in the manifest; dum needs its coil maps"
                ))
            })?;
        let grid = io::load_complex_grid(&manifest.resolve(&manifest_path, &entry.csm))?;
        Some(ueps::acquisition::CoilSensitivities::from_grid(grid)?)
    } else {
        None
    };

    let out = run_pipeline(&config, &params, &k0, &mask, csm.as_ref())?;
    io::save_real_grid(&args.out, &out.magnitude)?;
    if let Some(dir) = &args.dump_intermediates {
        std::fs::create_dir_all(dir)?;
        let (full_h, full_w) = (k0.height(), k0.width());
        for (t, x) in out.intermediates.iter().enumerate() {
            io::save_complex_grid(&dir.join(format!("intermediate_{t:02}.cgrid")), x)?;
            let up = upsample_to_full(x, full_h, full_w)?;
            io::save_complex_grid(&dir.join(format!("intermediate_{t:02}_full.cgrid")), &up)?;
        }
    }
    println!("wrote magnitude image to {}", args.out.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let variant: Variant = args.variant.parse()?;
    let manifest_path = resolve_manifest(&args.data);
    let data = load_dataset(&manifest_path)?;
    let heldout = match &args.heldout {
        Some(p) => Some(load_dataset(&resolve_manifest(p))?),
        None => None,
    };
    let (h, w) = {
        let s = &data.slices[0].k0;
        (s.height(), s.width())
    };
    let pipeline = match &args.config {
        Some(path) => {
            let cfg = load_pipeline_config(path)?;
            if cfg.variant != variant {
                return Err(Error::arg(format!(
                    "--variant {} does not match config variant {}",
                    variant.as_str(),
                    cfg.variant.as_str()
                )));
            }
            cfg
        }
        None => default_pipeline(variant, h, w)?,
    };
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        base_lr: args.base_lr,
        ..TrainConfig::default()
    };
    let outcome = train(&pipeline, &train_cfg, &data, heldout.as_ref(), &args.out)?;
    let last_loss = outcome
        .records
        .iter()
        .rev()
        .find(|r| r.loss.is_finite())
        .map(|r| r.loss)
        .unwrap_or(f64::NAN);
    println!(
        "trained {} for {} epochs ({} steps); final loss {last_loss:.6}; checkpoint at {}",
        variant.as_str(),
        args.epochs,
        outcome
            .records
            .iter()
            .filter(|r| r.loss.is_finite())
            .count(),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let manifest_path = resolve_manifest(&args.data);

    let report = if args.variant == "zero-filled" {
        evaluate_manifest(&ReconMethod::ZeroFilled, &manifest_path, &checkpoint_id(None))?
    } else {
        let variant: Variant = args.variant.parse()?;
        let stem = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::arg("--checkpoint is required unless --variant zero-filled"))?;
        let (config, params) = load_checkpoint(stem)?;
        if config.variant != variant {
            return Err(Error::arg(format!(
                "--variant {} does not match checkpoint variant {}",
                variant.as_str(),
                config.variant.as_str()
            )));
        }
        let id = checkpoint_id(Some(&stem.with_extension("cgrid")));
        evaluate_manifest(&ReconMethod::Pipeline(&config, &params), &manifest_path, &id)?
    };
    report.save(&args.report)?;
    println!(
        "{}: PSNR {:.2} ± {:.2} dB, SSIM {:.4} ± {:.4} over {} slices ({} errors)",
        report.variant,
        report.mean_psnr,
        report.std_psnr,
        report.mean_ssim,
        report.std_ssim,
        report.slices.len(),
        report.errors.len()
    );
    if !report.errors.is_empty() {
        return Err(Error::arg(format!(
            "{} slice(s) failed to evaluate; see the report",
            report.errors.len()
        )));
    }
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let tokens: Vec<usize> = parse_list(&args.tokens, "token count")?;
    let records = bench_attention(
        &tokens,
        args.repeats,
        args.width,
        args.heads,
        args.band,
        args.sparse_threshold,
    )?;
    write_bench_csv(&args.csv, &records)?;
    if let Some(plot) = &args.plot {
        plot_bench(plot, &records)?;
    }
    for r in &records {
        println!(
            "T={:<7} {:<28} median {:>10.3} ms  ({} multiplies)",
            r.tokens, r.pattern, r.median_ms, r.flops
        );
    }
    Ok(())
}

fn robustness_cmd(args: RobustnessArgs) -> Result<()> {
    let deltas: Vec<f64> = parse_list(&args.deltas, "delta")?;
    let manifest_path = resolve_manifest(&args.data);
    let data = load_dataset(&manifest_path)?;
    let (dum_cfg, dum_params) = load_checkpoint(&args.dum)?;
    let (ue_cfg, ue_params) = load_checkpoint(&args.ue)?;
    let points = csm_robustness(
        (&dum_cfg, &dum_params),
        (&ue_cfg, &ue_params),
        &data,
        &deltas,
        args.seed,
    )?;
    write_robustness_csv(&args.csv, &points)?;
    if let Some(plot) = &args.plot {
        plot_robustness(plot, &points)?;
    }
    for p in &points {
        println!(
            "delta {:>5.2}: dum {:.2} dB, ue {:.2} dB",
            p.delta, p.dum_psnr, p.ue_psnr
        );
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Recon(args) => recon(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::BenchAttn(args) => bench_cmd(args),
        Command::CsmRobustness(args) => robustness_cmd(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
