//! Command-line surface binding all modules into reproducible runs.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod config;
mod dataset;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::ConfigMap;
use dataset::{DatasetManifest, ManifestEntry};
use monounet_core::autodiff::Graph;
use monounet_core::clinstats::{self, OutcomePair};
use monounet_core::error::Error as CoreError;
use monounet_core::metrics::{self, BinaryMask};
use monounet_core::monogenic::{local_phase, register_mono, FrequencyGrid, MonoBlockState};
use monounet_core::network::{self, ModelSpec, Variant};
use monounet_core::pgm::{self, GrayImage};
use monounet_core::phantom::{self, PhantomConfig, ShiftRanges};
use monounet_core::rng::{ChaCha12Rng, SeedableRng};
use monounet_core::tensor::Tensor;
use monounet_core::training::{self, Sample, TrainConfig};

#[derive(Parser)]
#[command(name = "monounet", version, about = "Compact monogenic-gated U-Net for ultrasound segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (clean or device-shifted)
    PhantomGen(PhantomGenArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Run inference, writing predicted masks as PGM files
    Infer(InferArgs),
    /// Evaluate predictions against ground truth (Dice, MASD)
    Eval(EvalArgs),
    /// Agreement statistics between manual and automated outcomes
    Clinstats(ClinstatsArgs),
    /// Print parameter and FLOP accounting for a variant
    Summary(SummaryArgs),
    /// Debug: dump per-scale local phase maps of one image
    PhaseDump(PhaseDumpArgs),
}

#[derive(Args)]
struct PhantomGenArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Apply per-sample device shifts (gain, gamma, blur, speckle, tilt)
    #[arg(long)]
    shifted: bool,
    /// key = value config file (flags take precedence)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (with manifest.csv)
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Disable affine augmentation
    #[arg(long)]
    no_augment: bool,
    /// Stop once validation Dice reaches this value
    #[arg(long)]
    target_val_dice: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint file
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for predicted masks
    #[arg(long)]
    out: PathBuf,
    /// Only process entries with this split tag
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted masks (same file names as the images)
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV output path
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ClinstatsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report output path (CSV plus a text summary block)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SummaryArgs {
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long, default_value_t = 2)]
    channels: usize,
    #[arg(long, default_value_t = 256)]
    image_size: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PhaseDumpArgs {
    /// Input image (PGM)
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::ShapeMismatch(_) | CoreError::InvalidArgument(_) => {
                CliError::Usage(e.to_string())
            }
            CoreError::Data(_) | CoreError::Io { .. } => CliError::Data(e.to_string()),
            CoreError::Numeric(_) | CoreError::BackwardTwice => CliError::Numeric(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PhantomGen(args) => cmd_phantom_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Clinstats(args) => cmd_clinstats(args),
        Command::Summary(args) => cmd_summary(args),
        Command::PhaseDump(args) => cmd_phase_dump(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("data error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(4)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigMap, CliError> {
    match path {
        Some(p) => ConfigMap::load(p).map_err(CliError::Usage),
        None => Ok(ConfigMap::default()),
    }
}

fn cfg_get<T: std::str::FromStr>(cfg: &ConfigMap, key: &str) -> Result<Option<T>, CliError> {
    cfg.get(key).map_err(CliError::Usage)
}

fn cmd_phantom_gen(args: PhantomGenArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let mut pc = PhantomConfig {
        seed: args.seed.or(cfg_get(&cfg, "seed")?).unwrap_or(0),
        count: args.count.or(cfg_get(&cfg, "count")?).unwrap_or(16),
        image_size: args
            .image_size
            .or(cfg_get(&cfg, "image_size")?)
            .unwrap_or(256),
        ..PhantomConfig::default()
    };
    if let (Some(lo), Some(hi)) = (
        cfg_get::<f64>(&cfg, "thickness_min_px")?,
        cfg_get::<f64>(&cfg, "thickness_max_px")?,
    ) {
        pc.thickness_px = (lo, hi);
    }
    let mut shift = ShiftRanges::default();
    for (key, slot) in [
        ("shift_gain_db_min", &mut shift.gain_db.0),
        ("shift_gain_db_max", &mut shift.gain_db.1),
        ("shift_gamma_min", &mut shift.contrast_gamma.0),
        ("shift_gamma_max", &mut shift.contrast_gamma.1),
        ("shift_blur_min", &mut shift.blur_sigma.0),
        ("shift_blur_max", &mut shift.blur_sigma.1),
        ("shift_speckle_min", &mut shift.speckle_scale.0),
        ("shift_speckle_max", &mut shift.speckle_scale.1),
        ("shift_tilt_min", &mut shift.tilt_degrees.0),
        ("shift_tilt_max", &mut shift.tilt_degrees.1),
    ] {
        if let Some(v) = cfg_get::<f64>(&cfg, key)? {
            *slot = v;
        }
    }
    pc.shift = shift;
    cfg.reject_unknown().map_err(CliError::Usage)?;

    println!("seed = {}", pc.seed);
    let phantoms = if args.shifted {
        phantom::generate_shifted(&pc)?
    } else {
        phantom::generate(&pc)?
    };
    let split = if args.shifted { "test" } else { "train" };
    dataset::write_phantom_dataset(&args.out, &phantoms, split)?;
    println!(
        "wrote {} {} phantoms to {}",
        phantoms.len(),
        split,
        args.out.display()
    );
    Ok(())
}

fn entry_to_sample(entry: &ManifestEntry, expected_size: usize) -> Result<Sample, CliError> {
    let img = dataset::load_image(entry)?;
    let mask = dataset::load_mask(entry)?;
    if img.h != expected_size || img.w != expected_size {
        return Err(CliError::Data(format!(
            "{}: image is {}x{}, expected {expected_size}x{expected_size}",
            entry.image.display(),
            img.h,
            img.w
        )));
    }
    if mask.h() != img.h || mask.w() != img.w {
        return Err(CliError::Data(format!(
            "{}: mask size does not match image",
            entry.mask.display()
        )));
    }
    Ok(Sample::from_raw(
        &img.pixels,
        mask.data().to_vec(),
        expected_size,
        entry.spacing_mm,
    )?)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let mut tc = TrainConfig::default();
    tc.epochs = args.epochs.or(cfg_get(&cfg, "epochs")?).unwrap_or(tc.epochs);
    tc.batch_size = args
        .batch_size
        .or(cfg_get(&cfg, "batch_size")?)
        .unwrap_or(tc.batch_size);
    tc.lr0 = args.lr0.or(cfg_get(&cfg, "lr0")?).unwrap_or(tc.lr0);
    tc.weight_decay = args
        .weight_decay
        .or(cfg_get(&cfg, "weight_decay")?)
        .unwrap_or(tc.weight_decay);
    tc.seed = args.seed.or(cfg_get(&cfg, "seed")?).unwrap_or(0);
    tc.val_fraction = args
        .val_fraction
        .or(cfg_get(&cfg, "val_fraction")?)
        .unwrap_or(tc.val_fraction);
    if args.no_augment || cfg_get::<bool>(&cfg, "augment")? == Some(false) {
        tc.augment = false;
    }
    tc.target_val_dice = args.target_val_dice.or(cfg_get(&cfg, "target_val_dice")?);
    let variant_name: String = cfg_get::<String>(&cfg, "variant")?
        .filter(|_| args.variant == "full")
        .unwrap_or_else(|| args.variant.clone());
    let image_size = cfg_get::<usize>(&cfg, "image_size")?.unwrap_or(256);
    cfg.reject_unknown().map_err(CliError::Usage)?;

    let variant = Variant::parse(&variant_name)?;
    let spec = ModelSpec::new(variant, image_size, 2)?;

    println!("seed = {}", tc.seed);
    let manifest = DatasetManifest::load(&args.data)?;
    let entries = manifest.filtered(args.split.as_deref());
    if entries.is_empty() {
        return Err(CliError::Data(format!(
            "no dataset entries for split {:?} in {}",
            args.split,
            args.data.display()
        )));
    }
    let samples: Vec<Sample> = entries
        .iter()
        .map(|e| entry_to_sample(e, spec.image_size))
        .collect::<Result<_, _>>()?;

    let (state, log) = training::train(&samples, &tc, &spec)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    let cfg_path = args.out.join("config.txt");
    let mut snapshot = tc.snapshot();
    snapshot.push_str(&format!("variant = {}\n", variant.name()));
    snapshot.push_str(&format!("image_size = {}\n", spec.image_size));
    std::fs::write(&cfg_path, snapshot)
        .map_err(|e| CoreError::io(cfg_path.display().to_string(), e))?;
    let log_path = args.out.join("runlog.csv");
    std::fs::write(&log_path, log.to_csv())
        .map_err(|e| CoreError::io(log_path.display().to_string(), e))?;
    network::save_checkpoint(&state, &args.out.join("best.ckpt"))?;
    println!(
        "trained {} epochs; best val Dice {:.4} at epoch {}; skipped steps {}",
        log.epochs.len(),
        log.best_val_dice,
        log.best_epoch,
        log.skipped_steps
    );
    println!("run directory: {}", args.out.display());
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    println!("seed = {}", args.seed.unwrap_or(0));
    let state = network::load_checkpoint(&args.model)?;
    let size = state.spec.image_size;
    let manifest = DatasetManifest::load(&args.data)?;
    let entries = manifest.filtered(args.split.as_deref());
    if entries.is_empty() {
        return Err(CliError::Data(format!(
            "no dataset entries for split {:?} in {}",
            args.split,
            args.data.display()
        )));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    for chunk in entries.chunks(8) {
        let samples: Vec<Sample> = chunk
            .iter()
            .map(|e| entry_to_sample(e, size))
            .collect::<Result<_, _>>()?;
        let mut data = Vec::with_capacity(samples.len() * size * size);
        for s in &samples {
            data.extend_from_slice(&s.image);
        }
        let batch = Tensor::new(&[samples.len(), 1, size, size], data)?;
        let probs = network::predict(&state, batch)?;
        for (i, entry) in chunk.iter().enumerate() {
            let plane = &probs.data()[i * size * size..][..size * size];
            let mask = BinaryMask::new(
                size,
                size,
                plane.iter().map(|&p| p >= 0.5).collect(),
                entry.spacing_mm,
            )?;
            let name = entry
                .image
                .file_name()
                .ok_or_else(|| CliError::Data(format!("bad image path {}", entry.image.display())))?;
            pgm::write_pgm(&args.out.join(name), &dataset::mask_to_pgm(&mask))?;
        }
    }
    println!("wrote {} predictions to {}", entries.len(), args.out.display());
    Ok(())
}

fn load_pred_mask(pred_dir: &Path, entry: &ManifestEntry) -> Result<BinaryMask, CliError> {
    let name = entry
        .image
        .file_name()
        .ok_or_else(|| CliError::Data(format!("bad image path {}", entry.image.display())))?;
    let path = pred_dir.join(name);
    let img = pgm::read_pgm(&path)?;
    Ok(BinaryMask::new(
        img.h,
        img.w,
        img.pixels.iter().map(|&v| v >= 128).collect(),
        entry.spacing_mm,
    )?)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    println!("seed = {}", args.seed.unwrap_or(0));
    let manifest = DatasetManifest::load(&args.data)?;
    let entries = manifest.filtered(args.split.as_deref());
    if entries.is_empty() {
        return Err(CliError::Data("no dataset entries selected".into()));
    }
    let mut preds = Vec::with_capacity(entries.len());
    let mut gts = Vec::with_capacity(entries.len());
    for entry in &entries {
        preds.push(load_pred_mask(&args.pred, entry)?);
        gts.push(dataset::load_mask(entry)?);
    }
    let summary = metrics::evaluate_dataset(&preds, &gts)?;
    let mut csv = String::from("image_id,dice,masd_mm,excluded\n");
    for (entry, rec) in entries.iter().zip(&summary.records) {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            entry.stem(),
            rec.dice,
            rec.masd_mm.map_or(String::new(), |v| v.to_string()),
            if rec.excluded { 1 } else { 0 }
        ));
    }
    csv.push_str(&format!(
        "summary,{} +- {},{} +- {},{}\n",
        summary.dice_mean, summary.dice_sd, summary.masd_mean, summary.masd_sd, summary.masd_excluded
    ));
    std::fs::write(&args.out, &csv).map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    println!(
        "dice {:.4} +- {:.4}, masd {:.4} +- {:.4} mm ({} excluded from MASD)",
        summary.dice_mean, summary.dice_sd, summary.masd_mean, summary.masd_sd, summary.masd_excluded
    );
    println!("metrics written to {}", args.out.display());
    Ok(())
}

fn cmd_clinstats(args: ClinstatsArgs) -> Result<(), CliError> {
    println!("seed = {}", args.seed.unwrap_or(0));
    let manifest = DatasetManifest::load(&args.data)?;
    let entries = manifest.filtered(args.split.as_deref());
    if entries.is_empty() {
        return Err(CliError::Data("no dataset entries selected".into()));
    }
    let mut thickness_pairs = Vec::new();
    let mut echo_pairs = Vec::new();
    let mut skipped = 0usize;
    for entry in &entries {
        let image = dataset::load_image(entry)?;
        let gt = dataset::load_mask(entry)?;
        let pred = metrics::largest_component(&load_pred_mask(&args.pred, entry)?);
        let manual_t = clinstats::thickness(&gt);
        let auto_t = clinstats::thickness(&pred);
        let manual_e = clinstats::echo_intensity(&image, &gt);
        let auto_e = clinstats::echo_intensity(&image, &pred);
        match (manual_t, auto_t, manual_e, auto_e) {
            (Some(mt), Some(at), Some(me), Some(ae)) => {
                thickness_pairs.push(OutcomePair { manual: mt, auto: at });
                echo_pairs.push(OutcomePair { manual: me, auto: ae });
            }
            _ => skipped += 1,
        }
    }
    let thickness_report = clinstats::agreement_report("thickness", "mm", &thickness_pairs)?;
    let echo_report = clinstats::agreement_report("echo_intensity", "a.u.", &echo_pairs)?;

    let mut out = String::from(
        "outcome,n,icc2k,icc_ci_low,icc_ci_high,bias_pct,loa_low_pct,loa_high_pct,prop_r2,prop_p\n",
    );
    for r in [&thickness_report, &echo_report] {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.outcome,
            r.ba.n,
            r.icc.value,
            r.icc.ci_low,
            r.icc.ci_high,
            r.ba.bias_pct,
            r.ba.loa_low_pct,
            r.ba.loa_high_pct,
            r.ba.prop_r2,
            r.ba.prop_p
        ));
    }
    out.push('\n');
    out.push_str(&thickness_report.text_block());
    out.push_str(&echo_report.text_block());
    if skipped > 0 {
        out.push_str(&format!("excluded images (empty mask): {skipped}\n"));
    }
    std::fs::write(&args.out, &out).map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    print!("{}", thickness_report.text_block());
    print!("{}", echo_report.text_block());
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_summary(args: SummaryArgs) -> Result<(), CliError> {
    println!("seed = {}", args.seed.unwrap_or(0));
    let variant = Variant::parse(&args.variant)?;
    let spec = ModelSpec::new(variant, args.image_size, args.channels)?;
    let state = network::build::<f32>(&spec, args.seed.unwrap_or(0));
    let params = state.param_count();
    let flops = network::count_flops(&spec);
    println!(
        "variant {} | channels {} | input {}x{} | stages {}",
        variant.name(),
        spec.channels,
        spec.image_size,
        spec.image_size,
        spec.stages()
    );
    println!(
        "parameters: {params} (backbone {} + mono/gates {})",
        network::backbone_param_formula(&spec),
        network::mono_gate_param_formula(&spec)
    );
    println!(
        "FLOPs per forward: {} ({:.4} G) [conv {} | fft {} | norm/act {} | other {}]",
        flops.total(),
        flops.total() as f64 / 1e9,
        flops.conv,
        flops.fft,
        flops.norm_act,
        flops.other
    );
    Ok(())
}

fn cmd_phase_dump(args: PhaseDumpArgs) -> Result<(), CliError> {
    let seed = args.seed.unwrap_or(0);
    println!("seed = {seed}");
    let img = pgm::read_pgm(&args.image)?;
    if img.h != img.w || !img.h.is_power_of_two() {
        return Err(CliError::Data(format!(
            "{}: phase dump needs a square power-of-two image, got {}x{}",
            args.image.display(),
            img.h,
            img.w
        )));
    }
    let s = img.h;
    let data: Vec<f32> = img.pixels.iter().map(|&v| v as f32 / 255.0).collect();
    let tensor = Tensor::new(&[1, 1, s, s], data)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let state = MonoBlockState::<f32>::init(3, 3, &mut rng);
    let grid = FrequencyGrid::new(s, s);
    let mut g = Graph::new();
    let image = g.constant(tensor);
    let refs = register_mono(&mut g, &state)?;
    let ph = local_phase(&mut g, &grid, image, &refs.filters, 3)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    let values = g.value(ph);
    let half_pi = std::f32::consts::FRAC_PI_2;
    for filter in 0..3 {
        for scale in 0..3 {
            let c = filter * 3 + scale;
            let plane = &values[c * s * s..][..s * s];
            let pixels = plane
                .iter()
                .map(|&v| (((v + half_pi) / (2.0 * half_pi)) * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            let out_img = GrayImage { h: s, w: s, pixels };
            let path = args.out.join(format!("phase_f{filter}_s{scale}.pgm"));
            pgm::write_pgm(&path, &out_img)?;
        }
    }
    println!("wrote 9 phase maps to {}", args.out.display());
    Ok(())
}
