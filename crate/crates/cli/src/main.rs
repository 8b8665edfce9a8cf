use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nerd_core::baselines::Baseline;
use nerd_core::checkpoint;
use nerd_core::dataset::DatasetManifest;
use nerd_core::gradcheck::suite::{run_suite, SUITE_TOLERANCE};
use nerd_core::image::{center_crop, mosaic, read_png, save_png, PngContent};
use nerd_core::inference::nerd_demosaic;
use nerd_core::metrics::{fmt_metric, psnr};
use nerd_core::model::{describe, EncoderConfig, Model, ModelConfig, Variant};
use nerd_core::train::{
    evaluate, fit_bayer_only, fit_image, load_train_images, train_nerd, trace_csv, FitConfig, Method, TrainConfig,
    TrainOutput,
};
use nerd_core::{fsutil::write_atomic, Error};

/// Relative output paths resolve against this directory when it is set.
const OUTPUT_ROOT_ENV: &str = "NERD_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "nerd", version, about = "Neural-field demosaicking of GBRG Bayer images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit an unconditioned coordinate network to one image
    Fit(FitArgs),
    /// Train a conditioned model on a dataset manifest
    Train(TrainArgs),
    /// Demosaic a Bayer PNG (or mosaic and demosaic an RGB PNG)
    Demosaic(DemosaicArgs),
    /// Score methods on the test split of a manifest
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
    /// Print layer shapes and parameter counts
    Describe(DescribeArgs),
}

#[derive(Args, Debug, Clone)]
struct WidthArgs {
    #[arg(long, default_value_t = 256)]
    hidden_width: usize,
    #[arg(long, default_value_t = 30.0)]
    omega0: f64,
    #[arg(long, default_value_t = 128)]
    fourier_features: usize,
    #[arg(long, default_value_t = 10.0)]
    fourier_sigma: f64,
    #[arg(long, default_value_t = 64)]
    encoder_base: usize,
    #[arg(long, default_value_t = 8)]
    res_blocks: usize,
    #[arg(long, default_value_t = 128)]
    feature_channels: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
}

impl WidthArgs {
    fn config(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            hidden_width: self.hidden_width,
            omega0: self.omega0,
            fourier_features: self.fourier_features,
            fourier_sigma: self.fourier_sigma,
            encoder: EncoderConfig {
                base_channels: self.encoder_base,
                res_blocks: self.res_blocks,
                levels: 4,
                feature_channels: self.feature_channels,
                window: self.window,
            },
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    image: PathBuf,
    /// relu, relu_pe, siren or nerd0
    #[arg(long)]
    variant: Variant,
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    log_interval: u64,
    /// Centre-crop the image to this square size first
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long, default_value = "fit")]
    out: PathBuf,
    #[command(flatten)]
    widths: WidthArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    manifest: PathBuf,
    #[arg(long, default_value = "nerd")]
    variant: Variant,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.95)]
    lr_decay: f64,
    #[arg(long, default_value_t = 10_000)]
    iters_per_epoch: u64,
    #[arg(long, default_value_t = 5)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    patch_size: usize,
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixels queried per patch per step (default: every pixel)
    #[arg(long)]
    coord_subsample: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value = "train")]
    out: PathBuf,
    /// Print the effective configuration and check the manifest, then exit
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    widths: WidthArgs,
}

#[derive(Args, Debug)]
struct DemosaicArgs {
    input: PathBuf,
    output: PathBuf,
    /// bilinear, malvar, nerd or nerd-ns
    #[arg(long)]
    method: Method,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    manifest: PathBuf,
    /// Comma-separated list of bilinear, malvar, nerd, nerd-ns
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    methods: Vec<Method>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Resize (short side) and centre-crop test images to this size
    #[arg(long)]
    eval_size: Option<usize>,
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    /// Variant to describe (default: all)
    #[arg(long)]
    variant: Option<Variant>,
    #[command(flatten)]
    widths: WidthArgs,
}

/// Failure classes mapped onto exit codes 2 and 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn require_file(p: &Path, what: &str) -> CmdResult {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn load_model(path: Option<&Path>, needed: bool) -> Result<Option<Model>, Failure> {
    match path {
        Some(p) => {
            require_file(p, "checkpoint")?;
            let (model, meta) = checkpoint::load(p)?;
            log::info!("loaded {} (variant {}, step {})", p.display(), model.variant(), meta.step);
            Ok(Some(model))
        }
        None if needed => Err(Failure::Usage("neural methods need --checkpoint".into())),
        None => Ok(None),
    }
}

fn cmd_fit(a: FitArgs) -> CmdResult {
    require_file(&a.image, "image")?;
    if a.variant.is_conditioned() {
        return Err(Failure::Usage(format!("fit takes relu, relu_pe, siren or nerd0, not {}", a.variant)));
    }
    let cfg = FitConfig { iterations: a.iters, learning_rate: a.lr, seed: a.seed, log_interval: a.log_interval };
    let config = a.widths.config(a.variant);
    let crop = |img| match a.crop {
        Some(s) => center_crop(&img, s),
        None => Ok(img),
    };
    let outcome = match (read_png(&a.image)?, a.variant) {
        (PngContent::Rgb(img), Variant::Nerd0) => {
            let img = crop(img)?;
            let out = fit_bayer_only(&mosaic(&img)?, config, &cfg)?;
            println!("full-image psnr_db {}", fmt_metric(psnr(&out.reconstruction, &img)?));
            out
        }
        (PngContent::Bayer(_), Variant::Nerd0) if a.crop.is_some() => {
            return Err(Failure::Usage("--crop applies to RGB input only".into()))
        }
        (PngContent::Bayer(b), Variant::Nerd0) => fit_bayer_only(&b, config, &cfg)?,
        (PngContent::Rgb(img), _) => fit_image(&crop(img)?, config, &cfg)?,
        (PngContent::Bayer(_), v) => {
            return Err(Failure::Usage(format!("variant {v} needs an RGB image; only nerd0 fits a Bayer mosaic")))
        }
    };
    let dir = output_path(&a.out);
    create_dir(&dir)?;
    write_atomic(&dir.join("trace.csv"), &trace_csv(&outcome.trace)?)?;
    save_png(&outcome.reconstruction, &dir.join("recon.png"))?;
    println!("psnr_db {}", fmt_metric(outcome.final_psnr));
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    require_file(&a.manifest, "manifest")?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        lr_decay: a.lr_decay,
        iterations_per_epoch: a.iters_per_epoch,
        batch_size: a.batch_size,
        patch_size: a.patch_size,
        epochs: a.epochs,
        seed: a.seed,
        coord_subsample: a.coord_subsample,
        beta1: a.beta1,
        beta2: a.beta2,
    };
    cfg.validate()?;
    let model_config = a.widths.config(a.variant);
    model_config.validate()?;
    let echo = serde_json::json!({ "train": cfg, "model": model_config });
    println!("{}", serde_json::to_string_pretty(&echo).expect("configs serialise"));
    let manifest = DatasetManifest::load(&a.manifest)?;
    let images = load_train_images(&manifest, cfg.patch_size)?;
    if a.dry_run {
        return Ok(());
    }
    let dir = output_path(&a.out);
    create_dir(&dir)?;
    let output = TrainOutput { dir };
    let outcome = train_nerd(&images, model_config, &cfg, Some(&output))?;
    if let Some(last) = outcome.loss_log.last() {
        println!("final loss {} at step {}", last.loss, last.step);
    }
    println!("checkpoint {}", output.final_checkpoint().display());
    Ok(())
}

fn cmd_demosaic(a: DemosaicArgs) -> CmdResult {
    require_file(&a.input, "input")?;
    let model = load_model(a.checkpoint.as_deref(), a.method == Method::Neural)?;
    let (bayer, truth) = match read_png(&a.input)? {
        PngContent::Bayer(b) => (b, None),
        PngContent::Rgb(img) => (mosaic(&img)?, Some(img)),
    };
    let out = match a.method {
        Method::Baseline(b) => b.run(&bayer)?,
        Method::Neural => nerd_demosaic(model.as_ref().expect("checked above"), &bayer)?,
    };
    let path = output_path(&a.output);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_png(&out, &path)?;
    if let Some(truth) = truth {
        println!("psnr_db {}", fmt_metric(psnr(&out, &truth)?));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if a.methods.is_empty() {
        return Err(Failure::Usage(format!(
            "--methods needs at least one of {}, nerd, nerd-ns",
            Baseline::ALL.map(Baseline::name).join(", ")
        )));
    }
    require_file(&a.manifest, "manifest")?;
    let model = load_model(a.checkpoint.as_deref(), a.methods.contains(&Method::Neural))?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let report = evaluate(&manifest, &a.methods, model.as_ref(), a.eval_size)?;
    let path = output_path(&a.out);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    report.write_csv(&path)?;
    for row in report.means() {
        println!("{}: psnr_db {} ssim {}", row.method, fmt_metric(row.psnr_db), fmt_metric(row.ssim));
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let cases = run_suite(a.seed)?;
    let mut worst = 0.0f64;
    for c in &cases {
        worst = worst.max(c.report.max_rel_error);
        let status = if c.passes() { "ok" } else { "FAIL" };
        println!("{:<20} {status:<4} max_rel_error {:.3e}", c.name, c.report.max_rel_error);
    }
    println!("max relative error {worst:.3e} (tolerance {SUITE_TOLERANCE:e})");
    let failed = cases.iter().filter(|c| !c.passes()).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn cmd_describe(a: DescribeArgs) -> CmdResult {
    let variants = match a.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    for (i, v) in variants.into_iter().enumerate() {
        if i > 0 {
            println!();
        }
        println!("{}", describe(&a.widths.config(v))?);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Train(a) => cmd_train(a),
        Command::Demosaic(a) => cmd_demosaic(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Describe(a) => cmd_describe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
