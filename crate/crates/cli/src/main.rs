//! `emra`: synthetic data, training, evaluation and inference for the
//! region-proxy segmentation model.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use emra_core::checkpoint::Checkpoint;
use emra_core::config::RunConfig;
use emra_core::data::{gen_synthetic, image_to_tensor, labels_to_gray, load_dataset, save_dataset, Sample};
use emra_core::gradcheck::{model_grad_check, seeded_problem, GRADCHECK_EPS};
use emra_core::metrics::LabelCodec;
use emra_core::netpbm::RgbImage;
use emra_core::ops;
use emra_core::render::{export_maps, render_prediction};
use emra_core::train::{evaluate, prepare, Precision, Trainer};
use emra_core::{Error, Scalar};

/// Largest relative gradient error `gradcheck` accepts.
const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "emra", version, about = "Region-proxy ViT segmentation", arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Opts {
    /// `key = value` config file applied over the defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for initialization, data generation and training
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Encoder preset
    #[arg(long, global = true, value_parser = ["tiny", "ti", "s", "b", "l"])]
    model: Option<String>,
    /// Comma-separated inference scales
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Average with the mirrored prediction
    #[arg(long, global = true)]
    flip: bool,
    /// Sliding-window size
    #[arg(long, global = true, value_name = "N")]
    window: Option<usize>,
    /// Sliding-window stride
    #[arg(long, global = true, value_name = "N")]
    stride: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic training set and validation split
    GenData,
    /// Train a model and save a checkpoint
    Train {
        /// Continue from a checkpoint
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Report metrics of a checkpoint on a dataset directory
    Eval { checkpoint: PathBuf, data: PathBuf },
    /// Predict the class map of one image
    Infer { checkpoint: PathBuf, image: PathBuf },
    /// Compare analytic and finite-difference gradients of the loss
    Gradcheck,
    /// Render the prediction and proxy maps of one image
    ExportMaps { checkpoint: PathBuf, image: PathBuf },
}

enum Failure {
    Usage(String),
    Core(Error),
    Gradient(f64),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => 1,
            Failure::Core(Error::Numeric(_)) | Failure::Gradient(_) => 3,
            Failure::Core(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
            Failure::Gradient(max) => format!("max relative error {max:.3e} exceeds {GRAD_TOLERANCE:e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(value) = std::env::var("EMRA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("EMRA_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    let opts = &cli.opts;
    match &cli.command {
        Command::GenData => gen_data(opts),
        Command::Train { resume } => train(opts, resume.as_deref()),
        Command::Eval { checkpoint, data } => eval(opts, checkpoint, data),
        Command::Infer { checkpoint, image } => infer(opts, checkpoint, image),
        Command::Gradcheck => gradcheck(opts),
        Command::ExportMaps { checkpoint, image } => export(opts, checkpoint, image),
    }
}

/// Defaults, then the config file, then flags.
fn run_config(opts: &Opts) -> Result<RunConfig, Failure> {
    let mut cfg = match &opts.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &opts.model {
        cfg.apply_preset(name)?;
    }
    if let Some(seed) = opts.seed {
        cfg.init_seed = seed;
        cfg.train.seed = seed;
        cfg.data.synthetic.seed = seed;
    }
    apply_infer_flags(&mut cfg, opts);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_infer_flags(cfg: &mut RunConfig, opts: &Opts) {
    if let Some(scales) = &opts.scales {
        cfg.infer.scales = scales.clone();
    }
    if opts.flip {
        cfg.infer.flip = true;
    }
    if opts.window.is_some() {
        cfg.infer.window = opts.window;
    }
    if opts.stride.is_some() {
        cfg.infer.stride = opts.stride;
    }
}

fn out_dir(opts: &Opts, default: &str) -> Result<PathBuf, Failure> {
    let dir = opts.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

fn load_checkpoint(opts: &Opts, path: &Path) -> Result<Checkpoint, Failure> {
    if opts.config.is_some() || opts.model.is_some() {
        return Err(Failure::Usage("--config and --model do not apply to a saved checkpoint".into()));
    }
    let mut ck = Checkpoint::load(path)?;
    apply_infer_flags(&mut ck.config, opts);
    ck.config.validate()?;
    Ok(ck)
}

fn gen_data(opts: &Opts) -> Outcome {
    let cfg = run_config(opts)?;
    let out = out_dir(opts, "data")?;
    for (split, spec) in [("train", cfg.data.synthetic.clone()), ("val", cfg.data.val_spec())] {
        let samples = gen_synthetic(&spec)?;
        save_dataset(&out.join(split), &samples)?;
        println!("{split}: {} images of {}x{} in {}", samples.len(), spec.image_size, spec.image_size, out.join(split).display());
    }
    Ok(())
}

fn datasets(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>), Failure> {
    let codec = LabelCodec::land_cover();
    let train = match &cfg.data.train_dir {
        Some(dir) => load_dataset(dir, &codec)?,
        None => gen_synthetic(&cfg.data.synthetic)?,
    };
    let val = match &cfg.data.val_dir {
        Some(dir) => load_dataset(dir, &codec)?,
        None => gen_synthetic(&cfg.data.val_spec())?,
    };
    Ok((train, val))
}

fn train(opts: &Opts, resume: Option<&Path>) -> Outcome {
    let (cfg, ck) = match resume {
        Some(path) => {
            let ck = load_checkpoint(opts, path)?;
            (ck.config.clone(), Some(ck))
        }
        None => (run_config(opts)?, None),
    };
    let out = out_dir(opts, "run")?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(&cfg, ck.as_ref(), &out),
        Precision::F64 => train_as::<f64>(&cfg, ck.as_ref(), &out),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig, ck: Option<&Checkpoint>, out: &Path) -> Outcome {
    let (train_set, val_set) = datasets(cfg)?;
    let mut trainer: Trainer<T> = match ck {
        Some(ck) => ck.trainer()?,
        None => Trainer::new(emra_core::model::Model::new(cfg.model.clone(), cfg.init_seed)?, cfg.train.clone())?,
    };
    println!(
        "{} model, {} parameters, {} training images, epochs {}..{}",
        cfg.model.variant,
        trainer.model.params.numel(),
        train_set.len(),
        trainer.epoch,
        cfg.train.epochs
    );
    let data = prepare::<T>(&train_set);
    let start = Instant::now();
    while trainer.epoch < cfg.train.epochs {
        let log = trainer.run_epoch(&data)?;
        println!("epoch {:>4}  lr {:.6e}  loss {:.6}", log.epoch, log.lr, log.loss);
    }
    let path = out.join("checkpoint.emra");
    Checkpoint::capture(cfg, &trainer).save(&path)?;
    println!("saved {} after {:.1}s", path.display(), start.elapsed().as_secs_f64());
    if !val_set.is_empty() {
        let m = evaluate(&trainer.model, &val_set, &cfg.infer)?.metrics();
        println!("validation mIoU {:.4}  OA {:.4}  mF1 {:.4}", m.miou, m.oa, m.mean_f1);
    }
    Ok(())
}

fn eval(opts: &Opts, checkpoint: &Path, data: &Path) -> Outcome {
    let ck = load_checkpoint(opts, checkpoint)?;
    let codec = LabelCodec::land_cover();
    let samples = load_dataset(data, &codec)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no images under {}", data.display())).into());
    }
    let cm = match ck.config.train.precision {
        Precision::F32 => evaluate(&ck.model::<f32>()?, &samples, &ck.config.infer)?,
        Precision::F64 => evaluate(&ck.model::<f64>()?, &samples, &ck.config.infer)?,
    };
    print!("{}", cm.metrics().table(&codec));
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn infer(opts: &Opts, checkpoint: &Path, image: &Path) -> Outcome {
    let ck = load_checkpoint(opts, checkpoint)?;
    let codec = LabelCodec::land_cover();
    let img = RgbImage::load(image)?;
    let pred = match ck.config.train.precision {
        Precision::F32 => ck.model::<f32>()?.infer(&image_to_tensor(&img), &ck.config.infer)?.class_map,
        Precision::F64 => ck.model::<f64>()?.infer(&image_to_tensor(&img), &ck.config.infer)?.class_map,
    };
    let out = out_dir(opts, ".")?;
    let base = stem(image);
    let color = out.join(format!("{base}_pred.ppm"));
    let gray = out.join(format!("{base}_pred.pgm"));
    render_prediction(&pred, &codec)?.save(&color)?;
    labels_to_gray(&pred).save(&gray)?;
    println!("wrote {} and {}", color.display(), gray.display());
    Ok(())
}

fn export(opts: &Opts, checkpoint: &Path, image: &Path) -> Outcome {
    let ck = load_checkpoint(opts, checkpoint)?;
    let codec = LabelCodec::land_cover();
    let img = RgbImage::load(image)?;
    let size = ck.config.model.encoder.image_size;
    let mut x = image_to_tensor::<f32>(&img);
    if (img.height, img.width) != (size, size) {
        println!("resizing {}x{} input to {size}x{size}", img.width, img.height);
        x = ops::bilinear_upsample(&x, size, size)?;
    }
    let maps = export_maps(&ck.model::<f32>()?, &x, &codec)?;
    let out = out_dir(opts, ".")?;
    let base = stem(image);
    let mut written = vec![out.join(format!("{base}_pred.ppm"))];
    maps.prediction.save(&written[0])?;
    if let Some(entropy) = &maps.entropy {
        let path = out.join(format!("{base}_entropy.pgm"));
        entropy.save(&path)?;
        written.push(path);
    }
    for (c, map) in maps.gca.iter().enumerate() {
        let path = out.join(format!("{base}_gca_{}.pgm", codec.name(c)));
        map.save(&path)?;
        written.push(path);
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn gradcheck(opts: &Opts) -> Outcome {
    let cfg = run_config(opts)?;
    let seed = opts.seed.unwrap_or(cfg.init_seed);
    let start = Instant::now();
    let (model, image, labels) = seeded_problem(&cfg.model, seed)?;
    let check = model_grad_check(&model, &image, &labels, GRADCHECK_EPS)?;
    println!("{:<40}{:>8}{:>14}{:>10}", "parameter", "size", "max rel err", "> tol");
    for p in &check.params {
        println!("{:<40}{:>8}{:>14.3e}{:>10}", p.name, p.analytic.len(), p.max_rel_error(), p.count_above(GRAD_TOLERANCE));
    }
    let max = check.max_rel_error();
    println!(
        "seed {seed}: loss {:.6}, max relative error {max:.3e}, {} of {} coordinates above {GRAD_TOLERANCE:e}, {:.1}s",
        check.loss,
        check.count_above(GRAD_TOLERANCE),
        check.coordinates(),
        start.elapsed().as_secs_f64()
    );
    if max <= GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Gradient(max))
    }
}
