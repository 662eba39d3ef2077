use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scaseg_core::config::RunConfig;
use scaseg_core::cost::{ablation_configs, ablation_table, cost_report, AblationAxis};
use scaseg_core::model::Model;
use scaseg_core::nn::{check_parameters, checkpoint, Ctx, Mode, ParamCheckOptions};
use scaseg_core::tensor::io::{self, DType};
use scaseg_core::train::{gen_split, stack, train, PALETTE};
use scaseg_core::{Error, Result};

/// Gradient-check tolerance on the relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "scaseg", version, about = "Successive cross-attention segmentation decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for parameter initialization and data (sets train.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter and MAC breakdown of the configured model.
    Describe(Common),
    /// Segment an image stored as a tensor file.
    Forward {
        #[command(flatten)]
        common: Common,
        /// `[3,H,W]` or `[B,3,H,W]` tensor file with values in [0, 1].
        #[arg(long)]
        input: PathBuf,
        /// Parameters to load instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on synthetic scenes; writes metrics.csv and checkpoint.bin.
    Train(Common),
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 16)]
        coords: usize,
        /// Random directions over all parameters at once.
        #[arg(long, default_value_t = 4)]
        directions: usize,
        /// Probe every scalar parameter.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Compare parameter and MAC counts (and optionally accuracy) across variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "variant", value_parser = ["attention", "scm", "variant", "blocks"])]
        axis: String,
        /// Also train every setting and report validation mIoU.
        #[arg(long)]
        train: bool,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Numerical(_) => 4,
        Error::Shape(_) => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn describe(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let enc = &cfg.model.encoder;
    let report = cost_report(&cfg.model, enc.height, enc.width)?;
    let text = report.to_text();
    print!("{text}");
    write_out(&common.out, "describe.txt", &text)?;
    write_out(&common.out, "cost.csv", report.to_csv())?;
    Ok(())
}

/// Binary PPM of a label map coloured with [`PALETTE`].
fn mask_ppm(mask: &[usize], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &c in mask {
        out.extend_from_slice(&PALETTE[c % PALETTE.len()]);
    }
    out
}

fn forward(common: &Common, input: &Path, ckpt: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let image = io::load(input)?;
    let image = match image.shape() {
        [3, h, w] => image.reshape(&[1, 3, *h, *w])?,
        [_, 3, _, _] => image,
        other => return Err(Error::Data(format!("input must be [3,H,W] or [B,3,H,W], got {other:?}"))),
    };
    let (b, h, w) = (image.shape()[0], image.shape()[2], image.shape()[3]);
    if h % 64 != 0 || w % 64 != 0 {
        return Err(Error::Data(format!("input size {h}x{w} must be a multiple of 64")));
    }
    if !image.is_finite() {
        return Err(Error::Data("input contains non-finite values".into()));
    }
    let (model, mut store) = Model::init(&cfg.model, cfg.train.seed)?;
    if let Some(path) = ckpt {
        checkpoint::load_into(&mut store, path)?;
    }
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let x = ctx.graph.constant(image);
    let logits = model.forward(&mut ctx, x)?;
    let logits = ctx.graph.value(logits);
    let pred = logits.argmax_axis1()?;
    std::fs::create_dir_all(&common.out)?;
    io::save(common.out.join("logits.sasf"), logits, DType::F64)?;
    let plane = h * w;
    for i in 0..b {
        let name = if b == 1 { "mask.ppm".to_string() } else { format!("mask_{i}.ppm") };
        write_out(&common.out, &name, mask_ppm(&pred[i * plane..(i + 1) * plane], h, w))?;
    }
    println!("wrote logits {:?} and {b} mask(s) to {}", logits.shape(), common.out.display());
    Ok(())
}

fn run_train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let (model, mut store) = Model::init(&cfg.model, cfg.train.seed)?;
    write_out(&common.out, "config.txt", cfg.render())?;
    let report = train(&model, &mut store, &cfg.train, Some(&common.out))?;
    let first = report.log.first().map_or(f64::NAN, |r| r.loss);
    let last = report.log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} iterations: loss {first:.4} -> {last:.4}, validation mIoU {:.4}",
        report.log.len(),
        report.final_miou
    );
    Ok(())
}

fn gradcheck(common: &Common, batch: usize, eps: f64, coords: usize, directions: usize, exhaustive: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let (model, store) = Model::init(&cfg.model, cfg.train.seed)?;
    let enc = &cfg.model.encoder;
    let data = gen_split(batch, enc.height, enc.width, cfg.model.decoder.num_classes, cfg.train.seed, "gradcheck")?;
    let (images, labels) = stack(&data)?;
    let opts = ParamCheckOptions {
        eps,
        coords_per_tensor: (!exhaustive).then_some(coords),
        directions,
        seed: cfg.train.seed,
        ..Default::default()
    };
    let report = check_parameters(&store, |ctx| Ok(model.loss(ctx, &images, &labels)?.0), &opts)?;
    let text = format!(
        "tensors {}  scalars {}  probed coordinates {}  directions {}  kink retries {}\nmax relative error {:.3e} at {}\n",
        report.tensors_checked,
        report.params_covered,
        report.coords_checked,
        report.directions_checked,
        report.kink_retries,
        report.max_rel_error,
        report.worst
    );
    print!("{text}");
    write_out(&common.out, "gradcheck.txt", &text)?;
    if !(report.max_rel_error < GRADCHECK_TOLERANCE) {
        return Err(Error::Numerical(format!(
            "gradient check failed: relative error {:.3e} at {} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error, report.worst
        )));
    }
    Ok(())
}

fn ablate(common: &Common, axis: &str, with_training: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let axis: AblationAxis = axis.parse()?;
    let enc = &cfg.model.encoder;
    let table = ablation_table(&cfg.model, axis, enc.height, enc.width)?;
    let name = axis_name(axis);
    if !with_training {
        print!("{}", table.to_text());
        write_out(&common.out, &format!("ablation_{name}.csv"), table.to_csv())?;
        return Ok(());
    }
    let mut csv = String::from("setting,params,macs,miou\n");
    let mut text = format!("{:<28}  {:>10}  {:>12}  {:>8}\n", "setting", "params", "macs", "mIoU");
    for ((setting, model_cfg), row) in ablation_configs(&cfg.model, axis).into_iter().zip(&table.rows) {
        let (model, mut store) = Model::init(&model_cfg, cfg.train.seed)?;
        let dir = common.out.join(format!("ablation_{name}")).join(setting.replace('=', "_"));
        let report = train(&model, &mut store, &cfg.train, Some(&dir))?;
        let _ = writeln!(csv, "{setting},{},{},{}", row.params, row.macs, report.final_miou);
        let _ = writeln!(text, "{setting:<28}  {:>10}  {:>12}  {:>8.4}", row.params, row.macs, report.final_miou);
        eprintln!("{setting}: mIoU {:.4}", report.final_miou);
    }
    print!("{text}");
    write_out(&common.out, &format!("ablation_{name}_train.csv"), csv)?;
    Ok(())
}

fn axis_name(axis: AblationAxis) -> &'static str {
    match axis {
        AblationAxis::Attention => "attention",
        AblationAxis::Scm => "scm",
        AblationAxis::Variant => "variant",
        AblationAxis::Blocks => "blocks",
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Describe(c) => describe(c),
        Command::Forward { common, input, checkpoint } => forward(common, input, checkpoint.as_deref()),
        Command::Train(c) => run_train(c),
        Command::Gradcheck { common, batch, eps, coords, directions, exhaustive } => {
            gradcheck(common, *batch, *eps, *coords, *directions, *exhaustive)
        }
        Command::Ablate { common, axis, train } => ablate(common, axis, *train),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
