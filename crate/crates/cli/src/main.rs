//! `fila`: prepare datasets, train phantom generators, synthesize and evaluate.

mod cache;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fila_core::checkpoint::Container;
use fila_core::config::RunConfig;
use fila_core::data::{self, ImagePair, PreprocessOptions};
use fila_core::evaluation::{self, Segmenter};
use fila_core::nets::Generator;
use fila_core::trainer::{self, TrainMode, Trainer};
use image::{GrayImage, Luma, RgbImage};

#[derive(Parser)]
#[command(name = "fila", version, about = "Filamentary phantom synthesis and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `section.key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    target_size: Option<usize>,
    /// Output directory; defaults to `<run root>/run-<timestamp>-<seed>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Parent of generated run directories.
    #[arg(long, env = "FILA_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Gan,
    Sgan,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Scheme1,
    Scheme2,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess an `images/` + `gt/` (+ `masks/`) directory into a cache.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        /// drive-like, stare-like, hrf-like, neuron-like or generic.
        #[arg(long)]
        kind: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the adversarial generator with the L1 deviation term.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Style image, required for `--mode sgan`.
        #[arg(long)]
        style: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the style-transfer variant against one style image.
    TrainStyle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate phantoms for one ground-truth image.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Field-of-view mask; the whole frame when absent.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        kind: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Segmentation-based evaluation.
    Evaluate {
        #[arg(value_enum)]
        scheme: Scheme,
        /// Real training pairs.
        #[arg(long)]
        real: PathBuf,
        /// Synthetic training pairs (scheme1) or phantoms of the test set (scheme2).
        #[arg(long)]
        synthetic: PathBuf,
        /// Real test pairs.
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a procedural fundus-like dataset for trying the pipeline.
    Micro {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Color a prediction against its ground truth.
    Overlay {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = base.unwrap_or_default();
    if let Some(p) = &common.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_text(&text).with_context(|| p.display().to_string())?;
    }
    for o in &common.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.seg.seed = s;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(t) = common.target_size {
        cfg.set("data.target_size", &t.to_string())?;
    }
    Ok(cfg)
}

fn run_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match &common.run_dir {
        Some(d) => d.clone(),
        None => {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            common.run_root.join(format!("run-{ts}-{}", cfg.train.seed))
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join("config.txt"))?;
    Ok(dir)
}

fn style_pair(path: &Path, opts: &PreprocessOptions) -> Result<ImagePair> {
    let img = data::load_rgb(path)?;
    let blank = GrayImage::new(img.width(), img.height());
    let full = GrayImage::from_pixel(img.width(), img.height(), Luma([255]));
    let opts = PreprocessOptions { kind: fila_core::data::DatasetKind::Generic, ..opts.clone() };
    Ok(data::preprocess("style", &img, &blank, Some(&full), &opts)?)
}

fn config_from_checkpoint(c: &Container) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in &c.header {
        if let Some(key) = k.strip_prefix("config.") {
            cfg.set(key, v).with_context(|| format!("checkpoint header {k}"))?;
        }
    }
    Ok(cfg)
}

fn cmd_prepare(data: &Path, kind: Option<&str>, common: &Common) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    if let Some(k) = kind {
        cfg.set("data.kind", k)?;
    }
    let dir = run_dir(common, &cfg)?;
    match cache::prepare(data, &cfg.preprocess_options(), &dir)? {
        cache::Prepared::Fresh(n) => println!("cache fresh: {n} pairs in {}", dir.display()),
        cache::Prepared::Written(n) => println!("prepared {n} pairs into {}", dir.display()),
    }
    Ok(())
}

fn cmd_train(data: &Path, mode: TrainMode, style: Option<&Path>, resume: Option<&Path>, common: &Common) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    cfg.train.mode = mode;
    cfg.validate()?;
    let opts = cfg.preprocess_options();
    let pairs = cache::load_pairs(data, &opts)?;
    let style = match (mode, style) {
        (TrainMode::Sgan, Some(p)) => Some(style_pair(p, &opts)?),
        (TrainMode::Sgan, None) => bail!("sgan mode needs --style"),
        (TrainMode::Gan, Some(_)) => bail!("--style is only used in sgan mode"),
        (TrainMode::Gan, None) => None,
    };
    let dir = run_dir(common, &cfg)?;
    let t = Trainer::new(cfg.train.clone(), &pairs, style.as_ref())?;
    let mut state = match resume {
        Some(p) => t.load(p)?,
        None => t.init_state(),
    };
    let log = t.run(&mut state, &pairs, Some(&dir))?;
    if let Some(last) = log.last() {
        println!("{}", serde_line(last));
    }
    println!("trained {} steps; outputs in {}", state.step, dir.display());
    Ok(())
}

fn serde_line(m: &trainer::StepMetrics) -> String {
    let mut s = format!("step {} epoch {} loss_g_gan {:.5}", m.step, m.epoch, m.loss_g_gan);
    for (k, v) in
        [("loss_dev", m.loss_dev), ("loss_sty", m.loss_sty), ("loss_cont", m.loss_cont), ("loss_tv", m.loss_tv)]
    {
        if let Some(v) = v {
            s.push_str(&format!(" {k} {v:.5}"));
        }
    }
    s.push_str(&format!(" loss_d {:.5}", m.loss_d));
    s
}

fn cmd_synthesize(
    ckpt: &Path,
    gt: &Path,
    mask: Option<&Path>,
    count: usize,
    kind: Option<&str>,
    common: &Common,
) -> Result<()> {
    let c = Container::read(ckpt)?;
    let stored = config_from_checkpoint(&c)?;
    let mut cfg = resolve(common, Some(stored.clone()))?;
    if let Some(k) = kind {
        cfg.set("data.kind", k)?;
    }
    if cfg.train.generator != stored.train.generator {
        bail!("generator config does not match checkpoint {}", ckpt.display());
    }
    let generator = Generator::new(cfg.train.generator.clone())?;
    let params = c.extract_params("gen")?;
    generator.check_params(&params)?;
    let raw_gt = data::load_gray(gt)?;
    let raw_mask = match mask {
        Some(m) => data::load_gray(m)?,
        None => GrayImage::from_pixel(raw_gt.width(), raw_gt.height(), Luma([255])),
    };
    let blank = RgbImage::new(raw_gt.width(), raw_gt.height());
    let pair = data::preprocess("gt", &blank, &raw_gt, Some(&raw_mask), &cfg.preprocess_options())?;
    let dir = run_dir(common, &cfg)?;
    let phantoms =
        trainer::synthesize(&generator, &params, &pair.segmentation, count, cfg.train.seed, cfg.train.noise_std_test)?;
    for (i, p) in phantoms.iter().enumerate() {
        let img = data::postprocess(p, &pair.geometry, pair.mask.as_ref())?;
        data::save_rgb(&img, &dir.join(format!("phantom-{i:03}.png")))?;
    }
    println!("wrote {count} phantoms to {}", dir.display());
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(&r)?);
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn cmd_evaluate(scheme: Scheme, real: &Path, synthetic: &Path, test: &Path, common: &Common) -> Result<()> {
    let cfg = resolve(common, None)?;
    cfg.seg.validate()?;
    let opts = cfg.preprocess_options();
    let real = cache::load_pairs(real, &opts)?;
    let synthetic = cache::load_pairs(synthetic, &opts)?;
    let test = cache::load_pairs(test, &opts)?;
    let dir = run_dir(common, &cfg)?;
    match scheme {
        Scheme::Scheme1 => {
            let report = evaluation::scheme1(&real, &synthetic, &test, &cfg.seg)?;
            let table = report.to_table();
            fs::write(dir.join("scheme1.txt"), &table)?;
            write_jsonl(
                &dir.join("scheme1.jsonl"),
                report.rows.iter().flat_map(|r| {
                    std::iter::once(
                        serde_json::json!({"scenario": r.scenario, "patches": r.patches, "average_f1": r.average_f1}),
                    )
                    .chain(
                        r.per_image
                            .iter()
                            .map(|s| serde_json::json!({"scenario": r.scenario, "id": s.id, "metrics": s.metrics})),
                    )
                }),
            )?;
            print!("{table}");
        }
        Scheme::Scheme2 => {
            let seg: Segmenter = evaluation::train_segmenter(&real, &cfg.seg, cfg.seg.seed)?;
            let out = evaluation::scheme2(&seg, &test, &synthetic)?;
            let table = out.report.to_table();
            fs::write(dir.join("scheme2.txt"), &table)?;
            write_jsonl(&dir.join("scheme2.jsonl"), &out.report.per_image)?;
            let ov = dir.join("overlays");
            fs::create_dir_all(&ov)?;
            for (pair, (pr, pp)) in test.iter().zip(&out.predictions) {
                let m = pair.mask.as_ref();
                data::save_rgb(
                    &evaluation::overlay(pr, &pair.segmentation, m)?,
                    &ov.join(format!("{}-real.png", pair.id)),
                )?;
                data::save_rgb(
                    &evaluation::overlay(pp, &pair.segmentation, m)?,
                    &ov.join(format!("{}-phantom.png", pair.id)),
                )?;
            }
            print!("{table}");
        }
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_overlay(pred: &Path, gt: &Path, mask: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = resolve(common, None)?;
    let to_map = |p: &Path| -> Result<fila_core::Tensor> {
        let g = data::load_gray(p)?;
        Ok(data::gray_to_tensor(&g).map(|v| if v > 127.5 { 1.0 } else { 0.0 }))
    };
    let (p, g) = (to_map(pred)?, to_map(gt)?);
    let m = mask.map(to_map).transpose()?;
    let metrics = evaluation::f1(&p, &g, m.as_ref())?;
    let dir = run_dir(common, &cfg)?;
    data::save_rgb(&evaluation::overlay(&p, &g, m.as_ref())?, &dir.join("overlay.png"))?;
    println!(
        "tp {} fp {} fn {} tn {} precision {:.4} recall {:.4} f1 {:.4}",
        metrics.tp, metrics.fp, metrics.fn_, metrics.tn, metrics.precision, metrics.recall, metrics.f1
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { data, kind, common } => cmd_prepare(&data, kind.as_deref(), &common),
        Command::Train { data, mode, style, resume, common } => {
            let mode = match mode {
                Some(Mode::Sgan) => TrainMode::Sgan,
                _ => TrainMode::Gan,
            };
            cmd_train(&data, mode, style.as_deref(), resume.as_deref(), &common)
        }
        Command::TrainStyle { data, style, resume, common } => {
            cmd_train(&data, TrainMode::Sgan, Some(&style), resume.as_deref(), &common)
        }
        Command::Synthesize { checkpoint, gt, mask, count, kind, common } => {
            cmd_synthesize(&checkpoint, &gt, mask.as_deref(), count, kind.as_deref(), &common)
        }
        Command::Evaluate { scheme, real, synthetic, test, common } => {
            cmd_evaluate(scheme, &real, &synthetic, &test, &common)
        }
        Command::Micro { count, size, common } => {
            let cfg = resolve(&common, None)?;
            let dir = run_dir(&common, &cfg)?;
            fila_core::micro::write_raw_dataset(&dir, &fila_core::micro::render_raw(count, size, cfg.train.seed))?;
            println!("wrote {count} samples to {}", dir.display());
            Ok(())
        }
        Command::Overlay { pred, gt, mask, common } => cmd_overlay(&pred, &gt, mask.as_deref(), &common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
