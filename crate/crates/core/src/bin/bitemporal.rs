use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bitemporal_core::ablate::ablate;
use bitemporal_core::checkpoint::Checkpoint;
use bitemporal_core::config::{RunConfig, Split};
use bitemporal_core::data::{image_to_mask, mask_to_image, save_dataset, save_png, SamplePair};
use bitemporal_core::metrics::{confusion, metrics, metrics_csv, radar_csv, render_confusion, MetricSet};
use bitemporal_core::model::Model;
use bitemporal_core::similarity::{analyze_similarity, write_report};
use bitemporal_core::train::{evaluate, train, EpochStats};
use bitemporal_core::{Error, Result};

#[derive(Parser)]
#[command(name = "bitemporal", version, about = "Bi-temporal change detection")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Random training crop size (0 = whole samples).
    #[arg(long)]
    train_patch: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    no_csdw: bool,
    #[arg(long)]
    no_led: bool,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    val_dir: Option<PathBuf>,
    #[arg(long)]
    test_dir: Option<PathBuf>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/val/test splits under the output directory.
    GenData {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Train and keep the checkpoint with the best validation IoU.
    Train(Overrides),
    /// Write predicted masks for a split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Predict, score and render confusion masks for a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train and score the four CSDW/LED combinations.
    Ablate(Overrides),
    /// Cosine-similarity maps of one pair.
    AnalyzeSimilarity {
        /// Uses a freshly initialised model from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample position within the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render a confusion image from a predicted and a reference mask PNG.
    RenderMask {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.patch = self.train_patch.unwrap_or(t.patch);
        t.augment &= !self.no_augment;
        cfg.optimizer.lr = self.lr.unwrap_or(cfg.optimizer.lr);
        cfg.model.csdw_enabled &= !self.no_csdw;
        cfg.model.led_enabled &= !self.no_led;
        cfg.infer.patch = self.patch.unwrap_or(cfg.infer.patch);
        cfg.infer.stride = self.stride.unwrap_or(cfg.infer.stride);
        for (slot, flag) in [
            (&mut cfg.data.train_dir, &self.train_dir),
            (&mut cfg.data.val_dir, &self.val_dir),
            (&mut cfg.data.test_dir, &self.test_dir),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn log_epoch(label: &str, e: &EpochStats) {
    let val = e.val.map_or_else(|| "-".to_owned(), |m| format!("{:.4}", m.iou));
    let best = if e.is_best { " *" } else { "" };
    eprintln!("[{label}] epoch {:>3}  loss {:.4}  val IoU {val}{best}", e.epoch, e.mean_loss);
}

fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,last_loss,val_iou\n");
    for e in history {
        let val = e.val.map_or_else(String::new, |m| format!("{:.6}", m.iou));
        out.push_str(&format!("{},{:.6},{:.6},{val}\n", e.epoch, e.mean_loss, e.last_loss));
    }
    out
}

/// Checkpointed model; inference settings come from the command line when given.
fn load_model(path: &Path, overrides: &Overrides, base: &RunConfig) -> Result<(Model<f32>, RunConfig)> {
    let ck = Checkpoint::<f32>::load(path)?;
    let mut cfg = ck.config.clone();
    cfg.data = base.data.clone();
    cfg.infer = base.infer.clone();
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok((ck.model()?, cfg))
}

fn write_masks(dir: &Path, samples: &[SamplePair], masks: &[bitemporal_core::metrics::BinaryMask]) -> Result<()> {
    for (s, m) in samples.iter().zip(masks) {
        save_png(&mask_to_image(m).into(), &dir.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = &cli.out_dir;
    match &cli.command {
        Command::GenData { size, train_count, val_count, test_count } => {
            let d = &mut cfg.data;
            d.synth.size = size.unwrap_or(d.synth.size);
            d.train_count = train_count.unwrap_or(d.train_count);
            d.val_count = val_count.unwrap_or(d.val_count);
            d.test_count = test_count.unwrap_or(d.test_count);
            d.train_dir = None;
            d.val_dir = None;
            d.test_dir = None;
            for (split, name) in [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")] {
                let samples = cfg.data.load_split(split, cfg.seed)?;
                save_dataset(&out.join(name), &samples)?;
                eprintln!("wrote {} {name} pairs to {}", samples.len(), out.join(name).display());
            }
        }
        Command::Train(o) => {
            o.apply(&mut cfg);
            cfg.validate()?;
            let train_set = cfg.data.load_split(Split::Train, cfg.seed)?;
            let val_set = cfg.data.load_split(Split::Val, cfg.seed)?;
            let result = train(&cfg, &train_set, &val_set, |e| log_epoch("train", e))?;
            result.best.save(&out.join("best.ckpt"))?;
            result.last.save(&out.join("last.ckpt"))?;
            write(&out.join("history.csv"), &history_csv(&result.history))?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            let best = result.history[result.best.best_epoch - 1].val.expect("best epoch was validated");
            write(&out.join("metrics.csv"), &metrics_csv([("val", &best)]))?;
            eprintln!("best epoch {} with val IoU {:.4}", result.best.best_epoch, result.best.best_val_iou);
        }
        Command::Infer { checkpoint, overrides } => {
            let (model, cfg) = load_model(checkpoint, overrides, &cfg)?;
            let samples = cfg.data.load_split(Split::Test, cfg.seed)?;
            let (_, masks) = evaluate(&model, &samples, &cfg.infer)?;
            write_masks(out, &samples, &masks)?;
            eprintln!("wrote {} masks to {}", masks.len(), out.join("masks").display());
        }
        Command::Eval { checkpoint, overrides } => {
            let (model, cfg) = load_model(checkpoint, overrides, &cfg)?;
            let samples = cfg.data.load_split(Split::Test, cfg.seed)?;
            let (counts, masks) = evaluate(&model, &samples, &cfg.infer)?;
            write_masks(out, &samples, &masks)?;
            let mut per_image: Vec<(String, MetricSet)> = Vec::new();
            for (s, m) in samples.iter().zip(&masks) {
                save_png(&render_confusion(m, &s.mask)?.into(), &out.join("confusion").join(format!("{}.png", s.id)))?;
                per_image.push((s.id.clone(), metrics(&confusion(m, &s.mask)?)?));
            }
            let total = metrics(&counts)?;
            let label = cfg.variant_label();
            write(&out.join("metrics.csv"), &metrics_csv([(label.as_str(), &total)]))?;
            write(&out.join("per_image.csv"), &metrics_csv(per_image.iter().map(|(id, m)| (id.as_str(), m))))?;
            write(&out.join("radar.csv"), &radar_csv([(label.as_str(), &total)]))?;
            print!("{}", metrics_csv([(label.as_str(), &total)]));
        }
        Command::Ablate(o) => {
            o.apply(&mut cfg);
            cfg.validate()?;
            let train_set = cfg.data.load_split(Split::Train, cfg.seed)?;
            let val_set = cfg.data.load_split(Split::Val, cfg.seed)?;
            let test_set = cfg.data.load_split(Split::Test, cfg.seed)?;
            let report = ablate(&cfg, &train_set, &val_set, &test_set, |c, e| log_epoch(&c.variant_label(), e))?;
            write(&out.join("ablation.csv"), &report.to_csv())?;
            let labelled: Vec<(String, MetricSet)> = report
                .rows
                .iter()
                .map(|r| {
                    let flag = |b: bool| if b { "on" } else { "off" };
                    (format!("csdw={}/led={}", flag(r.csdw), flag(r.led)), r.metrics)
                })
                .collect();
            write(&out.join("radar.csv"), &radar_csv(labelled.iter().map(|(n, m)| (n.as_str(), m))))?;
            print!("{}", report.to_csv());
            println!("data parity: {}", report.data_parity());
            if let Some(gap) = report.iou_gap() {
                println!("full - baseline IoU: {:+.2}", gap * 100.0);
            }
        }
        Command::AnalyzeSimilarity { checkpoint, index, overrides } => {
            let (model, cfg) = match checkpoint {
                Some(path) => load_model(path, overrides, &cfg)?,
                None => {
                    overrides.apply(&mut cfg);
                    (Model::new(&cfg.model, cfg.seed)?, cfg)
                }
            };
            let samples = cfg.data.load_split(Split::Test, cfg.seed)?;
            let s = samples.get(*index).ok_or_else(|| {
                Error::InvalidArgument(format!("index {index} out of range for {} samples", samples.len()))
            })?;
            let report = analyze_similarity(&model, &s.img_a, &s.img_b)?;
            write_report(&report, &out.join("similarity"))?;
            println!("rgb cosine {:.6}", report.rgb_cosine);
        }
        Command::RenderMask { pred, gt, output } => {
            let open = |p: &PathBuf| image::open(p).map_err(|e| Error::image(p, e));
            let pred = image_to_mask(&open(pred)?.to_luma8());
            let gt = image_to_mask(&open(gt)?.to_luma8());
            save_png(&render_confusion(&pred, &gt)?.into(), output)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
