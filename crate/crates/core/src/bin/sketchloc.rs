use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sketchloc::evaluation::{evaluate, EvalOptions, EvalReport};
use sketchloc::model::{Fusion, InferenceOptions, ModelConfig, Stage};
use sketchloc::service::{decode_sketches, http, render_overlay, Engine, ServeConfig};
use sketchloc::synthdata::archive::{decode_png, encode_png};
use sketchloc::synthdata::strokefile::StrokeRecord;
use sketchloc::synthdata::{build_dataset, read_dataset, write_dataset, DatasetSpec, Scene};
use sketchloc::training::{metrics_csv, read_checkpoint, run_stage, save_checkpoint, StageInit, TrainConfig, TrainSample, TrainingSet};

#[derive(Parser)]
#[command(name = "sketchloc", version, about = "Sketch-guided object localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Feature,
    Attention,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Feature => Fusion::Feature,
            FusionArg::Attention => Fusion::Attention,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    /// Only the categories the model was trained on.
    Common,
    /// Every category, reported as seen / unseen.
    Disjoint,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset: train/test scene archives, sketches, split.
    GenerateData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_scenes: usize,
        #[arg(long, default_value_t = 100)]
        n_sketches: usize,
        #[arg(long, default_value_t = 2)]
        unseen: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage; writes `stage{N}.ckpt` and `stage{N}_metrics.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Checkpoint to continue (same stage) or to seed stage 2 from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_margin_rank: bool,
        /// JSON file with training settings (any subset of fields).
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON file with architecture settings, for fresh stage-1 runs.
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test scenes of a dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Disjoint)]
        split: SplitArg,
        #[arg(long, default_value_t = 1)]
        n_queries: usize,
        #[arg(long, value_enum, default_value_t = FusionArg::Feature)]
        fusion: FusionArg,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Localize one image against sketches from a stroke file.
    Localize {
        #[arg(long)]
        image: PathBuf,
        /// Newline-delimited stroke records; each line is one sketch.
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FusionArg::Feature)]
        fusion: FusionArg,
        #[arg(long, default_value_t = sketchloc::service::DEFAULT_MAX_DETECTIONS)]
        max_detections: usize,
    },
    /// Run the HTTP service. Settings: JSON config file, then SKETCHLOC_*
    /// environment variables, then flags.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData {
            seed,
            n_scenes,
            n_sketches,
            unseen,
            out,
        } => {
            let spec = DatasetSpec {
                seed,
                n_scenes,
                n_sketches,
                n_unseen: unseen,
                ..DatasetSpec::default()
            };
            let data = build_dataset(&spec)?;
            write_dataset(&out, &data)?;
            log::info!(
                "wrote {} train / {} test scenes, {} sketches to {}",
                data.train.len(),
                data.test.len(),
                data.sketches.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            stage,
            resume,
            epochs,
            seed,
            no_margin_rank,
            config,
            model_config,
        } => {
            let mut cfg = match &config {
                Some(p) => read_json::<TrainConfig>(p)?,
                None => TrainConfig::default(),
            };
            cfg.stage = Stage::from_number(stage)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if no_margin_rank {
                cfg.loss.weights.margin_rank = 0.0;
            }
            let init = match (&resume, &model_config) {
                (Some(_), Some(_)) => bail!("--model-config applies to fresh runs only; the checkpoint fixes the architecture"),
                (Some(p), None) => StageInit::Resume(read_checkpoint(p)?),
                (None, Some(p)) => StageInit::Fresh(read_json::<ModelConfig>(p)?),
                (None, None) => StageInit::Fresh(ModelConfig::default()),
            };
            let sketch_size = match &init {
                StageInit::Fresh(c) => c.sketch_size,
                StageInit::Resume(c) => c.config.sketch_size,
            };
            let dataset = read_dataset(&data)?;
            let seen: Vec<String> = dataset.split.seen.iter().cloned().collect();
            let samples = dataset
                .train
                .iter()
                .map(|s| TrainSample {
                    image: s.scene.image.clone(),
                    objects: s.scene.objects.clone(),
                })
                .collect();
            let set = TrainingSet::new(samples, seen.clone(), &dataset.sketches, sketch_size)?;
            let steps_per_epoch = set.len().div_ceil(cfg.batch_size) as u64;
            let run = run_stage(init, &set, &cfg, |l| {
                if l.step % steps_per_epoch == 0 {
                    log::info!("epoch {} step {} lr {:.1e} loss {:.4}", l.epoch + 1, l.step, l.lr, l.loss.total);
                }
            })?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let ckpt_path = out.join(format!("stage{stage}.ckpt"));
            let metrics_path = out.join(format!("stage{stage}_metrics.csv"));
            save_checkpoint(&ckpt_path, &run.checkpoint(seen))?;
            fs::write(&metrics_path, metrics_csv(&run.log)).with_context(|| format!("writing {}", metrics_path.display()))?;
            println!("{}", ckpt_path.display());
            Ok(())
        }
        Command::Evaluate {
            ckpt,
            data,
            split,
            n_queries,
            fusion,
            noise,
            seed,
            report,
        } => {
            let checkpoint = read_checkpoint(&ckpt)?;
            let model = checkpoint.to_model()?;
            let dataset = read_dataset(&data)?;
            let scenes: Vec<Scene> = dataset.test.iter().map(|s| s.scene.clone()).collect();
            let opts = EvalOptions {
                n_queries,
                fusion: fusion.into(),
                noise,
                seed,
                categories: match split {
                    SplitArg::Common => checkpoint.categories.clone(),
                    SplitArg::Disjoint => Vec::new(),
                },
            };
            let result = evaluate(&model, &scenes, &dataset.split, &checkpoint.categories, &opts, &InferenceOptions::default())?;
            for w in &result.warnings {
                log::warn!("{w}");
            }
            let doc = ReportDoc {
                report: &result,
                provenance: Provenance {
                    checkpoint: ckpt.display().to_string(),
                    data: data.display().to_string(),
                    split: match split {
                        SplitArg::Common => "common",
                        SplitArg::Disjoint => "disjoint",
                    },
                    model_config: &checkpoint.config,
                    trained_categories: &checkpoint.categories,
                },
            };
            let text = serde_json::to_string_pretty(&doc)? + "\n";
            match report {
                Some(p) => fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            print_summary(&result);
            Ok(())
        }
        Command::Localize {
            image,
            sketch,
            ckpt,
            out,
            overlay,
            fusion,
            max_detections,
        } => {
            let engine = Engine::open(&ckpt, None)?;
            let bytes = fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let img = decode_png(&bytes).with_context(|| format!("decoding {}", image.display()))?;
            let records = read_stroke_records(&sketch)?;
            let sketches = decode_sketches(&records)?;
            let record = engine.localize_sketches(&img, &sketches, fusion.into(), max_detections)?;
            fs::write(&out, record.to_json()).with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = overlay {
                let png = encode_png(&render_overlay(&img, &record, max_detections)?)?;
                fs::write(&p, png).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
        Command::Serve {
            config,
            host,
            port,
            ckpt,
            gallery,
        } => {
            let mut cfg = match &config {
                Some(p) => ServeConfig::from_file(p)?,
                None => ServeConfig::default(),
            };
            cfg.apply_env()?;
            if let Some(h) = host {
                cfg.host = h;
            }
            if let Some(p) = port {
                cfg.port = p;
            }
            if ckpt.is_some() {
                cfg.ckpt = ckpt;
            }
            if gallery.is_some() {
                cfg.gallery = gallery;
            }
            serve(cfg)
        }
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    checkpoint: String,
    data: String,
    split: &'static str,
    model_config: &'a ModelConfig,
    trained_categories: &'a [String],
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    provenance: Provenance<'a>,
}

fn print_summary(r: &EvalReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    for (cat, c) in &r.per_category {
        eprintln!("{cat:>10} {:?}: AP@50 {:.4}  mAP {:.4}  ({} images)", c.tag, c.ap50, c.map, c.images);
    }
    eprintln!("seen   AP@50 {}  mAP {}", fmt(r.seen.ap50), fmt(r.seen.map));
    eprintln!("unseen AP@50 {}  mAP {}", fmt(r.unseen.ap50), fmt(r.unseen.map));
    eprintln!("all    AP@50 {}  mAP {}", fmt(r.all.ap50), fmt(r.all.map));
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// One stroke record per non-blank line; unlike dataset loading, nothing is
/// skipped, so an empty drawing is reported rather than dropped.
fn read_stroke_records(path: &Path) -> Result<Vec<StrokeRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn serve(cfg: ServeConfig) -> Result<()> {
    let Some(ckpt) = &cfg.ckpt else {
        bail!("no checkpoint: pass --ckpt, set SKETCHLOC_CKPT, or give `ckpt` in the config file");
    };
    let engine = Arc::new(Engine::open(ckpt, cfg.gallery.as_deref())?);
    let ip: IpAddr = cfg.host.parse().with_context(|| format!("invalid host `{}`", cfg.host))?;
    let addr = SocketAddr::new(ip, cfg.port);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = http::bind(addr).await?;
        log::info!(
            "serving model {} on http://{} ({} gallery scenes)",
            engine.digest(),
            listener.local_addr()?,
            engine.gallery().len()
        );
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        http::serve(listener, engine, shutdown).await?;
        Ok(())
    })
}
