use std::error::Error;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use yolite::analysis::{flops, prune_magnitude, summary};
use yolite::bench::{measure, measure_per_layer, to_json, write_csv, DEFAULT_ITERS, DEFAULT_WARMUP};
use yolite::darknet::{emit_cfg, parse_cfg_with_warnings, read_weights, write_weights, WeightsBlob};
use yolite::dataset::{gen_synthetic_dataset, read_dataset, read_image_label_dirs, write_dataset};
use yolite::detect::{detect_image, DEFAULT_CONF_THRESH, DEFAULT_NMS_THRESH};
use yolite::eval::{evaluate_network, ApMethod, DEFAULT_EVAL_CONF_THRESH, DEFAULT_MATCH_IOU};
use yolite::image::read_ppm;
use yolite::inference::fold_batch_norm;
use yolite::train::{train_toy, Hyper, DEFAULT_BURN_IN};
use yolite::{CompiledNetwork, NetworkSpec};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

/// Shallow YOLO detection on the CPU.
#[derive(Parser)]
#[command(name = "yolite", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect objects in a P6 PPM image; prints one JSON object per line.
    Detect {
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CONF_THRESH)]
        thresh: f32,
        #[arg(long, default_value_t = DEFAULT_NMS_THRESH)]
        nms: f32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer and total FLOPS as JSON.
    Flops {
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer table with shapes, filter and parameter counts.
    Summary {
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// mAP over a directory of PPM images and `class cx cy w h` label files.
    Eval {
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MATCH_IOU)]
        iou: f32,
        /// 11-point interpolated AP instead of all-point.
        #[arg(long)]
        interp11: bool,
        #[arg(long, default_value_t = DEFAULT_EVAL_CONF_THRESH)]
        thresh: f32,
        #[arg(long, default_value_t = DEFAULT_NMS_THRESH)]
        nms: f32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-threaded forward latency; prints BenchStats JSON.
    Bench {
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also report mean time per layer.
        #[arg(long)]
        per_layer: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fold batch norm into convolution weights and biases.
    FoldBn {
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out_cfg: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
    },
    /// Zero kernel weights with |w| < threshold; prints PruneReport JSON.
    Prune {
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        threshold: f32,
        #[arg(long)]
        out_weights: PathBuf,
    },
    /// Write a synthetic shapes dataset (images/*.ppm, labels/*.txt).
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 112)]
        side: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a batch-norm-free network on a gen-data directory; prints the loss curve CSV.
    TrainToy {
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_BURN_IN)]
        burn_in: usize,
        #[arg(long)]
        out_weights: PathBuf,
        /// Loss curve destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(serde::Serialize)]
struct DetectionLine {
    class_id: usize,
    score: f32,
    cx: f32,
    cy: f32,
    w: f32,
    h: f32,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_cfg(path: &Path) -> Result<NetworkSpec> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
    let (spec, warnings) = parse_cfg_with_warnings(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    for w in warnings {
        log::warn!("{}:{}: {}", path.display(), w.line, w.message);
    }
    Ok(spec)
}

fn load_weights(path: &Path, spec: &NetworkSpec) -> Result<WeightsBlob> {
    read_weights(&read_bytes(path)?, spec).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p).map_err(|e| format!("{}: {e}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit_line(out: Option<&Path>, text: &str) -> Result<()> {
    let mut w = sink(out)?;
    writeln!(w, "{text}")?;
    Ok(w.flush()?)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Detect { cfg, weights, image, thresh, nms, out } => {
            let spec = load_cfg(&cfg)?;
            let net = CompiledNetwork::<f32>::new(&spec, &load_weights(&weights, &spec)?)?;
            let img = read_ppm(&read_bytes(&image)?).map_err(|e| format!("{}: {e}", image.display()))?;
            let mut w = sink(out.as_deref())?;
            for d in detect_image(&net, &img, thresh, nms)? {
                let line = DetectionLine { class_id: d.class_id, score: d.score, cx: d.bbox.cx, cy: d.bbox.cy, w: d.bbox.w, h: d.bbox.h };
                writeln!(w, "{}", serde_json::to_string(&line)?)?;
            }
            w.flush()?;
        }
        Command::Flops { cfg, out } => {
            let report = flops(&load_cfg(&cfg)?)?;
            emit_line(out.as_deref(), &serde_json::to_string(&report)?)?;
        }
        Command::Summary { cfg, out } => {
            let mut w = sink(out.as_deref())?;
            write!(w, "{}", summary(&load_cfg(&cfg)?)?)?;
            w.flush()?;
        }
        Command::Eval { cfg, weights, images, labels, iou, interp11, thresh, nms, out } => {
            let spec = load_cfg(&cfg)?;
            let net = CompiledNetwork::<f32>::new(&spec, &load_weights(&weights, &spec)?)?;
            let samples: Vec<_> = read_image_label_dirs(&images, &labels)?.into_iter().map(|(_, s)| s).collect();
            let method = if interp11 { ApMethod::Interpolated11 } else { ApMethod::AllPoint };
            let report = evaluate_network(&net, &samples, thresh, nms, iou, method)?;
            emit_line(out.as_deref(), &serde_json::to_string(&report)?)?;
        }
        Command::Bench { cfg, weights, iters, warmup, seed, per_layer, csv } => {
            if iters == 0 {
                return Err(Usage("--iters must be at least 1".into()).into());
            }
            let spec = load_cfg(&cfg)?;
            let net = CompiledNetwork::<f32>::new(&spec, &load_weights(&weights, &spec)?)?;
            let stats = if per_layer { measure_per_layer(&net, iters, warmup, seed)? } else { measure(&net, iters, warmup, seed)? };
            if let Some(path) = csv {
                let f = fs::File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                write_csv(f, &[(&cfg.display().to_string(), &stats)])?;
            }
            emit_line(None, &to_json(&stats))?;
        }
        Command::FoldBn { cfg, weights, out_cfg, out_weights } => {
            let spec = load_cfg(&cfg)?;
            let (folded, blob) = fold_batch_norm(&spec, &load_weights(&weights, &spec)?)?;
            write_file(&out_cfg, emit_cfg(&folded)?.as_bytes())?;
            write_file(&out_weights, &write_weights(&blob, &folded)?)?;
        }
        Command::Prune { cfg, weights, threshold, out_weights } => {
            if !(threshold >= 0.0) {
                return Err(Usage("--threshold must be a non-negative number".into()).into());
            }
            let spec = load_cfg(&cfg)?;
            let (pruned, report) = prune_magnitude(&load_weights(&weights, &spec)?, threshold);
            write_file(&out_weights, &write_weights(&pruned, &spec)?)?;
            emit_line(None, &serde_json::to_string(&report)?)?;
        }
        Command::GenData { n, side, classes, seed, out } => {
            if n == 0 || side < 8 || classes == 0 {
                return Err(Usage("need --n >= 1, --side >= 8 and --classes >= 1".into()).into());
            }
            write_dataset(&out, &gen_synthetic_dataset(n, side, classes, seed))?;
        }
        Command::TrainToy { cfg, data, iters, lr, momentum, seed, burn_in, out_weights, out } => {
            let spec = load_cfg(&cfg)?;
            let samples = read_dataset(&data)?;
            let hyper = Hyper { lr, momentum, iters, seed, burn_in };
            let (blob, curve) = train_toy(&spec, &samples, &hyper)?;
            write_file(&out_weights, &write_weights(&blob, &spec)?)?;
            let mut w = sink(out.as_deref())?;
            curve.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

/// Flag combinations clap cannot check on its own.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl Error for Usage {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let diag: Vec<&str> = msg.lines().map(str::trim).take_while(|l| !l.starts_with("Usage:")).filter(|l| !l.is_empty()).collect();
            eprintln!("yolite: {}", diag.join(" ").trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("yolite: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("yolite: {}", e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
