//! Command-line entry point: data generation, training, evaluation, prediction and plots.

mod config;
mod manifest;
mod plot;
mod strips;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vtssi::checkpoint::Checkpoint;
use vtssi::data::{child_seed, read_dataset, BounceMode, DataConfig, Dataset, Motion, SpriteSource};
use vtssi::eval::{compare, evaluate, to_pixels, EvalOptions, EvalReport};
use vtssi::model::Variant;
use vtssi::rect::RectMode;
use vtssi::toy;
use vtssi::train::{read_metrics, train};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "vtssi", version, about = "Train and evaluate generative multi-object trackers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MotionArg {
    Linear,
    Elliptic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BounceArg {
    Appearance,
    BboxCorner,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SpritesArg {
    Procedural,
    ImageBank,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// 32x32 frames, 12 steps, compact networks, compressed schedule.
    Toy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        t: Option<usize>,
        /// Square frame size in pixels.
        #[arg(long)]
        hw: Option<usize>,
        #[arg(long, value_enum)]
        motion: Option<MotionArg>,
        #[arg(long)]
        overlap_first_frame: Option<bool>,
        #[arg(long, value_enum)]
        bounce: Option<BounceArg>,
        #[arg(long, value_enum)]
        sprites: Option<SpritesArg>,
        /// IDX3 image file used with `--sprites image-bank`.
        #[arg(long)]
        image_bank: Option<PathBuf>,
        #[arg(long)]
        min_objects: Option<usize>,
        #[arg(long)]
        max_objects: Option<usize>,
        #[arg(long)]
        margin_px: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Train a model variant.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON config: model fields plus an optional `train` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Continue from `OUT/last.ckpt`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        observe: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        one_hot_rect: bool,
        /// Score tracking-stage positions instead of fused ones.
        #[arg(long)]
        find_direct: bool,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Infer from the first frames, generate the rest, and write positions and frame strips.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        indices: Vec<usize>,
        #[arg(long)]
        observe: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
        /// Sample latents with this seed instead of using modes.
        #[arg(long)]
        sample_seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
    /// Render error curves from reports (and an ELBO curve from a metrics log).
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        report: Vec<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

type Fallible<T> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Fallible<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(err)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(err)?;
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_data(dir: &Path) -> Fallible<Dataset> {
    read_dataset(dir).map_err(err)
}

fn load_checkpoint(path: &Path) -> Fallible<Checkpoint> {
    Checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: &Path,
    n: usize,
    t: Option<usize>,
    hw: Option<usize>,
    motion: Option<MotionArg>,
    overlap: Option<bool>,
    bounce: Option<BounceArg>,
    sprites: Option<SpritesArg>,
    image_bank: Option<PathBuf>,
    min_objects: Option<usize>,
    max_objects: Option<usize>,
    margin_px: Option<usize>,
    seed: u64,
    preset: Option<Preset>,
) -> Fallible<()> {
    let mut cfg = match preset {
        Some(Preset::Toy) => toy::data_config(seed),
        None => DataConfig {
            seed,
            ..DataConfig::default()
        },
    };
    if let Some(t) = t {
        cfg.seq_len = t;
    }
    if let Some(hw) = hw {
        cfg.frame_hw = [hw, hw];
    }
    if let Some(m) = motion {
        cfg.motion = match m {
            MotionArg::Linear => Motion::Linear,
            MotionArg::Elliptic => Motion::Elliptic,
        };
    }
    if let Some(o) = overlap {
        cfg.overlap_first_frame = o;
    }
    if let Some(b) = bounce {
        cfg.bounce_mode = match b {
            BounceArg::Appearance => BounceMode::Appearance,
            BounceArg::BboxCorner => BounceMode::BboxCorner,
        };
        if matches!(b, BounceArg::BboxCorner) && margin_px.is_none() {
            cfg.margin_px = 3;
        }
    }
    if let Some(m) = margin_px {
        cfg.margin_px = m;
    }
    if let Some(v) = min_objects {
        cfg.min_objects = v;
    }
    if let Some(v) = max_objects {
        cfg.max_objects = v;
    }
    match (sprites, image_bank) {
        (Some(SpritesArg::ImageBank), Some(p)) | (None, Some(p)) => cfg.sprite_source = SpriteSource::ImageBank(p),
        (Some(SpritesArg::ImageBank), None) => return Err("--sprites image-bank needs --image-bank FILE".into()),
        (Some(SpritesArg::Procedural), Some(_)) => return Err("--image-bank conflicts with --sprites procedural".into()),
        _ => {}
    }
    let cfg_json = serde_json::to_value(&cfg).map_err(err)?;
    RunManifest::new("gen-data", &cfg_json, vec![("data".into(), seed)], vec![out.to_path_buf()])
        .write(out)
        .map_err(err)?;
    let m = vtssi::data::write_dataset(&cfg, n, out).map_err(err)?;
    println!(
        "wrote {} sequences of {} frames ({}x{}) to {}; counts {:?}",
        m.sequences,
        m.seq_len,
        m.height,
        m.width,
        out.display(),
        m.count_histogram
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    data_dir: &Path,
    out: &Path,
    config_path: Option<&Path>,
    variant: Option<Variant>,
    steps: Option<u64>,
    seed: Option<u64>,
    batch_size: Option<usize>,
    preset: Option<Preset>,
    resume: bool,
    quiet: bool,
) -> Fallible<()> {
    let data = load_data(data_dir)?;
    let mut run = config::load(config_path, std::env::vars())?;
    if let Some(Preset::Toy) = preset {
        let v = variant.unwrap_or(run.model.variant);
        run.model = toy::model_config(v);
        run.train = toy::train_config(v, run.train.steps, run.train.seed);
    }
    if let Some(v) = variant {
        run.model.variant = v;
    }
    if let Some(s) = steps {
        run.train.steps = s;
    }
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(b) = batch_size {
        run.train.batch_size = b;
    }
    if config_path.is_none() && preset.is_none() {
        run.model.frame_hw = data.frame_hw();
        run.model.t = run.model.t.min(data.seq_len());
        run.model.k = run.model.k.min(run.model.t);
        run.model.m = run.model.m.min(run.model.t);
    }
    run.model.validate().map_err(err)?;
    run.train.validate().map_err(err)?;
    let s = run.train.seed;
    let seeds = vec![
        ("init".into(), child_seed(s, 1)),
        ("training_noise".into(), child_seed(s, 2)),
        ("batch_order".into(), child_seed(s, 3)),
    ];
    let cfg_json = serde_json::to_value(&run).map_err(err)?;
    std::fs::create_dir_all(out).map_err(err)?;
    write_json(&out.join("config.json"), &run)?;
    RunManifest::new(
        "train",
        &cfg_json,
        seeds,
        vec![out.join("metrics.jsonl"), out.join("checkpoints"), out.join("last.ckpt")],
    )
    .write(out)
    .map_err(err)?;
    let resume_ck = if resume {
        Some(load_checkpoint(&out.join("last.ckpt"))?)
    } else {
        None
    };
    let files = train(&data, &run.model, &run.train, out, resume_ck.as_ref(), |r| {
        if !quiet {
            println!(
                "step {:>7}  len {:>2}  elbo {:>10.2}  recon {:>10.2}  kl cnt {:.3} size {:.3} desc {:.3} pos {:.3} mot {:.3}  lr {:.2e}",
                r.step, r.curriculum_len, r.elbo, r.recon, r.kl_cnt, r.kl_size, r.kl_desc, r.kl_position, r.kl_motion, r.lr
            );
        }
    })
    .map_err(err)?;
    println!(
        "trained {} to step {}; {} checkpoints, last at {}",
        run.model.variant,
        run.train.steps,
        files.checkpoints.len(),
        files.last.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    checkpoint: &Path,
    data_dir: &Path,
    observe: usize,
    horizon: usize,
    report: &Path,
    one_hot: bool,
    find_direct: bool,
    limit: Option<usize>,
    batch_size: usize,
) -> Fallible<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_data(data_dir)?;
    let model = ck.restore().map_err(err)?;
    let opts = EvalOptions {
        observe,
        horizon,
        batch_size,
        rect_mode: if one_hot { RectMode::OneHot } else { RectMode::Soft },
        find_direct,
        limit,
    };
    let r = evaluate(&model, &data, ck.global_step, &opts).map_err(err)?;
    write_json(report, &r)?;
    println!(
        "{}: count accuracy {:.4}, median inference error {}, median prediction error (last step) {}; {} of {} sequences scored",
        r.variant,
        r.count_accuracy,
        fmt_px(r.median_inference_error),
        fmt_px(r.median_prediction_error.last().copied().flatten()),
        r.matched_sequences,
        r.sequences
    );
    Ok(())
}

fn fmt_px(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.3} px"))
}

#[derive(Serialize)]
struct PredictedSequence {
    index: usize,
    observed: usize,
    horizon: usize,
    counts: Vec<usize>,
    true_count: usize,
    /// Normalized `(x, y)` per slot and step.
    tracks: Vec<Vec<[f64; 2]>>,
    tracks_px: Vec<Vec<[f64; 2]>>,
    /// Ground-truth pixel centers `[t][object]` where the dataset has them.
    truth_px: Vec<Vec<[f64; 2]>>,
}

#[allow(clippy::too_many_arguments)]
fn run_predict(
    checkpoint: &Path,
    data_dir: &Path,
    indices: &[usize],
    observe: usize,
    horizon: usize,
    out: &Path,
    sample_seed: Option<u64>,
    scale: u32,
) -> Fallible<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_data(data_dir)?;
    let model = ck.restore().map_err(err)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(format!("index {bad} out of range ({} sequences)", data.len()));
    }
    let cfg_json = serde_json::to_value(model.config()).map_err(err)?;
    let seeds = sample_seed.map(|s| vec![("sampling".to_string(), s)]).unwrap_or_default();
    RunManifest::new("predict", &cfg_json, seeds, vec![out.join("positions.json")])
        .write(out)
        .map_err(err)?;
    let frames = data.batch(indices, observe, model.dtype()).map_err(err)?;
    let preds = model
        .predict(&frames, horizon, RectMode::Soft, sample_seed)
        .map_err(err)?;
    let hw = model.config().frame_hw;
    let mut records = Vec::new();
    for (&i, p) in indices.iter().zip(&preds) {
        let (truth, ann) = data.sequence(i);
        let tracks_px: Vec<Vec<[f64; 2]>> = p
            .tracks
            .iter()
            .map(|tr| tr.iter().map(|q| to_pixels(*q, hw)).collect())
            .collect();
        let shown = p.count().min(tracks_px.len());
        let overlay = if model.config().variant == Variant::Air {
            &tracks_px[..]
        } else {
            &tracks_px[..shown]
        };
        strips::save(&strips::generated(&p.frames, scale), &out.join(format!("seq_{i:05}_generated.png")))?;
        strips::save(
            &strips::superimposed(&truth, &p.frames, overlay, observe, scale),
            &out.join(format!("seq_{i:05}_overlay.png")),
        )?;
        records.push(PredictedSequence {
            index: i,
            observed: observe,
            horizon,
            counts: p.counts.clone(),
            true_count: ann.count,
            tracks: p.tracks.clone(),
            tracks_px,
            truth_px: ann.centers.iter().take(horizon).cloned().collect(),
        });
    }
    write_json(&out.join("positions.json"), &records)?;
    println!("wrote {} predictions to {}", records.len(), out.display());
    Ok(())
}

fn run_plot(reports: &[PathBuf], metrics: Option<&Path>, out: &Path) -> Fallible<()> {
    std::fs::create_dir_all(out).map_err(err)?;
    let reports: Vec<EvalReport> = reports
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
        })
        .collect::<Fallible<_>>()?;
    let curves = out.join("error_curves.svg");
    plot::error_curves(&reports, &curves)?;
    write_json(&out.join("comparison.json"), &compare(&reports))?;
    if let Some(m) = metrics {
        let records = read_metrics(m).map_err(err)?;
        plot::elbo_curve(&records, &out.join("elbo.svg"))?;
    }
    println!("wrote plots to {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Fallible<()> {
    match cli.command {
        Command::GenData {
            out,
            n,
            t,
            hw,
            motion,
            overlap_first_frame,
            bounce,
            sprites,
            image_bank,
            min_objects,
            max_objects,
            margin_px,
            seed,
            preset,
        } => gen_data(
            &out,
            n,
            t,
            hw,
            motion,
            overlap_first_frame,
            bounce,
            sprites,
            image_bank,
            min_objects,
            max_objects,
            margin_px,
            seed,
            preset,
        ),
        Command::Train {
            data,
            out,
            config,
            variant,
            steps,
            seed,
            batch_size,
            preset,
            resume,
            quiet,
        } => run_train(&data, &out, config.as_deref(), variant, steps, seed, batch_size, preset, resume, quiet),
        Command::Eval {
            checkpoint,
            data,
            observe,
            horizon,
            report,
            one_hot_rect,
            find_direct,
            limit,
            batch_size,
        } => run_eval(&checkpoint, &data, observe, horizon, &report, one_hot_rect, find_direct, limit, batch_size),
        Command::Predict {
            checkpoint,
            data,
            indices,
            observe,
            horizon,
            out,
            sample_seed,
            scale,
        } => run_predict(&checkpoint, &data, &indices, observe, horizon, &out, sample_seed, scale),
        Command::Plot { report, metrics, out } => run_plot(&report, metrics.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
