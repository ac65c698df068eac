//! `flowtrack`: train and run the global-matching + recurrent-refinement
//! flow model on synthetic data, evaluate flow and tracking metrics, and
//! convert between flow files and visualizations.

mod config;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flowtrack_core::checkpoint::Checkpoint;
use flowtrack_core::io::{error_heatmap, flow_to_color, load_sequence, read_flo, save_image, write_flo};
use flowtrack_core::model::{FlowModel, ForwardOptions, PairMode};
use flowtrack_core::synth::{random_spec, read_manifest, write_manifest, ManifestEntry, WarpFamily};
use flowtrack_core::tracking::{evaluate_tracks, flows_to_tracks, track_sequence, write_tracks};
use flowtrack_core::train::{evaluate_flow, evaluate_tracking, train, EvalOptions, TrainSink};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use config::AppConfig;

#[derive(Parser)]
#[command(name = "flowtrack", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a reproducible synthetic dataset manifest (and optionally
    /// materialize ground-truth .flo files and frame images).
    GenData(GenDataArgs),
    /// Train a model from a config file and a dataset manifest.
    Train(TrainArgs),
    /// Evaluate flow metrics (EPE, buckets, Fl-all, 1px) on a manifest.
    EvalFlow(EvalFlowArgs),
    /// Evaluate sliding-window point tracking (delta metric) on a manifest.
    EvalTrack(EvalTrackArgs),
    /// Run inference on an image sequence and write one .flo per pair.
    Infer(InferArgs),
    /// Render a .flo file to a color map, optionally with an error map
    /// against a second .flo.
    Visualize(VisualizeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Translation,
    Affine,
    Homography,
    Mixed,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output manifest path (.jsonl).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 6)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, value_enum, default_value_t = FamilyArg::Translation)]
    family: FamilyArg,
    /// Cap on ground-truth displacement magnitude, pixels.
    #[arg(long, default_value_t = 8.0)]
    max_displacement: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    query_step: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0.0)]
    brightness_jitter: f64,
    /// Also render every sample: frames as PNG, ground truth as .flo.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file ([model] and [train] tables).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint and loss log.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint (restores optimizer state).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Refinement iterations during training.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

#[derive(Args)]
struct EvalFlowArgs {
    /// Model checkpoint to run inference with.
    #[arg(long, conflicts_with = "flows_dir")]
    checkpoint: Option<PathBuf>,
    /// Directory of precomputed s{index:04}_p{pair}.flo files to score
    /// instead of running a model.
    #[arg(long)]
    flows_dir: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Input frames per sequence (defaults to 4, the deployment setting).
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Refinement iterations (defaults to the checkpoint's eval_iters).
    #[arg(long)]
    iters: Option<usize>,
    /// Write the machine-readable report here (.json).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Render predicted flow color maps and error maps per sample.
    #[arg(long)]
    render_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalTrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sliding window size.
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write predicted tracks per sequence into this directory.
    #[arg(long)]
    tracks_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Consecutive,
    Anchored,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input frames in order (PNG or PPM), at least two.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Output directory for .flo files.
    #[arg(long)]
    out_dir: PathBuf,
    /// Use at most this many frames.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Consecutive)]
    mode: ModeArg,
    /// Also write flow color maps next to the .flo files.
    #[arg(long, default_value_t = false)]
    visualize: bool,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Input flow file.
    flo: PathBuf,
    /// Output image (PNG or PPM).
    #[arg(long)]
    out: PathBuf,
    /// Normalize saturation by this magnitude instead of the field max.
    #[arg(long)]
    max_magnitude: Option<f64>,
    /// Ground-truth .flo; also writes an error heatmap and its sidecar.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Error-map output path (defaults to `<out>.err.png`).
    #[arg(long)]
    error_out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::EvalFlow(a) => eval_flow(a),
        Command::EvalTrack(a) => eval_track(a),
        Command::Infer(a) => infer(a),
        Command::Visualize(a) => visualize(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.frames < 2 {
        bail!("--frames must be at least 2");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let entries: Vec<ManifestEntry> = (0..a.count)
        .map(|i| {
            let family = match a.family {
                FamilyArg::Translation => WarpFamily::Translation,
                FamilyArg::Affine => WarpFamily::Affine,
                FamilyArg::Homography => WarpFamily::Homography,
                FamilyArg::Mixed => match i % 3 {
                    0 => WarpFamily::Translation,
                    1 => WarpFamily::Affine,
                    _ => WarpFamily::Homography,
                },
            };
            ManifestEntry {
                seed: a.seed.wrapping_add(1 + i as u64),
                height: a.height,
                width: a.width,
                warp: random_spec(&mut rng, family, a.frames, a.max_displacement, a.height, a.width),
                query_step: a.query_step,
                noise_std: a.noise_std,
                brightness_jitter: a.brightness_jitter,
            }
        })
        .collect();
    write_manifest(&a.out, &entries)?;
    println!("wrote {} records to {}", entries.len(), a.out.display());

    if let Some(dir) = a.dump_dir {
        std::fs::create_dir_all(&dir)?;
        for (i, entry) in entries.iter().enumerate() {
            let sample = entry.render()?;
            let sdir = dir.join(format!("sample_{i:04}"));
            std::fs::create_dir_all(&sdir)?;
            for t in 0..sample.sequence.len() {
                let img = flowtrack_core::io::to_rgb8(&sample.sequence.frame(t));
                save_image(&sdir.join(format!("frame_{t:02}.png")), &img)?;
            }
            for (p, flow) in sample.gt_flows.iter().enumerate() {
                write_flo(flow, &sdir.join(format!("gt_flow_{p:02}_{:02}.flo", p + 1)))?;
            }
            write_tracks(&sdir.join("gt_tracks.csv"), &sample.gt_tracks)?;
        }
        println!("materialized samples under {}", dir.display());
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.iters {
        cfg.model.train_iters = v;
    }

    let manifest = read_manifest(&a.data)?;
    std::fs::create_dir_all(&a.out)?;

    let (mut model, resume) = match &a.resume {
        Some(path) => {
            let ck: Checkpoint<f32> = Checkpoint::load(path)?;
            let model = FlowModel::from_parameters(ck.config.clone(), ck.params.clone())?;
            (model, Some(ck))
        }
        None => (FlowModel::<f32>::new(cfg.model.clone(), cfg.train.seed)?, None),
    };
    eprintln!(
        "training {} parameters for {} steps on {} records",
        model.num_parameters(),
        cfg.train.steps,
        manifest.len()
    );
    let sink = TrainSink {
        out_dir: Some(a.out.clone()),
        quiet: a.quiet,
    };
    let (log, _) = train(&mut model, &cfg.train, &manifest, resume.as_ref(), &sink)?;
    let last = log.entries.last().context("no steps ran")?;
    eprintln!(
        "done at step {}: loss {:.5}; checkpoint at {}",
        last.step,
        last.loss,
        a.out.join("checkpoint.ckpt").display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<FlowModel<f32>> {
    let ck: Checkpoint<f32> = Checkpoint::load(path)?;
    Ok(FlowModel::from_parameters(ck.config, ck.params)?)
}

fn eval_flow(a: EvalFlowArgs) -> Result<()> {
    let manifest = read_manifest(&a.data)?;
    let (report, model) = match (&a.checkpoint, &a.flows_dir) {
        (Some(ckpt), None) => {
            let model = load_model(ckpt)?;
            let report = evaluate_flow(
                &model,
                &manifest,
                &EvalOptions {
                    frames: Some(a.frames),
                    iters: a.iters,
                },
            )?;
            (report, Some(model))
        }
        (None, Some(dir)) => {
            let (report, missing) =
                flowtrack_core::train::evaluate_flow_dir(dir, &manifest, Some(a.frames))?;
            for m in &missing {
                eprintln!("missing flow file: {m}");
            }
            (report, None)
        }
        _ => bail!("provide exactly one of --checkpoint or --flows-dir"),
    };
    print!("{}", report.human_readable());
    if let Some(path) = &a.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
        println!("report written to {}", path.display());
    }
    if let Some(dir) = &a.render_dir {
        let Some(model) = &model else {
            bail!("--render-dir needs --checkpoint");
        };
        std::fs::create_dir_all(dir)?;
        for (i, entry) in manifest.iter().enumerate() {
            let entry = entry.truncated(a.frames.min(entry.warp.frames()));
            if model.config.check_resolution(entry.height, entry.width).is_err() {
                continue;
            }
            let sample = entry.render()?;
            let out = model.infer(
                &sample.sequence,
                &ForwardOptions::new(a.iters.unwrap_or(model.config.eval_iters)),
            )?;
            for (p, flow) in out.flows.iter().enumerate() {
                let color = flow_to_color(flow, None);
                save_image(&dir.join(format!("s{i:03}_p{p}_flow.png")), &color)?;
                let (err_img, _, meta) = error_heatmap(flow, &sample.gt_flows[p], None)?;
                save_image(&dir.join(format!("s{i:03}_p{p}_err.png")), &err_img)?;
                std::fs::write(
                    dir.join(format!("s{i:03}_p{p}_err.json")),
                    serde_json::to_string_pretty(&meta)?,
                )?;
            }
        }
        println!("renders written to {}", dir.display());
    }
    Ok(())
}

fn eval_track(a: EvalTrackArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let manifest = read_manifest(&a.data)?;
    let (agg, per_seq) = evaluate_tracking(&model, &manifest, a.window, a.iters)?;
    match agg.delta_avg {
        Some(d) => println!("delta_avg: {d:.3} over {} valid pairs", agg.valid_pairs),
        None => println!("delta_avg: undefined (no valid pairs)"),
    }
    for (t, pct) in &agg.per_threshold {
        println!("  delta<{t}: {pct:.3}");
    }
    if let Some(dir) = &a.tracks_dir {
        std::fs::create_dir_all(dir)?;
        for (i, entry) in manifest.iter().enumerate() {
            let sample = entry.render()?;
            let flows = track_sequence(
                &model,
                &sample.sequence,
                a.window,
                a.iters.unwrap_or(model.config.eval_iters),
                false,
            )?;
            let pred = flows_to_tracks(&flows, sample.gt_tracks.queries())?;
            write_tracks(&dir.join(format!("s{i:03}_tracks.csv")), &pred)?;
            let r = evaluate_tracks(&pred, &sample.gt_tracks)?;
            if let Some(d) = r.delta_avg {
                println!("  sequence {i}: delta_avg {d:.3}");
            }
        }
    }
    if let Some(path) = &a.report {
        #[derive(serde::Serialize)]
        struct TrackReport<'a> {
            aggregate: &'a flowtrack_core::tracking::DeltaReport,
            per_sequence: &'a [flowtrack_core::tracking::DeltaReport],
        }
        std::fs::write(
            path,
            serde_json::to_string_pretty(&TrackReport {
                aggregate: &agg,
                per_sequence: &per_seq,
            })?,
        )?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let mut images = a.images.clone();
    if let Some(t) = a.frames {
        if t < 2 {
            bail!("--frames must be at least 2");
        }
        images.truncate(t);
    }
    let seq = load_sequence(&images)?;
    model
        .config
        .check_resolution(seq.height(), seq.width())
        .context("input resolution incompatible with the model; crop or pad the frames first")?;
    let mode = match a.mode {
        ModeArg::Consecutive => PairMode::Consecutive,
        ModeArg::Anchored => PairMode::Anchored,
    };
    let opts = ForwardOptions::new(a.iters.unwrap_or(model.config.eval_iters)).mode(mode);
    let out = model.infer(&seq, &opts)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for (flow, &(src, tgt)) in out.flows.iter().zip(out.pairs.iter()) {
        let path = a.out_dir.join(format!("flow_{src:02}_{tgt:02}.flo"));
        write_flo(flow, &path)?;
        println!("{}", path.display());
        if a.visualize {
            let img = flow_to_color(flow, None);
            save_image(&a.out_dir.join(format!("flow_{src:02}_{tgt:02}.png")), &img)?;
        }
    }
    Ok(())
}

fn visualize(a: VisualizeArgs) -> Result<()> {
    let flow = read_flo(&a.flo)?;
    let img = flow_to_color(&flow, a.max_magnitude);
    save_image(&a.out, &img)?;
    println!("color map: {}", a.out.display());
    if let Some(gt_path) = &a.gt {
        let gt = read_flo(gt_path)?;
        let (err_img, _, meta) = error_heatmap(&flow, &gt, None)?;
        let err_path = a
            .error_out
            .unwrap_or_else(|| a.out.with_extension("err.png"));
        save_image(&err_path, &err_img)?;
        let sidecar = err_path.with_extension("json");
        std::fs::write(&sidecar, serde_json::to_string_pretty(&meta)?)?;
        println!("error map: {} (legend: {})", err_path.display(), sidecar.display());
    }
    Ok(())
}
