//! Training loop and evaluation: AdamW with decoupled weight decay,
//! cosine-annealed learning rate with linear warmup, global gradient-norm
//! clipping, a two-stage frame-count curriculum (2-frame warmup, then
//! uniformly sampled T), and the flow/track evaluation drivers.
//!
//! Every stochastic choice at step `s` comes from a fresh stream seeded by
//! `(seed, s)`, so resumed runs replay the exact data order.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{flow_loss_var, LossConfig};
use crate::metrics::MetricAccumulator;
use crate::model::{FlowModel, ForwardOptions};
use crate::params::Parameters;
use crate::real::Real;
use crate::synth::ManifestEntry;
use crate::tracking::{evaluate_tracks, flows_to_tracks, track_sequence, DeltaReport};
use crate::autodiff::Tape;
use ndarray::ArrayD;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;

/// Training hyperparameters. Every field mirrors a config-file key and a
/// CLI flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold applied before every update.
    pub grad_clip: f64,
    /// Fraction of steps spent linearly warming the learning rate up.
    pub warmup_frac: f64,
    /// Frame-count sampler bounds (inclusive).
    pub min_frames: usize,
    pub max_frames: usize,
    /// First stage of the curriculum: this fraction of steps trains on
    /// 2-frame sequences before variable-length sampling begins.
    pub two_frame_warmup_frac: f64,
    /// Learning-rate ratio for the transformer blocks relative to the rest
    /// (1.0 trains everything jointly).
    pub transformer_lr_ratio: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub log_every: u64,
    /// Save `checkpoint.ckpt` into the output directory every N steps.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            grad_clip: 1.0,
            warmup_frac: 0.05,
            min_frames: 2,
            max_frames: 6,
            two_frame_warmup_frac: 0.25,
            transformer_lr_ratio: 1.0,
            seed: 0,
            loss: LossConfig::default(),
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        if self.min_frames < 2 || self.max_frames < self.min_frames {
            return Err(Error::InvalidConfig(format!(
                "need max_frames >= min_frames >= 2, got {}..{}",
                self.min_frames, self.max_frames
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        self.loss.validate()
    }
}

/// Cosine-annealed learning rate with a linear warmup prefix.
pub fn lr_at(step: u64, total: u64, base: f64, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64 * warmup_frac).round() as u64).max(1);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale all gradients so their global L2 norm is at most `threshold`.
/// Returns the pre-clip norm.
pub fn clip_gradients<T: Real>(grads: &mut HashMap<String, ArrayD<T>>, threshold: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.iter() {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > threshold {
        let scale = T::of_f64(threshold / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// AdamW with decoupled weight decay, beta = (0.9, 0.999), eps = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        let mut m = Parameters::new();
        let mut v = Parameters::new();
        for (name, value) in params.iter() {
            m.insert(name, ArrayD::zeros(value.raw_dim()));
            v.insert(name, ArrayD::zeros(value.raw_dim()));
        }
        AdamW {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn from_state(m: Parameters<T>, v: Parameters<T>, step: u64) -> Self {
        AdamW {
            m,
            v,
            step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. `lr_scale` lets parameter groups use different rates;
    /// missing gradients (parameters untouched this batch) are skipped.
    pub fn update(
        &mut self,
        params: &mut Parameters<T>,
        grads: &HashMap<String, ArrayD<T>>,
        lr: f64,
        weight_decay: f64,
        lr_scale: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of_f64(self.beta1), T::of_f64(self.beta2));
        let (ob1, ob2) = (T::of_f64(1.0 - self.beta1), T::of_f64(1.0 - self.beta2));
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let lr_p = lr * lr_scale(&name);
            let m = self.m.get_mut(&name);
            m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + ob1 * gv);
            let m = m.clone();
            let v = self.v.get_mut(&name);
            v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + ob2 * gv * gv);
            let v = v.clone();
            let p = params.get_mut(&name);
            let lr_t = T::of_f64(lr_p);
            let wd = T::of_f64(lr_p * weight_decay);
            let bc1_t = T::of_f64(bc1);
            let bc2_sqrt = T::of_f64(bc2.sqrt());
            let eps = T::of_f64(self.eps);
            ndarray::Zip::from(p).and(&m).and(&v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1_t;
                let denom = vv.sqrt() / bc2_sqrt + eps;
                *pv = *pv - lr_t * mhat / denom - wd * *pv;
            });
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    pub final_step: u64,
}

/// Where training artifacts go.
#[derive(Debug, Clone)]
pub struct TrainSink {
    pub out_dir: Option<PathBuf>,
    pub quiet: bool,
}

impl Default for TrainSink {
    fn default() -> Self {
        TrainSink {
            out_dir: None,
            quiet: true,
        }
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d))
}

/// Train in place, optionally resuming from a checkpoint's optimizer state.
/// Deterministic for a fixed seed; resuming from step s reproduces the
/// uninterrupted run bit for bit. Returns the log and the final
/// checkpoint (parameters, optimizer moments, step counter, seed).
pub fn train<T: Real>(
    model: &mut FlowModel<T>,
    cfg: &TrainConfig,
    manifest: &[ManifestEntry],
    resume: Option<&Checkpoint<T>>,
    sink: &TrainSink,
) -> Result<(TrainLog, Checkpoint<T>)> {
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("empty training manifest".into()));
    }
    let mut opt = match resume {
        Some(ck) => {
            let (Some(m), Some(v)) = (ck.opt_m.clone(), ck.opt_v.clone()) else {
                return Err(Error::CheckpointMismatch(
                    "resume checkpoint has no optimizer state".into(),
                ));
            };
            AdamW::from_state(m, v, ck.step)
        }
        None => AdamW::new(&model.params),
    };
    let start_step = opt.step;
    let two_frame_until = (cfg.steps as f64 * cfg.two_frame_warmup_frac).round() as u64;
    let mut entries = Vec::new();

    for step in start_step..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let frames = if step < two_frame_until {
            2
        } else {
            cfg.min_frames + (rng.random::<u64>() as usize) % (cfg.max_frames - cfg.min_frames + 1)
        };
        let lr = lr_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_frac);

        let mut grads: HashMap<String, ArrayD<T>> = HashMap::new();
        let mut loss_sum = 0.0f64;
        for _ in 0..cfg.batch_size {
            let entry = &manifest[(rng.random::<u64>() as usize) % manifest.len()];
            let t = frames.min(entry.warp.frames());
            let sample = entry.truncated(t).render()?;
            let tape: Tape<T> = Tape::new();
            let (fwd, binder) = model.forward_traced(
                &tape,
                &sample.sequence,
                &ForwardOptions::new(model.config.train_iters),
            )?;
            let loss = flow_loss_var(
                fwd.init_s1,
                &fwd.iterates_s1,
                &sample.gt_flows,
                Some(&sample.gt_valid),
                &cfg.loss,
            )?;
            loss_sum += loss.total.scalar_value().as_f64();
            let g = tape.backward(loss.total);
            let scale = T::of_f64(1.0 / cfg.batch_size as f64);
            for (name, grad) in binder.collect_grads(&g) {
                let grad = grad.mapv(|v| v * scale);
                match grads.get_mut(&name) {
                    Some(acc) => *acc += &grad,
                    None => {
                        grads.insert(name, grad);
                    }
                }
            }
        }
        let loss = loss_sum / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grad_norm = clip_gradients(&mut grads, cfg.grad_clip);
        let ratio = cfg.transformer_lr_ratio;
        opt.update(&mut model.params, &grads, lr, cfg.weight_decay, |name| {
            if name.starts_with("backbone.attn") {
                ratio
            } else {
                1.0
            }
        });

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            if !sink.quiet {
                eprintln!(
                    "step {step:>6}  loss {loss:>10.5}  lr {lr:.2e}  |g| {grad_norm:>8.3}  T={frames}"
                );
            }
        }
        entries.push(TrainLogEntry {
            step,
            loss,
            lr,
            grad_norm,
            frames,
        });

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &sink.out_dir {
                save_checkpoint(model, cfg, &opt, dir.join("checkpoint.ckpt"))?;
            }
        }
    }

    let checkpoint = make_checkpoint(model, cfg, &opt);
    if let Some(dir) = &sink.out_dir {
        let path = dir.join("checkpoint.ckpt");
        checkpoint.save(&path)?;
        let log_path = dir.join("loss_log.jsonl");
        let mut text = String::new();
        for e in &entries {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        std::fs::write(&log_path, text).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    }

    Ok((
        TrainLog {
            final_step: cfg.steps,
            entries,
        },
        checkpoint,
    ))
}

/// Package the current model and optimizer into a checkpoint.
pub fn make_checkpoint<T: Real>(
    model: &FlowModel<T>,
    cfg: &TrainConfig,
    opt: &AdamW<T>,
) -> Checkpoint<T> {
    Checkpoint {
        config: model.config.clone(),
        step: opt.step,
        seed: cfg.seed,
        params: model.params.clone(),
        opt_m: Some(opt.m.clone()),
        opt_v: Some(opt.v.clone()),
    }
}

fn save_checkpoint<T: Real>(
    model: &FlowModel<T>,
    cfg: &TrainConfig,
    opt: &AdamW<T>,
    path: PathBuf,
) -> Result<()> {
    make_checkpoint(model, cfg, opt).save(&path)
}

/// Evaluation controls; `frames` truncates each sequence, matching the
/// deployment default of 4-frame inference when set.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub frames: Option<usize>,
    pub iters: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SequenceEval {
    pub index: usize,
    pub epe: Option<f64>,
    pub fl_all: Option<f64>,
    pub one_px: Option<f64>,
    /// Mean EPE after each refinement iterate.
    pub iterate_epes: Vec<Option<f64>>,
}

/// Flow evaluation over a manifest: aggregate metrics, per-sequence
/// breakdown, and bucket pixel counts.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub epe: Option<f64>,
    pub epe_by_bucket: [Option<f64>; 3],
    pub bucket_pixels: [usize; 3],
    pub fl_all: Option<f64>,
    pub one_px: Option<f64>,
    pub samples: usize,
    pub skipped: usize,
    pub per_sequence: Vec<SequenceEval>,
}

impl EvalReport {
    pub fn human_readable(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        s.push_str(&format!("samples evaluated: {} (skipped {})\n", self.samples, self.skipped));
        s.push_str(&format!("EPE:    {}\n", fmt(self.epe)));
        s.push_str(&format!(
            "  s0-10:  {} ({} px)\n  s10-40: {} ({} px)\n  s40+:   {} ({} px)\n",
            fmt(self.epe_by_bucket[0]),
            self.bucket_pixels[0],
            fmt(self.epe_by_bucket[1]),
            self.bucket_pixels[1],
            fmt(self.epe_by_bucket[2]),
            self.bucket_pixels[2],
        ));
        s.push_str(&format!("Fl-all: {} %\n", fmt(self.fl_all)));
        s.push_str(&format!("1px:    {} %\n", fmt(self.one_px)));
        s
    }
}

/// Run flow inference over every manifest entry and score it against the
/// analytic ground truth. Entries whose resolution the model cannot take
/// are listed as skipped rather than failing the run.
pub fn evaluate_flow<T: Real>(
    model: &FlowModel<T>,
    manifest: &[ManifestEntry],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let iters = opts.iters.unwrap_or(model.config.eval_iters);
    let mut acc = MetricAccumulator::default();
    let mut per_sequence = Vec::new();
    let mut skipped = 0usize;
    for (index, entry) in manifest.iter().enumerate() {
        let entry = match opts.frames {
            Some(t) => entry.truncated(t.min(entry.warp.frames())),
            None => entry.clone(),
        };
        if model
            .config
            .check_resolution(entry.height, entry.width)
            .is_err()
        {
            skipped += 1;
            continue;
        }
        let sample = entry.render()?;
        let out = model.infer(&sample.sequence, &ForwardOptions::new(iters))?;
        let mut seq_acc = MetricAccumulator::default();
        for (p, flow) in out.flows.iter().enumerate() {
            acc.add(flow, &sample.gt_flows[p], Some(&sample.gt_valid[p]))?;
            seq_acc.add(flow, &sample.gt_flows[p], Some(&sample.gt_valid[p]))?;
        }
        let mut iterate_epes = Vec::with_capacity(out.iterates.len());
        for it in &out.iterates {
            let mut it_acc = MetricAccumulator::default();
            for (p, flow) in it.iter().enumerate() {
                it_acc.add(flow, &sample.gt_flows[p], Some(&sample.gt_valid[p]))?;
            }
            iterate_epes.push(it_acc.epe());
        }
        per_sequence.push(SequenceEval {
            index,
            epe: seq_acc.epe(),
            fl_all: seq_acc.fl_all(),
            one_px: seq_acc.one_px(),
            iterate_epes,
        });
    }
    Ok(EvalReport {
        epe: acc.epe(),
        epe_by_bucket: acc.bucket_epe(),
        bucket_pixels: acc.bucket_pixels,
        fl_all: acc.fl_all(),
        one_px: acc.one_px(),
        samples: per_sequence.len(),
        skipped,
        per_sequence,
    })
}

/// File name of a precomputed flow for manifest entry `index`, pair `p`.
pub fn flow_file_name(index: usize, pair: usize) -> String {
    format!("s{index:04}_p{pair}.flo")
}

/// Score a directory of precomputed stride-1 `.flo` flows against a
/// manifest's ground truth. Missing files are listed and excluded.
pub fn evaluate_flow_dir(
    dir: &std::path::Path,
    manifest: &[ManifestEntry],
    frames: Option<usize>,
) -> Result<(EvalReport, Vec<String>)> {
    let mut acc = MetricAccumulator::default();
    let mut per_sequence = Vec::new();
    let mut missing = Vec::new();
    for (index, entry) in manifest.iter().enumerate() {
        let entry = match frames {
            Some(t) => entry.truncated(t.min(entry.warp.frames())),
            None => entry.clone(),
        };
        let sample = entry.render()?;
        let mut seq_acc = MetricAccumulator::default();
        let mut have_all = true;
        for p in 0..sample.gt_flows.len() {
            let path = dir.join(flow_file_name(index, p));
            if !path.exists() {
                missing.push(path.display().to_string());
                have_all = false;
                continue;
            }
            let flow = crate::io::read_flo(&path)?;
            acc.add(&flow, &sample.gt_flows[p], Some(&sample.gt_valid[p]))?;
            seq_acc.add(&flow, &sample.gt_flows[p], Some(&sample.gt_valid[p]))?;
        }
        if have_all {
            per_sequence.push(SequenceEval {
                index,
                epe: seq_acc.epe(),
                fl_all: seq_acc.fl_all(),
                one_px: seq_acc.one_px(),
                iterate_epes: Vec::new(),
            });
        }
    }
    let skipped = manifest.len() - per_sequence.len();
    Ok((
        EvalReport {
            epe: acc.epe(),
            epe_by_bucket: acc.bucket_epe(),
            bucket_pixels: acc.bucket_pixels,
            fl_all: acc.fl_all(),
            one_px: acc.one_px(),
            samples: per_sequence.len(),
            skipped,
            per_sequence,
        },
        missing,
    ))
}

/// Track evaluation: sliding-window anchored inference on each sequence,
/// scored with the delta metric against the analytic query-grid tracks.
pub fn evaluate_tracking<T: Real>(
    model: &FlowModel<T>,
    manifest: &[ManifestEntry],
    window_size: usize,
    iters: Option<usize>,
) -> Result<(DeltaReport, Vec<DeltaReport>)> {
    let iters = iters.unwrap_or(model.config.eval_iters);
    let mut per_seq = Vec::new();
    let mut agg_within = [0usize; 5];
    let mut agg_pairs = 0usize;
    for entry in manifest {
        let sample = entry.render()?;
        let flows = track_sequence(model, &sample.sequence, window_size, iters, false)?;
        let pred = flows_to_tracks(&flows, sample.gt_tracks.queries())?;
        let report = evaluate_tracks(&pred, &sample.gt_tracks)?;
        agg_pairs += report.valid_pairs;
        for (i, &(_, pct)) in report.per_threshold.iter().enumerate() {
            if report.valid_pairs > 0 {
                agg_within[i] += (pct / 100.0 * report.valid_pairs as f64).round() as usize;
            }
        }
        per_seq.push(report);
    }
    let per_threshold: Vec<(f64, f64)> = crate::tracking::DELTA_THRESHOLDS
        .iter()
        .zip(agg_within.iter())
        .map(|(&t, &n)| {
            (
                t,
                if agg_pairs == 0 {
                    f64::NAN
                } else {
                    100.0 * n as f64 / agg_pairs as f64
                },
            )
        })
        .collect();
    let delta_avg = if agg_pairs == 0 {
        None
    } else {
        Some(per_threshold.iter().map(|&(_, p)| p).sum::<f64>() / 5.0)
    };
    Ok((
        DeltaReport {
            per_threshold,
            delta_avg,
            valid_pairs: agg_pairs,
        },
        per_seq,
    ))
}
