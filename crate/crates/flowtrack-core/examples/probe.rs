use flowtrack_core::model::FlowModel;
use flowtrack_core::synth::{random_spec, ManifestEntry, WarpFamily};
use flowtrack_core::train::{train, evaluate_flow, EvalOptions, TrainConfig, TrainSink};
use flowtrack_core::types::ModelConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let manifest: Vec<ManifestEntry> = (0..256)
        .map(|i| ManifestEntry {
            seed: 10_000 + i,
            height: 32,
            width: 32,
            warp: random_spec(&mut rng, WarpFamily::Translation, 6, 8.0, 32, 32),
            query_step: 4,
            noise_std: 0.0,
            brightness_jitter: 0.0,
        })
        .collect();
    let heldout: Vec<ManifestEntry> = (0..24)
        .map(|i| ManifestEntry {
            seed: 90_000 + i,
            height: 32,
            width: 32,
            warp: random_spec(&mut rng, WarpFamily::Translation, 4, 8.0, 32, 32),
            query_step: 4,
            noise_std: 0.0,
            brightness_jitter: 0.0,
        })
        .collect();
    let mut model: FlowModel<f32> = FlowModel::new(ModelConfig::toy(), 1234).unwrap();
    println!("params: {}", model.num_parameters());
    let cfg = TrainConfig { steps, seed: 99, log_every: 10, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let (log, _) = train(&mut model, &cfg, &manifest, None, &TrainSink { out_dir: None, quiet: false }).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("trained {} steps in {:.1}s ({:.2} steps/s)", steps, dt, steps as f64 / dt);
    let first = &log.entries[..3.min(log.entries.len())];
    for e in first { println!("  early: step {} loss {:.4}", e.step, e.loss); }
    for e in log.entries.iter().rev().take(3) { println!("  late:  step {} loss {:.4}", e.step, e.loss); }
    for k in [1usize, 2, 4, 8] {
        let r = evaluate_flow(&model, &heldout, &EvalOptions { frames: Some(4), iters: Some(k) }).unwrap();
        println!("iters {k}: EPE {:?} Fl-all {:?} 1px {:?}", r.epe, r.fl_all, r.one_px);
    }
    let report = evaluate_flow(&model, &heldout, &EvalOptions { frames: Some(4), iters: None }).unwrap();
    println!("{}", report.human_readable());
    // per-sample iterate trend at K_eval
    let mut non_increasing = 0usize;
    for s in &report.per_sequence {
        let first = s.iterate_epes.first().copied().flatten().unwrap_or(f64::NAN);
        let last = s.iterate_epes.last().copied().flatten().unwrap_or(f64::NAN);
        if last <= first { non_increasing += 1; }
        else { println!("  regressed sample {}: iter1 {:.4} -> iter8 {:.4}", s.index, first, last); }
    }
    println!("EPE(iter K) <= EPE(iter 1) on {}/{} samples", non_increasing, report.per_sequence.len());
    // untrained baseline for comparison
    let base: FlowModel<f32> = FlowModel::new(ModelConfig::toy(), 1234).unwrap();
    let r0 = evaluate_flow(&base, &heldout, &EvalOptions { frames: Some(4), iters: None }).unwrap();
    println!("untrained EPE: {:?}", r0.epe);

}
