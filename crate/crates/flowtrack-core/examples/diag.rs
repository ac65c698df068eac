use flowtrack_core::matching::{all_pairs_correlation, softmax_match};
use flowtrack_core::model::FlowModel;
use flowtrack_core::synth::{ManifestEntry, WarpSpec};
use flowtrack_core::train::{train, TrainConfig, TrainSink};
use flowtrack_core::types::ModelConfig;
use ndarray::Axis;

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let entry = ManifestEntry {
        seed: 7, height: 32, width: 32,
        warp: WarpSpec::translation(2, 3.5, -2.0, 8.0),
        query_step: 4, noise_std: 0.0, brightness_jitter: 0.0,
    };
    let mut model: FlowModel<f32> = FlowModel::new(ModelConfig::toy(), 1).unwrap();
    let cfg = TrainConfig {
        steps, batch_size: 2, min_frames: 2, max_frames: 2,
        two_frame_warmup_frac: 1.0, seed: 3, log_every: 1000,
        ..TrainConfig::default()
    };
    if steps > 0 {
        let _ = train(&mut model, &cfg, &[entry.clone()], None, &TrainSink::default()).unwrap();
    }
    let sample = entry.render().unwrap();
    let runner = model.backbone_runner();
    let pyr = runner.encode_cnn(&sample.sequence).unwrap();
    let tok = runner.tokenize(&sample.sequence).unwrap();
    let (_, taps) = runner.alternating_attention(&tok).unwrap();
    let fused = runner.fuse(&taps, &pyr).unwrap();
    let f1 = fused.features.index_axis(Axis(0), 0).to_owned();
    let f2 = fused.features.index_axis(Axis(0), 1).to_owned();
    let norms: Vec<f64> = (0..16).map(|i| {
        let (y, x) = (i / 4, i % 4);
        (0..32).map(|c| f1[[c, y, x]].powi(2)).sum::<f64>().sqrt()
    }).collect();
    println!("feature norms: min {:.2} max {:.2}", norms.iter().cloned().fold(f64::MAX, f64::min), norms.iter().cloned().fold(0.0, f64::max));
    let corr = all_pairs_correlation(&f1, &f2).unwrap();
    let vals = corr.values();
    println!("logits: min {:.2} max {:.2}", vals.iter().cloned().fold(f64::MAX, f64::min), vals.iter().cloned().fold(f64::MIN, f64::max));
    let tau = 32f64.sqrt();
    let m = softmax_match(&corr, tau).unwrap();
    // gt displacement (3.5,-2) px = (0.4375,-0.25) cells: best integer match =
    // same cell (round to 0,0); report row stats
    for u in [5usize, 6, 9, 10] {
        let row = m.probs().index_axis(Axis(0), u);
        let mut best = 0; let mut bv = 0.0;
        for (v, &p) in row.iter().enumerate() { if p > bv { bv = p; best = v; } }
        let ent: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        println!("row {u}: argmax {best} (p={bv:.3}), entropy {ent:.3} (uniform = {:.3})", (16f64).ln());
    }
}
