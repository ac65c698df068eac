use flowtrack_core::model::{FlowModel, ForwardOptions};
use flowtrack_core::synth::{ManifestEntry, WarpSpec};
use flowtrack_core::metrics::epe;
use flowtrack_core::train::{train, TrainConfig, TrainSink};
use flowtrack_core::types::ModelConfig;

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    // one fixed 2-frame sample: translation (3.5, -2.0)
    let entry = ManifestEntry {
        seed: 7,
        height: 32,
        width: 32,
        warp: WarpSpec::translation(2, 3.5, -2.0, 8.0),
        query_step: 4,
        noise_std: 0.0,
        brightness_jitter: 0.0,
    };
    let mut model: FlowModel<f32> = FlowModel::new(ModelConfig::toy(), 1).unwrap();
    let cfg = TrainConfig {
        steps,
        batch_size: 2,
        min_frames: 2,
        max_frames: 2,
        two_frame_warmup_frac: 1.0,
        seed: 3,
        log_every: 20,
        ..TrainConfig::default()
    };
    let _ = train(&mut model, &cfg, &[entry.clone()], None, &TrainSink { out_dir: None, quiet: false }).unwrap();
    let sample = entry.render().unwrap();
    for k in [1usize, 2, 4, 8] {
        let out = model.infer(&sample.sequence, &ForwardOptions::new(k)).unwrap();
        let (e, _) = epe(&out.flows[0], &sample.gt_flows[0], Some(&sample.gt_valid[0])).unwrap();
        let (ei, _) = epe(&out.init[0], &sample.gt_flows[0], Some(&sample.gt_valid[0])).unwrap();
        println!("k={k}: EPE {:.4}  (init EPE {:.4})", e.unwrap(), ei.unwrap());
    }
}
