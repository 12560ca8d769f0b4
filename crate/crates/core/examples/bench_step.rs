use polyseg_core::trainer::*;
use polyseg_core::phantom::{generate, PhantomSpec};
use polyseg_core::network::ModelConfig;
use polyseg_core::hierarchy::TargetFormat;
use polyseg_core::pipeline::AugmentConfig;
use std::time::Instant;

fn main() {
    let n_threads = std::env::var("BENCH_THREADS").ok().and_then(|s| s.parse().ok()).unwrap_or(4);
    rayon::ThreadPoolBuilder::new().num_threads(n_threads).build_global().unwrap();
    let spec = PhantomSpec { dims: [64,64,64], seed: 1, ..PhantomSpec::default() };
    let ph = generate(&spec).unwrap();
    let srcs: Vec<VolumeSource> = (0..2).map(|i| {
        let mut s = spec.clone(); s.seed = i;
        VolumeSource::from_phantom(&generate(&s).unwrap(), &format!("p{i}"), &TargetFormat::ALL).unwrap()
    }).collect();
    let _ = ph;
    let cfg = TrainConfig {
        batch_size: 10,
        epochs: 1,
        quota: 10,   // 50 samples -> 5 steps
        model: ModelConfig::default(),
        augment: AugmentConfig::disabled(64),
        seed: 1,
        ..TrainConfig::default()
    };
    let dir = std::env::temp_dir().join("polyseg_bench");
    let t0 = Instant::now();
    let out = train(&cfg, &srcs, &srcs[..1], &dir).unwrap();
    let dt = t0.elapsed();
    println!("epoch with 5 steps of batch 10 + validation(1 vol of 64 slices): {:.2?}", dt);
    println!("best val {:.4}", out.best_val_loss);

    // time validation separately
    let t1 = Instant::now();
    let v = validate(&out.model, &srcs[..1]).unwrap();
    println!("validate 1 volume: {:.2?} (loss {v:.4})", t1.elapsed());
}
