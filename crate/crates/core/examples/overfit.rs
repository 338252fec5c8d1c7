//! Train on a handful of synthetic scenes and report the training-set MAE.
//!
//!     cargo run --release -p hygnn-core --example overfit -- [steps] [lr] [batch] [channels]

use hygnn_core::data::{synth_scene, SynthConfig};
use hygnn_core::train::{evaluate, train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(500);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let channels: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8);

    let synth = SynthConfig {
        h: 64,
        w: 64,
        count_range: (4, 10),
        blob_radius_range: (2.0, 5.0),
        margin: 24.0,
    };
    let scenes: Vec<_> = (0..8)
        .map(|i| synth_scene(700 + i, &synth).unwrap())
        .collect();
    let mean_count: f64 = scenes.iter().map(|s| s.count() as f64).sum::<f64>() / 8.0;

    let cfg = TrainConfig {
        n: 3,
        k: 2,
        width_multiplier: 0.125,
        node_channels: channels,
        crop: 64,
        batch,
        iterations: steps,
        seed: 4242,
        sigma: 0.5,
        sigma_loc: 0.5,
        lr,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let outcome = train(&cfg, &scenes, None, None).unwrap();
    let train_time = t0.elapsed();
    let result = evaluate(&outcome.params, &cfg.model_config(), &scenes).unwrap();

    println!(
        "steps {steps} lr {lr} batch {batch} C {channels}: training MAE {:.4} (mean count {mean_count:.2}), {:.1}s",
        result.mae,
        train_time.as_secs_f64()
    );
    for (i, (p, g)) in result.per_image.iter().enumerate() {
        println!("  scene {i}: predicted {p:7.3}  truth {g}");
    }
    let first = &outcome.loss_log[0];
    let last = outcome.loss_log.last().unwrap();
    println!("  density loss {:.4e} -> {:.4e}", first.l1, last.l1);
}
