//! Temporary diagnostic; deleted before release.

use mitoforge::augment::AugmentConfig;
use mitoforge::data::synth_generate;
use mitoforge::train::{train, RunMode, TrainConfig};
use mitoforge::vit::ViTConfig;
use std::time::Instant;

fn cfg(depth: usize, width: usize, lr: f64, alpha: f64) -> TrainConfig {
    let mut c = TrainConfig {
        epochs: 15,
        batch_size: 16,
        seed: 7,
        mode: RunMode::FullFinetune,
        vit: ViTConfig {
            image_size: 128,
            patch_size: 16,
            depth,
            width,
            heads: 4,
            mlp_ratio: 2.0,
            n_classes: 2,
        },
        augment: AugmentConfig::disabled(),
        ..TrainConfig::default()
    };
    c.optim.base_lr = lr;
    c.focal.alpha = alpha as f32;
    c
}

#[test]
fn sweep_training_configs() {
    let data_dir = tempfile::tempdir().unwrap();
    let train_records = synth_generate(800, 0.2, 2, 101, &data_dir.path().join("train")).unwrap();
    let val_records = synth_generate(200, 0.2, 2, 102, &data_dir.path().join("val")).unwrap();

    let variants: &[(&str, TrainConfig)] = &[
        ("lr1e-3 d2w32 a.25", cfg(2, 32, 1e-3, 0.25)),
        ("lr3e-3 d2w32 a.25", cfg(2, 32, 3e-3, 0.25)),
        ("lr1e-3 d2w32 a.50", cfg(2, 32, 1e-3, 0.5)),
    ];
    for (name, c) in variants {
        let out_dir = tempfile::tempdir().unwrap();
        let t0 = Instant::now();
        let outcome = train(c, &train_records, Some(&val_records), None, out_dir.path()).unwrap();
        let curve: Vec<String> = outcome
            .log
            .iter()
            .map(|e| format!("{:.3}", e.val_ba.unwrap_or(f64::NAN)))
            .collect();
        eprintln!(
            "[{name}] {:.0}s  val BA: {}",
            t0.elapsed().as_secs_f64(),
            curve.join(" ")
        );
    }
}
