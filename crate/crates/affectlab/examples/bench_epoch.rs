//! Criterion-scale pacing check (dev tool).

use std::time::Instant;

use affectlab::data::{synth_dataset, Task};
use affectlab::engine::{train_lsd, train_mtl, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("mtl");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lambda: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let dir = tempfile::tempdir().unwrap();
    match which {
        "mtl" => {
            let data = synth_dataset(512, Task::Mtl, 42);
            let cfg = TrainConfig {
                total_epochs: epochs,
                warmup_epochs: 2,
                batch_size: 32,
                accum_iters: 1,
                cnn_epochs: 3,
                drop_path: 0.0,
                augment: false,
                lr_scaling: false,
                base_lr: 1e-3,
                val_fraction: 0.0,
                data_n: 512,
                seed,
                ..TrainConfig::emma_default()
            };
            let t = Instant::now();
            let s = train_mtl(&cfg, &data, &dir.path().join("run")).unwrap();
            let dt = t.elapsed();
            println!("mtl {epochs} epochs: {dt:.1?} ({:.1?}/epoch)", dt / epochs as u32);
            let scores: Vec<f64> = s.history.iter().map(|r| r.cols[8].1).collect();
            for (e, p) in scores.iter().enumerate() {
                println!("  epoch {e}: p_mtl {p:.4}");
            }
            // moving-average strictness: P_e > P_{e-10}
            let mut ok = true;
            for e in 10..scores.len().min(50) {
                if scores[e] <= scores[e - 10] {
                    println!("  MA violation at epoch {e}: {:.4} <= {:.4}", scores[e], scores[e - 10]);
                    ok = false;
                }
            }
            println!("MA strict: {ok}, final train P_MTL: {:.4}", s.final_train_score);
        }
        _ => {
            let data = synth_dataset(512, Task::Lsd, 42);
            let cfg = TrainConfig {
                total_epochs: epochs,
                warmup_epochs: 1,
                batch_size: 32,
                accum_iters: 1,
                drop_path: 0.0,
                augment: false,
                lr_scaling: false,
                base_lr: 1e-3,
                mask_ratio: 0.75,
                lambda,
                val_fraction: 0.0,
                data_n: 512,
                seed,
                ..TrainConfig::cotex_default()
            };
            let t = Instant::now();
            let s = train_lsd(&cfg, &data, &dir.path().join("run")).unwrap();
            let dt = t.elapsed();
            println!("lsd {epochs} epochs (seed {seed}, lambda {lambda}): {dt:.1?}");
            for r in &s.history {
                println!("  epoch {}: masked f1 {:.4}", r.epoch, r.cols[4].1);
            }
            println!("final full-view train F1: {:.4}", s.final_train_score);
        }
    }
}
