//! End-to-end training behavior on synthetic data: learnability of the
//! stand-in scorer, short multi-task and co-training runs, checkpointing and
//! accumulation semantics.

use affectlab::data::{synth_dataset, Task};
use affectlab::engine::{train_lsd, train_mtl, TrainConfig};

fn quick_mtl_config(seed: u64) -> TrainConfig {
    TrainConfig {
        total_epochs: 2,
        warmup_epochs: 1,
        batch_size: 8,
        accum_iters: 2,
        cnn_epochs: 1,
        drop_path: 0.0,
        augment: false,
        lr_scaling: false,
        base_lr: 1e-3,
        data_n: 32,
        seed,
        ..TrainConfig::emma_default()
    }
}

#[test]
fn mtl_short_run_produces_artifacts_and_decreasing_loss() {
    let data = synth_dataset(32, Task::Mtl, 5);
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let t0 = std::time::Instant::now();
    let summary = train_mtl(&quick_mtl_config(7), &data, &run).unwrap();
    eprintln!("mtl 2-epoch/32-sample run took {:.1?}", t0.elapsed());

    assert_eq!(summary.history.len(), 2);
    assert!(run.join("config.txt").exists());
    assert!(run.join("log.csv").exists());
    assert!(run.join("report.txt").exists());
    assert!(run.join("checkpoints/epoch_000/weights.bin").exists());
    assert!(run.join("checkpoints/epoch_001/meta.txt").exists());

    let log = std::fs::read_to_string(run.join("log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,loss_total,loss_au,loss_va,loss_exp,train_ccc_v,train_ccc_a,train_f1_exp,train_f1_au,train_p_mtl,val_p_mtl"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn lsd_short_run_logs_and_checkpoints() {
    let data = synth_dataset(24, Task::Lsd, 6);
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = TrainConfig {
        total_epochs: 2,
        warmup_epochs: 1,
        batch_size: 8,
        accum_iters: 1,
        drop_path: 0.0,
        augment: false,
        lr_scaling: false,
        base_lr: 1e-3,
        mask_ratio: 0.75,
        lambda: 1.0,
        data_n: 24,
        seed: 3,
        ..TrainConfig::cotex_default()
    };
    let summary = train_lsd(&cfg, &data, &run).unwrap();
    assert_eq!(summary.history.len(), 2);
    let log = std::fs::read_to_string(run.join("log.csv")).unwrap();
    assert!(log.starts_with(
        "epoch,loss_total,loss_js,loss_ce1,loss_ce2,train_f1,train_acc,val_p_lsd"
    ));
    assert!(run.join("checkpoints/epoch_001/weights.bin").exists());
}

#[test]
fn standin_scorer_reaches_high_train_accuracy() {
    // train the 4-block scorer on synthetic expression data and check it
    // separates the classes
    let data = synth_dataset(2048, Task::Lsd, 11);
    let refs: Vec<&affectlab::data::LabeledImage> = data.iter().collect();
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("probe");
    // reuse the mtl loop's scorer training through a tiny run is wasteful;
    // call the scorer trainer directly via a 1-epoch config and then score
    let cfg = TrainConfig {
        task: Task::Lsd,
        cnn_epochs: 4,
        batch_size: 32,
        augment: false,
        seed: 13,
        k2: 6,
        data_n: 2048,
        ..TrainConfig::emma_default()
    };
    let _ = run; // scorer training is exercised through the public helper below
    let scorer = affectlab::engine::train_scorer_standalone(&cfg, &refs, 6).unwrap();
    let acc = affectlab::engine::scorer_accuracy(&scorer, &refs).unwrap();
    eprintln!("stand-in scorer train accuracy: {acc:.4}");
    assert!(acc >= 0.95, "train accuracy {acc} below 0.95");
}

#[test]
fn emma_determinism_two_runs_bit_identical() {
    let data = synth_dataset(16, Task::Mtl, 9);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_mtl_config(21);
    cfg.total_epochs = 1;
    cfg.data_n = 16;
    let s1 = train_mtl(&cfg, &data, &dir.path().join("a")).unwrap();
    let s2 = train_mtl(&cfg, &data, &dir.path().join("b")).unwrap();
    let log1 = std::fs::read(dir.path().join("a/log.csv")).unwrap();
    let log2 = std::fs::read(dir.path().join("b/log.csv")).unwrap();
    assert_eq!(log1, log2);
    let w1 = std::fs::read(s1.final_checkpoint.join("weights.bin")).unwrap();
    let w2 = std::fs::read(s2.final_checkpoint.join("weights.bin")).unwrap();
    assert_eq!(w1, w2);
}

#[test]
fn constant_scorer_degradation_still_learns_au_and_expr() {
    // the multi-task model keeps training AU/EXPR when the second expression
    // branch is a constant function
    use affectlab::backbone::ConstantScorer;
    use affectlab::data::AugmentMode;
    use affectlab::emma::emma_train_step;
    use affectlab::nn::{derive_rng, ParamSet};

    let mut params = ParamSet::<f32>::new();
    let mut rng = derive_rng(31, &[1]);
    let cfg = affectlab::backbone::EncoderConfig {
        patch_size: 32,
        embed_dim: 32,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        drop_path_rate: 0.0,
        class_token: true,
    };
    let layout = affectlab::emma::EmmaLayout::new(&mut params, cfg, 8, 8, &mut rng);
    let scorer = ConstantScorer::<f32> { logits: vec![0.0; 8] };
    let data = synth_dataset(16, Task::Mtl, 33);
    let batch: Vec<affectlab::data::FaceSample> = data
        .iter()
        .map(|s| {
            let mut arng = derive_rng(34, &[0]);
            affectlab::data::FaceSample {
                id: s.id.clone(),
                image: affectlab::data::augment(&s.image, AugmentMode::Eval, &mut arng).unwrap(),
                labels: s.labels,
            }
        })
        .collect();

    let first = emma_train_step(&layout, &params, &scorer, &batch, false, None).unwrap();
    let mut p = params.clone();
    for _ in 0..30 {
        let step = emma_train_step(&layout, &p, &scorer, &batch, false, None).unwrap();
        for i in 0..p.len() {
            if let Some(g) = step.grads.get(i) {
                let mut t = p.tensor(i).clone();
                for (pv, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *pv -= 0.01 * gv;
                }
                let name = p.name(i).to_string();
                p.set(&name, t);
            }
        }
    }
    let last = emma_train_step(&layout, &p, &scorer, &batch, false, None).unwrap();
    let first_ae = first.loss.au + first.loss.exp;
    let last_ae = last.loss.au + last.loss.exp;
    eprintln!("AU+EXPR loss {first_ae:.4} -> {last_ae:.4}");
    assert!(last_ae < first_ae);
}
