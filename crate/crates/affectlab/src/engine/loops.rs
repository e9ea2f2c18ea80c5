//! Training loops for the three pipelines (masked-autoencoder pretraining,
//! multi-task finetuning, masked co-training) plus the run-directory layout:
//! config.txt, checkpoints/epoch_%03d, log.csv, report.txt.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::models::{save_cotex, save_emma};
use super::{accumulate, lr_schedule, AdamW, TrainConfig};
use crate::backbone::{
    load_checkpoint, load_encoder_into, mae_pretrain_step, save_checkpoint, ConvScorer, DropPlan,
    EncoderConfig, ExpressionScorer, MaeModel, TrainedScorer,
};
use crate::cotex::{cotex_predict, cotex_train_step, CotexLayout, TwinParams};
use crate::data::{
    AugmentMode, FaceSample, ImageTensor, LabelRow, LabeledImage, PredictionRow, Task,
};

use crate::emma::{emma_scores_with_exp2, emma_train_step_with_scores, scores_to_row, EmmaLayout, LossSelect};
use crate::error::{Error, Result};
use crate::metrics::{eval_lsd, eval_mtl, macro_f1, macro_recall};
use crate::nn::{derive_rng, ParamSet};
use crate::objectives::MtlLoss;
use crate::tensor::Tensor;

// rng stream tags
const TAG_SPLIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_DROP: u64 = 4;
const TAG_MASK: u64 = 6;
const TAG_INIT: u64 = 9;
const TAG_CNN: u64 = 20;
const TAG_MAE: u64 = 30;

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub cols: Vec<(&'static str, f64)>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub history: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub final_train_score: f64,
    pub final_val_score: f64,
    pub final_checkpoint: PathBuf,
}

fn setup_run_dir(run_dir: &Path, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(run_dir.join("checkpoints")).map_err(|e| Error::io(run_dir, e))?;
    let mut text = String::new();
    for (k, v) in cfg.key_values() {
        let _ = writeln!(text, "{k} = {v}");
    }
    fs::write(run_dir.join("config.txt"), text).map_err(|e| Error::io(run_dir, e))
}

fn write_log(run_dir: &Path, history: &[EpochRow]) -> Result<()> {
    let mut out = String::from("epoch");
    if let Some(first) = history.first() {
        for (name, _) in &first.cols {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push('\n');
    for row in history {
        let _ = write!(out, "{}", row.epoch);
        for (_, v) in &row.cols {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    fs::write(run_dir.join("log.csv"), out).map_err(|e| Error::io(run_dir, e))
}

fn checkpoint_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

/// Deterministic train/validation split by shuffled index.
fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, &[TAG_SPLIT]);
    use rand::seq::SliceRandom;
    idx.shuffle(&mut rng);
    let val_n = (val_fraction * n as f64).round() as usize;
    let val = idx[..val_n].to_vec();
    let train = idx[val_n..].to_vec();
    (train, val)
}

/// Augment a set of samples in parallel with per-sample derived streams.
fn augment_set(
    data: &[&LabeledImage],
    ids: &[usize],
    mode: AugmentMode,
    seed: u64,
    epoch: u64,
) -> Result<Vec<FaceSample>> {
    data.par_iter()
        .zip(ids.par_iter())
        .map(|(s, &i)| {
            let mut rng = derive_rng(seed, &[TAG_AUGMENT, epoch, i as u64]);
            Ok(FaceSample {
                id: s.id.clone(),
                image: crate::data::augment(&s.image, mode, &mut rng)?,
                labels: s.labels,
            })
        })
        .collect()
}

fn label_rows(samples: &[&LabeledImage]) -> Vec<LabelRow> {
    samples
        .iter()
        .map(|s| LabelRow {
            id: s.id.clone(),
            labels: s.labels,
        })
        .collect()
}

fn effective_mode(task: Task, augment: bool) -> AugmentMode {
    if !augment {
        return AugmentMode::Eval;
    }
    match task {
        Task::Mtl => AugmentMode::TrainMtl,
        Task::Lsd => AugmentMode::TrainLsd,
    }
}

/// Train the stand-in expression scorer on the expression-labeled subset.
fn train_cnn_scorer(
    cfg: &TrainConfig,
    data: &[&LabeledImage],
    classes: usize,
) -> Result<TrainedScorer<f32>> {
    let mut params = ParamSet::<f32>::new();
    let mut init_rng = derive_rng(cfg.seed, &[TAG_INIT, 2]);
    let layout = ConvScorer::new(&mut params, "cnn", classes, &mut init_rng);

    let labeled: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let e = data[i].labels.expression.0;
            e >= 0 && (e as usize) < classes
        })
        .collect();
    if labeled.is_empty() || cfg.cnn_epochs == 0 {
        return Ok(TrainedScorer { params, layout });
    }

    let sample_cache: Option<Vec<FaceSample>> = if cfg.augment {
        None
    } else {
        let subset: Vec<&LabeledImage> = labeled.iter().map(|&i| data[i]).collect();
        Some(augment_set(&subset, &labeled, AugmentMode::Eval, cfg.seed ^ 0xC44, 0)?)
    };

    let batch = cfg.batch_size.clamp(1, 32);
    let spe = labeled.len().div_ceil(batch);
    let mut opt = AdamW::new(&params, 1e-3, 1.0, 0, 1e-4, 1.0);
    let mut step = 0usize;
    for epoch in 0..cfg.cnn_epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        let mut rng = derive_rng(cfg.seed, &[TAG_CNN, epoch as u64]);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let samples: Vec<FaceSample> = match &sample_cache {
                Some(cache) => chunk.iter().map(|&j| cache[j].clone()).collect(),
                None => {
                    let subset: Vec<&LabeledImage> =
                        chunk.iter().map(|&j| data[labeled[j]]).collect();
                    let ids: Vec<usize> = chunk.iter().map(|&j| labeled[j]).collect();
                    augment_set(
                        &subset,
                        &ids,
                        effective_mode(cfg.task, cfg.augment),
                        cfg.seed ^ 0xC44,
                        epoch as u64,
                    )?
                }
            };
            let images = crate::backbone::batch_images_tensor::<f32>(
                &samples.iter().map(|s| &s.image).collect::<Vec<_>>(),
            )?;
            let labels: Vec<i32> = samples.iter().map(|s| s.labels.expression.0).collect();
            let mut tape = crate::tape::Tape::new();
            let bound = params.bind(&mut tape);
            let input = tape.constant(images);
            let logits = layout.forward(&mut tape, &bound, input, samples.len());
            let loss = crate::objectives::loss_exp_tape(&mut tape, logits, &labels);
            let g = tape.backward(loss);
            let mut grads = crate::nn::GradSet::harvest(&params, &bound, &g);
            let mult = lr_schedule(step, spe, 0, cfg.cnn_epochs);
            opt.step(&mut params, &mut grads, mult)?;
            step += 1;
        }
    }
    Ok(TrainedScorer { params, layout })
}

/// Train the stand-in scorer outside a full multi-task run.
pub fn train_scorer_standalone(
    cfg: &TrainConfig,
    data: &[&LabeledImage],
    classes: usize,
) -> Result<TrainedScorer<f32>> {
    train_cnn_scorer(cfg, data, classes)
}

/// Evaluation accuracy of a scorer on a labeled set (used by tests).
pub fn scorer_accuracy(
    scorer: &TrainedScorer<f32>,
    data: &[&LabeledImage],
) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for chunk in data.chunks(32) {
        let samples: Vec<FaceSample> = chunk
            .iter()
            .map(|s| {
                let mut rng = derive_rng(0, &[0]);
                Ok(FaceSample {
                    id: s.id.clone(),
                    image: crate::data::augment(&s.image, AugmentMode::Eval, &mut rng)?,
                    labels: s.labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
        let logits = scorer.score(&images)?;
        let k = scorer.layout.classes;
        for (b, s) in samples.iter().enumerate() {
            let lab = s.labels.expression.0;
            if lab < 0 {
                continue;
            }
            let row: Vec<f64> = logits.data()[b * k..(b + 1) * k]
                .iter()
                .map(|&v| v as f64)
                .collect();
            total += 1;
            if crate::emma::argmax(&row) == lab {
                hit += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Multi-task training. Returns the per-epoch history; checkpoints land in
/// `run_dir/checkpoints/epoch_%03d`.
pub fn train_mtl(cfg: &TrainConfig, data: &[LabeledImage], run_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    setup_run_dir(run_dir, cfg)?;
    let enc_cfg = {
        let mut c = EncoderConfig::by_name(&cfg.preset)?;
        c.drop_path_rate = cfg.drop_path;
        c
    };

    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let train_set: Vec<&LabeledImage> = train_idx.iter().map(|&i| &data[i]).collect();
    let val_set: Vec<&LabeledImage> = val_idx.iter().map(|&i| &data[i]).collect();

    // stand-in scorer, trained on the expression-labeled subset, then frozen
    let scorer = train_cnn_scorer(cfg, &train_set, cfg.k2)?;

    let mut params = ParamSet::<f32>::new();
    let mut init_rng = derive_rng(cfg.seed, &[TAG_INIT, 1]);
    let layout = EmmaLayout::new(&mut params, enc_cfg, cfg.k1, cfg.k2, &mut init_rng);
    if let Some(ck_path) = &cfg.init_checkpoint {
        let ck = load_checkpoint(ck_path)?;
        load_encoder_into(&ck, &enc_cfg, &mut params)?;
    }

    // with augmentation off the training image of a sample never changes, so
    // both the resized images and the frozen scorer's logits can be computed
    // once up front
    let sample_cache: Option<Vec<FaceSample>> = if cfg.augment {
        None
    } else {
        Some(augment_set(
            &train_set,
            &train_idx,
            AugmentMode::Eval,
            cfg.seed,
            0,
        )?)
    };
    let exp2_cache: Option<Tensor<f32>> = match &sample_cache {
        None => None,
        Some(samples) => {
            let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
            let mut all = Tensor::zeros(&[samples.len(), cfg.k2]);
            for (start, chunk) in images.chunks(64).enumerate().map(|(i, c)| (i * 64, c)) {
                let part = scorer.score(chunk)?;
                all.data_mut()[start * cfg.k2..(start + chunk.len()) * cfg.k2]
                    .copy_from_slice(part.data());
            }
            Some(all)
        }
    };

    let mut opt = AdamW::new(
        &params,
        cfg.absolute_lr(),
        cfg.layer_decay,
        enc_cfg.depth,
        cfg.weight_decay,
        cfg.clip_grad,
    );
    let steps_per_epoch = train_set.len().div_ceil(cfg.effective_batch());
    let mut history = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut opt_step = 0usize;

    for epoch in 0..cfg.total_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        {
            let mut rng = derive_rng(cfg.seed, &[TAG_SHUFFLE, epoch as u64]);
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
        }
        let mut losses = MtlLoss {
            total: 0.0,
            au: 0.0,
            va: 0.0,
            exp: 0.0,
            va_skipped: false,
        };
        let mut n_steps = 0usize;
        let mut train_preds: Vec<PredictionRow> = Vec::with_capacity(train_set.len());

        for group in order.chunks(cfg.batch_size * cfg.accum_iters) {
            let mut micro_grads = Vec::new();
            for (micro_i, chunk) in group.chunks(cfg.batch_size).enumerate() {
                let batch = match &sample_cache {
                    Some(cache) => chunk.iter().map(|&i| cache[i].clone()).collect(),
                    None => {
                        let subset: Vec<&LabeledImage> =
                            chunk.iter().map(|&i| train_set[i]).collect();
                        let global_ids: Vec<usize> =
                            chunk.iter().map(|&i| train_idx[i]).collect();
                        augment_set(
                            &subset,
                            &global_ids,
                            effective_mode(Task::Mtl, cfg.augment),
                            cfg.seed,
                            epoch as u64,
                        )?
                    }
                };
                let exp2 = match &exp2_cache {
                    Some(cache) => {
                        let mut t = Tensor::zeros(&[batch.len(), cfg.k2]);
                        for (dst, &i) in t
                            .data_mut()
                            .chunks_mut(cfg.k2)
                            .zip(chunk.iter())
                        {
                            dst.copy_from_slice(
                                &cache.data()[i * cfg.k2..(i + 1) * cfg.k2],
                            );
                        }
                        t
                    }
                    None => {
                        let images: Vec<&ImageTensor> =
                            batch.iter().map(|s| &s.image).collect();
                        scorer.score(&images)?
                    }
                };
                let mut drop_rng = derive_rng(
                    cfg.seed,
                    &[TAG_DROP, epoch as u64, opt_step as u64, micro_i as u64],
                );
                let plan = DropPlan::sample(&enc_cfg, batch.len(), &mut drop_rng);
                let step = emma_train_step_with_scores(
                    &layout,
                    &params,
                    &batch,
                    &exp2,
                    cfg.exp_sum_variant,
                    plan.as_ref(),
                    LossSelect::All,
                )?;
                losses.total += step.loss.total;
                losses.au += step.loss.au;
                losses.va += step.loss.va;
                losses.exp += step.loss.exp;
                n_steps += 1;
                for (sample, scores) in batch.iter().zip(&step.scores) {
                    train_preds.push(scores_to_row(&sample.id, scores));
                }
                micro_grads.push(step.grads);
            }
            let mut grads = accumulate(micro_grads)?;
            let mult = lr_schedule(opt_step, steps_per_epoch, cfg.warmup_epochs, cfg.total_epochs);
            opt.step(&mut params, &mut grads, mult)?;
            opt_step += 1;
        }

        let train_labels = label_rows(&train_set);
        let train_report = eval_mtl(&train_preds, &train_labels)?;
        let val_score = if val_set.is_empty() {
            train_report.p_score
        } else {
            let rows = predict_mtl_set(&layout, &params, &scorer, &val_set, cfg)?;
            eval_mtl(&rows, &label_rows(&val_set))?.p_score
        };

        let inv = 1.0 / n_steps.max(1) as f64;
        history.push(EpochRow {
            epoch,
            cols: vec![
                ("loss_total", losses.total * inv),
                ("loss_au", losses.au * inv),
                ("loss_va", losses.va * inv),
                ("loss_exp", losses.exp * inv),
                ("train_ccc_v", train_report.ccc_v),
                ("train_ccc_a", train_report.ccc_a),
                (
                    "train_f1_exp",
                    train_report.f1_exp.iter().sum::<f64>() / train_report.f1_exp.len() as f64,
                ),
                (
                    "train_f1_au",
                    train_report.f1_au.iter().sum::<f64>() / train_report.f1_au.len() as f64,
                ),
                ("train_p_mtl", train_report.p_score),
                ("val_p_mtl", val_score),
            ],
        });
        write_log(run_dir, &history)?;

        let ckdir = checkpoint_dir(run_dir, epoch);
        save_emma(
            &ckdir,
            &enc_cfg,
            cfg.k1,
            cfg.k2,
            &params,
            &scorer.params,
            &[
                ("epoch".into(), epoch.to_string()),
                ("train_seed".into(), cfg.seed.to_string()),
                ("val_score".into(), format!("{val_score:.6}")),
            ],
        )?;
        if val_score > best.1 {
            best = (epoch, val_score);
        }
    }

    let final_train = {
        let rows = predict_mtl_set(&layout, &params, &scorer, &train_set, cfg)?;
        eval_mtl(&rows, &label_rows(&train_set))?.p_score
    };
    let final_val = history.last().map(|r| r.cols.last().unwrap().1).unwrap_or(0.0);
    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        best_epoch: best.0,
        best_score: best.1,
        final_train_score: final_train,
        final_val_score: final_val,
        final_checkpoint: checkpoint_dir(run_dir, cfg.total_epochs - 1),
        history,
    };
    write_report(run_dir, cfg, &summary)?;
    Ok(summary)
}

fn predict_mtl_set(
    layout: &EmmaLayout,
    params: &ParamSet<f32>,
    scorer: &TrainedScorer<f32>,
    set: &[&LabeledImage],
    cfg: &TrainConfig,
) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::with_capacity(set.len());
    let ids: Vec<usize> = (0..set.len()).collect();
    for (chunk, id_chunk) in set.chunks(32).zip(ids.chunks(32)) {
        let samples = augment_set(chunk, id_chunk, AugmentMode::Eval, cfg.seed, 0)?;
        let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
        let exp2 = scorer.score(&images)?;
        let scores = emma_scores_with_exp2(layout, params, &images, &exp2)?;
        for (sample, sc) in samples.iter().zip(&scores) {
            rows.push(scores_to_row(&sample.id, sc));
        }
    }
    Ok(rows)
}

/// Masked co-training. Two full parameter sets train simultaneously; the
/// logged train metrics come from the masked-view averaged predictions, the
/// final train score from full-view inference.
pub fn train_lsd(cfg: &TrainConfig, data: &[LabeledImage], run_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    setup_run_dir(run_dir, cfg)?;
    let enc_cfg = {
        let mut c = EncoderConfig::by_name(&cfg.preset)?;
        c.drop_path_rate = cfg.drop_path;
        c
    };
    let classes = crate::data::LSD_CLASSES;

    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let train_set: Vec<&LabeledImage> = train_idx.iter().map(|&i| &data[i]).collect();
    let val_set: Vec<&LabeledImage> = val_idx.iter().map(|&i| &data[i]).collect();

    let mut view1 = ParamSet::<f32>::new();
    let mut rng1 = derive_rng(cfg.seed, &[TAG_INIT, 10]);
    let layout = CotexLayout::new(&mut view1, enc_cfg, classes, &mut rng1);
    let mut view2 = ParamSet::<f32>::new();
    let mut rng2 = derive_rng(cfg.seed, &[TAG_INIT, 11]);
    let _ = CotexLayout::new(&mut view2, enc_cfg, classes, &mut rng2);
    if let Some(ck_path) = &cfg.init_checkpoint {
        let ck = load_checkpoint(ck_path)?;
        load_encoder_into(&ck, &enc_cfg, &mut view1)?;
        load_encoder_into(&ck, &enc_cfg, &mut view2)?;
    }
    let mut twin = TwinParams { view1, view2 };

    let sample_cache: Option<Vec<FaceSample>> = if cfg.augment {
        None
    } else {
        Some(augment_set(
            &train_set,
            &train_idx,
            AugmentMode::Eval,
            cfg.seed,
            0,
        )?)
    };

    let mut opt1 = AdamW::new(
        &twin.view1,
        cfg.absolute_lr(),
        cfg.layer_decay,
        enc_cfg.depth,
        cfg.weight_decay,
        cfg.clip_grad,
    );
    let mut opt2 = AdamW::new(
        &twin.view2,
        cfg.absolute_lr(),
        cfg.layer_decay,
        enc_cfg.depth,
        cfg.weight_decay,
        cfg.clip_grad,
    );
    let steps_per_epoch = train_set.len().div_ceil(cfg.effective_batch());
    let mut history = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut opt_step = 0usize;

    for epoch in 0..cfg.total_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        {
            let mut rng = derive_rng(cfg.seed, &[TAG_SHUFFLE, epoch as u64]);
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
        }
        let mut sums = (0.0, 0.0, 0.0, 0.0); // total, js, ce1, ce2
        let mut n_steps = 0usize;
        let mut preds: Vec<i32> = Vec::with_capacity(train_set.len());
        let mut labs: Vec<i32> = Vec::with_capacity(train_set.len());

        for group in order.chunks(cfg.batch_size * cfg.accum_iters) {
            let mut micro1 = Vec::new();
            let mut micro2 = Vec::new();
            for (micro_i, chunk) in group.chunks(cfg.batch_size).enumerate() {
                let batch = match &sample_cache {
                    Some(cache) => chunk.iter().map(|&i| cache[i].clone()).collect::<Vec<_>>(),
                    None => {
                        let subset: Vec<&LabeledImage> =
                            chunk.iter().map(|&i| train_set[i]).collect();
                        let global_ids: Vec<usize> =
                            chunk.iter().map(|&i| train_idx[i]).collect();
                        augment_set(
                            &subset,
                            &global_ids,
                            effective_mode(Task::Lsd, cfg.augment),
                            cfg.seed,
                            epoch as u64,
                        )?
                    }
                };
                let mut mask_rng = derive_rng(
                    cfg.seed,
                    &[TAG_MASK, epoch as u64, opt_step as u64, micro_i as u64],
                );
                let mut drop_rng1 = derive_rng(
                    cfg.seed,
                    &[TAG_DROP, 1, epoch as u64, opt_step as u64, micro_i as u64],
                );
                let mut drop_rng2 = derive_rng(
                    cfg.seed,
                    &[TAG_DROP, 2, epoch as u64, opt_step as u64, micro_i as u64],
                );
                let plan1 = DropPlan::sample(&enc_cfg, batch.len(), &mut drop_rng1);
                let plan2 = DropPlan::sample(&enc_cfg, batch.len(), &mut drop_rng2);
                let step = cotex_train_step(
                    &layout,
                    &twin,
                    &batch,
                    cfg.lambda,
                    cfg.mask_ratio,
                    &mut mask_rng,
                    plan1.as_ref(),
                    plan2.as_ref(),
                )?;
                sums.0 += step.loss.total;
                sums.1 += step.loss.js;
                sums.2 += step.loss.ce1;
                sums.3 += step.loss.ce2;
                n_steps += 1;
                for ((p1, p2), sample) in step
                    .probs1
                    .iter()
                    .zip(&step.probs2)
                    .zip(batch.iter())
                {
                    let avg: Vec<f64> =
                        p1.iter().zip(p2).map(|(a, b)| 0.5 * (a + b)).collect();
                    preds.push(crate::emma::argmax(&avg));
                    labs.push(sample.labels.expression.0);
                }
                micro1.push(step.grads1);
                micro2.push(step.grads2);
            }
            let mut g1 = accumulate(micro1)?;
            let mut g2 = accumulate(micro2)?;
            let mult = lr_schedule(opt_step, steps_per_epoch, cfg.warmup_epochs, cfg.total_epochs);
            opt1.step(&mut twin.view1, &mut g1, mult)?;
            opt2.step(&mut twin.view2, &mut g2, mult)?;
            opt_step += 1;
        }

        let train_f1 = macro_f1(&preds, &labs, classes);
        let train_acc = macro_recall(&preds, &labs, classes);
        let val_score = if val_set.is_empty() {
            train_f1
        } else {
            let rows = predict_lsd_set(&layout, &twin, &val_set, cfg)?;
            eval_lsd(&rows, &label_rows(&val_set))?.p_score
        };

        let inv = 1.0 / n_steps.max(1) as f64;
        history.push(EpochRow {
            epoch,
            cols: vec![
                ("loss_total", sums.0 * inv),
                ("loss_js", sums.1 * inv),
                ("loss_ce1", sums.2 * inv),
                ("loss_ce2", sums.3 * inv),
                ("train_f1", train_f1),
                ("train_acc", train_acc),
                ("val_p_lsd", val_score),
            ],
        });
        write_log(run_dir, &history)?;

        let ckdir = checkpoint_dir(run_dir, epoch);
        save_cotex(
            &ckdir,
            &enc_cfg,
            classes,
            &twin,
            &[
                ("epoch".into(), epoch.to_string()),
                ("train_seed".into(), cfg.seed.to_string()),
                ("val_score".into(), format!("{val_score:.6}")),
            ],
        )?;
        if val_score > best.1 {
            best = (epoch, val_score);
        }
    }

    // final train score from full-view (inference-mode) predictions
    let final_train = {
        let rows = predict_lsd_set(&layout, &twin, &train_set, cfg)?;
        eval_lsd(&rows, &label_rows(&train_set))?.p_score
    };
    let final_val = history.last().map(|r| r.cols.last().unwrap().1).unwrap_or(0.0);
    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        best_epoch: best.0,
        best_score: best.1,
        final_train_score: final_train,
        final_val_score: final_val,
        final_checkpoint: checkpoint_dir(run_dir, cfg.total_epochs - 1),
        history,
    };
    write_report(run_dir, cfg, &summary)?;
    Ok(summary)
}

fn predict_lsd_set(
    layout: &CotexLayout,
    twin: &TwinParams<f32>,
    set: &[&LabeledImage],
    cfg: &TrainConfig,
) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::with_capacity(set.len());
    let ids: Vec<usize> = (0..set.len()).collect();
    for (chunk, id_chunk) in set.chunks(32).zip(ids.chunks(32)) {
        let samples = augment_set(chunk, id_chunk, AugmentMode::Eval, cfg.seed, 0)?;
        let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
        let probs = cotex_predict(layout, twin, &images)?;
        for (sample, p) in samples.iter().zip(&probs) {
            rows.push(PredictionRow {
                id: sample.id.clone(),
                valence: 0.0,
                arousal: 0.0,
                expression: crate::emma::argmax(p),
                au: [0; 12],
            });
        }
    }
    Ok(rows)
}

/// Toy-scale masked-autoencoder pretraining; the resulting checkpoints carry
/// the encoder weights the downstream models initialize from.
pub fn pretrain_mae(cfg: &TrainConfig, data: &[LabeledImage], run_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    setup_run_dir(run_dir, cfg)?;
    let enc_cfg = {
        let mut c = EncoderConfig::by_name(&cfg.preset)?;
        c.drop_path_rate = 0.0;
        c
    };
    let mut params = ParamSet::<f32>::new();
    let mut init_rng = derive_rng(cfg.seed, &[TAG_INIT, 3]);
    let model = MaeModel::new(&mut params, enc_cfg, &mut init_rng);

    let refs: Vec<&LabeledImage> = data.iter().collect();
    let all_ids: Vec<usize> = (0..data.len()).collect();
    let samples = augment_set(&refs, &all_ids, AugmentMode::Eval, cfg.seed, 0)?;

    let mut opt = AdamW::new(
        &params,
        cfg.absolute_lr(),
        1.0,
        enc_cfg.depth,
        cfg.weight_decay,
        cfg.clip_grad,
    );
    let steps_per_epoch = samples.len().div_ceil(cfg.effective_batch());
    let mut history = Vec::new();
    let mut opt_step = 0usize;

    for epoch in 0..cfg.total_epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        {
            let mut rng = derive_rng(cfg.seed, &[TAG_SHUFFLE, epoch as u64]);
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for group in order.chunks(cfg.batch_size * cfg.accum_iters) {
            let mut micro = Vec::new();
            for (micro_i, chunk) in group.chunks(cfg.batch_size).enumerate() {
                let images: Vec<&ImageTensor> =
                    chunk.iter().map(|&i| &samples[i].image).collect();
                let mut rng = derive_rng(
                    cfg.seed,
                    &[TAG_MAE, epoch as u64, opt_step as u64, micro_i as u64],
                );
                let step =
                    mae_pretrain_step(&model, &params, &images, cfg.mask_ratio, &mut rng)?;
                loss_sum += step.loss;
                n += 1;
                micro.push(step.grads);
            }
            let mut grads = accumulate(micro)?;
            let mult = lr_schedule(opt_step, steps_per_epoch, cfg.warmup_epochs, cfg.total_epochs);
            opt.step(&mut params, &mut grads, mult)?;
            opt_step += 1;
        }
        history.push(EpochRow {
            epoch,
            cols: vec![("loss_mae", loss_sum / n.max(1) as f64)],
        });
        write_log(run_dir, &history)?;
        let ckdir = checkpoint_dir(run_dir, epoch);
        save_checkpoint(
            &ckdir,
            &params,
            &crate::backbone::encoder_meta(&enc_cfg, "mae", opt_step, cfg.seed),
        )?;
    }

    let final_loss = history.last().map(|r| r.cols[0].1).unwrap_or(0.0);
    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        best_epoch: cfg.total_epochs - 1,
        best_score: -final_loss,
        final_train_score: -final_loss,
        final_val_score: -final_loss,
        final_checkpoint: checkpoint_dir(run_dir, cfg.total_epochs - 1),
        history,
    };
    write_report(run_dir, cfg, &summary)?;
    Ok(summary)
}

fn write_report(run_dir: &Path, cfg: &TrainConfig, summary: &RunSummary) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "task = {}", cfg.task.name());
    let _ = writeln!(out, "epochs = {}", cfg.total_epochs);
    let _ = writeln!(out, "best_epoch = {}", summary.best_epoch);
    let _ = writeln!(out, "best_score = {:.6}", summary.best_score);
    let _ = writeln!(out, "final_train_score = {:.6}", summary.final_train_score);
    let _ = writeln!(out, "final_val_score = {:.6}", summary.final_val_score);
    let _ = writeln!(
        out,
        "final_checkpoint = {}",
        summary.final_checkpoint.display()
    );
    fs::write(run_dir.join("report.txt"), out).map_err(|e| Error::io(run_dir, e))
}
