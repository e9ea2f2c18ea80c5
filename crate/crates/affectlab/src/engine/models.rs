//! Trained-model bundles: checkpoint save/load for the multi-task and
//! co-training models, eval-mode prediction, and prediction-averaging
//! ensembles over checkpoints or differently configured runs.

use std::path::Path;

use crate::backbone::{
    load_checkpoint, save_checkpoint, Checkpoint, ConvScorer, EncoderConfig, TrainedScorer,
};
use crate::cotex::{cotex_predict, CotexLayout, TwinParams};
use crate::data::{ImageTensor, PredictionRow, Task, NUM_AUS};
use crate::emma::{argmax, emma_predict, EmmaLayout, TaskScores};
use crate::error::{Error, Result};
use crate::nn::{derive_rng, ParamSet};
use crate::objectives::softmax;

pub struct EmmaModel {
    pub cfg: EncoderConfig,
    pub layout: EmmaLayout,
    pub params: ParamSet<f32>,
    pub scorer: TrainedScorer<f32>,
}

pub struct CotexModel {
    pub cfg: EncoderConfig,
    pub layout: CotexLayout,
    pub twin: TwinParams<f32>,
    pub classes: usize,
}

pub enum LoadedModel {
    Emma(EmmaModel),
    Cotex(CotexModel),
}

impl LoadedModel {
    pub fn task(&self) -> Task {
        match self {
            LoadedModel::Emma(_) => Task::Mtl,
            LoadedModel::Cotex(_) => Task::Lsd,
        }
    }
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing meta key {key}")))
}

#[allow(clippy::too_many_arguments)]
pub fn save_emma(
    dir: &Path,
    cfg: &EncoderConfig,
    k1: usize,
    k2: usize,
    params: &ParamSet<f32>,
    cnn_params: &ParamSet<f32>,
    extra_meta: &[(String, String)],
) -> Result<()> {
    let mut merged = ParamSet::<f32>::new();
    for (n, t) in params.entries() {
        merged.add(n.to_string(), t.clone());
    }
    for (n, t) in cnn_params.entries() {
        merged.add(n.to_string(), t.clone());
    }
    let mut meta = crate::backbone::encoder_meta(cfg, "emma", 0, 0);
    meta.push(("k1".into(), k1.to_string()));
    meta.push(("k2".into(), k2.to_string()));
    meta.extend(extra_meta.iter().cloned());
    save_checkpoint(dir, &merged, &meta)
}

pub fn save_cotex(
    dir: &Path,
    cfg: &EncoderConfig,
    classes: usize,
    twin: &TwinParams<f32>,
    extra_meta: &[(String, String)],
) -> Result<()> {
    let mut merged = ParamSet::<f32>::new();
    for (n, t) in twin.view1.entries() {
        merged.add(format!("view1.{n}"), t.clone());
    }
    for (n, t) in twin.view2.entries() {
        merged.add(format!("view2.{n}"), t.clone());
    }
    let mut meta = crate::backbone::encoder_meta(cfg, "cotex", 0, 0);
    meta.push(("classes".into(), classes.to_string()));
    meta.extend(extra_meta.iter().cloned());
    save_checkpoint(dir, &merged, &meta)
}

/// Rebuild a model skeleton and fill every parameter from the checkpoint.
pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let ck = load_checkpoint(dir)?;
    let kind = ck
        .meta
        .get("kind")
        .ok_or_else(|| Error::IncompatibleCheckpoint("missing kind".into()))?
        .clone();
    let cfg = encoder_cfg_from_meta(&ck)?;
    match kind.as_str() {
        "emma" => {
            let k1 = meta_usize(&ck, "k1")?;
            let k2 = meta_usize(&ck, "k2")?;
            let mut params = ParamSet::<f32>::new();
            let mut rng = derive_rng(0, &[0]);
            let layout = EmmaLayout::new(&mut params, cfg, k1, k2, &mut rng);
            let mut cnn_params = ParamSet::<f32>::new();
            let cnn_layout = ConvScorer::new(&mut cnn_params, "cnn", k2, &mut rng);
            fill_from(&ck, &mut params, "")?;
            fill_from(&ck, &mut cnn_params, "")?;
            Ok(LoadedModel::Emma(EmmaModel {
                cfg,
                layout,
                params,
                scorer: TrainedScorer {
                    params: cnn_params,
                    layout: cnn_layout,
                },
            }))
        }
        "cotex" => {
            let classes = meta_usize(&ck, "classes")?;
            let mut rng = derive_rng(0, &[0]);
            let mut view1 = ParamSet::<f32>::new();
            let layout = CotexLayout::new(&mut view1, cfg, classes, &mut rng);
            let mut view2 = ParamSet::<f32>::new();
            let _ = CotexLayout::new(&mut view2, cfg, classes, &mut rng);
            fill_from(&ck, &mut view1, "view1.")?;
            fill_from(&ck, &mut view2, "view2.")?;
            Ok(LoadedModel::Cotex(CotexModel {
                cfg,
                layout,
                twin: TwinParams { view1, view2 },
                classes,
            }))
        }
        other => Err(Error::IncompatibleCheckpoint(format!(
            "cannot load checkpoint of kind '{other}' as a model"
        ))),
    }
}

fn encoder_cfg_from_meta(ck: &Checkpoint) -> Result<EncoderConfig> {
    let get = |k: &str| {
        ck.meta
            .get(k)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing meta key {k}")))
    };
    Ok(EncoderConfig {
        patch_size: get("patch_size")?.parse().map_err(bad_meta)?,
        embed_dim: get("embed_dim")?.parse().map_err(bad_meta)?,
        depth: get("depth")?.parse().map_err(bad_meta)?,
        heads: get("heads")?.parse().map_err(bad_meta)?,
        mlp_ratio: get("mlp_ratio")?.parse().map_err(bad_meta)?,
        drop_path_rate: get("drop_path_rate")?.parse().map_err(bad_meta)?,
        class_token: get("class_token")?.parse().map_err(bad_meta)?,
    })
}

fn bad_meta<E>(_: E) -> Error {
    Error::IncompatibleCheckpoint("malformed meta value".into())
}

fn fill_from(ck: &Checkpoint, target: &mut ParamSet<f32>, prefix: &str) -> Result<()> {
    let names: Vec<String> = target.names().map(str::to_string).collect();
    for name in names {
        let key = format!("{prefix}{name}");
        let src = ck.params.get(&key).ok_or_else(|| {
            Error::IncompatibleCheckpoint(format!("checkpoint missing parameter {key}"))
        })?;
        if src.shape() != target.get(&name).unwrap().shape() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameter {key} has shape {:?}, expected {:?}",
                src.shape(),
                target.get(&name).unwrap().shape()
            )));
        }
        target.set(&name, src.cast());
    }
    Ok(())
}

/// Probability-space prediction used for averaging across models.
#[derive(Debug, Clone)]
pub struct SoftPrediction {
    pub exp_probs: Vec<f64>,
    pub au_probs: Vec<f64>,
    pub va: (f64, f64),
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn emma_soft(scores: &TaskScores) -> SoftPrediction {
    SoftPrediction {
        exp_probs: softmax(&scores.exp_logits),
        au_probs: scores.au_logits.iter().map(|&l| sigmoid(l)).collect(),
        va: scores.va,
    }
}

pub fn soft_predict(model: &LoadedModel, images: &[&ImageTensor]) -> Result<Vec<SoftPrediction>> {
    match model {
        LoadedModel::Emma(m) => {
            let scores = emma_predict(&m.layout, &m.params, &m.scorer, images)?;
            Ok(scores.iter().map(emma_soft).collect())
        }
        LoadedModel::Cotex(m) => {
            let probs = cotex_predict(&m.layout, &m.twin, images)?;
            Ok(probs
                .into_iter()
                .map(|p| SoftPrediction {
                    exp_probs: p,
                    au_probs: vec![0.0; NUM_AUS],
                    va: (0.0, 0.0),
                })
                .collect())
        }
    }
}

fn decide_soft(id: &str, p: &SoftPrediction) -> PredictionRow {
    let mut au = [0u8; NUM_AUS];
    for (j, &prob) in p.au_probs.iter().enumerate() {
        au[j] = u8::from(prob > 0.5);
    }
    PredictionRow {
        id: id.to_string(),
        valence: p.va.0.clamp(-1.0, 1.0),
        arousal: p.va.1.clamp(-1.0, 1.0),
        expression: argmax(&p.exp_probs),
        au,
    }
}

/// Eval-mode decided predictions for one model.
pub fn predict_rows(
    model: &LoadedModel,
    images: &[&ImageTensor],
    ids: &[String],
) -> Result<Vec<PredictionRow>> {
    let soft = soft_predict(model, images)?;
    Ok(ids
        .iter()
        .zip(&soft)
        .map(|(id, p)| decide_soft(id, p))
        .collect())
}

/// Average the per-model probability vectors (and VA values), then decide.
/// This is the shared machinery behind both the different-epochs and the
/// different-parameters ensembles.
pub fn ensemble_predict(
    models: &[LoadedModel],
    images: &[&ImageTensor],
    ids: &[String],
) -> Result<Vec<PredictionRow>> {
    if models.is_empty() {
        return Err(Error::Config("ensemble needs at least one model".into()));
    }
    let mut soft: Vec<SoftPrediction> = soft_predict(&models[0], images)?;
    for model in &models[1..] {
        let next = soft_predict(model, images)?;
        if next[0].exp_probs.len() != soft[0].exp_probs.len() {
            return Err(Error::Config(
                "ensemble members disagree on class count".into(),
            ));
        }
        for (acc, n) in soft.iter_mut().zip(next) {
            for (a, b) in acc.exp_probs.iter_mut().zip(&n.exp_probs) {
                *a += b;
            }
            for (a, b) in acc.au_probs.iter_mut().zip(&n.au_probs) {
                *a += b;
            }
            acc.va.0 += n.va.0;
            acc.va.1 += n.va.1;
        }
    }
    let k = models.len() as f64;
    for p in soft.iter_mut() {
        for a in p.exp_probs.iter_mut() {
            *a /= k;
        }
        for a in p.au_probs.iter_mut() {
            *a /= k;
        }
        p.va.0 /= k;
        p.va.1 /= k;
    }
    Ok(ids
        .iter()
        .zip(&soft)
        .map(|(id, p)| decide_soft(id, p))
        .collect())
}
