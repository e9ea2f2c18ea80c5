//! Masked co-training for expression recognition: two independently masked
//! views of each image feed two parallel encoders; training couples them
//! with a Jensen-Shannon consistency term on the softmax outputs, inference
//! averages the two full-view predictions.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{random_kept, BatchTokens, DropPlan, EncoderConfig, VitEncoder};
use crate::data::{patchify, FaceSample, ImageTensor, PatchSequence};
use crate::error::{Error, Result};
use crate::nn::{GradSet, Linear, ParamSet};
use crate::objectives::{loss_cotex_tape, softmax, CotexLoss};
use crate::scalar::Scalar;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub n_patches: usize,
    pub kept_count: usize,
}

impl MaskSpec {
    pub fn new(ratio: f64, n_patches: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
        }
        let kept_count = n_patches - (ratio * n_patches as f64).floor() as usize;
        if kept_count < 1 {
            return Err(Error::Config("mask leaves no visible tokens".into()));
        }
        Ok(MaskSpec {
            ratio,
            n_patches,
            kept_count,
        })
    }
}

/// Uniformly random kept set of exactly `spec.kept_count` indices, sorted.
pub fn sample_mask(spec: &MaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    random_kept(spec.n_patches, spec.kept_count, rng)
}

/// Shared layout for both views (parameter indices line up because the two
/// sets are built with the identical construction order).
pub struct CotexLayout {
    pub encoder: VitEncoder,
    pub head: Linear,
    pub classes: usize,
}

impl CotexLayout {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        cfg: EncoderConfig,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let encoder = VitEncoder::new(params, "", cfg, rng);
        let head = Linear::new(params, "head", cfg.embed_dim, classes, rng);
        CotexLayout {
            encoder,
            head,
            classes,
        }
    }
}

/// Independent full parameter sets for the two views.
pub struct TwinParams<T: Scalar> {
    pub view1: ParamSet<T>,
    pub view2: ParamSet<T>,
}

pub struct CotexStep<T: Scalar> {
    pub loss: CotexLoss,
    pub grads1: GradSet<T>,
    pub grads2: GradSet<T>,
    /// Per-sample probability vectors of each masked view (for logging).
    pub probs1: Vec<Vec<f64>>,
    pub probs2: Vec<Vec<f64>>,
}

/// One co-training step: each image is masked twice independently, each view
/// encodes its kept tokens, and both parameter sets receive gradients of
/// lambda * JS + H1 + H2 simultaneously.
#[allow(clippy::too_many_arguments)]
pub fn cotex_train_step<T: Scalar>(
    layout: &CotexLayout,
    twin: &TwinParams<T>,
    batch: &[FaceSample],
    lambda: f64,
    mask_ratio: f64,
    rng: &mut ChaCha8Rng,
    drop1: Option<&DropPlan<T>>,
    drop2: Option<&DropPlan<T>>,
) -> Result<CotexStep<T>> {
    let cfg = &layout.encoder.cfg;
    let spec = MaskSpec::new(mask_ratio, cfg.n_patches())?;
    let mut seqs1 = Vec::with_capacity(batch.len());
    let mut seqs2 = Vec::with_capacity(batch.len());
    for sample in batch {
        let seq = patchify(&sample.image, cfg.patch_size)?;
        seqs1.push(seq.clone().with_kept(sample_mask(&spec, rng)));
        seqs2.push(seq.with_kept(sample_mask(&spec, rng)));
    }
    let labels: Vec<i32> = batch.iter().map(|s| s.labels.expression.0).collect();
    cotex_step_on_views(layout, twin, &seqs1, &seqs2, &labels, lambda, drop1, drop2)
}

/// The differentiable part of a co-training step on prepared views.
#[allow(clippy::too_many_arguments)]
pub fn cotex_step_on_views<T: Scalar>(
    layout: &CotexLayout,
    twin: &TwinParams<T>,
    seqs1: &[PatchSequence],
    seqs2: &[PatchSequence],
    labels: &[i32],
    lambda: f64,
    drop1: Option<&DropPlan<T>>,
    drop2: Option<&DropPlan<T>>,
) -> Result<CotexStep<T>> {
    let refs1: Vec<&PatchSequence> = seqs1.iter().collect();
    let refs2: Vec<&PatchSequence> = seqs2.iter().collect();
    let tokens1 = BatchTokens::from_sequences(&refs1)?;
    let tokens2 = BatchTokens::from_sequences(&refs2)?;

    let mut tape = Tape::new();
    let bound1 = twin.view1.bind(&mut tape);
    let bound2 = twin.view2.bind(&mut tape);
    let enc1 = layout.encoder.forward(&mut tape, &bound1, &tokens1, drop1, true);
    let enc2 = layout.encoder.forward(&mut tape, &bound2, &tokens2, drop2, true);
    let logits1 = layout.head.forward(&mut tape, &bound1, enc1.pooled);
    let logits2 = layout.head.forward(&mut tape, &bound2, enc2.pooled);

    let (total, js, ce1, ce2) = loss_cotex_tape(&mut tape, logits1, logits2, labels, lambda)?;
    let loss = CotexLoss {
        total: tape.value(total).item().to_f64(),
        js: tape.value(js).item().to_f64(),
        ce1: tape.value(ce1).item().to_f64(),
        ce2: tape.value(ce2).item().to_f64(),
    };
    let probs1 = row_softmax(&tape.value(logits1).to_f64_vec(), layout.classes);
    let probs2 = row_softmax(&tape.value(logits2).to_f64_vec(), layout.classes);

    let g = tape.backward(total);
    Ok(CotexStep {
        loss,
        grads1: GradSet::harvest(&twin.view1, &bound1, &g),
        grads2: GradSet::harvest(&twin.view2, &bound2, &g),
        probs1,
        probs2,
    })
}

fn row_softmax(flat: &[f64], k: usize) -> Vec<Vec<f64>> {
    flat.chunks(k).map(softmax).collect()
}

/// Per-view full-sequence (unmasked) probability outputs.
pub fn cotex_view_probs<T: Scalar>(
    layout: &CotexLayout,
    params: &ParamSet<T>,
    images: &[&ImageTensor],
) -> Result<Vec<Vec<f64>>> {
    let seqs: Vec<PatchSequence> = images
        .iter()
        .map(|img| patchify(img, layout.encoder.cfg.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PatchSequence> = seqs.iter().collect();
    let tokens = BatchTokens::from_sequences(&refs)?;
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let enc = layout.encoder.forward(&mut tape, &bound, &tokens, None, true);
    let logits = layout.head.forward(&mut tape, &bound, enc.pooled);
    Ok(row_softmax(
        &tape.value(logits).to_f64_vec(),
        layout.classes,
    ))
}

/// Inference: no masking, average of the two views' softmax outputs.
pub fn cotex_predict<T: Scalar>(
    layout: &CotexLayout,
    twin: &TwinParams<T>,
    images: &[&ImageTensor],
) -> Result<Vec<Vec<f64>>> {
    let p1 = cotex_view_probs(layout, &twin.view1, images)?;
    let p2 = cotex_view_probs(layout, &twin.view2, images)?;
    Ok(p1
        .into_iter()
        .zip(p2)
        .map(|(a, b)| a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect())
        .collect())
}
