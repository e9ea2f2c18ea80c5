//! Two-branch multi-task model: the transformer emits action-unit and
//! expression scores, a (frozen) convolutional scorer emits a second
//! expression score, and their concatenation — gradient-detached — feeds a
//! small two-layer head that regresses valence/arousal. The detachment is
//! structural: no VA gradient can reach the encoder, the multi-task head or
//! the convolutional branch.

use crate::backbone::{
    BatchTokens, ConvScorer, DropPlan, EncoderConfig, ExpressionScorer, VitEncoder,
};
use crate::data::{patchify, FaceSample, Labels, PredictionRow, NUM_AUS};
use crate::error::{Error, Result};
use crate::nn::{Bound, GradSet, Linear, ParamSet};
use crate::objectives::{loss_au_tape, loss_exp_tape, loss_va_tape, MtlLoss};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const VA_HIDDEN: usize = 32;

pub struct EmmaLayout {
    pub encoder: VitEncoder,
    pub multitask_head: Linear,
    pub va_fc1: Linear,
    pub va_fc2: Linear,
    pub k1: usize,
    pub k2: usize,
}

impl EmmaLayout {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        cfg: EncoderConfig,
        k1: usize,
        k2: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let encoder = VitEncoder::new(params, "", cfg, rng);
        let multitask_head = Linear::new(
            params,
            "multitask_head",
            cfg.embed_dim,
            NUM_AUS + k1,
            rng,
        );
        let feature_len = NUM_AUS + k1 + k2;
        let va_fc1 = Linear::new(params, "va_head.fc1", feature_len, VA_HIDDEN, rng);
        let va_fc2 = Linear::new(params, "va_head.fc2", VA_HIDDEN, 2, rng);
        EmmaLayout {
            encoder,
            multitask_head,
            va_fc1,
            va_fc2,
            k1,
            k2,
        }
    }

    pub fn feature_len(&self) -> usize {
        NUM_AUS + self.k1 + self.k2
    }
}

/// Tape handles for one forward pass.
pub struct EmmaVars {
    pub au_logits: Var,
    pub exp1_logits: Var,
    pub exp2_logits: Var,
    pub va: Var,
}

/// Forward with externally supplied (frozen) CNN expression logits.
pub fn emma_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    layout: &EmmaLayout,
    batch: &BatchTokens<T>,
    exp2_values: &Tensor<T>,
    drop: Option<&DropPlan<T>>,
) -> EmmaVars {
    let exp2 = tape.constant(exp2_values.clone());
    emma_heads(tape, bound, layout, batch, exp2, drop)
}

/// Forward with the convolutional branch inside the tape; used to verify the
/// stop-gradient property over every parameter, including the CNN's.
pub fn emma_forward_joint<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    layout: &EmmaLayout,
    cnn: &ConvScorer,
    batch: &BatchTokens<T>,
    images: &Tensor<T>,
    drop: Option<&DropPlan<T>>,
) -> EmmaVars {
    let b = batch.batch;
    let imgs = tape.constant(images.clone());
    let exp2 = cnn.forward(tape, bound, imgs, b);
    emma_heads(tape, bound, layout, batch, exp2, drop)
}

fn emma_heads<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    layout: &EmmaLayout,
    batch: &BatchTokens<T>,
    exp2_logits: Var,
    drop: Option<&DropPlan<T>>,
) -> EmmaVars {
    let enc = layout.encoder.forward(tape, bound, batch, drop, true);
    let mt = layout.multitask_head.forward(tape, bound, enc.pooled);
    let au_logits = tape.select_cols(mt, 0, NUM_AUS);
    let exp1_logits = tape.select_cols(mt, NUM_AUS, NUM_AUS + layout.k1);

    // VA feature: concatenated scores, detached so VA gradients stop here.
    let feature = tape.concat_cols(&[au_logits, exp1_logits, exp2_logits]);
    let feature = tape.detach(feature);
    let h = layout.va_fc1.forward(tape, bound, feature);
    let h = tape.relu(h);
    let va = layout.va_fc2.forward(tape, bound, h);
    EmmaVars {
        au_logits,
        exp1_logits,
        exp2_logits,
        va,
    }
}

/// Raw per-sample model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScores {
    pub au_logits: Vec<f64>,
    pub exp_logits: Vec<f64>,
    pub exp2_logits: Vec<f64>,
    pub va: (f64, f64),
}

/// Thresholded/clamped decisions: VA clamped to [-1, 1], expression argmax
/// over the transformer's logits, AU positive iff sigmoid(logit) > 0.5
/// (strictly, so a zero logit decides 0).
pub fn decide(scores: &TaskScores) -> (f64, f64, i32, [u8; NUM_AUS]) {
    let mut au = [0u8; NUM_AUS];
    for (j, &l) in scores.au_logits.iter().enumerate() {
        au[j] = u8::from(l > 0.0);
    }
    (
        scores.va.0.clamp(-1.0, 1.0),
        scores.va.1.clamp(-1.0, 1.0),
        argmax(&scores.exp_logits),
        au,
    )
}

pub fn argmax(v: &[f64]) -> i32 {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as i32
}

fn extract_scores<T: Scalar>(tape: &Tape<T>, vars: &EmmaVars, batch: usize) -> Vec<TaskScores> {
    let au = tape.value(vars.au_logits).to_f64_vec();
    let e1 = tape.value(vars.exp1_logits).to_f64_vec();
    let e2 = tape.value(vars.exp2_logits).to_f64_vec();
    let va = tape.value(vars.va).to_f64_vec();
    let k1 = e1.len() / batch;
    let k2 = e2.len() / batch;
    (0..batch)
        .map(|b| TaskScores {
            au_logits: au[b * NUM_AUS..(b + 1) * NUM_AUS].to_vec(),
            exp_logits: e1[b * k1..(b + 1) * k1].to_vec(),
            exp2_logits: e2[b * k2..(b + 1) * k2].to_vec(),
            va: (va[b * 2], va[b * 2 + 1]),
        })
        .collect()
}

pub struct EmmaStep<T: Scalar> {
    pub loss: MtlLoss,
    pub grads: GradSet<T>,
    pub scores: Vec<TaskScores>,
}

/// Loss selection for a training step; the full objective uses all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelect {
    All,
    VaOnly,
}

/// One multi-task training step on an augmented batch: forward, the
/// unweighted three-task loss, and gradients for every trainable parameter.
/// With `exp_sum_variant` the expression loss is computed on the sum of the
/// two expression scores instead of the transformer's alone.
pub fn emma_train_step<T: Scalar>(
    layout: &EmmaLayout,
    params: &ParamSet<T>,
    scorer: &dyn ExpressionScorer<T>,
    batch: &[FaceSample],
    exp_sum_variant: bool,
    drop: Option<&DropPlan<T>>,
) -> Result<EmmaStep<T>> {
    let images: Vec<&crate::data::ImageTensor> = batch.iter().map(|s| &s.image).collect();
    let exp2 = scorer.score(&images)?;
    emma_train_step_with_scores(layout, params, batch, &exp2, exp_sum_variant, drop, LossSelect::All)
}

/// Training step with precomputed CNN logits (the scorer is frozen, so its
/// outputs can be cached by the caller when augmentation is deterministic).
pub fn emma_train_step_with_scores<T: Scalar>(
    layout: &EmmaLayout,
    params: &ParamSet<T>,
    batch: &[FaceSample],
    exp2: &Tensor<T>,
    exp_sum_variant: bool,
    drop: Option<&DropPlan<T>>,
    select: LossSelect,
) -> Result<EmmaStep<T>> {
    if exp_sum_variant && layout.k1 != layout.k2 {
        return Err(Error::Config(format!(
            "exp_sum_variant requires matching class counts, got {} vs {}",
            layout.k1, layout.k2
        )));
    }
    let seqs: Vec<crate::data::PatchSequence> = batch
        .iter()
        .map(|s| patchify(&s.image, layout.encoder.cfg.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&crate::data::PatchSequence> = seqs.iter().collect();
    let tokens = BatchTokens::from_sequences(&refs)?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars = emma_forward_tape(&mut tape, &bound, layout, &tokens, exp2, drop);
    let scores = extract_scores(&tape, &vars, batch.len());

    let labels: Vec<&Labels> = batch.iter().map(|s| &s.labels).collect();
    let (loss_values, total) = build_mtl_loss(
        &mut tape,
        &vars,
        &labels,
        layout.k1,
        exp_sum_variant,
        select,
    );

    let grads = match total {
        Some(total) => {
            let g = tape.backward(total);
            GradSet::harvest(params, &bound, &g)
        }
        None => GradSet::zeros(params),
    };
    Ok(EmmaStep {
        loss: loss_values,
        grads,
        scores,
    })
}

fn build_mtl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &EmmaVars,
    labels: &[&Labels],
    k1: usize,
    exp_sum_variant: bool,
    select: LossSelect,
) -> (MtlLoss, Option<Var>) {
    let au_labels: Vec<u8> = labels.iter().flat_map(|l| l.au.values).collect();
    let au_valid: Vec<bool> = labels.iter().map(|l| l.au.valid).collect();
    let exp_labels: Vec<i32> = labels
        .iter()
        .map(|l| {
            let e = l.expression.0;
            if e >= 0 && (e as usize) < k1 {
                e
            } else {
                -1
            }
        })
        .collect();
    let va_labels: Vec<(f64, f64)> = labels
        .iter()
        .map(|l| (l.va.valence, l.va.arousal))
        .collect();
    let va_valid: Vec<bool> = labels.iter().map(|l| l.va.is_valid()).collect();

    let mut terms: Vec<Var> = Vec::new();
    let mut out = MtlLoss {
        total: 0.0,
        au: 0.0,
        va: 0.0,
        exp: 0.0,
        va_skipped: false,
    };

    if select == LossSelect::All {
        let l_au = loss_au_tape(tape, vars.au_logits, &au_labels, &au_valid);
        out.au = tape.value(l_au).item().to_f64();
        terms.push(l_au);

        let exp_input = if exp_sum_variant {
            tape.add(vars.exp1_logits, vars.exp2_logits)
        } else {
            vars.exp1_logits
        };
        let l_exp = loss_exp_tape(tape, exp_input, &exp_labels);
        out.exp = tape.value(l_exp).item().to_f64();
        terms.push(l_exp);
    }

    match loss_va_tape(tape, vars.va, &va_labels, &va_valid) {
        Some(l_va) => {
            out.va = tape.value(l_va).item().to_f64();
            terms.push(l_va);
        }
        None => out.va_skipped = true,
    }
    out.total = out.au + out.va + out.exp;

    let total = terms.into_iter().reduce(|a, b| tape.add(a, b));
    (out, total)
}

/// Eval-mode forward over raw (already augmented) images.
pub fn emma_predict<T: Scalar>(
    layout: &EmmaLayout,
    params: &ParamSet<T>,
    scorer: &dyn ExpressionScorer<T>,
    images: &[&crate::data::ImageTensor],
) -> Result<Vec<TaskScores>> {
    let exp2 = scorer.score(images)?;
    emma_scores_with_exp2(layout, params, images, &exp2)
}

pub fn emma_scores_with_exp2<T: Scalar>(
    layout: &EmmaLayout,
    params: &ParamSet<T>,
    images: &[&crate::data::ImageTensor],
    exp2: &Tensor<T>,
) -> Result<Vec<TaskScores>> {
    let seqs: Vec<crate::data::PatchSequence> = images
        .iter()
        .map(|img| patchify(img, layout.encoder.cfg.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&crate::data::PatchSequence> = seqs.iter().collect();
    let tokens = BatchTokens::from_sequences(&refs)?;
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let vars = emma_forward_tape(&mut tape, &bound, layout, &tokens, exp2, None);
    Ok(extract_scores(&tape, &vars, images.len()))
}

/// Decisions serialized as a prediction row.
pub fn scores_to_row(id: &str, scores: &TaskScores) -> PredictionRow {
    let (valence, arousal, expression, au) = decide(scores);
    PredictionRow {
        id: id.to_string(),
        valence,
        arousal,
        expression,
        au,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{batch_images_tensor, ConstantScorer, TrainedScorer};
    use crate::data::{synth_dataset, AugmentMode, ImageTensor, Task};
    use crate::nn::derive_rng;
    use rand::Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            patch_size: 32,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            drop_path_rate: 0.0,
            class_token: true,
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<FaceSample> {
        synth_dataset(n, Task::Mtl, seed)
            .into_iter()
            .map(|s| {
                let mut rng = derive_rng(seed, &[77, 1]);
                FaceSample {
                    id: s.id,
                    image: crate::data::augment(&s.image, AugmentMode::Eval, &mut rng).unwrap(),
                    labels: s.labels,
                }
            })
            .collect()
    }

    fn build_emma(seed: u64) -> (EmmaLayout, ParamSet<f64>, ConvScorer) {
        let mut params = ParamSet::<f64>::new();
        let mut rng = derive_rng(seed, &[1]);
        let layout = EmmaLayout::new(&mut params, small_cfg(), 8, 8, &mut rng);
        let cnn = ConvScorer::new(&mut params, "cnn", 8, &mut rng);
        (layout, params, cnn)
    }

    fn build_scorer(seed: u64) -> TrainedScorer<f64> {
        let mut params = ParamSet::<f64>::new();
        let mut rng = derive_rng(seed, &[2]);
        let layout = ConvScorer::new(&mut params, "cnn", 8, &mut rng);
        TrainedScorer { params, layout }
    }

    #[test]
    fn zero_va_head_outputs_bias_regardless_of_image() {
        let (layout, mut params, _) = build_emma(1);
        params.set(
            "va_head.fc2.weight",
            Tensor::zeros(&[2, VA_HIDDEN]),
        );
        params.set("va_head.fc2.bias", Tensor::from_vec(&[2], vec![0.31, -0.12]));
        let batch = samples(2, 5);
        let scorer = build_scorer(9);
        let imgs: Vec<&ImageTensor> = batch.iter().map(|s| &s.image).collect();
        let scores = emma_predict(&layout, &params, &scorer, &imgs).unwrap();
        for s in &scores {
            assert!((s.va.0 - 0.31).abs() < 1e-12);
            assert!((s.va.1 - (-0.12)).abs() < 1e-12);
        }
    }

    #[test]
    fn va_loss_gradients_stop_at_the_feature() {
        // joint in-tape forward: encoder, heads and CNN all trainable, then
        // backward of the VA loss alone
        let (layout, params, cnn) = build_emma(2);
        let batch = samples(3, 6);
        let seqs: Vec<_> = batch
            .iter()
            .map(|s| patchify(&s.image, 32).unwrap())
            .collect();
        let refs: Vec<_> = seqs.iter().collect();
        let tokens = BatchTokens::from_sequences(&refs).unwrap();
        let images = batch_images_tensor::<f64>(
            &batch.iter().map(|s| &s.image).collect::<Vec<_>>(),
        )
        .unwrap();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let vars = emma_forward_joint(&mut tape, &bound, &layout, &cnn, &tokens, &images, None);
        let va_labels: Vec<(f64, f64)> = batch
            .iter()
            .map(|s| (s.labels.va.valence, s.labels.va.arousal))
            .collect();
        let l_va = crate::objectives::loss_va_tape(
            &mut tape,
            vars.va,
            &va_labels,
            &vec![true; batch.len()],
        )
        .unwrap();
        let g = tape.backward(l_va);
        let grads = GradSet::harvest(&params, &bound, &g);

        let mut va_head_max: f64 = 0.0;
        for i in 0..params.len() {
            let name = params.name(i);
            let dense = grads.dense(&params, i);
            let max_abs = dense
                .data()
                .iter()
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            if name.starts_with("va_head.") {
                va_head_max = va_head_max.max(max_abs);
            } else {
                assert_eq!(max_abs, 0.0, "{name} received VA gradient");
            }
        }
        assert!(va_head_max > 1e-8, "va_head gradient too small: {va_head_max}");
    }

    #[test]
    fn va_head_gradient_matches_finite_difference() {
        let (layout, params, _) = build_emma(3);
        let batch = samples(3, 7);
        let scorer = ConstantScorer::<f64> {
            logits: vec![0.1; 8],
        };
        let step = emma_train_step(&layout, &params, &scorer, &batch, false, None).unwrap();
        let pid = params.index_of("va_head.fc1.weight").unwrap();
        let mut rng = derive_rng(4, &[3]);
        let idx = rng.random_range(0..params.tensor(pid).numel());
        let h = 1e-5;
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.tensor_mut(pid).data_mut()[idx] += delta;
            emma_train_step(&layout, &p, &scorer, &batch, false, None)
                .unwrap()
                .loss
                .total
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let ad = step.grads.dense(&params, pid).data()[idx];
        let denom = fd.abs().max(ad.abs()).max(1e-10);
        assert!((fd - ad).abs() / denom < 1e-4, "fd={fd} ad={ad}");
    }

    #[test]
    fn exp_sum_variant_changes_the_expression_loss() {
        let (layout, params, _) = build_emma(4);
        let batch = samples(4, 8);
        let scorer = ConstantScorer::<f64> {
            logits: vec![0.7, -0.3, 0.2, 0.9, -0.6, 0.1, 0.4, -0.2],
        };
        let a = emma_train_step(&layout, &params, &scorer, &batch, false, None).unwrap();
        let b = emma_train_step(&layout, &params, &scorer, &batch, true, None).unwrap();
        assert!((a.loss.exp - b.loss.exp).abs() > 1e-9);
    }

    #[test]
    fn all_invalid_batch_produces_zero_gradients() {
        let (layout, params, _) = build_emma(5);
        let mut batch = samples(3, 9);
        for s in &mut batch {
            s.labels.va = crate::data::VAPair::invalid();
            s.labels.expression = crate::data::ExpressionLabel(-1);
            s.labels.au.valid = false;
        }
        let scorer = ConstantScorer::<f64> { logits: vec![0.0; 8] };
        let step = emma_train_step(&layout, &params, &scorer, &batch, false, None).unwrap();
        assert_eq!(step.loss.total, 0.0);
        assert!(step.loss.va_skipped);
        for i in 0..params.len() {
            let dense = step.grads.dense(&params, i);
            assert!(dense.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn train_step_is_deterministic() {
        let (layout, params, _) = build_emma(6);
        let batch = samples(2, 10);
        let scorer = ConstantScorer::<f64> { logits: vec![0.0; 8] };
        let a = emma_train_step(&layout, &params, &scorer, &batch, false, None).unwrap();
        let b = emma_train_step(&layout, &params, &scorer, &batch, false, None).unwrap();
        assert_eq!(a.loss, b.loss);
        for i in 0..params.len() {
            assert_eq!(
                a.grads.dense(&params, i).data(),
                b.grads.dense(&params, i).data()
            );
        }
    }

    #[test]
    fn constant_scorer_still_trains_au_and_expression() {
        let (layout, params, _) = build_emma(7);
        let batch = samples(3, 11);
        let scorer = ConstantScorer::<f64> { logits: vec![0.5; 8] };
        let step = emma_train_step(&layout, &params, &scorer, &batch, false, None).unwrap();
        let enc_grad = step
            .grads
            .dense(&params, params.index_of("patch_embed.weight").unwrap());
        assert!(enc_grad.data().iter().any(|&v| v != 0.0));
        let feature_lens: Vec<usize> = step
            .scores
            .iter()
            .map(|s| s.au_logits.len() + s.exp_logits.len() + s.exp2_logits.len())
            .collect();
        assert!(feature_lens.iter().all(|&l| l == layout.feature_len()));
    }

    #[test]
    fn decide_rules() {
        let scores = TaskScores {
            au_logits: vec![0.0, 1.0, -1.0, 0.0, 2.0, -2.0, 0.0, 0.5, -0.5, 0.0, 3.0, -3.0],
            exp_logits: vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.5, 0.6, 0.7],
            exp2_logits: vec![0.0; 8],
            va: (1.7, -0.3),
        };
        let (v, a, e, au) = decide(&scores);
        assert_eq!((v, a), (1.0, -0.3));
        assert_eq!(e, 5);
        // zero logit -> probability exactly 0.5 -> decided 0 (strict >)
        assert_eq!(au, [0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 0]);

        // argmax invariance under positive rescaling
        let scaled = TaskScores {
            exp_logits: scores.exp_logits.iter().map(|&x| x * 3.5).collect(),
            ..scores.clone()
        };
        assert_eq!(decide(&scaled).2, e);
    }
}
