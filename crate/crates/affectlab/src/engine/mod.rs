//! Optimization recipe: layer-wise learning-rate decay, linear-warmup cosine
//! schedule, AdamW with global-norm clipping and decoupled weight decay on
//! weight matrices only, gradient accumulation, run directories, and the
//! checkpoint/parameter ensembling schemes.

mod loops;
mod models;

pub use loops::{
    pretrain_mae, scorer_accuracy, train_lsd, train_mtl, train_scorer_standalone, EpochRow,
    RunSummary,
};
pub use models::{
    ensemble_predict, load_model, predict_rows, CotexModel, EmmaModel, LoadedModel,
};

use std::path::PathBuf;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::{GradSet, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// The training-recipe hyperparameter bundle plus method-specific knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub preset: String,
    pub base_lr: f64,
    /// Scale the base rate by effective_batch/256 (the convention the
    /// pretraining lineage uses); disable for a literal rate.
    pub lr_scaling: bool,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub clip_grad: f64,
    pub layer_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub accum_iters: usize,
    pub drop_path: f64,
    pub mask_ratio: f64,
    pub lambda: f64,
    pub seed: u64,
    pub k1: usize,
    pub k2: usize,
    pub exp_sum_variant: bool,
    pub augment: bool,
    pub cnn_epochs: usize,
    pub val_fraction: f64,
    pub init_checkpoint: Option<PathBuf>,
    pub data_n: usize,
}

impl TrainConfig {
    /// Multi-task defaults (recipe table, EMMA column), desk-scale data.
    pub fn emma_default() -> Self {
        TrainConfig {
            task: Task::Mtl,
            preset: "tiny".into(),
            base_lr: 5e-4,
            lr_scaling: true,
            weight_decay: 0.05,
            batch_size: 100,
            clip_grad: 0.05,
            layer_decay: 0.65,
            warmup_epochs: 5,
            total_epochs: 30,
            accum_iters: 4,
            drop_path: 0.1,
            mask_ratio: 0.0,
            lambda: 0.0,
            seed: 0,
            k1: 8,
            k2: 8,
            exp_sum_variant: false,
            augment: true,
            cnn_epochs: 5,
            val_fraction: 0.0,
            init_checkpoint: None,
            data_n: 512,
        }
    }

    /// Expression-only defaults (recipe table, Masked CoTEX column).
    pub fn cotex_default() -> Self {
        TrainConfig {
            task: Task::Lsd,
            weight_decay: 0.15,
            batch_size: 1024,
            total_epochs: 6,
            mask_ratio: 0.75,
            lambda: 1.0,
            ..Self::emma_default()
        }
        .with_task(Task::Lsd)
    }

    fn with_task(mut self, task: Task) -> Self {
        self.task = task;
        self
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accum_iters
    }

    /// The learning rate actually applied to head-group parameters.
    pub fn absolute_lr(&self) -> f64 {
        if self.lr_scaling {
            self.base_lr * self.effective_batch() as f64 / 256.0
        } else {
            self.base_lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.accum_iters == 0 {
            return Err(Error::Config("accum_iters must be >= 1".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("mask_ratio must be in [0, 1)".into()));
        }
        if !(0.0..=0.9).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 0.9]".into()));
        }
        Ok(())
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        vec![
            ("task".into(), self.task.name().into()),
            ("preset".into(), self.preset.clone()),
            ("base_lr".into(), format!("{}", self.base_lr)),
            ("lr_scaling".into(), self.lr_scaling.to_string()),
            ("weight_decay".into(), format!("{}", self.weight_decay)),
            ("batch_size".into(), self.batch_size.to_string()),
            ("clip_grad".into(), format!("{}", self.clip_grad)),
            ("layer_decay".into(), format!("{}", self.layer_decay)),
            ("warmup_epochs".into(), self.warmup_epochs.to_string()),
            ("total_epochs".into(), self.total_epochs.to_string()),
            ("accum_iters".into(), self.accum_iters.to_string()),
            ("drop_path".into(), format!("{}", self.drop_path)),
            ("mask_ratio".into(), format!("{}", self.mask_ratio)),
            ("lambda".into(), format!("{}", self.lambda)),
            ("seed".into(), self.seed.to_string()),
            ("k1".into(), self.k1.to_string()),
            ("k2".into(), self.k2.to_string()),
            ("exp_sum_variant".into(), self.exp_sum_variant.to_string()),
            ("augment".into(), self.augment.to_string()),
            ("cnn_epochs".into(), self.cnn_epochs.to_string()),
            ("val_fraction".into(), format!("{}", self.val_fraction)),
            (
                "init_checkpoint".into(),
                self.init_checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("data_n".into(), self.data_n.to_string()),
        ]
    }
}

/// Parameter-group index for layer-wise decay: patch embedding and class
/// token are group 0, block i is group i+1, everything else (final norm and
/// all heads) is group depth+1.
pub fn param_group(name: &str, depth: usize) -> usize {
    let bare = name
        .strip_prefix("view1.")
        .or_else(|| name.strip_prefix("view2."))
        .unwrap_or(name);
    if bare.starts_with("patch_embed") || bare == "cls_token" {
        return 0;
    }
    if let Some(rest) = bare.strip_prefix("blocks.") {
        if let Some((idx, _)) = rest.split_once('.') {
            if let Ok(i) = idx.parse::<usize>() {
                return i + 1;
            }
        }
    }
    depth + 1
}

/// Geometric layer-wise rates: group g gets base_lr * layer_decay^(D+1-g),
/// so heads (group D+1) train at exactly base_lr.
pub fn layer_lrs(base_lr: f64, layer_decay: f64, depth: usize) -> Vec<f64> {
    (0..=depth + 1)
        .map(|g| base_lr * layer_decay.powi((depth + 1 - g) as i32))
        .collect()
}

/// Decoupled weight decay applies to weight matrices only: biases,
/// normalization parameters and learned tokens are excluded.
pub fn applies_weight_decay(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.contains("norm")
        || name.ends_with("cls_token")
        || name.ends_with("mask_token"))
}

/// Per-step multiplier: linear warmup from 0 to 1 over the warmup epochs,
/// then cosine decay to 0 at the final epoch; steps beyond the end clamp to
/// the final value.
pub fn lr_schedule(
    step: usize,
    steps_per_epoch: usize,
    warmup_epochs: usize,
    total_epochs: usize,
) -> f64 {
    let warmup = warmup_epochs * steps_per_epoch;
    let total = total_epochs * steps_per_epoch;
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW state; moment buffers are allocated on first use per parameter.
pub struct AdamW<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: usize,
    /// Per-parameter group learning rate (layer-wise decay applied).
    group_lrs: Vec<f64>,
    pub weight_decay: f64,
    pub clip_grad: f64,
    decay: Vec<bool>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, absolute_lr: f64, layer_decay: f64, depth: usize, weight_decay: f64, clip_grad: f64) -> Self {
        let lrs = layer_lrs(absolute_lr, layer_decay, depth);
        AdamW {
            m: params
                .entries()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            v: params
                .entries()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            t: 0,
            group_lrs: params
                .names()
                .map(|n| lrs[param_group(n, depth)])
                .collect(),
            weight_decay,
            clip_grad,
            decay: params.names().map(applies_weight_decay).collect(),
        }
    }

    /// Clip the global gradient norm, then apply one decoupled-AdamW update
    /// scaled by the schedule multiplier.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &mut GradSet<T>,
        lr_multiplier: f64,
    ) -> Result<()> {
        for i in 0..params.len() {
            if let Some(g) = grads.get(i) {
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::AbortStep(format!(
                        "non-finite gradient for parameter {}",
                        params.name(i)
                    )));
                }
            }
        }
        let norm = grads.global_norm();
        if norm > self.clip_grad {
            grads.scale_assign(T::from_f64(self.clip_grad / norm));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let one_m_b1 = T::from_f64(1.0 - ADAM_BETA1);
        let one_m_b2 = T::from_f64(1.0 - ADAM_BETA2);
        let eps = T::from_f64(ADAM_EPS);
        for i in 0..params.len() {
            let lr = self.group_lrs[i] * lr_multiplier;
            let lr_t = T::from_f64(lr / bc1);
            let decay = if self.decay[i] {
                T::from_f64(lr * self.weight_decay)
            } else {
                T::ZERO
            };
            let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
            let g_opt = grads.get(i);
            let p = params.tensor_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match g_opt {
                Some(g) => {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = b1 * *mv + one_m_b1 * gv;
                        *vv = b2 * *vv + one_m_b2 * gv * gv;
                        let denom = (*vv).sqrt() * inv_sqrt_bc2 + eps;
                        *pv = *pv - lr_t * *mv / denom - decay * *pv;
                    }
                }
                None => {
                    // no gradient flowed: moments still decay, weight decay
                    // still applies to weight matrices
                    for ((pv, mv), vv) in
                        p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut())
                    {
                        *mv = b1 * *mv;
                        *vv = b2 * *vv;
                        let denom = (*vv).sqrt() * inv_sqrt_bc2 + eps;
                        *pv = *pv - lr_t * *mv / denom - decay * *pv;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Average gradients over accumulated micro-batches; the result feeds one
/// optimizer step.
pub fn accumulate<T: Scalar>(mut micro: Vec<GradSet<T>>) -> Result<GradSet<T>> {
    if micro.is_empty() {
        return Err(Error::Config("no micro-batches to accumulate".into()));
    }
    let n = micro.len();
    let mut total = micro.remove(0);
    for g in &micro {
        total.add_assign(g);
    }
    total.scale_assign(T::from_f64(1.0 / n as f64));
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::derive_rng;
    use rand::Rng;

    #[test]
    fn layer_lrs_worked_example() {
        // depth 2: heads 5e-4, block2 3.25e-4, block1 2.1125e-4,
        // patch embed 1.373125e-4
        let lrs = layer_lrs(5e-4, 0.65, 2);
        assert_eq!(lrs.len(), 4);
        assert!((lrs[3] - 5e-4).abs() < 1e-18);
        assert!((lrs[2] - 3.25e-4).abs() < 1e-12);
        assert!((lrs[1] - 2.1125e-4).abs() < 1e-12);
        assert!((lrs[0] - 1.373125e-4).abs() < 1e-12);

        // decay 1 -> all equal; monotone non-decreasing toward the head
        let flat = layer_lrs(5e-4, 1.0, 4);
        assert!(flat.iter().all(|&l| (l - 5e-4).abs() < 1e-18));
        let dec = layer_lrs(1e-3, 0.65, 6);
        assert!(dec.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn param_groups_follow_names() {
        assert_eq!(param_group("patch_embed.weight", 4), 0);
        assert_eq!(param_group("cls_token", 4), 0);
        assert_eq!(param_group("blocks.0.attn.qkv.weight", 4), 1);
        assert_eq!(param_group("blocks.3.mlp.fc2.bias", 4), 4);
        assert_eq!(param_group("norm.weight", 4), 5);
        assert_eq!(param_group("multitask_head.weight", 4), 5);
        assert_eq!(param_group("view2.blocks.1.norm1.weight", 4), 2);
    }

    #[test]
    fn weight_decay_exclusions() {
        assert!(applies_weight_decay("blocks.0.attn.qkv.weight"));
        assert!(applies_weight_decay("multitask_head.weight"));
        assert!(!applies_weight_decay("blocks.0.attn.qkv.bias"));
        assert!(!applies_weight_decay("blocks.0.norm1.weight"));
        assert!(!applies_weight_decay("norm.bias"));
        assert!(!applies_weight_decay("cls_token"));
        assert!(!applies_weight_decay("decoder.mask_token"));
    }

    #[test]
    fn schedule_shape() {
        let spe = 10;
        // warmup start is exactly 0, warmup end exactly 1
        assert_eq!(lr_schedule(0, spe, 5, 30), 0.0);
        assert_eq!(lr_schedule(50, spe, 5, 30), 1.0);
        // cosine midpoint: (300-50)/2 + 50 = 175 -> 0.5
        assert!((lr_schedule(175, spe, 5, 30) - 0.5).abs() < 1e-12);
        // beyond the end clamps to the final value
        assert_eq!(lr_schedule(300, spe, 5, 30), 0.0);
        assert_eq!(lr_schedule(10_000, spe, 5, 30), 0.0);
        // continuity at the junction
        let before = lr_schedule(49, spe, 5, 30);
        let after = lr_schedule(51, spe, 5, 30);
        assert!(before < 1.0 && after < 1.0);
        assert!((lr_schedule(50, spe, 5, 30) - 1.0).abs() < 1e-12);
        assert!(1.0 - before < 0.03 && 1.0 - after < 0.001);
    }

    fn tiny_params(seed: u64) -> (ParamSet<f64>, GradSet<f64>) {
        let mut params = ParamSet::<f64>::new();
        let mut rng = derive_rng(seed, &[1]);
        params.add(
            "blocks.0.attn.qkv.weight",
            crate::nn::xavier_uniform(4, 4, &mut rng),
        );
        params.add("blocks.0.attn.qkv.bias", Tensor::zeros(&[4]));
        params.add("norm.weight", Tensor::full(&[4], 1.0));
        let grads = GradSet::zeros(&params);
        (params, grads)
    }

    #[test]
    fn clipping_rescales_to_the_threshold() {
        let (mut params, mut grads) = tiny_params(1);
        let mut opt = AdamW::new(&params, 1e-3, 1.0, 1, 0.0, 0.05);
        // norm = sqrt(16 * 2.5^2) = 10 -> rescaled by 0.05/10 = 0.005
        grads.set(0, Tensor::from_vec(&[4, 4], vec![10.0 / 4.0; 16]));
        assert!((grads.global_norm() - 10.0).abs() < 1e-12);
        opt.step(&mut params, &mut grads, 1.0).unwrap();
        assert!((grads.global_norm() - 0.05).abs() < 1e-12);
        // post-clip invariant
        assert!(grads.global_norm() <= 0.05 + 1e-9);
    }

    #[test]
    fn zero_grads_zero_decay_is_a_fixed_point() {
        let (mut params, mut grads) = tiny_params(2);
        let before: Vec<Vec<f64>> = params.entries().map(|(_, t)| t.data().to_vec()).collect();
        let mut opt = AdamW::new(&params, 1e-3, 0.65, 1, 0.0, 0.05);
        opt.step(&mut params, &mut grads, 1.0).unwrap();
        let after: Vec<Vec<f64>> = params.entries().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn weight_decay_shrinks_only_weight_matrices() {
        let (mut params, mut grads) = tiny_params(3);
        let w_before = params.get("blocks.0.attn.qkv.weight").unwrap().clone();
        let b_before = params.get("blocks.0.attn.qkv.bias").unwrap().clone();
        let n_before = params.get("norm.weight").unwrap().clone();
        let mut opt = AdamW::new(&params, 1e-2, 1.0, 1, 0.5, 1e9);
        opt.step(&mut params, &mut grads, 1.0).unwrap();
        let w_after = params.get("blocks.0.attn.qkv.weight").unwrap();
        for (a, b) in w_after.data().iter().zip(w_before.data()) {
            if *b != 0.0 {
                assert!(a.abs() < b.abs(), "weight did not shrink");
            }
        }
        assert_eq!(params.get("blocks.0.attn.qkv.bias").unwrap().data(), b_before.data());
        assert_eq!(params.get("norm.weight").unwrap().data(), n_before.data());
    }

    #[test]
    fn nonfinite_gradient_aborts_with_diagnostics() {
        let (mut params, mut grads) = tiny_params(4);
        let bad = Tensor::from_vec(&[4, 4], {
            let mut v = vec![0.0; 16];
            v[3] = f64::NAN;
            v
        });
        grads.set(0, bad);
        let mut opt = AdamW::new(&params, 1e-3, 1.0, 1, 0.0, 0.05);
        let err = opt.step(&mut params, &mut grads, 1.0).unwrap_err();
        match err {
            Error::AbortStep(msg) => assert!(msg.contains("blocks.0.attn.qkv.weight")),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn step_is_deterministic() {
        let mut rng = derive_rng(5, &[2]);
        let run = |seed: u64| -> Vec<f64> {
            let (mut params, mut grads) = tiny_params(seed);
            let g = Tensor::from_vec(&[4, 4], (0..16).map(|i| (i as f64) * 0.01).collect());
            grads.set(0, g);
            let mut opt = AdamW::new(&params, 1e-3, 0.65, 1, 0.05, 0.05);
            opt.step(&mut params, &mut grads, 0.7).unwrap();
            params.entries().flat_map(|(_, t)| t.data().to_vec()).collect()
        };
        assert_eq!(run(7), run(7));
        let _ = rng.random::<u64>();
    }

    #[test]
    fn accumulate_mean_and_empty_error() {
        let (params, _) = tiny_params(6);
        let mut a = GradSet::zeros(&params);
        a.set(0, Tensor::full(&[4, 4], 1.0));
        let mut b = GradSet::zeros(&params);
        b.set(0, Tensor::full(&[4, 4], 3.0));
        let avg = accumulate(vec![a, b]).unwrap();
        assert!(avg.get(0).unwrap().data().iter().all(|&v| v == 2.0));
        assert!(matches!(
            accumulate::<f64>(vec![]),
            Err(Error::Config(_))
        ));
    }
}
