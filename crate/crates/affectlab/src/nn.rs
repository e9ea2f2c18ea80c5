//! Named parameter sets, initializers and the layer building blocks shared
//! by the transformer encoder, the MAE decoder and the convolutional scorer.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Deterministic stream derivation: one root seed plus context tags
/// (epoch, step, sample index, purpose) yields an independent RNG, so
/// parallel sample processing never depends on scheduling order.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6A09_E667_F3BC_C908;
    for &t in tags {
        state = splitmix64(state ^ t);
    }
    ChaCha8Rng::seed_from_u64(splitmix64(state))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ordered collection of named parameters. Order is creation order and is
/// part of the determinism contract (checkpoints, optimizer state).
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].0
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.entries[id].1
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.entries[id].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.tensor(i))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(
            self.entries[i].1.shape(),
            tensor.shape(),
            "shape mismatch setting {name}"
        );
        self.entries[i].1 = tensor;
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in &self.entries {
            out.add(n.clone(), t.cast());
        }
        out
    }

    /// Register every parameter as a differentiable leaf on the tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(t.clone()))
                .collect(),
        }
    }

    /// Register every parameter as a constant (frozen model).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| tape.constant(t.clone()))
                .collect(),
        }
    }
}

/// Tape handles for a bound ParamSet, aligned by parameter index.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-parameter gradients aligned with a ParamSet. Missing gradients are
/// exact zeros (parameters the loss does not reach).
pub struct GradSet<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradSet<T> {
    pub fn harvest(params: &ParamSet<T>, bound: &Bound, grads: &crate::tape::Gradients<T>) -> Self {
        GradSet {
            grads: (0..params.len())
                .map(|i| grads.get(bound.var(i)).cloned())
                .collect(),
        }
    }

    pub fn zeros(params: &ParamSet<T>) -> Self {
        GradSet {
            grads: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads[id].as_ref()
    }

    pub fn set(&mut self, id: usize, g: Tensor<T>) {
        self.grads[id] = Some(g);
    }

    /// Dense view: zero tensor where no gradient flowed.
    pub fn dense(&self, params: &ParamSet<T>, id: usize) -> Tensor<T> {
        self.grads[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(params.tensor(id).shape()))
    }

    pub fn add_assign(&mut self, other: &GradSet<T>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            match (a.as_mut(), b) {
                (Some(ga), Some(gb)) => ga.add_assign(gb),
                (None, Some(gb)) => *a = Some(gb.clone()),
                _ => {}
            }
        }
    }

    pub fn scale_assign(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for g in self.grads.iter().flatten() {
            for &v in g.data() {
                let v = v.to_f64();
                sq += v * v;
            }
        }
        sq.sqrt()
    }
}

// ---- initializers ----

pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            // Box-Muller, resampled beyond 2 std (matches common trunc_normal)
            loop {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                if z.abs() <= 2.0 {
                    return T::from_f64(z * std);
                }
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn xavier_uniform<T: Scalar>(
    out_dim: usize,
    in_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data: Vec<T> = (0..out_dim * in_dim)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(&[out_dim, in_dim], data)
}

// ---- layers ----

/// Affine layer, weight stored [out, in].
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(format!("{name}.weight"), xavier_uniform(out_dim, in_dim, rng));
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Var {
        tape.linear(x, bound.var(self.w), bound.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = params.add(format!("{name}.weight"), Tensor::full(&[dim], T::ONE));
        let beta = params.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Var {
        tape.layernorm(x, bound.var(self.gamma), bound.var(self.beta), 1e-6)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(params, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(tape, bound, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, bound, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SelfAttention {
            qkv: Linear::new(params, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(params, &format!("{name}.proj"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        batch: usize,
    ) -> Var {
        let qkv = self.qkv.forward(tape, bound, x);
        let attn = tape.attention_packed(qkv, batch, self.heads);
        self.proj.forward(tape, bound, attn)
    }
}

/// Pre-norm transformer block with optional per-sample stochastic depth.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
            attn: SelfAttention::new(params, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(params, &format!("{name}.mlp"), dim, mlp_hidden, rng),
        }
    }

    /// `drop` gives, per residual branch, one keep/scale factor per sample
    /// (already 0 or 1/(1-p)); None disables stochastic depth (eval mode).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        drop: Option<(&[T], &[T])>,
    ) -> Var {
        let n1 = self.norm1.forward(tape, bound, x);
        let mut a = self.attn.forward(tape, bound, n1, batch);
        if let Some((da, _)) = drop {
            a = tape.scale_rows(a, expand_per_row(da, seq));
        }
        let x = tape.add(x, a);
        let n2 = self.norm2.forward(tape, bound, x);
        let mut m = self.mlp.forward(tape, bound, n2);
        if let Some((_, dm)) = drop {
            m = tape.scale_rows(m, expand_per_row(dm, seq));
        }
        tape.add(x, m)
    }

    /// Final-block variant for classification: only the class-token row
    /// (position 0 of every sample) is carried through attention output,
    /// residuals and the MLP. Keys/values still cover the full sequence, so
    /// the result equals the class-token row of the full forward.
    pub fn forward_cls_only<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        drop: Option<(&[T], &[T])>,
    ) -> Var {
        let n1 = self.norm1.forward(tape, bound, x);
        let qkv = self.attn.qkv.forward(tape, bound, n1);
        let attn = tape.attention_packed_single_query(qkv, batch, self.attn.heads, 0);
        let mut a = self.attn.proj.forward(tape, bound, attn);
        if let Some((da, _)) = drop {
            a = tape.scale_rows(a, da.to_vec());
        }
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let x_cls = tape.gather_rows(x, cls_rows);
        let x = tape.add(x_cls, a);
        let n2 = self.norm2.forward(tape, bound, x);
        let mut m = self.mlp.forward(tape, bound, n2);
        if let Some((_, dm)) = drop {
            m = tape.scale_rows(m, dm.to_vec());
        }
        tape.add(x, m)
    }
}

fn expand_per_row<T: Scalar>(per_sample: &[T], seq: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(per_sample.len() * seq);
    for &f in per_sample {
        for _ in 0..seq {
            out.push(f);
        }
    }
    out
}

/// Fixed 2-D sine-cosine positional embedding over a rows x cols patch grid,
/// row-major, matching the masking index order.
pub fn sincos_pos_embed_2d<T: Scalar>(dim: usize, rows: usize, cols: usize) -> Tensor<T> {
    assert!(dim % 4 == 0, "positional embedding dim must be divisible by 4");
    let half = dim / 2;
    let mut out = Tensor::zeros(&[rows * cols, dim]);
    let od = out.data_mut();
    for r in 0..rows {
        for c in 0..cols {
            let row = (r * cols + c) * dim;
            fill_sincos_1d(&mut od[row..row + half], r as f64);
            fill_sincos_1d(&mut od[row + half..row + dim], c as f64);
        }
    }
    out
}

fn fill_sincos_1d<T: Scalar>(dst: &mut [T], pos: f64) {
    let quarter = dst.len() / 2;
    for i in 0..quarter {
        let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        dst[i] = T::from_f64((pos * omega).sin());
        dst[quarter + i] = T::from_f64((pos * omega).cos());
    }
}
