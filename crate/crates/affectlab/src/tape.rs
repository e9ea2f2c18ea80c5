//! Reverse-mode autodiff on dense tensors.
//!
//! Values are computed eagerly as ops are recorded, so model code can branch
//! on intermediate results. `backward` walks the tape in reverse and returns
//! gradients for every leaf created with `leaf` (parameters and inputs that
//! require gradients). Constants created with `constant` are excluded from
//! the backward pass entirely — that is the stop-gradient primitive.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<T: Scalar> {
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackFn<T>>,
}

/// Computes parent gradients given (all node values, own value, incoming
/// gradient, which parents need a gradient).
type BackFn<T> =
    Box<dyn Fn(&[Tensor<T>], &Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send>;

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    values: Vec<Tensor<T>>,
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.values[var.0]
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackFn<T>>,
    ) -> Var {
        let requires_grad = match backward {
            Some(_) => parents.iter().any(|&p| self.nodes[p].requires_grad),
            None => false,
        };
        self.push_with_grad(value, parents, backward, requires_grad)
    }

    fn push_with_grad(
        &mut self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackFn<T>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            parents,
            requires_grad,
            backward,
        });
        self.values.push(value);
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameters, or inputs under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_with_grad(value, vec![], None, true)
    }

    /// Non-differentiable leaf. Gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with_grad(value, vec![], None, false)
    }

    /// Stop-gradient: same value, detached from its history.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.values[x.0].clone();
        self.constant(v)
    }

    /// Accumulate gradients of `root` (a scalar) with respect to every
    /// gradient-requiring leaf.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.values[root.0].numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.values[root.0].shape(), T::ONE));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].backward {
                Some(back) => {
                    let needs: Vec<bool> = self.nodes[i]
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].requires_grad)
                        .collect();
                    let parent_grads = back(&self.values, &self.values[i], &g, &needs);
                    debug_assert_eq!(parent_grads.len(), self.nodes[i].parents.len());
                    for (&p, pg) in self.nodes[i].parents.iter().zip(parent_grads) {
                        if let Some(pg) = pg {
                            if self.nodes[p].requires_grad {
                                match &mut grads[p] {
                                    Some(acc) => acc.add_assign(&pg),
                                    slot => *slot = Some(pg),
                                }
                            }
                        }
                    }
                }
                // Leaf: keep the accumulated gradient for harvesting.
                None => grads[i] = Some(g),
            }
        }
        Gradients { grads }
    }

    // ---- elementwise binary ops (with scalar broadcasting) ----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        fwd: impl Fn(T, T) -> T + Sync,
        back: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> (Option<Tensor<T>>, Option<Tensor<T>>)
            + Send
            + 'static,
    ) -> Var {
        let value = broadcast_zip(&self.values[a.0], &self.values[b.0], fwd);
        let (ai, bi) = (a.0, b.0);
        let wrapped: BackFn<T> = Box::new(move |values, _out, g, needs| {
            let (ga, gb) = back(&values[ai], &values[bi], g);
            vec![
                if needs[0] { ga } else { None },
                if needs[1] { gb } else { None },
            ]
        });
        self.push(value, vec![a.0, b.0], Some(wrapped))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x + y,
            |pa, pb, g| {
                (
                    Some(reduce_to_shape(g, pa.shape())),
                    Some(reduce_to_shape(g, pb.shape())),
                )
            },
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x - y,
            |pa, pb, g| {
                let gb = reduce_to_shape(g, pb.shape()).map(|v| -v);
                (Some(reduce_to_shape(g, pa.shape())), Some(gb))
            },
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x * y,
            |pa, pb, g| {
                let ga = broadcast_zip(g, pb, |gv, bv| gv * bv);
                let gb = broadcast_zip(g, pa, |gv, av| gv * av);
                (
                    Some(reduce_to_shape(&ga, pa.shape())),
                    Some(reduce_to_shape(&gb, pb.shape())),
                )
            },
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x / y,
            |pa, pb, g| {
                let ga = broadcast_zip(g, pb, |gv, bv| gv / bv);
                let quotient = broadcast_zip(pa, pb, |av, bv| av / (bv * bv));
                let gb = broadcast_zip(g, &quotient, |gv, qv| -gv * qv);
                (
                    Some(reduce_to_shape(&ga, pa.shape())),
                    Some(reduce_to_shape(&gb, pb.shape())),
                )
            },
        )
    }

    // ---- elementwise unary ----

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let f = T::from_f64(c);
        let value = self.values[x.0].map(|v| v * f);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, _, g, _| vec![Some(g.map(|v| v * f))])),
        )
    }

    /// x + c elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let f = T::from_f64(c);
        let value = self.values[x.0].map(|v| v + f);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, _, g, _| vec![Some(g.clone())])),
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = par_map(&self.values[x.0], |v| v.max(T::ZERO));
        let xi = x.0;
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |values, _, g, _| {
                let gx = par_zip(&values[xi], g, |xv, gv| {
                    if xv > T::ZERO {
                        gv
                    } else {
                        T::ZERO
                    }
                });
                vec![Some(gx)]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = par_map(&self.values[x.0], sigmoid_stable);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, out, g, _| {
                let gx = par_zip(out, g, |y, gv| gv * y * (T::ONE - y));
                vec![Some(gx)]
            })),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = par_map(&self.values[x.0], gelu_fwd);
        let xi = x.0;
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |values, _, g, _| {
                let gx = par_zip(&values[xi], g, |xv, gv| gv * gelu_grad(xv));
                vec![Some(gx)]
            })),
        )
    }

    // ---- matrix / row ops ----

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = Tensor::matmul(&self.values[a.0], ta, &self.values[b.0], tb);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |values, _, g, needs| {
                let pa = &values[ai];
                let pb = &values[bi];
                // C = op(A) op(B); dA and dB follow from transpose algebra.
                let ga = if needs[0] {
                    Some(match (ta, tb) {
                        (false, false) => Tensor::matmul(g, false, pb, true),
                        (false, true) => Tensor::matmul(g, false, pb, false),
                        (true, false) => Tensor::matmul(pb, false, g, true),
                        (true, true) => Tensor::matmul(pb, true, g, true),
                    })
                } else {
                    None
                };
                let gb = if needs[1] {
                    Some(match (ta, tb) {
                        (false, false) => Tensor::matmul(pa, true, g, false),
                        (false, true) => Tensor::matmul(g, true, pa, false),
                        (true, false) => Tensor::matmul(pa, false, g, false),
                        (true, true) => Tensor::matmul(g, true, pa, true),
                    })
                } else {
                    None
                };
                vec![ga, gb]
            })),
        )
    }

    /// x[R,D] + b[D] broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.values[x.0];
        let bv = &self.values[b.0];
        let (r, d) = xv.dims2();
        assert_eq!(bv.numel(), d, "bias length mismatch");
        let mut out = xv.clone();
        {
            let bd = bv.data();
            for row in out.data_mut().chunks_mut(d) {
                for (o, &bj) in row.iter_mut().zip(bd) {
                    *o += bj;
                }
            }
        }
        self.push(
            out,
            vec![x.0, b.0],
            Some(Box::new(move |_, _, g, needs| {
                let gx = needs[0].then(|| g.clone());
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::ZERO; d];
                    for row in g.data().chunks(d) {
                        for (a, &gv) in acc.iter_mut().zip(row) {
                            *a += gv;
                        }
                    }
                    Tensor::from_vec(&[d], acc)
                });
                let _ = r;
                vec![gx, gb]
            })),
        )
    }

    /// Fused affine layer: x[R,IN] w[OUT,IN]^T + b[OUT], with the bias added
    /// into the GEMM output buffer directly.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (_, in_dim) = self.values[x.0].dims2();
        let (out_dim, w_in) = self.values[w.0].dims2();
        assert_eq!(in_dim, w_in, "linear weight shape mismatch");
        assert_eq!(self.values[b.0].numel(), out_dim, "bias length mismatch");
        let mut out = Tensor::matmul(&self.values[x.0], false, &self.values[w.0], true);
        {
            let bd = self.values[b.0].data();
            for row in out.data_mut().chunks_mut(out_dim) {
                for (o, &bj) in row.iter_mut().zip(bd) {
                    *o += bj;
                }
            }
        }
        let (xi, wi) = (x.0, w.0);
        self.push(
            out,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |values, _, g, needs| {
                let gx = needs[0].then(|| Tensor::matmul(g, false, &values[wi], false));
                let gw = needs[1].then(|| Tensor::matmul(g, true, &values[xi], false));
                let gb = needs[2].then(|| {
                    let mut acc = vec![T::ZERO; out_dim];
                    for row in g.data().chunks(out_dim) {
                        for (a, &gv) in acc.iter_mut().zip(row) {
                            *a += gv;
                        }
                    }
                    Tensor::from_vec(&[out_dim], acc)
                });
                vec![gx, gw, gb]
            })),
        )
    }

    /// Scale each row of x[R,D] by a fixed per-row factor.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Var {
        let xv = &self.values[x.0];
        let (r, d) = xv.dims2();
        assert_eq!(factors.len(), r, "row factor count mismatch");
        let mut out = xv.clone();
        for (row, &f) in out.data_mut().chunks_mut(d).zip(factors.iter()) {
            for o in row.iter_mut() {
                *o = *o * f;
            }
        }
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_, _, g, _| {
                let mut gx = g.clone();
                for (row, &f) in gx.data_mut().chunks_mut(d).zip(factors.iter()) {
                    for o in row.iter_mut() {
                        *o = *o * f;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Gather rows of x by index (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = &self.values[x.0];
        let (r, d) = xv.dims2();
        let mut out = Tensor::zeros(&[idx.len(), d]);
        for (o, &i) in out.data_mut().chunks_mut(d).zip(idx.iter()) {
            debug_assert!(i < r);
            o.copy_from_slice(&xv.data()[i * d..(i + 1) * d]);
        }
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_, _, g, _| {
                let mut gx = Tensor::zeros(&[r, d]);
                for (grow, &i) in g.data().chunks(d).zip(idx.iter()) {
                    let dst = &mut gx.data_mut()[i * d..(i + 1) * d];
                    for (a, &gv) in dst.iter_mut().zip(grow) {
                        *a += gv;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Columns [lo, hi) of x.
    pub fn select_cols(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let xv = &self.values[x.0];
        let (r, d) = xv.dims2();
        assert!(lo < hi && hi <= d);
        let w = hi - lo;
        let mut out = Tensor::zeros(&[r, w]);
        for (orow, xrow) in out.data_mut().chunks_mut(w).zip(xv.data().chunks(d)) {
            orow.copy_from_slice(&xrow[lo..hi]);
        }
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_, _, g, _| {
                let mut gx = Tensor::zeros(&[r, d]);
                for (grow, xrow) in g.data().chunks(w).zip(gx.data_mut().chunks_mut(d)) {
                    xrow[lo..hi].copy_from_slice(grow);
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Concatenate along columns; all inputs share the row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rows = self.values[xs[0].0].dims2().0;
        let widths: Vec<usize> = xs
            .iter()
            .map(|v| {
                let (r, d) = self.values[v.0].dims2();
                assert_eq!(r, rows, "concat_cols row mismatch");
                d
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[rows, total]);
        {
            let od = out.data_mut();
            let mut off = 0;
            for (v, &w) in xs.iter().zip(widths.iter()) {
                let src = self.values[v.0].data();
                for r in 0..rows {
                    od[r * total + off..r * total + off + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                off += w;
            }
        }
        let widths_back = widths.clone();
        self.push(
            out,
            xs.iter().map(|v| v.0).collect(),
            Some(Box::new(move |_, _, g, needs| {
                let gd = g.data();
                let mut res = Vec::with_capacity(widths_back.len());
                let mut off = 0;
                for (k, &w) in widths_back.iter().enumerate() {
                    if needs[k] {
                        let mut gi = Tensor::zeros(&[rows, w]);
                        for r in 0..rows {
                            gi.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        res.push(Some(gi));
                    } else {
                        res.push(None);
                    }
                    off += w;
                }
                res
            })),
        )
    }

    /// Stack sample blocks [B*T,D] -> [B*(T+1),D] with a shared learned token
    /// prepended to every sample.
    pub fn prepend_token(&mut self, x: Var, token: Var, batch: usize, seq: usize) -> Var {
        let xv = &self.values[x.0];
        let (r, d) = xv.dims2();
        assert_eq!(r, batch * seq);
        assert_eq!(self.values[token.0].numel(), d);
        let mut out = Tensor::zeros(&[batch * (seq + 1), d]);
        {
            let od = out.data_mut();
            let xd = xv.data();
            let td = self.values[token.0].data();
            for b in 0..batch {
                let dst = (b * (seq + 1)) * d;
                od[dst..dst + d].copy_from_slice(td);
                od[dst + d..dst + d + seq * d].copy_from_slice(&xd[b * seq * d..(b + 1) * seq * d]);
            }
        }
        self.push(
            out,
            vec![x.0, token.0],
            Some(Box::new(move |_, _, g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut t = Tensor::zeros(&[batch * seq, d]);
                    for b in 0..batch {
                        let src = (b * (seq + 1) + 1) * d;
                        t.data_mut()[b * seq * d..(b + 1) * seq * d]
                            .copy_from_slice(&gd[src..src + seq * d]);
                    }
                    t
                });
                let gt = needs[1].then(|| {
                    let mut acc = vec![T::ZERO; d];
                    for b in 0..batch {
                        let src = (b * (seq + 1)) * d;
                        for (a, &gv) in acc.iter_mut().zip(&gd[src..src + d]) {
                            *a += gv;
                        }
                    }
                    Tensor::from_vec(&[d], acc)
                });
                vec![gx, gt]
            })),
        )
    }

    /// Rebuild full-length token sequences from kept tokens, filling dropped
    /// positions with a shared learned token. `kept[b]` lists, in storage
    /// order, the position of each kept row of sample b within `full_len`.
    pub fn scatter_tokens(
        &mut self,
        x: Var,
        fill: Var,
        kept: Vec<Vec<usize>>,
        full_len: usize,
    ) -> Var {
        let xv = &self.values[x.0];
        let (r, d) = xv.dims2();
        let batch = kept.len();
        let per: usize = kept[0].len();
        assert!(kept.iter().all(|k| k.len() == per));
        assert_eq!(r, batch * per);
        assert_eq!(self.values[fill.0].numel(), d);
        let mut out = Tensor::zeros(&[batch * full_len, d]);
        {
            let od = out.data_mut();
            let fd = self.values[fill.0].data();
            for row in od.chunks_mut(d) {
                row.copy_from_slice(fd);
            }
            let xd = xv.data();
            for (b, kb) in kept.iter().enumerate() {
                for (j, &pos) in kb.iter().enumerate() {
                    debug_assert!(pos < full_len);
                    let dst = (b * full_len + pos) * d;
                    let src = (b * per + j) * d;
                    od[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
        self.push(
            out,
            vec![x.0, fill.0],
            Some(Box::new(move |_, _, g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut t = Tensor::zeros(&[batch * per, d]);
                    for (b, kb) in kept.iter().enumerate() {
                        for (j, &pos) in kb.iter().enumerate() {
                            let src = (b * full_len + pos) * d;
                            let dst = (b * per + j) * d;
                            t.data_mut()[dst..dst + d].copy_from_slice(&gd[src..src + d]);
                        }
                    }
                    t
                });
                let gf = needs[1].then(|| {
                    let mut filled = vec![true; batch * full_len];
                    for (b, kb) in kept.iter().enumerate() {
                        for &pos in kb {
                            filled[b * full_len + pos] = false;
                        }
                    }
                    let mut acc = vec![T::ZERO; d];
                    for (row, is_fill) in gd.chunks(d).zip(filled.iter()) {
                        if *is_fill {
                            for (a, &gv) in acc.iter_mut().zip(row) {
                                *a += gv;
                            }
                        }
                    }
                    Tensor::from_vec(&[d], acc)
                });
                vec![gx, gf]
            })),
        )
    }

    /// Mean over each sample's rows: [B*T,D] -> [B,D].
    pub fn mean_pool_rows(&mut self, x: Var, batch: usize, seq: usize) -> Var {
        let xv = &self.values[x.0];
        let (r, d) = xv.dims2();
        assert_eq!(r, batch * seq);
        let inv = T::from_f64(1.0 / seq as f64);
        let mut out = Tensor::zeros(&[batch, d]);
        {
            let od = out.data_mut();
            for b in 0..batch {
                for row in xv.data()[b * seq * d..(b + 1) * seq * d].chunks(d) {
                    for (a, &v) in od[b * d..(b + 1) * d].iter_mut().zip(row) {
                        *a += v * inv;
                    }
                }
            }
        }
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_, _, g, _| {
                let mut gx = Tensor::zeros(&[batch * seq, d]);
                let gd = g.data();
                for b in 0..batch {
                    let src = &gd[b * d..(b + 1) * d];
                    for row in gx.data_mut()[b * seq * d..(b + 1) * seq * d].chunks_mut(d) {
                        for (a, &gv) in row.iter_mut().zip(src) {
                            *a = gv * inv;
                        }
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Mean over each row: [R,C] -> [R,1].
    pub fn row_mean(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let (r, c) = xv.dims2();
        let inv = T::from_f64(1.0 / c as f64);
        let data: Vec<T> = xv
            .data()
            .chunks(c)
            .map(|row| {
                let mut s = T::ZERO;
                for &v in row {
                    s += v;
                }
                s * inv
            })
            .collect();
        self.push(
            Tensor::from_vec(&[r, 1], data),
            vec![x.0],
            Some(Box::new(move |_, _, g, _| {
                let mut gx = Tensor::zeros(&[r, c]);
                for (row, &gv) in gx.data_mut().chunks_mut(c).zip(g.data()) {
                    for a in row.iter_mut() {
                        *a = gv * inv;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.values[x.0].clone().reshape(shape);
        let orig = self.values[x.0].shape().to_vec();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, _, g, _| {
                vec![Some(g.clone().reshape(&orig))]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.values[x.0].data() {
            s += v;
        }
        let shape = self.values[x.0].shape().to_vec();
        self.push(
            Tensor::scalar(s),
            vec![x.0],
            Some(Box::new(move |_, _, g, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum with constant weights: sum_i w_i * x_i -> scalar.
    pub fn dot_const(&mut self, x: Var, w: Vec<T>) -> Var {
        let xv = &self.values[x.0];
        assert_eq!(xv.numel(), w.len());
        let mut s = T::ZERO;
        for (&v, &wi) in xv.data().iter().zip(w.iter()) {
            s += v * wi;
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::scalar(s),
            vec![x.0],
            Some(Box::new(move |_, _, g, _| {
                let gv = g.item();
                vec![Some(Tensor::from_vec(
                    &shape,
                    w.iter().map(|&wi| wi * gv).collect(),
                ))]
            })),
        )
    }

    /// sum_r w_r * x[r, idx_r] -> scalar. Rows with weight zero are skipped
    /// (their index is ignored), which is how masked labels are excluded.
    pub fn pick_weighted(&mut self, x: Var, idx: Vec<usize>, w: Vec<T>) -> Var {
        let xv = &self.values[x.0];
        let (r, c) = xv.dims2();
        assert_eq!(idx.len(), r);
        assert_eq!(w.len(), r);
        let mut s = T::ZERO;
        for ((row, &i), &wi) in xv.data().chunks(c).zip(idx.iter()).zip(w.iter()) {
            if wi != T::ZERO {
                s += row[i] * wi;
            }
        }
        self.push(
            Tensor::scalar(s),
            vec![x.0],
            Some(Box::new(move |_, _, g, _| {
                let gv = g.item();
                let mut gx = Tensor::zeros(&[r, c]);
                for ((grow, &i), &wi) in gx.data_mut().chunks_mut(c).zip(idx.iter()).zip(w.iter())
                {
                    if wi != T::ZERO {
                        grow[i] = wi * gv;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    // ---- row-wise normalizations ----

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let (r, c) = xv.dims2();
        let mut out = xv.clone();
        par_rows(out.data_mut(), c, softmax_row);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_, out, g, _| {
                let mut gx = Tensor::zeros(&[r, c]);
                for ((grow, yrow), gxrow) in g
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(gx.data_mut().chunks_mut(c))
                {
                    let mut dot = T::ZERO;
                    for (&gv, &y) in grow.iter().zip(yrow) {
                        dot += gv * y;
                    }
                    for ((gxv, &gv), &y) in gxrow.iter_mut().zip(grow).zip(yrow) {
                        *gxv = y * (gv - dot);
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let (r, c) = xv.dims2();
        let mut out = xv.clone();
        par_rows(out.data_mut(), c, log_softmax_row);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_, out, g, _| {
                let mut gx = Tensor::zeros(&[r, c]);
                for ((grow, yrow), gxrow) in g
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(gx.data_mut().chunks_mut(c))
                {
                    let mut gsum = T::ZERO;
                    for &gv in grow {
                        gsum += gv;
                    }
                    for ((gxv, &gv), &y) in gxrow.iter_mut().zip(grow).zip(yrow) {
                        *gxv = gv - y.exp_bulk() * gsum;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Per-row entropy in nats with the 0*ln(0)=0 convention: [R,C] -> [R,1].
    pub fn entropy_rows(&mut self, p: Var) -> Var {
        let pv = &self.values[p.0];
        let (r, c) = pv.dims2();
        let data: Vec<T> = pv
            .data()
            .chunks(c)
            .map(|row| {
                let mut h = T::ZERO;
                for &v in row {
                    if v > T::ZERO {
                        h += v * v.ln();
                    }
                }
                -h
            })
            .collect();
        let pi = p.0;
        self.push(
            Tensor::from_vec(&[r, 1], data),
            vec![p.0],
            Some(Box::new(move |values, _, g, _| {
                let pv = &values[pi];
                let mut gx = Tensor::zeros(&[r, c]);
                for ((prow, gxrow), &gv) in pv
                    .data()
                    .chunks(c)
                    .zip(gx.data_mut().chunks_mut(c))
                    .zip(g.data())
                {
                    for (gxv, &p) in gxrow.iter_mut().zip(prow) {
                        if p > T::ZERO {
                            *gxv = -(p.ln() + T::ONE) * gv;
                        }
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// LayerNorm over the last dimension with affine parameters.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.values[x.0];
        let (r, d) = xv.dims2();
        assert_eq!(self.values[gamma.0].numel(), d);
        assert_eq!(self.values[beta.0].numel(), d);
        let epsv = T::from_f64(eps);
        let invd = T::from_f64(1.0 / d as f64);
        let mut out = Tensor::zeros(&[r, d]);
        let mut xhat = Tensor::zeros(&[r, d]);
        let mut rstd = vec![T::ZERO; r];
        {
            let gd = self.values[gamma.0].data();
            let bd = self.values[beta.0].data();
            let norm_row = |((xrow, orow), (hrow, rs)): (
                (&[T], &mut [T]),
                (&mut [T], &mut T),
            )| {
                let mut mean = T::ZERO;
                for &v in xrow {
                    mean += v;
                }
                mean = mean * invd;
                let mut var = T::ZERO;
                for &v in xrow {
                    let dv = v - mean;
                    var += dv * dv;
                }
                var = var * invd;
                let rr = T::ONE / (var + epsv).sqrt();
                *rs = rr;
                for (((h, o), &v), (&g, &b)) in hrow
                    .iter_mut()
                    .zip(orow.iter_mut())
                    .zip(xrow)
                    .zip(gd.iter().zip(bd.iter()))
                {
                    *h = (v - mean) * rr;
                    *o = *h * g + b;
                }
            };
            if xv.numel() >= PAR_THRESHOLD {
                xv.data()
                    .par_chunks(d)
                    .zip(out.data_mut().par_chunks_mut(d))
                    .zip(
                        xhat.data_mut()
                            .par_chunks_mut(d)
                            .zip(rstd.par_iter_mut()),
                    )
                    .for_each(norm_row);
            } else {
                xv.data()
                    .chunks(d)
                    .zip(out.data_mut().chunks_mut(d))
                    .zip(xhat.data_mut().chunks_mut(d).zip(rstd.iter_mut()))
                    .for_each(norm_row);
            }
        }
        let gi = gamma.0;
        self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |values, _, g, needs| {
                let gd = values[gi].data();
                let mut gx = needs[0].then(|| Tensor::zeros(&[r, d]));
                let mut ggamma = vec![T::ZERO; d];
                let mut gbeta = vec![T::ZERO; d];
                for (i, (grow, hrow)) in
                    g.data().chunks(d).zip(xhat.data().chunks(d)).enumerate()
                {
                    for ((j, &gv), &h) in grow.iter().enumerate().zip(hrow) {
                        ggamma[j] += gv * h;
                        gbeta[j] += gv;
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dx = rstd * (gg - mean(gg) - xhat * mean(gg*xhat)),
                        // gg = g * gamma
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for ((&gv, &gam), &h) in grow.iter().zip(gd.iter()).zip(hrow) {
                            let gg = gv * gam;
                            m1 += gg;
                            m2 += gg * h;
                        }
                        m1 = m1 * invd;
                        m2 = m2 * invd;
                        let dst = &mut gx.data_mut()[i * d..(i + 1) * d];
                        for (((o, &gv), &gam), &h) in
                            dst.iter_mut().zip(grow).zip(gd.iter()).zip(hrow)
                        {
                            *o = rstd[i] * (gv * gam - m1 - h * m2);
                        }
                    }
                }
                vec![
                    gx,
                    needs[1].then(|| Tensor::from_vec(&[d], ggamma)),
                    needs[2].then(|| Tensor::from_vec(&[d], gbeta)),
                ]
            })),
        )
    }

    /// Multi-head scaled dot-product self-attention over per-sample blocks.
    /// q/k/v are [B*T, D] with D = heads * head_dim; softmax(q k^T * scale) v
    /// is computed independently per (sample, head).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (r, d) = self.values[q.0].dims2();
        assert_eq!(self.values[k.0].shape(), self.values[q.0].shape());
        assert_eq!(self.values[v.0].shape(), self.values[q.0].shape());
        assert_eq!(r % batch, 0);
        let seq = r / batch;
        assert_eq!(d % heads, 0);
        let hd = d / heads;

        let (out, probs) = attention_forward(
            self.values[q.0].data(),
            self.values[k.0].data(),
            self.values[v.0].data(),
            AttnDims { r, d, stride: d, q_off: 0, k_off: 0, v_off: 0, batch, heads, seq, hd },
        );
        let (qi, ki, vi) = (q.0, k.0, v.0);
        self.push(
            out,
            vec![q.0, k.0, v.0],
            Some(Box::new(move |values, _, g, _| {
                let dims = AttnDims { r, d, stride: d, q_off: 0, k_off: 0, v_off: 0, batch, heads, seq, hd };
                let parts = attention_backward(
                    values[qi].data(),
                    values[ki].data(),
                    values[vi].data(),
                    g.data(),
                    &probs,
                    dims,
                );
                let mut gq = Tensor::zeros(&[r, d]);
                let mut gk = Tensor::zeros(&[r, d]);
                let mut gvt = Tensor::zeros(&[r, d]);
                for (bh, (q_, k_, v_)) in parts.into_iter().enumerate() {
                    let (b, h) = (bh / heads, bh % heads);
                    write_block(gq.data_mut(), &q_, b, seq, d, h * hd, hd);
                    write_block(gk.data_mut(), &k_, b, seq, d, h * hd, hd);
                    write_block(gvt.data_mut(), &v_, b, seq, d, h * hd, hd);
                }
                vec![Some(gq), Some(gk), Some(gvt)]
            })),
        )
    }

    /// Attention reading the packed qkv projection [B*T, 3D] directly
    /// (queries in columns 0..D, keys in D..2D, values in 2D..3D), avoiding
    /// the three column-slice copies and their scatter backward.
    pub fn attention_packed(&mut self, qkv: Var, batch: usize, heads: usize) -> Var {
        let (r, d3) = self.values[qkv.0].dims2();
        assert_eq!(d3 % 3, 0);
        let d = d3 / 3;
        assert_eq!(r % batch, 0);
        let seq = r / batch;
        assert_eq!(d % heads, 0);
        let hd = d / heads;
        let dims = AttnDims { r, d, stride: d3, q_off: 0, k_off: d, v_off: 2 * d, batch, heads, seq, hd };

        let data = self.values[qkv.0].data();
        let (out, probs) = attention_forward(data, data, data, dims);
        let qkvi = qkv.0;
        self.push(
            out,
            vec![qkv.0],
            Some(Box::new(move |values, _, g, _| {
                let data = values[qkvi].data();
                let parts = attention_backward(data, data, data, g.data(), &probs, dims);
                let mut gqkv = Tensor::zeros(&[r, d3]);
                for (bh, (q_, k_, v_)) in parts.into_iter().enumerate() {
                    let (b, h) = (bh / heads, bh % heads);
                    write_block(gqkv.data_mut(), &q_, b, seq, d3, h * hd, hd);
                    write_block(gqkv.data_mut(), &k_, b, seq, d3, d + h * hd, hd);
                    write_block(gqkv.data_mut(), &v_, b, seq, d3, 2 * d + h * hd, hd);
                }
                vec![Some(gqkv)]
            })),
        )
    }

    /// Attention over packed qkv where only one query position per sample is
    /// evaluated (the class token at `query_pos`); keys and values still span
    /// the whole sequence. Output is [B, D].
    pub fn attention_packed_single_query(
        &mut self,
        qkv: Var,
        batch: usize,
        heads: usize,
        query_pos: usize,
    ) -> Var {
        let (r, d3) = self.values[qkv.0].dims2();
        assert_eq!(d3 % 3, 0);
        let d = d3 / 3;
        assert_eq!(r % batch, 0);
        let seq = r / batch;
        assert!(query_pos < seq);
        assert_eq!(d % heads, 0);
        let hd = d / heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());

        let data = self.values[qkv.0].data();
        let blocks: Vec<(Tensor<T>, Tensor<T>)> = (0..batch * heads)
            .into_par_iter()
            .map(|bh| {
                let (b, h) = (bh / heads, bh % heads);
                let qrow = {
                    let src = (b * seq + query_pos) * d3 + h * hd;
                    Tensor::from_vec(&[1, hd], data[src..src + hd].to_vec())
                };
                let kb = extract_block(data, b, seq, d3, d + h * hd, hd);
                let vb = extract_block(data, b, seq, d3, 2 * d + h * hd, hd);
                let mut s = Tensor::matmul(&qrow, false, &kb, true);
                for e in s.data_mut().iter_mut() {
                    *e = *e * scale;
                }
                softmax_row(s.data_mut());
                let o = Tensor::matmul(&s, false, &vb, false);
                (s, o)
            })
            .collect();

        let mut out = Tensor::zeros(&[batch, d]);
        let mut probs = Vec::with_capacity(batch * heads);
        for (bh, (p, o)) in blocks.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            out.data_mut()[b * d + h * hd..b * d + (h + 1) * hd].copy_from_slice(o.data());
            probs.push(p);
        }

        let qkvi = qkv.0;
        self.push(
            out,
            vec![qkv.0],
            Some(Box::new(move |values, _, g, _| {
                let data = values[qkvi].data();
                let gd = g.data();
                let parts: Vec<(Tensor<T>, Tensor<T>, Tensor<T>)> = (0..batch * heads)
                    .into_par_iter()
                    .map(|bh| {
                        let (b, h) = (bh / heads, bh % heads);
                        let p = &probs[bh];
                        let qrow = {
                            let src = (b * seq + query_pos) * d3 + h * hd;
                            Tensor::from_vec(&[1, hd], data[src..src + hd].to_vec())
                        };
                        let kb = extract_block(data, b, seq, d3, d + h * hd, hd);
                        let vb = extract_block(data, b, seq, d3, 2 * d + h * hd, hd);
                        let gb = Tensor::from_vec(
                            &[1, hd],
                            gd[b * d + h * hd..b * d + (h + 1) * hd].to_vec(),
                        );
                        let gv = Tensor::matmul(p, true, &gb, false);
                        let mut gp = Tensor::matmul(&gb, false, &vb, true);
                        let mut dot = T::ZERO;
                        for (&gpv, &pv) in gp.data().iter().zip(p.data()) {
                            dot += gpv * pv;
                        }
                        for (gpv, &pv) in gp.data_mut().iter_mut().zip(p.data()) {
                            *gpv = pv * (*gpv - dot) * scale;
                        }
                        let gq = Tensor::matmul(&gp, false, &kb, false);
                        let gk = Tensor::matmul(&gp, true, &qrow, false);
                        (gq, gk, gv)
                    })
                    .collect();
                let mut gqkv = Tensor::zeros(&[r, d3]);
                for (bh, (gq, gk, gv)) in parts.into_iter().enumerate() {
                    let (b, h) = (bh / heads, bh % heads);
                    let dst = (b * seq + query_pos) * d3 + h * hd;
                    gqkv.data_mut()[dst..dst + hd].copy_from_slice(gq.data());
                    write_block(gqkv.data_mut(), &gk, b, seq, d3, d + h * hd, hd);
                    write_block(gqkv.data_mut(), &gv, b, seq, d3, 2 * d + h * hd, hd);
                }
                vec![Some(gqkv)]
            })),
        )
    }

    /// 2-D convolution via im2col. x is [B,C,H,W] flattened row-major,
    /// weight [OC, C*KH*KW], bias [OC]; output layout [B,OC,OH,OW].
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        in_dims: (usize, usize, usize, usize),
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (bs, c, h, wd) = in_dims;
        let xv = &self.values[x.0];
        assert_eq!(xv.numel(), bs * c * h * wd, "conv input size mismatch");
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (wd + 2 * pad - kernel) / stride + 1;
        let patch = c * kernel * kernel;
        let (oc, wcols) = self.values[w.0].dims2();
        assert_eq!(wcols, patch, "conv weight shape mismatch");
        assert_eq!(self.values[b.0].numel(), oc);

        let col = im2col(xv.data(), bs, c, h, wd, kernel, stride, pad, oh, ow);
        // rows = B*OH*OW, cols = patch
        let rowed = Tensor::matmul(&col, false, &self.values[w.0], true);
        // rearrange [B*OH*OW, OC] -> [B, OC, OH, OW] and add bias
        let mut out = Tensor::zeros(&[bs * oc * oh * ow]);
        {
            let od = out.data_mut();
            let rd = rowed.data();
            let bd = self.values[b.0].data();
            let hw = oh * ow;
            for bi in 0..bs {
                for p in 0..hw {
                    let src = (bi * hw + p) * oc;
                    for o in 0..oc {
                        od[bi * oc * hw + o * hw + p] = rd[src + o] + bd[o];
                    }
                }
            }
        }
        let wi = w.0;
        self.push(
            out,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |values, _, g, needs| {
                let hw = oh * ow;
                // g back to row layout [B*OH*OW, OC]
                let mut grow = Tensor::zeros(&[bs * hw, oc]);
                {
                    let gd = g.data();
                    let gr = grow.data_mut();
                    for bi in 0..bs {
                        for o in 0..oc {
                            for p in 0..hw {
                                gr[(bi * hw + p) * oc + o] = gd[bi * oc * hw + o * hw + p];
                            }
                        }
                    }
                }
                let gb = needs[2].then(|| {
                    let mut acc = vec![T::ZERO; oc];
                    for row in grow.data().chunks(oc) {
                        for (a, &gv) in acc.iter_mut().zip(row) {
                            *a += gv;
                        }
                    }
                    Tensor::from_vec(&[oc], acc)
                });
                let gw = needs[1].then(|| Tensor::matmul(&grow, true, &col, false));
                let gx = needs[0].then(|| {
                    let gcol = Tensor::matmul(&grow, false, &values[wi], false);
                    col2im(gcol.data(), bs, c, h, wd, kernel, stride, pad, oh, ow)
                });
                vec![gx, gw, gb]
            })),
        )
    }

    /// Numerically stable masked binary cross-entropy on logits.
    /// Per row: mean over the L columns; rows combined with constant weights
    /// (a zero weight excludes the row entirely).
    pub fn bce_logits(&mut self, logits: Var, targets: Vec<T>, row_weights: Vec<T>) -> Var {
        let xv = &self.values[logits.0];
        let (r, l) = xv.dims2();
        assert_eq!(targets.len(), r * l);
        assert_eq!(row_weights.len(), r);
        let invl = T::from_f64(1.0 / l as f64);
        let mut total = T::ZERO;
        for ((row, trow), &wr) in xv
            .data()
            .chunks(l)
            .zip(targets.chunks(l))
            .zip(row_weights.iter())
        {
            if wr == T::ZERO {
                continue;
            }
            let mut s = T::ZERO;
            for (&p, &y) in row.iter().zip(trow) {
                // max(p,0) - p*y + ln(1+exp(-|p|))
                s += p.max(T::ZERO) - p * y + (T::ONE + (-p.abs()).exp()).ln();
            }
            total += s * invl * wr;
        }
        let li = logits.0;
        self.push(
            Tensor::scalar(total),
            vec![logits.0],
            Some(Box::new(move |values, _, g, _| {
                let gv = g.item();
                let xv = &values[li];
                let mut gx = Tensor::zeros(&[r, l]);
                for (((row, trow), gxrow), &wr) in xv
                    .data()
                    .chunks(l)
                    .zip(targets.chunks(l))
                    .zip(gx.data_mut().chunks_mut(l))
                    .zip(row_weights.iter())
                {
                    if wr == T::ZERO {
                        continue;
                    }
                    for ((gxv, &p), &y) in gxrow.iter_mut().zip(row).zip(trow) {
                        *gxv = (sigmoid_stable(p) - y) * invl * wr * gv;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }
}

// ---- helpers ----

const PAR_THRESHOLD: usize = 65_536;

/// Apply a per-row function, in parallel for large matrices.
fn par_rows<T: Scalar>(data: &mut [T], row_len: usize, f: impl Fn(&mut [T]) + Sync) {
    if data.len() >= PAR_THRESHOLD {
        data.par_chunks_mut(row_len).for_each(|row| f(row));
    } else {
        data.chunks_mut(row_len).for_each(|row| f(row));
    }
}

/// Elementwise map, parallelized for large tensors (disjoint chunks, so the
/// result is identical to the sequential order).
fn par_map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
    let mut out = x.clone();
    if x.numel() >= PAR_THRESHOLD {
        out.data_mut()
            .par_chunks_mut(16_384)
            .for_each(|chunk| chunk.iter_mut().for_each(|v| *v = f(*v)));
    } else {
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    }
    out
}

fn par_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T + Sync) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in elementwise op");
    let mut out = a.clone();
    if a.numel() >= PAR_THRESHOLD {
        out.data_mut()
            .par_chunks_mut(16_384)
            .zip(b.data().par_chunks(16_384))
            .for_each(|(ca, cb)| {
                ca.iter_mut().zip(cb).for_each(|(x, &y)| *x = f(*x, y));
            });
    } else {
        out.data_mut()
            .iter_mut()
            .zip(b.data())
            .for_each(|(x, &y)| *x = f(*x, y));
    }
    out
}

/// Elementwise combine with scalar (numel == 1) broadcasting on either side.
fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T + Sync,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        par_zip(a, b, f)
    } else if b.numel() == 1 {
        let bv = b.item();
        a.map(|x| f(x, bv))
    } else if a.numel() == 1 {
        let av = a.item();
        b.map(|x| f(av, x))
    } else {
        panic!(
            "incompatible shapes {:?} vs {:?} in elementwise op",
            a.shape(),
            b.shape()
        );
    }
}

/// Sum a gradient down to the shape of the original (possibly scalar) operand.
fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g.clone()
    } else {
        let n: usize = shape.iter().product();
        assert_eq!(n, 1, "can only reduce gradients to scalar operands");
        let mut s = T::ZERO;
        for &v in g.data() {
            s += v;
        }
        Tensor::full(shape, s)
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp_bulk())
    } else {
        let e = x.exp_bulk();
        e / (T::ONE + e)
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh_bulk())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh_bulk();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.max(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp_bulk();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn log_softmax_row<T: Scalar>(row: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.max(v);
    }
    let mut sum = T::ZERO;
    for &v in row.iter() {
        sum += (v - m).exp_bulk();
    }
    let lse = m + sum.ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

#[derive(Clone, Copy)]
struct AttnDims {
    r: usize,
    d: usize,
    /// row stride of the underlying storage (3D for packed qkv)
    stride: usize,
    q_off: usize,
    k_off: usize,
    v_off: usize,
    batch: usize,
    heads: usize,
    seq: usize,
    hd: usize,
}

fn attention_forward<T: Scalar>(
    qd: &[T],
    kd: &[T],
    vd: &[T],
    dims: AttnDims,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let AttnDims { r, d, stride, q_off, k_off, v_off, batch, heads, seq, hd } = dims;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    // probs[b*heads+h] is the seq x seq softmax matrix for that block.
    let blocks: Vec<(Tensor<T>, Tensor<T>)> = (0..batch * heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / heads, bh % heads);
            let qb = extract_block(qd, b, seq, stride, q_off + h * hd, hd);
            let kb = extract_block(kd, b, seq, stride, k_off + h * hd, hd);
            let vb = extract_block(vd, b, seq, stride, v_off + h * hd, hd);
            let mut s = Tensor::matmul(&qb, false, &kb, true);
            for e in s.data_mut().iter_mut() {
                *e = *e * scale;
            }
            for row in s.data_mut().chunks_mut(seq) {
                softmax_row(row);
            }
            let o = Tensor::matmul(&s, false, &vb, false);
            (s, o)
        })
        .collect();

    let mut out = Tensor::zeros(&[r, d]);
    let mut probs = Vec::with_capacity(batch * heads);
    for (bh, (p, o)) in blocks.into_iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        write_block(out.data_mut(), &o, b, seq, d, h * hd, hd);
        probs.push(p);
    }
    (out, probs)
}

/// Per-(sample, head) gradients (gq, gk, gv) for the attention blocks; g is
/// the [B*T, D] output gradient.
fn attention_backward<T: Scalar>(
    qd: &[T],
    kd: &[T],
    vd: &[T],
    gd: &[T],
    probs: &[Tensor<T>],
    dims: AttnDims,
) -> Vec<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let AttnDims { d, stride, q_off, k_off, v_off, batch, heads, seq, hd, .. } = dims;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    (0..batch * heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / heads, bh % heads);
            let p = &probs[bh];
            let qb = extract_block(qd, b, seq, stride, q_off + h * hd, hd);
            let kb = extract_block(kd, b, seq, stride, k_off + h * hd, hd);
            let vb = extract_block(vd, b, seq, stride, v_off + h * hd, hd);
            let gb = extract_block(gd, b, seq, d, h * hd, hd);
            let gv = Tensor::matmul(p, true, &gb, false);
            let mut gp = Tensor::matmul(&gb, false, &vb, true);
            // softmax backward rows: gs = p * (gp - rowsum(gp*p)) * scale
            for (gprow, prow) in gp.data_mut().chunks_mut(seq).zip(p.data().chunks(seq)) {
                let mut dot = T::ZERO;
                for (&gpv, &pv) in gprow.iter().zip(prow) {
                    dot += gpv * pv;
                }
                for (gpv, &pv) in gprow.iter_mut().zip(prow) {
                    *gpv = pv * (*gpv - dot) * scale;
                }
            }
            let gq = Tensor::matmul(&gp, false, &kb, false);
            let gk = Tensor::matmul(&gp, true, &qb, false);
            (gq, gk, gv)
        })
        .collect()
}

/// Copy a [seq x width] column block of sample b out of row-major storage.
fn extract_block<T: Scalar>(
    data: &[T],
    b: usize,
    seq: usize,
    stride: usize,
    col_off: usize,
    width: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(&[seq, width]);
    let od = out.data_mut();
    for t in 0..seq {
        let src = (b * seq + t) * stride + col_off;
        od[t * width..(t + 1) * width].copy_from_slice(&data[src..src + width]);
    }
    out
}

fn write_block<T: Scalar>(
    data: &mut [T],
    block: &Tensor<T>,
    b: usize,
    seq: usize,
    stride: usize,
    col_off: usize,
    width: usize,
) {
    let bd = block.data();
    for t in 0..seq {
        let dst = (b * seq + t) * stride + col_off;
        data[dst..dst + width].copy_from_slice(&bd[t * width..(t + 1) * width]);
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    bs: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let patch = c * kernel * kernel;
    let mut col = Tensor::zeros(&[bs * oh * ow, patch]);
    let cd = col.data_mut();
    cd.par_chunks_mut(oh * ow * patch)
        .enumerate()
        .for_each(|(bi, chunk)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (oy * ow + ox) * patch;
                    for ci in 0..c {
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let dst = row + (ci * kernel + ky) * kernel + kx;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    chunk[dst] = x
                                        [((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    gcol: &[T],
    bs: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let patch = c * kernel * kernel;
    let mut gx = Tensor::zeros(&[bs * c * h * w]);
    let gd = gx.data_mut();
    gd.par_chunks_mut(c * h * w).enumerate().for_each(|(bi, chunk)| {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * patch;
                for ci in 0..c {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                chunk[(ci * h + iy as usize) * w + ix as usize] +=
                                    gcol[row + (ci * kernel + ky) * kernel + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar-valued graph with respect to
    /// one leaf, used to validate every op's backward rule.
    fn finite_diff(
        f: &dyn Fn(&[Tensor<f64>]) -> f64,
        leaves: &[Tensor<f64>],
        leaf: usize,
        idx: usize,
        h: f64,
    ) -> f64 {
        let mut plus = leaves.to_vec();
        plus[leaf].data_mut()[idx] += h;
        let mut minus = leaves.to_vec();
        minus[leaf].data_mut()[idx] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn check_grads(f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, leaves: &[Tensor<f64>], tol: f64) {
        let eval = |ls: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ls.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        for (li, var) in vars.iter().enumerate() {
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(leaves[li].shape()));
            for idx in 0..leaves[li].numel() {
                let fd = finite_diff(&eval, leaves, li, idx, 1e-5);
                let ad = g.data()[idx];
                let denom = fd.abs().max(ad.abs()).max(1e-6);
                assert!(
                    (fd - ad).abs() / denom < tol,
                    "leaf {li} idx {idx}: fd={fd} ad={ad}"
                );
            }
        }
    }

    fn rng_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        // deterministic pseudo-random values in roughly [-1, 1]
        let n: usize = shape.iter().product();
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let data: Vec<f64> = (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state as f64 / u64::MAX as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn grad_elementwise_ops() {
        let a = rng_tensor(&[3, 4], 1);
        let b = rng_tensor(&[3, 4], 2).map(|v| v + 2.5); // keep away from 0 for div
        check_grads(
            &|t, v| {
                let s = t.add(v[0], v[1]);
                let m = t.mul(s, v[0]);
                let d = t.div(m, v[1]);
                let q = t.sub(d, v[0]);
                t.mean_all(q)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_scalar_broadcast() {
        let a = rng_tensor(&[5], 3);
        let s = Tensor::scalar(1.7);
        check_grads(
            &|t, v| {
                let x = t.mul(v[0], v[1]);
                let y = t.sub(x, v[1]);
                let z = t.div(y, v[1]);
                t.sum_all(z)
            },
            &[a, s],
            1e-6,
        );
    }

    #[test]
    fn grad_activations() {
        let a = rng_tensor(&[4, 3], 5);
        check_grads(
            &|t, v| {
                let r = t.gelu(v[0]);
                let s = t.sigmoid(r);
                let u = t.relu(s);
                t.mean_all(u)
            },
            &[a],
            1e-5,
        );
    }

    #[test]
    fn grad_matmul_all_transpose_combos() {
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let a_shape = if ta { [4, 3] } else { [3, 4] };
            let b_shape = if tb { [5, 4] } else { [4, 5] };
            let a = rng_tensor(&a_shape, 7);
            let b = rng_tensor(&b_shape, 8);
            check_grads(
                &move |t, v| {
                    let c = t.matmul(v[0], ta, v[1], tb);
                    t.mean_all(c)
                },
                &[a, b],
                1e-6,
            );
        }
    }

    #[test]
    fn grad_softmax_logsoftmax_entropy() {
        let a = rng_tensor(&[3, 6], 9);
        check_grads(
            &|t, v| {
                let p = t.softmax_rows(v[0]);
                let h = t.entropy_rows(p);
                t.sum_all(h)
            },
            &[a.clone()],
            1e-6,
        );
        check_grads(
            &|t, v| {
                let lp = t.log_softmax_rows(v[0]);
                t.pick_weighted(lp, vec![2, 0, 5], vec![0.5, 0.0, 0.5])
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn grad_layernorm() {
        let x = rng_tensor(&[4, 6], 11);
        let gamma = rng_tensor(&[6], 12).map(|v| v + 1.5);
        let beta = rng_tensor(&[6], 13);
        check_grads(
            &|t, v| {
                let y = t.layernorm(v[0], v[1], v[2], 1e-6);
                let y2 = t.square(y);
                t.mean_all(y2)
            },
            &[x, gamma, beta],
            1e-5,
        );
    }

    #[test]
    fn grad_attention() {
        let q = rng_tensor(&[2 * 5, 8], 21); // batch 2, seq 5, dim 8, heads 2
        let k = rng_tensor(&[2 * 5, 8], 22);
        let v = rng_tensor(&[2 * 5, 8], 23);
        check_grads(
            &|t, vars| {
                let o = t.attention(vars[0], vars[1], vars[2], 2, 2);
                let o2 = t.square(o);
                t.mean_all(o2)
            },
            &[q, k, v],
            1e-5,
        );
    }

    #[test]
    fn grad_linear_fused() {
        let x = rng_tensor(&[5, 3], 24);
        let w = rng_tensor(&[4, 3], 25);
        let b = rng_tensor(&[4], 26);
        check_grads(
            &|t, v| {
                let y = t.linear(v[0], v[1], v[2]);
                let s = t.square(y);
                t.mean_all(s)
            },
            &[x.clone(), w.clone(), b.clone()],
            1e-6,
        );
        // fused path equals matmul + add_bias
        let mut t1 = Tape::new();
        let (xa, wa, ba) = (t1.leaf(x.clone()), t1.leaf(w.clone()), t1.leaf(b.clone()));
        let y1 = t1.linear(xa, wa, ba);
        let mut t2 = Tape::new();
        let (xb, wb, bb) = (t2.leaf(x), t2.leaf(w), t2.leaf(b));
        let mm = t2.matmul(xb, false, wb, true);
        let y2 = t2.add_bias(mm, bb);
        assert_eq!(t1.value(y1).data(), t2.value(y2).data());
    }

    #[test]
    fn grad_attention_packed_and_equivalence() {
        let qkv = rng_tensor(&[2 * 5, 24], 27); // batch 2, seq 5, dim 8, heads 2
        check_grads(
            &|t, v| {
                let o = t.attention_packed(v[0], 2, 2);
                let s = t.square(o);
                t.mean_all(s)
            },
            &[qkv.clone()],
            1e-5,
        );
        // packed output equals the three-operand op on the same slices
        let mut t1 = Tape::new();
        let packed = t1.leaf(qkv.clone());
        let o1 = t1.attention_packed(packed, 2, 2);
        let mut t2 = Tape::new();
        let full = t2.leaf(qkv);
        let q = t2.select_cols(full, 0, 8);
        let k = t2.select_cols(full, 8, 16);
        let v = t2.select_cols(full, 16, 24);
        let o2 = t2.attention(q, k, v, 2, 2);
        assert_eq!(t1.value(o1).data(), t2.value(o2).data());
    }

    #[test]
    fn grad_attention_single_query() {
        let qkv = rng_tensor(&[2 * 5, 24], 28); // batch 2, seq 5, dim 8, heads 2
        check_grads(
            &|t, v| {
                let o = t.attention_packed_single_query(v[0], 2, 2, 0);
                let s = t.square(o);
                t.mean_all(s)
            },
            &[qkv.clone()],
            1e-5,
        );
        // single-query output equals row 0 of the full attention per sample
        let mut t1 = Tape::new();
        let p1 = t1.leaf(qkv.clone());
        let o1 = t1.attention_packed_single_query(p1, 2, 2, 0);
        let mut t2 = Tape::new();
        let p2 = t2.leaf(qkv);
        let o2full = t2.attention_packed(p2, 2, 2);
        let o2 = t2.gather_rows(o2full, vec![0, 5]);
        for (a, b) in t1.value(o1).data().iter().zip(t2.value(o2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_conv2d() {
        let x = rng_tensor(&[2 * 3 * 6 * 6], 31);
        let w = rng_tensor(&[4, 3 * 3 * 3], 32);
        let b = rng_tensor(&[4], 33);
        check_grads(
            &|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], (2, 3, 6, 6), 3, 2, 1);
                let y2 = t.square(y);
                t.mean_all(y2)
            },
            &[x, w, b],
            1e-5,
        );
    }

    #[test]
    fn grad_row_and_gather_ops() {
        let x = rng_tensor(&[6, 4], 41);
        let tok = rng_tensor(&[4], 42);
        check_grads(
            &|t, v| {
                let g = t.gather_rows(v[0], vec![0, 2, 2, 5]);
                let p = t.prepend_token(g, v[1], 2, 2);
                let m = t.mean_pool_rows(p, 2, 3);
                let c = t.select_cols(m, 1, 3);
                let rm = t.row_mean(c);
                t.sum_all(rm)
            },
            &[x, tok],
            1e-6,
        );
    }

    #[test]
    fn grad_scatter_tokens() {
        let x = rng_tensor(&[2 * 2, 3], 51);
        let fill = rng_tensor(&[3], 52);
        check_grads(
            &|t, v| {
                let s = t.scatter_tokens(v[0], v[1], vec![vec![0, 3], vec![1, 2]], 4);
                let s2 = t.square(s);
                t.mean_all(s2)
            },
            &[x, fill],
            1e-6,
        );
    }

    #[test]
    fn grad_bce_and_scale_rows() {
        let x = rng_tensor(&[3, 4], 61);
        check_grads(
            &|t, v| {
                let sr = t.scale_rows(v[0], vec![1.25, 0.0, 2.0]);
                t.bce_logits(
                    sr,
                    vec![1., 0., 1., 1., 0., 0., 1., 0., 1., 1., 0., 1.],
                    vec![0.5, 0.5, 0.0],
                )
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn grad_concat_and_bias() {
        let a = rng_tensor(&[3, 2], 71);
        let b = rng_tensor(&[3, 3], 72);
        let bias = rng_tensor(&[5], 73);
        check_grads(
            &|t, v| {
                let c = t.concat_cols(&[v[0], v[1]]);
                let cb = t.add_bias(c, v[2]);
                let s = t.square(cb);
                t.mean_all(s)
            },
            &[a, b, bias],
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let a = rng_tensor(&[3], 81);
        let mut tape = Tape::new();
        let v = tape.leaf(a);
        let d = tape.detach(v);
        let s = tape.square(d);
        let out = tape.sum_all(s);
        let grads = tape.backward(out);
        assert!(grads.get(v).is_none(), "detached path must not produce a gradient");
    }

    #[test]
    fn masked_row_excluded_from_bce() {
        // changing a zero-weight row's logits must not change the loss
        let mut x = rng_tensor(&[2, 3], 91);
        let targets = vec![1., 0., 1., 0., 1., 0.];
        let weights = vec![1.0, 0.0];
        let loss = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let l = t.bce_logits(v, targets.clone(), weights.clone());
            t.value(l).item()
        };
        let l1 = loss(&x);
        x.data_mut()[3] = 100.0;
        assert_eq!(l1, loss(&x));
    }
}
