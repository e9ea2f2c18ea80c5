//! Training losses: masked binary cross-entropy for action units,
//! cross-entropy for expression, concordance-correlation loss for
//! valence/arousal, their unweighted multi-task sum, and the co-training
//! objective (Jensen-Shannon consistency plus per-view cross-entropy).
//! Natural logarithm throughout.
//!
//! Each loss exists twice: a pure f64 function (used by metrics, oracles and
//! tests) and a tape builder that records the differentiable computation.
//! Unit tests pin the two routes against each other.

use crate::data::NUM_AUS;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// ---- pure forms ----

/// Stable single-logit binary cross-entropy: max(p,0) - p*y + ln(1+e^-|p|).
fn bce_logit(p: f64, y: f64) -> f64 {
    p.max(0.0) - p * y + (-p.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over one logit/label row of any length.
pub fn bce_mean(logits: &[f64], labels: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), labels.len());
    let s: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_logit(p, y))
        .sum();
    s / logits.len() as f64
}

/// Masked AU loss: per-sample mean BCE over the 12 units, averaged over the
/// samples whose AU vector is valid; exactly 0 when none are.
pub fn loss_au(logits: &[f64], labels: &[u8], valid: &[bool]) -> Result<f64> {
    let b = valid.len();
    if logits.len() != b * NUM_AUS || labels.len() != b * NUM_AUS {
        return Err(Error::Shape(format!(
            "AU loss expects {NUM_AUS} logits and labels per sample"
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, &v) in valid.iter().enumerate() {
        if !v {
            continue;
        }
        let row = &logits[i * NUM_AUS..(i + 1) * NUM_AUS];
        let lab: Vec<f64> = labels[i * NUM_AUS..(i + 1) * NUM_AUS]
            .iter()
            .map(|&x| x as f64)
            .collect();
        total += bce_mean(row, &lab);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Expression loss: -log softmax(logits)[label], averaged over samples with
/// a non-negative label; exactly 0 when none have one.
pub fn loss_exp(logits: &[f64], k: usize, labels: &[i32]) -> Result<f64> {
    let b = labels.len();
    if logits.len() != b * k {
        return Err(Error::Shape(format!("expected {k} logits per sample")));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, &lab) in labels.iter().enumerate() {
        if lab < 0 {
            continue;
        }
        if lab as usize >= k {
            return Err(Error::InvalidLabel(format!(
                "expression label {lab} out of range for {k} classes"
            )));
        }
        let lp = log_softmax(&logits[i * k..(i + 1) * k]);
        total -= lp[lab as usize];
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Concordance correlation coefficient, covariance form, population (1/n)
/// statistics: 2 cov(x,y) / (var x + var y + (mean x - mean y)^2). Returns 0
/// when the denominator is below 1e-12.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Input("ccc: length mismatch".into()));
    }
    if x.len() < 2 {
        return Err(Error::Input("ccc: need at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov /= n;
    vx /= n;
    vy /= n;
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom < 1e-12 {
        return Ok(0.0);
    }
    Ok(2.0 * cov / denom)
}

/// VA loss over the valid subset of a batch: 1 - (CCC_valence + CCC_arousal).
/// Returns (0, skipped=true) when fewer than 2 samples are VA-valid.
pub fn loss_va(pred: &[(f64, f64)], labels: &[(f64, f64)], valid: &[bool]) -> Result<(f64, bool)> {
    if pred.len() != labels.len() || pred.len() != valid.len() {
        return Err(Error::Input("va loss: length mismatch".into()));
    }
    let mut pv = Vec::new();
    let mut pa = Vec::new();
    let mut lv = Vec::new();
    let mut la = Vec::new();
    for ((p, l), &v) in pred.iter().zip(labels).zip(valid) {
        if v {
            pv.push(p.0);
            pa.push(p.1);
            lv.push(l.0);
            la.push(l.1);
        }
    }
    if pv.len() < 2 {
        return Ok((0.0, true));
    }
    let c_v = ccc(&pv, &lv)?;
    let c_a = ccc(&pa, &la)?;
    Ok((1.0 - (c_a + c_v), false))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtlLoss {
    pub total: f64,
    pub au: f64,
    pub va: f64,
    pub exp: f64,
    pub va_skipped: bool,
}

/// Unweighted multi-task objective: L (total) = L_AU + L_VA + L_EXP.
#[allow(clippy::too_many_arguments)]
pub fn loss_mtl(
    au_logits: &[f64],
    au_labels: &[u8],
    au_valid: &[bool],
    exp_logits: &[f64],
    k: usize,
    exp_labels: &[i32],
    va_pred: &[(f64, f64)],
    va_labels: &[(f64, f64)],
    va_valid: &[bool],
) -> Result<MtlLoss> {
    let au = loss_au(au_logits, au_labels, au_valid)?;
    let exp = loss_exp(exp_logits, k, exp_labels)?;
    let (va, va_skipped) = loss_va(va_pred, va_labels, va_valid)?;
    Ok(MtlLoss {
        total: au + va + exp,
        au,
        va,
        exp,
        va_skipped,
    })
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

fn validate_prob(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| v < 0.0) {
        return Err(Error::Input("probability vector has negative entry".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("probability vector sums to {s}")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats: H(m) - (H(p) + H(q))/2 with
/// m = (p + q)/2 and the 0 ln 0 = 0 convention. Bounded by [0, ln 2].
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input("js: length mismatch".into()));
    }
    validate_prob(p)?;
    validate_prob(q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    Ok(entropy(&m) - 0.5 * (entropy(p) + entropy(q)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CotexLoss {
    pub total: f64,
    pub js: f64,
    pub ce1: f64,
    pub ce2: f64,
}

/// Co-training objective: lambda * mean-batch JS between the two views'
/// softmax outputs, plus the per-view cross-entropies.
pub fn loss_cotex(
    logits1: &[f64],
    logits2: &[f64],
    k: usize,
    labels: &[i32],
    lambda: f64,
) -> Result<CotexLoss> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let b = labels.len();
    if logits1.len() != b * k || logits2.len() != b * k {
        return Err(Error::Shape(format!("expected {k} logits per sample")));
    }
    let mut js = 0.0;
    for i in 0..b {
        let p1 = softmax(&logits1[i * k..(i + 1) * k]);
        let p2 = softmax(&logits2[i * k..(i + 1) * k]);
        js += js_divergence(&p1, &p2)?;
    }
    js /= b as f64;
    let ce1 = loss_exp(logits1, k, labels)?;
    let ce2 = loss_exp(logits2, k, labels)?;
    Ok(CotexLoss {
        total: lambda * js + ce1 + ce2,
        js,
        ce1,
        ce2,
    })
}

// ---- tape forms ----

/// Per-sample weights that average over the valid subset: 1/n_valid for
/// valid rows, 0 for the rest (all zeros when nothing is valid).
pub fn valid_weights<T: Scalar>(valid: &[bool]) -> Vec<T> {
    let n = valid.iter().filter(|&&v| v).count();
    let w = if n == 0 {
        T::ZERO
    } else {
        T::from_f64(1.0 / n as f64)
    };
    valid
        .iter()
        .map(|&v| if v { w } else { T::ZERO })
        .collect()
}

/// Differentiable masked AU loss on [B, 12] logits.
pub fn loss_au_tape<T: Scalar>(
    tape: &mut Tape<T>,
    au_logits: Var,
    au_labels: &[u8],
    valid: &[bool],
) -> Var {
    let targets: Vec<T> = au_labels.iter().map(|&v| T::from_f64(v as f64)).collect();
    tape.bce_logits(au_logits, targets, valid_weights(valid))
}

/// Differentiable expression loss on [B, K] logits; labels < 0 are masked.
pub fn loss_exp_tape<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[i32]) -> Var {
    let valid: Vec<bool> = labels.iter().map(|&l| l >= 0).collect();
    let idx: Vec<usize> = labels.iter().map(|&l| l.max(0) as usize).collect();
    let lp = tape.log_softmax_rows(logits);
    let picked = tape.pick_weighted(lp, idx, valid_weights(&valid));
    tape.scale(picked, -1.0)
}

/// Differentiable CCC of a prediction column [N, 1] against constant labels,
/// batch (population) statistics. Returns a constant 0 when the denominator
/// degenerates, matching the pure form.
pub fn ccc_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, y: &[f64]) -> Var {
    let n = y.len();
    assert_eq!(tape.value(x).numel(), n, "ccc: length mismatch");
    let my = y.iter().sum::<f64>() / n as f64;
    let vy = y.iter().map(|&v| (v - my) * (v - my)).sum::<f64>() / n as f64;
    let yc = tape.constant(Tensor::from_f64_slice(&[n, 1], y));

    let mx = tape.mean_all(x);
    let xy = tape.mul(x, yc);
    let mean_xy = tape.mean_all(xy);
    let mx_my = tape.scale(mx, my);
    let cov = tape.sub(mean_xy, mx_my);
    let x2 = tape.square(x);
    let mean_x2 = tape.mean_all(x2);
    let mx2 = tape.square(mx);
    let varx = tape.sub(mean_x2, mx2);
    let dm = tape.offset(mx, -my);
    let dm2 = tape.square(dm);
    let vsum = tape.add(varx, dm2);
    let denom = tape.offset(vsum, vy);
    if tape.value(denom).item().to_f64() < 1e-12 {
        return tape.constant(Tensor::scalar(T::ZERO));
    }
    let num = tape.scale(cov, 2.0);
    tape.div(num, denom)
}

/// Differentiable VA loss on [B, 2] predictions. None when fewer than 2
/// valid samples (the batch is VA-skipped).
pub fn loss_va_tape<T: Scalar>(
    tape: &mut Tape<T>,
    va_pred: Var,
    va_labels: &[(f64, f64)],
    valid: &[bool],
) -> Option<Var> {
    let idx: Vec<usize> = valid
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| v.then_some(i))
        .collect();
    if idx.len() < 2 {
        return None;
    }
    let lv: Vec<f64> = idx.iter().map(|&i| va_labels[i].0).collect();
    let la: Vec<f64> = idx.iter().map(|&i| va_labels[i].1).collect();
    let sel = tape.gather_rows(va_pred, idx);
    let pv = tape.select_cols(sel, 0, 1);
    let pa = tape.select_cols(sel, 1, 2);
    let cv = ccc_tape(tape, pv, &lv);
    let ca = ccc_tape(tape, pa, &la);
    let s = tape.add(cv, ca);
    let neg = tape.scale(s, -1.0);
    Some(tape.offset(neg, 1.0))
}

/// Differentiable mean-batch JS between softmax(logits1) and softmax(logits2).
pub fn js_tape<T: Scalar>(tape: &mut Tape<T>, logits1: Var, logits2: Var) -> Var {
    let (b, _) = tape.value(logits1).dims2();
    let p1 = tape.softmax_rows(logits1);
    let p2 = tape.softmax_rows(logits2);
    let psum = tape.add(p1, p2);
    let m = tape.scale(psum, 0.5);
    let hm = tape.entropy_rows(m);
    let h1 = tape.entropy_rows(p1);
    let h2 = tape.entropy_rows(p2);
    let hsum = tape.add(h1, h2);
    let havg = tape.scale(hsum, 0.5);
    let js_rows = tape.sub(hm, havg);
    let w = vec![T::from_f64(1.0 / b as f64); b];
    tape.dot_const(js_rows, w)
}

/// Differentiable co-training objective; returns (total, js, ce1, ce2).
pub fn loss_cotex_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits1: Var,
    logits2: Var,
    labels: &[i32],
    lambda: f64,
) -> Result<(Var, Var, Var, Var)> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let js = js_tape(tape, logits1, logits2);
    let ce1 = loss_exp_tape(tape, logits1, labels);
    let ce2 = loss_exp_tape(tape, logits2, labels);
    let js_scaled = tape.scale(js, lambda);
    let ce = tape.add(ce1, ce2);
    let total = tape.add(js_scaled, ce);
    Ok((total, js, ce1, ce2))
}
