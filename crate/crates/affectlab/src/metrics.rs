//! Dataset-level evaluation: CCC per valence/arousal axis, one-vs-rest
//! per-class F1, macro aggregates, and the challenge scores
//! P_MTL = (CCC_V + CCC_A)/2 + mean expression F1 + mean AU F1 and
//! P_LSD = mean of the six expression F1 scores. Sentinel-marked rows are
//! excluded per task.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{
    LabelRow, PredictionRow, Task, AU_NAMES, LSD_CLASSES, MTL_CLASSES, NUM_AUS,
};
use crate::error::{Error, Result};
use crate::objectives::ccc;

/// F1 from raw counts; 0 whenever a denominator degenerates (no positive
/// predictions, no positive labels, or zero precision+recall).
pub fn f1_binary(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp == 0 || tp + fn_ == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    if p + r == 0.0 {
        return 0.0;
    }
    2.0 * p * r / (p + r)
}

/// One-vs-rest per-class F1 for a multi-class problem with classes 0..k.
pub fn per_class_f1(preds: &[i32], labels: &[i32], k: usize) -> Vec<f64> {
    let mut counts = vec![(0usize, 0usize, 0usize); k]; // (tp, fp, fn)
    for (&p, &l) in preds.iter().zip(labels) {
        for (c, e) in counts.iter_mut().enumerate() {
            let c = c as i32;
            match (p == c, l == c) {
                (true, true) => e.0 += 1,
                (true, false) => e.1 += 1,
                (false, true) => e.2 += 1,
                (false, false) => {}
            }
        }
    }
    counts
        .iter()
        .map(|&(tp, fp, fn_)| f1_binary(tp, fp, fn_))
        .collect()
}

/// Unweighted mean of the one-vs-rest F1 scores over all k classes.
pub fn macro_f1(preds: &[i32], labels: &[i32], k: usize) -> f64 {
    let per = per_class_f1(preds, labels, k);
    per.iter().sum::<f64>() / k as f64
}

/// Mean per-class recall over all k classes (0 for classes with no labels).
pub fn macro_recall(preds: &[i32], labels: &[i32], k: usize) -> f64 {
    let mut hit = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if l >= 0 && (l as usize) < k {
            total[l as usize] += 1;
            if p == l {
                hit[l as usize] += 1;
            }
        }
    }
    (0..k)
        .map(|c| {
            if total[c] == 0 {
                0.0
            } else {
                hit[c] as f64 / total[c] as f64
            }
        })
        .sum::<f64>()
        / k as f64
}

/// The multi-task aggregate; monotone in every component.
pub fn p_mtl_from_components(ccc_v: f64, ccc_a: f64, f1_exp: &[f64], f1_au: &[f64]) -> f64 {
    0.5 * (ccc_v + ccc_a)
        + f1_exp.iter().sum::<f64>() / f1_exp.len() as f64
        + f1_au.iter().sum::<f64>() / f1_au.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: Task,
    pub ccc_v: f64,
    pub ccc_a: f64,
    pub f1_exp: Vec<f64>,
    pub f1_au: Vec<f64>,
    pub p_score: f64,
    /// Macro accuracy (mean per-class recall); expression-only task.
    pub acc: Option<f64>,
    pub n_va: usize,
    pub n_exp: usize,
    pub n_au: usize,
    pub warnings: Vec<String>,
}

fn join_by_id<'a>(
    preds: &'a [PredictionRow],
    labels: &'a [LabelRow],
) -> Result<Vec<(&'a PredictionRow, &'a LabelRow)>> {
    if preds.len() != labels.len() {
        return Err(Error::Alignment(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut by_id: HashMap<&str, &PredictionRow> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::Alignment(format!("duplicate prediction id {}", p.id)));
        }
    }
    labels
        .iter()
        .map(|l| {
            by_id
                .get(l.id.as_str())
                .map(|&p| (p, l))
                .ok_or_else(|| Error::Alignment(format!("no prediction for id {}", l.id)))
        })
        .collect()
}

/// Multi-task evaluation over id-aligned prediction and label rows.
pub fn eval_mtl(preds: &[PredictionRow], labels: &[LabelRow]) -> Result<MetricReport> {
    let pairs = join_by_id(preds, labels)?;
    let mut warnings = Vec::new();

    // dataset-level CCC over the VA-valid subset
    let mut pv = Vec::new();
    let mut pa = Vec::new();
    let mut lv = Vec::new();
    let mut la = Vec::new();
    for (p, l) in &pairs {
        if l.labels.va.is_valid() {
            pv.push(p.valence);
            pa.push(p.arousal);
            lv.push(l.labels.va.valence);
            la.push(l.labels.va.arousal);
        }
    }
    let (ccc_v, ccc_a) = if pv.len() < 2 {
        warnings.push("va_empty".into());
        (0.0, 0.0)
    } else {
        (ccc(&pv, &lv)?, ccc(&pa, &la)?)
    };

    // expression macro F1 over the EXPR-valid subset
    let mut ep = Vec::new();
    let mut el = Vec::new();
    for (p, l) in &pairs {
        if l.labels.expression.is_valid() {
            if l.labels.expression.0 as usize >= MTL_CLASSES {
                return Err(Error::InvalidLabel(format!(
                    "expression label {} out of range",
                    l.labels.expression.0
                )));
            }
            ep.push(p.expression);
            el.push(l.labels.expression.0);
        }
    }
    let f1_exp = if ep.is_empty() {
        warnings.push("exp_empty".into());
        vec![0.0; MTL_CLASSES]
    } else {
        per_class_f1(&ep, &el, MTL_CLASSES)
    };

    // per-AU F1 over the AU-valid subset
    let au_pairs: Vec<(&PredictionRow, &LabelRow)> = pairs
        .iter()
        .filter(|(_, l)| l.labels.au.valid)
        .cloned()
        .collect();
    let f1_au = if au_pairs.is_empty() {
        warnings.push("au_empty".into());
        vec![0.0; NUM_AUS]
    } else {
        (0..NUM_AUS)
            .map(|j| {
                let (mut tp, mut fp, mut fn_) = (0, 0, 0);
                for (p, l) in &au_pairs {
                    match (p.au[j] == 1, l.labels.au.values[j] == 1) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
                f1_binary(tp, fp, fn_)
            })
            .collect()
    };

    let p_score = p_mtl_from_components(ccc_v, ccc_a, &f1_exp, &f1_au);
    Ok(MetricReport {
        task: Task::Mtl,
        ccc_v,
        ccc_a,
        f1_exp,
        f1_au,
        p_score,
        acc: None,
        n_va: pv.len(),
        n_exp: ep.len(),
        n_au: au_pairs.len(),
        warnings,
    })
}

/// Expression-only evaluation: mean of the six per-class F1 scores, plus
/// macro accuracy.
pub fn eval_lsd(preds: &[PredictionRow], labels: &[LabelRow]) -> Result<MetricReport> {
    let pairs = join_by_id(preds, labels)?;
    let mut ep = Vec::with_capacity(pairs.len());
    let mut el = Vec::with_capacity(pairs.len());
    for (p, l) in &pairs {
        let lab = l.labels.expression.0;
        if !(0..LSD_CLASSES as i32).contains(&lab) {
            return Err(Error::InvalidLabel(format!(
                "expression label {lab} outside 0..{LSD_CLASSES}"
            )));
        }
        ep.push(p.expression);
        el.push(lab);
    }
    let f1_exp = per_class_f1(&ep, &el, LSD_CLASSES);
    let p_score = f1_exp.iter().sum::<f64>() / LSD_CLASSES as f64;
    let acc = macro_recall(&ep, &el, LSD_CLASSES);
    Ok(MetricReport {
        task: Task::Lsd,
        ccc_v: 0.0,
        ccc_a: 0.0,
        f1_exp,
        f1_au: Vec::new(),
        p_score,
        acc: Some(acc),
        n_va: 0,
        n_exp: ep.len(),
        n_au: 0,
        warnings: Vec::new(),
    })
}

pub fn eval_mtl_files(pred_path: &Path, labels_path: &Path) -> Result<MetricReport> {
    let preds = crate::data::read_predictions_csv(pred_path)?;
    let labels = crate::data::read_labels_csv(labels_path)?;
    eval_mtl(&preds, &labels)
}

pub fn eval_lsd_files(pred_path: &Path, labels_path: &Path) -> Result<MetricReport> {
    let preds = crate::data::read_predictions_csv(pred_path)?;
    let labels = crate::data::read_labels_csv(labels_path)?;
    eval_lsd(&preds, &labels)
}

impl MetricReport {
    /// Machine-readable key=value lines (also consumed by `parse`).
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task={}", self.task.name());
        match self.task {
            Task::Mtl => {
                let _ = writeln!(out, "ccc_v={:.6}", self.ccc_v);
                let _ = writeln!(out, "ccc_a={:.6}", self.ccc_a);
                for (i, f) in self.f1_exp.iter().enumerate() {
                    let _ = writeln!(out, "f1_exp_{i}={f:.6}");
                }
                for (j, f) in self.f1_au.iter().enumerate() {
                    let _ = writeln!(out, "f1_au_{}={:.6}", AU_NAMES[j], f);
                }
                let _ = writeln!(out, "p_mtl={:.6}", self.p_score);
            }
            Task::Lsd => {
                for (i, f) in self.f1_exp.iter().enumerate() {
                    let _ = writeln!(out, "f1_exp_{i}={f:.6}");
                }
                let _ = writeln!(out, "p_lsd={:.6}", self.p_score);
                let _ = writeln!(out, "acc={:.6}", self.acc.unwrap_or(0.0));
            }
        }
        let _ = writeln!(out, "n_va={}", self.n_va);
        let _ = writeln!(out, "n_exp={}", self.n_exp);
        let _ = writeln!(out, "n_au={}", self.n_au);
        let _ = writeln!(out, "warnings={}", self.warnings.join(";"));
        out
    }

    /// Human-readable report followed by the key=value block.
    pub fn format_text(&self) -> String {
        let mut out = String::new();
        match self.task {
            Task::Mtl => {
                let _ = writeln!(
                    out,
                    "P_MTL = {:.6}  (VA CCC mean {:.6}, EXPR macro-F1 {:.6}, AU macro-F1 {:.6})",
                    self.p_score,
                    0.5 * (self.ccc_v + self.ccc_a),
                    self.f1_exp.iter().sum::<f64>() / self.f1_exp.len() as f64,
                    self.f1_au.iter().sum::<f64>() / self.f1_au.len() as f64,
                );
            }
            Task::Lsd => {
                let _ = writeln!(
                    out,
                    "P_LSD = {:.6}  (macro accuracy {:.6})",
                    self.p_score,
                    self.acc.unwrap_or(0.0)
                );
            }
        }
        if !self.warnings.is_empty() {
            let _ = writeln!(out, "warning: empty valid subset for: {}", self.warnings.join(", "));
        }
        out.push_str(&self.key_values());
        out
    }

    /// Parse the key=value block back into a report.
    pub fn parse(text: &str) -> Result<MetricReport> {
        let mut map = HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Input(format!("report missing key {k}")))
        };
        let getf = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Input(format!("bad value for {k}")))
        };
        let getn = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Input(format!("bad value for {k}")))
        };
        let task = match get("task")?.as_str() {
            "mtl" => Task::Mtl,
            "lsd" => Task::Lsd,
            other => return Err(Error::Input(format!("unknown task {other}"))),
        };
        let warnings: Vec<String> = map
            .get("warnings")
            .map(|w| {
                w.split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.to_string())
                    .collect()
            })
            .unwrap_or_default();
        let report = match task {
            Task::Mtl => {
                let f1_exp: Vec<f64> = (0..MTL_CLASSES)
                    .map(|i| getf(&format!("f1_exp_{i}")))
                    .collect::<Result<_>>()?;
                let f1_au: Vec<f64> = AU_NAMES
                    .iter()
                    .map(|n| getf(&format!("f1_au_{n}")))
                    .collect::<Result<_>>()?;
                MetricReport {
                    task,
                    ccc_v: getf("ccc_v")?,
                    ccc_a: getf("ccc_a")?,
                    p_score: getf("p_mtl")?,
                    f1_exp,
                    f1_au,
                    acc: None,
                    n_va: getn("n_va")?,
                    n_exp: getn("n_exp")?,
                    n_au: getn("n_au")?,
                    warnings,
                }
            }
            Task::Lsd => {
                let f1_exp: Vec<f64> = (0..LSD_CLASSES)
                    .map(|i| getf(&format!("f1_exp_{i}")))
                    .collect::<Result<_>>()?;
                MetricReport {
                    task,
                    ccc_v: 0.0,
                    ccc_a: 0.0,
                    p_score: getf("p_lsd")?,
                    f1_exp,
                    f1_au: Vec::new(),
                    acc: Some(getf("acc")?),
                    n_va: 0,
                    n_exp: getn("n_exp")?,
                    n_au: 0,
                    warnings,
                }
            }
        };
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AULabels, ExpressionLabel, Labels, VAPair};
    use crate::nn::derive_rng;
    use rand::Rng;

    fn label_row(id: &str, va: (f64, f64), exp: i32, au: [u8; 12], au_valid: bool) -> LabelRow {
        LabelRow {
            id: id.into(),
            labels: Labels {
                va: VAPair {
                    valence: va.0,
                    arousal: va.1,
                },
                expression: ExpressionLabel(exp),
                au: AULabels {
                    values: au,
                    valid: au_valid,
                },
            },
        }
    }

    fn pred_row(id: &str, va: (f64, f64), exp: i32, au: [u8; 12]) -> PredictionRow {
        PredictionRow {
            id: id.into(),
            valence: va.0,
            arousal: va.1,
            expression: exp,
            au,
        }
    }

    #[test]
    fn f1_binary_conventions() {
        assert_eq!(f1_binary(5, 0, 0), 1.0);
        assert_eq!(f1_binary(1, 1, 1), 0.5);
        assert_eq!(f1_binary(0, 3, 2), 0.0);
        assert_eq!(f1_binary(0, 0, 0), 0.0);
    }

    #[test]
    fn macro_f1_hand_example() {
        // predictions (0,1,1,1) vs labels (0,0,1,1) on classes {0,1}:
        // class 0: tp=1 fp=0 fn=1 -> 2/3; class 1: tp=2 fp=1 fn=0 -> 4/5
        let m = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2);
        assert!((m - (2.0 / 3.0 + 4.0 / 5.0) / 2.0).abs() < 1e-12);
        assert!((m - 0.7333333333).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions_hit_the_upper_bounds() {
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        let mut rng = derive_rng(1, &[1]);
        for i in 0..64 {
            let va = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let exp = rng.random_range(0..8);
            let mut au = [0u8; 12];
            for a in au.iter_mut() {
                *a = rng.random_range(0..2) as u8;
            }
            labels.push(label_row(&format!("s{i}"), va, exp, au, true));
            preds.push(pred_row(&format!("s{i}"), va, exp, au));
        }
        // ensure all 8 classes and all AUs appear at least once
        for c in 0..8 {
            labels[c].labels.expression = ExpressionLabel(c as i32);
            preds[c].expression = c as i32;
        }
        for j in 0..12 {
            labels[j].labels.au.values[j] = 1;
            preds[j].au[j] = 1;
        }
        let rep = eval_mtl(&preds, &labels).unwrap();
        assert!((rep.p_score - 3.0).abs() < 1e-9, "P_MTL {}", rep.p_score);

        // LSD: perfect -> P_LSD = 1, acc = 1
        let mut l2 = Vec::new();
        let mut p2 = Vec::new();
        for i in 0..24 {
            let exp = (i % 6) as i32;
            l2.push(label_row(&format!("s{i}"), (0.0, 0.0), exp, [0; 12], true));
            p2.push(pred_row(&format!("s{i}"), (0.0, 0.0), exp, [0; 12]));
        }
        let rep2 = eval_lsd(&p2, &l2).unwrap();
        assert_eq!(rep2.p_score, 1.0);
        assert_eq!(rep2.acc, Some(1.0));
    }

    #[test]
    fn paper_component_arithmetic() {
        // Final-score rows reconstructed from per-component values
        let p = p_mtl_from_components(0.4588, 0.4588, &[0.3028; 8], &[0.5054; 12]);
        assert!((p - 1.2671).abs() < 2e-4, "p = {p}");
        let p2 = p_mtl_from_components(0.4121, 0.4121, &[0.3168; 8], &[0.5041; 12]);
        assert!((p2 - 1.2329).abs() < 2e-4, "p2 = {p2}");
    }

    #[test]
    fn sentinel_rows_are_excluded_per_component() {
        let labels = vec![
            label_row("a", (-5.0, -5.0), 1, [1; 12], true),
            label_row("b", (0.5, -0.5), -1, [0; 12], false),
            label_row("c", (0.1, 0.2), 0, [1; 12], true),
            label_row("d", (-0.3, 0.8), 1, [0; 12], true),
        ];
        let preds = vec![
            pred_row("a", (0.9, 0.9), 1, [1; 12]),
            pred_row("b", (0.5, -0.5), 0, [0; 12]),
            pred_row("c", (0.1, 0.2), 0, [1; 12]),
            pred_row("d", (-0.3, 0.8), 1, [0; 12]),
        ];
        let rep = eval_mtl(&preds, &labels).unwrap();
        assert_eq!(rep.n_va, 3); // a excluded
        assert_eq!(rep.n_exp, 3); // b excluded
        assert_eq!(rep.n_au, 3); // b excluded
        // VA-valid predictions equal labels on b, c, d -> perfect CCC
        assert!((rep.ccc_v - 1.0).abs() < 1e-12);
        assert!((rep.ccc_a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn row_permutation_and_id_join() {
        let labels = vec![
            label_row("x", (0.1, 0.2), 0, [1; 12], true),
            label_row("y", (0.3, -0.1), 1, [0; 12], true),
            label_row("z", (-0.6, 0.4), 2, [1; 12], true),
        ];
        let preds = vec![
            pred_row("z", (-0.5, 0.5), 2, [1; 12]),
            pred_row("x", (0.2, 0.1), 0, [0; 12]),
            pred_row("y", (0.4, -0.2), 1, [0; 12]),
        ];
        let a = eval_mtl(&preds, &labels).unwrap();
        let mut shuffled = labels.clone();
        shuffled.swap(0, 2);
        let b = eval_mtl(&preds, &shuffled).unwrap();
        assert!((a.ccc_v - b.ccc_v).abs() < 1e-12);
        assert!((a.ccc_a - b.ccc_a).abs() < 1e-12);
        assert_eq!(a.f1_exp, b.f1_exp);
        assert_eq!(a.f1_au, b.f1_au);
        assert!((a.p_score - b.p_score).abs() < 1e-12);

        let missing = vec![preds[0].clone(), preds[1].clone()];
        assert!(matches!(
            eval_mtl(&missing, &labels),
            Err(Error::Alignment(_))
        ));
        let mut wrong_id = preds.clone();
        wrong_id[0].id = "nope".into();
        assert!(matches!(
            eval_mtl(&wrong_id, &labels),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn empty_components_warn_and_score_zero() {
        let labels = vec![
            label_row("a", (-5.0, -5.0), -1, [0; 12], false),
            label_row("b", (-5.0, -5.0), -1, [0; 12], false),
        ];
        let preds = vec![
            pred_row("a", (0.0, 0.0), 0, [0; 12]),
            pred_row("b", (0.0, 0.0), 0, [0; 12]),
        ];
        let rep = eval_mtl(&preds, &labels).unwrap();
        assert_eq!(rep.p_score, 0.0);
        assert_eq!(rep.warnings.len(), 3);
    }

    #[test]
    fn lsd_hand_confusion_and_absent_class() {
        // 12 samples, 2 per class; one error per class: one sample of class
        // c predicted as (c+1) mod 6 -> per-class tp=1, fp=1, fn=1 -> F1 0.5
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        let mut i = 0;
        for c in 0..6i32 {
            for rep in 0..2 {
                labels.push(label_row(&format!("s{i}"), (0.0, 0.0), c, [0; 12], true));
                let p = if rep == 0 { (c + 1) % 6 } else { c };
                preds.push(pred_row(&format!("s{i}"), (0.0, 0.0), p, [0; 12]));
                i += 1;
            }
        }
        // independent brute-force confusion count as the oracle
        let mut conf = [[0usize; 6]; 6];
        for (p, l) in preds.iter().zip(&labels) {
            conf[l.labels.expression.0 as usize][p.expression as usize] += 1;
        }
        let mut expect = 0.0;
        for c in 0..6 {
            let tp = conf[c][c];
            let fp: usize = (0..6).filter(|&r| r != c).map(|r| conf[r][c]).sum();
            let fn_: usize = (0..6).filter(|&q| q != c).map(|q| conf[c][q]).sum();
            expect += f1_binary(tp, fp, fn_);
        }
        expect /= 6.0;
        let rep = eval_lsd(&preds, &labels).unwrap();
        assert!((rep.p_score - expect).abs() < 1e-12);
        assert!((rep.p_score - 0.5).abs() < 1e-12);
        assert_eq!(rep.acc, Some(0.5));

        // a class absent from labels and predictions contributes F1 = 0
        let l2: Vec<LabelRow> = labels.iter().filter(|l| l.labels.expression.0 != 5).cloned().collect();
        let p2: Vec<PredictionRow> = preds
            .iter()
            .filter(|p| {
                l2.iter().any(|l| l.id == p.id)
            })
            .map(|p| {
                let mut p = p.clone();
                if p.expression == 5 {
                    p.expression = 4;
                }
                p
            })
            .collect();
        let rep2 = eval_lsd(&p2, &l2).unwrap();
        assert_eq!(rep2.f1_exp[5], 0.0);
        let mean_check: f64 = rep2.f1_exp.iter().sum::<f64>() / 6.0;
        assert!((rep2.p_score - mean_check).abs() < 1e-12);

        // unknown class in labels is an error
        let mut bad = labels.clone();
        bad[0].labels.expression = ExpressionLabel(6);
        assert!(matches!(
            eval_lsd(&preds, &bad),
            Err(Error::InvalidLabel(_))
        ));
    }

    #[test]
    fn aggregate_is_monotone_in_each_component() {
        let f1e = [0.3; 8];
        let f1a = [0.5; 12];
        let base = p_mtl_from_components(0.4, 0.4, &f1e, &f1a);
        let mut better_e = f1e;
        better_e[3] += 0.1;
        assert!(p_mtl_from_components(0.4, 0.4, &better_e, &f1a) > base);
        let mut better_a = f1a;
        better_a[7] += 0.05;
        assert!(p_mtl_from_components(0.4, 0.4, &f1e, &better_a) > base);
        assert!(p_mtl_from_components(0.5, 0.4, &f1e, &f1a) > base);
    }

    #[test]
    fn macro_f1_invariant_under_class_relabeling() {
        let mut rng = derive_rng(2, &[2]);
        let preds: Vec<i32> = (0..60).map(|_| rng.random_range(0..6)).collect();
        let labels: Vec<i32> = (0..60).map(|_| rng.random_range(0..6)).collect();
        let base = macro_f1(&preds, &labels, 6);
        let perm = [3, 5, 0, 2, 4, 1];
        let p2: Vec<i32> = preds.iter().map(|&p| perm[p as usize]).collect();
        let l2: Vec<i32> = labels.iter().map(|&l| perm[l as usize]).collect();
        assert!((base - macro_f1(&p2, &l2, 6)).abs() < 1e-12);
    }

    #[test]
    fn dataset_ccc_equals_objectives_ccc() {
        let mut rng = derive_rng(3, &[3]);
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        let mut pv = Vec::new();
        let mut lv = Vec::new();
        for i in 0..40 {
            let valid = rng.random::<f64>() > 0.2;
            let lva = if valid {
                (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            } else {
                (-5.0, -5.0)
            };
            let pva = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if valid {
                pv.push(pva.0);
                lv.push(lva.0);
            }
            labels.push(label_row(&format!("s{i}"), lva, 0, [0; 12], true));
            preds.push(pred_row(&format!("s{i}"), pva, 0, [0; 12]));
        }
        let rep = eval_mtl(&preds, &labels).unwrap();
        assert!((rep.ccc_v - ccc(&pv, &lv).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn report_round_trips_through_key_values() {
        let rep = MetricReport {
            task: Task::Mtl,
            ccc_v: 0.505432,
            ccc_a: 0.458811,
            f1_exp: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            f1_au: (0..12).map(|i| i as f64 / 12.0).collect(),
            p_score: 1.267,
            acc: None,
            n_va: 100,
            n_exp: 90,
            n_au: 80,
            warnings: vec![],
        };
        let parsed = MetricReport::parse(&rep.format_text()).unwrap();
        assert_eq!(parsed.task, Task::Mtl);
        assert!((parsed.ccc_v - rep.ccc_v).abs() < 1e-6);
        assert!((parsed.p_score - rep.p_score).abs() < 1e-6);
        assert_eq!(parsed.n_exp, 90);
        for (a, b) in parsed.f1_au.iter().zip(&rep.f1_au) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
