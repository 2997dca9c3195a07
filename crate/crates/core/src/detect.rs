//! Detection statistics: ROC/AUROC, cross-validated logistic regression,
//! point-biserial correlation and the catch-every-negative intervention.
//!
//! Labels are `true` for positives (correct answers) and `false` for
//! negatives (hallucinations).

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsPositive,
    LowerIsPositive,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::HigherIsPositive => "higher_is_positive",
            Direction::LowerIsPositive => "lower_is_positive",
        }
    }

    fn oriented(self, s: f64) -> f64 {
        match self {
            Direction::HigherIsPositive => s,
            Direction::LowerIsPositive => -s,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Direction::HigherIsPositive => Direction::LowerIsPositive,
            Direction::LowerIsPositive => Direction::HigherIsPositive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or beyond this value (in the positive direction) are called positive.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auroc: f64,
    pub curve: Vec<RocPoint>,
    pub direction: Direction,
}

impl RocResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["fpr", "tpr", "threshold"])?;
        for p in &self.curve {
            out.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), got: labels.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid("both classes must be present"));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC with ties counted half, plus the threshold-sweep curve.
pub fn auroc(scores: &[f64], labels: &[bool], direction: Direction) -> Result<RocResult> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let oriented: Vec<f64> = scores.iter().map(|&s| direction.oriented(s)).collect();
    let ranks = stats::average_ranks(&oriented);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    let auc = u / (p * n);

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| oriented[b].total_cmp(&oriented[a]));
    let mut curve = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let value = oriented[order[i]];
        while i < order.len() && oriented[order[i]] == value {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(RocPoint { fpr: fp as f64 / n, tpr: tp as f64 / p, threshold: direction.oriented(value) });
    }
    Ok(RocResult { auroc: auc, curve, direction })
}

/// Pairwise-comparison AUROC, O(n²). Exposed for cross-checking.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool], direction: Direction) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut twice = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            let (a, b) = (direction.oriented(scores[i]), direction.oriented(scores[j]));
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mean_auroc: f64,
    pub std_auroc: f64,
    pub folds: usize,
    pub feature_names: Vec<String>,
    pub fold_aurocs: Vec<f64>,
}

impl CvResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig { learning_rate: 0.5, max_iters: 2000, grad_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    /// Full-batch gradient descent on standardized features, no penalty.
    pub fn fit(rows: &[&[f64]], labels: &[bool], cfg: &LogisticConfig) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).ok_or_else(|| invalid("no training rows"))?;
        let n = rows.len() as f64;
        let mut means = vec![0.0; d];
        let mut scales = vec![0.0; d];
        for j in 0..d {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            means[j] = stats::mean(&col);
            let var = col.iter().map(|x| (x - means[j]).powi(2)).sum::<f64>() / n;
            scales[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = rows.iter().map(|r| (0..d).map(|j| (r[j] - means[j]) / scales[j]).collect()).collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..cfg.max_iters {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, &y) in z.iter().zip(labels) {
                let s = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                let err = sigmoid(s) - if y { 1.0 } else { 0.0 };
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += err * xi;
                }
                gb += err;
            }
            let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt() / n;
            if norm < cfg.grad_tol {
                break;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= cfg.learning_rate * g / n;
            }
            b -= cfg.learning_rate * gb / n;
        }
        Ok(Logistic { means, scales, weights: w, bias: b })
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        x.iter().enumerate().map(|(j, v)| (v - self.means[j]) / self.scales[j] * self.weights[j]).sum::<f64>() + self.bias
    }
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[bool], folds: usize, seed_value: u64) -> Vec<usize> {
    let mut rng = seed::rng_for(seed_value, "detect/folds");
    let mut assign = vec![0; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            assign[i] = k % folds;
        }
    }
    assign
}

pub fn logistic_cv(features: &[Vec<f64>], labels: &[bool], feature_names: &[String], folds: usize, seed_value: u64) -> Result<CvResult> {
    logistic_cv_with(features, labels, feature_names, folds, seed_value, &LogisticConfig::default())
}

pub fn logistic_cv_with(
    features: &[Vec<f64>],
    labels: &[bool],
    feature_names: &[String],
    folds: usize,
    seed_value: u64,
    cfg: &LogisticConfig,
) -> Result<CvResult> {
    if folds < 2 {
        return Err(invalid("need at least two folds"));
    }
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: features.len(), got: labels.len() });
    }
    let d = feature_names.len();
    if let Some(bad) = features.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
    }
    let assign = stratified_folds(labels, folds, seed_value);
    let mut fold_aurocs = Vec::with_capacity(folds);
    for f in 0..folds {
        let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, row) in features.iter().enumerate() {
            if assign[i] == f {
                te_x.push(row.as_slice());
                te_y.push(labels[i]);
            } else {
                tr_x.push(row.as_slice());
                tr_y.push(labels[i]);
            }
        }
        for (part, ys) in [("test", &te_y), ("train", &tr_y)] {
            if !ys.iter().any(|&l| l) || ys.iter().all(|&l| l) {
                return Err(Error::DegenerateFold { fold: f, reason: format!("{part} split lacks one class") });
            }
        }
        let model = Logistic::fit(&tr_x, &tr_y, cfg)?;
        let scores: Vec<f64> = te_x.iter().map(|x| model.decision(x)).collect();
        fold_aurocs.push(auroc(&scores, &te_y, Direction::HigherIsPositive)?.auroc);
    }
    Ok(CvResult {
        mean_auroc: stats::mean(&fold_aurocs),
        std_auroc: stats::std_dev(&fold_aurocs),
        folds,
        feature_names: feature_names.to_vec(),
        fold_aurocs,
    })
}

/// Pearson correlation with the 0/1 labels and its two-sided t-test p-value.
pub fn point_biserial(x: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    check_inputs(x, labels)?;
    if x.len() < 3 {
        return Err(invalid("point-biserial needs at least three observations"));
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let r = stats::pearson(x, &y)?;
    let df = (x.len() - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| invalid(e.to_string()))?;
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok((r, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    /// Open boundary: a query is accepted only when strictly on the positive side.
    pub threshold: f64,
    pub negatives_caught: f64,
    pub correct_preserved: f64,
    pub direction: Direction,
}

/// Most permissive threshold that still flags every negative.
pub fn intervention(scores: &[f64], labels: &[bool], direction: Direction) -> Result<InterventionResult> {
    let (pos, _) = check_inputs(scores, labels)?;
    // in oriented space positives are high; the worst negative is the highest one
    let worst = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| direction.oriented(s))
        .fold(f64::NEG_INFINITY, f64::max);
    let kept = scores.iter().zip(labels).filter(|(&s, &l)| l && direction.oriented(s) > worst).count();
    Ok(InterventionResult {
        threshold: direction.oriented(worst),
        negatives_caught: 1.0,
        correct_preserved: kept as f64 / pos as f64,
        direction,
    })
}

/// One row of a detection comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub auroc: f64,
    pub direction: Direction,
    pub threshold: f64,
    pub correct_preserved: f64,
}

impl MethodRow {
    pub fn evaluate(method: &str, scores: &[f64], labels: &[bool], direction: Direction) -> Result<Self> {
        let roc = auroc(scores, labels, direction)?;
        let iv = intervention(scores, labels, direction)?;
        Ok(MethodRow {
            method: method.to_string(),
            auroc: roc.auroc,
            direction,
            threshold: iv.threshold,
            correct_preserved: iv.correct_preserved,
        })
    }
}

pub const METHOD_CSV_HEADER: [&str; 5] = ["method", "auroc", "direction", "threshold", "correct_preserved"];

pub fn write_method_csv<W: Write>(rows: &[MethodRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METHOD_CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.method.clone(),
            r.auroc.to_string(),
            r.direction.as_str().to_string(),
            r.threshold.to_string(),
            r.correct_preserved.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
