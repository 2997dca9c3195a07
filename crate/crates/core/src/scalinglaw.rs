//! Confident-error scaling law `C = exp(-c / mean_gap)`.
//!
//! Entropies here are always in nats.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tail offset for `flat_tail` at V = 30000 that puts the H0 = 0.1 cutoff at 5.0.
pub const CALIBRATED_TAIL_OFFSET: f64 = 10.943019355039446;
pub const DEFAULT_VOCAB: usize = 30_000;
pub const DEFAULT_H0: f64 = 0.1;

const LAW_TABLE: &str = include_str!("../data/law_table.csv");
const GAP_TABLE: &str = include_str!("../data/gap_stats.csv");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundModel {
    TwoClassExact,
    TwoClassApprox,
    /// Top logit at `delta`, runner-up at 0, the other `v - 2` logits at `-tail_offset_g`.
    FlatTail { v: usize, tail_offset_g: f64 },
}

impl BackgroundModel {
    pub fn calibrated_flat_tail() -> Self {
        BackgroundModel::FlatTail { v: DEFAULT_VOCAB, tail_offset_g: CALIBRATED_TAIL_OFFSET }
    }

    pub fn validate(&self) -> Result<()> {
        if let BackgroundModel::FlatTail { v, tail_offset_g } = *self {
            if v < 3 {
                return Err(invalid("flat_tail needs v >= 3"));
            }
            if !(tail_offset_g >= 0.0) || !tail_offset_g.is_finite() {
                return Err(invalid("tail_offset_g must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackgroundModel::TwoClassExact => "two_class_exact",
            BackgroundModel::TwoClassApprox => "two_class_approx",
            BackgroundModel::FlatTail { .. } => "flat_tail",
        }
    }

    /// Short description used in exported tables.
    pub fn describe(&self) -> String {
        match self {
            BackgroundModel::FlatTail { v, tail_offset_g } => format!("flat_tail(v={v};g={tail_offset_g})"),
            other => other.name().to_string(),
        }
    }
}

fn binary_entropy_of_gap(delta: f64) -> f64 {
    // p = sigmoid(delta); H = ln(1 + e^-d) + d e^-d / (1 + e^-d)
    let e = (-delta).exp();
    e.ln_1p() + delta * e / (1.0 + e)
}

pub fn entropy_of_gap(delta: f64, bg: &BackgroundModel) -> f64 {
    match *bg {
        BackgroundModel::TwoClassExact => binary_entropy_of_gap(delta),
        BackgroundModel::TwoClassApprox => delta * (-delta).exp(),
        BackgroundModel::FlatTail { v, tail_offset_g: g } => {
            // shift by the top logit `delta`
            let rest = (v - 2) as f64;
            let a = (-delta).exp();
            let b = rest * (-delta - g).exp();
            let z = 1.0 + a + b;
            z.ln() + (delta * a + (delta + g) * b) / z
        }
    }
}

/// Start of the branch on which the entropy decreases in the gap. The 2-class
/// approximation `d e^-d` rises on [0, 1], so its cutoff is taken on d >= 1.
fn decreasing_from(bg: &BackgroundModel) -> f64 {
    match bg {
        BackgroundModel::TwoClassApprox => 1.0,
        _ => 0.0,
    }
}

/// Solves `entropy_of_gap(d) = h0` by bisection on the decreasing branch.
pub fn entropy_cutoff(h0: f64, bg: &BackgroundModel) -> Result<f64> {
    bg.validate()?;
    let start = decreasing_from(bg);
    let h_max = entropy_of_gap(start, bg);
    if !(h0 > 0.0 && h0 < h_max) {
        return Err(invalid(format!("h0 = {h0} outside (0, {h_max})")));
    }
    let (mut lo, mut hi) = (start, start + 1.0);
    while entropy_of_gap(hi, bg) > h0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::NonFinite("entropy cutoff bracket".into()));
        }
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if entropy_of_gap(mid, bg) > h0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub mean: f64,
    pub std: f64,
    pub std_over_mean: f64,
    pub n: usize,
    pub ks_stat: f64,
    pub ks_p: f64,
}

/// Survival function of the limiting Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS statistic against Exponential(mean).
pub fn ks_exponential(samples: &[f64], mean: f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = 1.0 - (-x / mean).exp();
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    d
}

pub fn gap_stats(samples: &[f64]) -> Result<GapStats> {
    if samples.len() < 10 {
        return Err(invalid("gap_stats needs at least 10 samples"));
    }
    if samples.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(invalid("gaps must be finite and nonnegative"));
    }
    let n = samples.len();
    let mean = crate::stats::mean(samples);
    if mean == 0.0 {
        return Err(invalid("mean gap is zero"));
    }
    let std = crate::stats::std_dev(samples);
    let ks_stat = ks_exponential(samples, mean);
    let ks_p = kolmogorov_sf((n as f64).sqrt() * ks_stat);
    Ok(GapStats { mean, std, std_over_mean: std / mean, n, ks_stat, ks_p })
}

/// Fraction of entropies strictly below `h0`.
pub fn confident_fraction(entropies: &[f64], h0: f64) -> Result<f64> {
    if entropies.is_empty() {
        return Err(invalid("confident_fraction of an empty list"));
    }
    Ok(entropies.iter().filter(|&&h| h < h0).count() as f64 / entropies.len() as f64)
}

pub fn predict_log_c(delta_star: f64, delta_bar: f64) -> Result<f64> {
    if !(delta_bar > 0.0) {
        return Err(invalid("delta_bar must be positive"));
    }
    Ok(-delta_star / delta_bar)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawPoint {
    pub label: String,
    pub benchmark: String,
    pub delta_bar: f64,
    pub delta_star: f64,
    pub c_emp: f64,
    pub log_c_pred: f64,
    /// Predicted over observed log C; NaN when `c_emp` is 0 or 1.
    pub ratio: f64,
    pub h_rate: Option<f64>,
    pub u_rate: Option<f64>,
}

impl LawPoint {
    pub fn new(label: &str, benchmark: &str, delta_bar: f64, delta_star: f64, c_emp: f64, h_rate: Option<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&c_emp) {
            return Err(invalid(format!("c_emp = {c_emp} outside [0, 1]")));
        }
        if let Some(h) = h_rate {
            if !(0.0..=1.0).contains(&h) {
                return Err(invalid(format!("h_rate = {h} outside [0, 1]")));
            }
        }
        let log_c_pred = predict_log_c(delta_star, delta_bar)?;
        Ok(LawPoint {
            label: label.to_string(),
            benchmark: benchmark.to_string(),
            delta_bar,
            delta_star,
            c_emp,
            log_c_pred,
            ratio: log_c_pred / c_emp.ln(),
            h_rate,
            u_rate: h_rate.map(|h| h * c_emp),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawFit {
    /// Through-origin slope of ln C on 1/mean_gap; its magnitude is the universal constant.
    pub slope: f64,
    /// Centered r² of the single-slope model.
    pub r_squared: f64,
    /// Through-origin slope of ln C on the per-point prediction.
    pub collapse_slope: f64,
    /// Centered r² of ln C against the per-point prediction line.
    pub r_squared_collapse: f64,
    pub n_points: usize,
    /// Labels of points dropped because `c_emp` was zero.
    pub excluded: Vec<String>,
}

fn through_origin(x: &[f64], y: &[f64]) -> (f64, f64) {
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let slope = sxy / sxx;
    let my = crate::stats::mean(y);
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { if ss_res == 0.0 { 1.0 } else { 0.0 } } else { 1.0 - ss_res / ss_tot };
    (slope, r2.clamp(0.0, 1.0))
}

pub fn fit_law(points: &[LawPoint]) -> Result<LawFit> {
    let (kept, dropped): (Vec<&LawPoint>, Vec<&LawPoint>) = points.iter().partition(|p| p.c_emp > 0.0);
    if kept.len() < 2 {
        return Err(invalid("fit_law needs at least two points with c_emp > 0"));
    }
    let y: Vec<f64> = kept.iter().map(|p| p.c_emp.ln()).collect();
    let inv: Vec<f64> = kept.iter().map(|p| 1.0 / p.delta_bar).collect();
    let pred: Vec<f64> = kept.iter().map(|p| p.log_c_pred).collect();
    let (slope, r_squared) = through_origin(&inv, &y);
    let (collapse_slope, r_squared_collapse) = through_origin(&pred, &y);
    Ok(LawFit {
        slope,
        r_squared,
        collapse_slope,
        r_squared_collapse,
        n_points: kept.len(),
        excluded: dropped.iter().map(|p| format!("{}/{}", p.label, p.benchmark)).collect(),
    })
}

/// Least-squares slope of ln(delta_bar) against ln(size).
pub fn delta_scaling_exponent(sizes: &[f64], delta_bars: &[f64]) -> Result<f64> {
    if sizes.len() != delta_bars.len() {
        return Err(Error::DimensionMismatch { expected: sizes.len(), got: delta_bars.len() });
    }
    if sizes.len() < 2 {
        return Err(invalid("need at least two points"));
    }
    if sizes.iter().chain(delta_bars).any(|v| !(*v > 0.0)) {
        return Err(invalid("sizes and gaps must be positive"));
    }
    let lx: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let ly: Vec<f64> = delta_bars.iter().map(|d| d.ln()).collect();
    let (mx, my) = (crate::stats::mean(&lx), crate::stats::mean(&ly));
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("sizes are all equal"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Deserialize)]
struct LawRow {
    label: String,
    benchmark: String,
    delta_bar: f64,
    delta_star: f64,
    c_emp: f64,
    h_rate: Option<f64>,
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes())
}

pub fn parse_law_table(text: &str) -> Result<Vec<LawPoint>> {
    let mut out = Vec::new();
    for row in csv_reader(text).deserialize() {
        let r: LawRow = row?;
        out.push(LawPoint::new(&r.label, &r.benchmark, r.delta_bar, r.delta_star, r.c_emp, r.h_rate)?);
    }
    Ok(out)
}

pub fn bundled_law_table() -> Vec<LawPoint> {
    parse_law_table(LAW_TABLE).expect("bundled law table parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReference {
    pub label: String,
    pub size_b: f64,
    pub delta_bar: f64,
    pub std_over_mean: f64,
    pub ks_p: f64,
}

pub fn parse_gap_table(text: &str) -> Result<Vec<GapReference>> {
    csv_reader(text).deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn bundled_gap_table() -> Vec<GapReference> {
    parse_gap_table(GAP_TABLE).expect("bundled gap table parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawReport {
    pub background: BackgroundModel,
    pub h0: f64,
    pub points: Vec<LawPoint>,
    pub fit: LawFit,
}

impl LawReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_points_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "label", "benchmark", "delta_bar", "delta_star", "c_emp", "log_c_pred", "ratio", "h_rate", "u_rate", "background", "h0",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.points {
            out.write_record([
                p.label.clone(),
                p.benchmark.clone(),
                p.delta_bar.to_string(),
                p.delta_star.to_string(),
                p.c_emp.to_string(),
                p.log_c_pred.to_string(),
                p.ratio.to_string(),
                opt(p.h_rate),
                opt(p.u_rate),
                self.background.describe(),
                self.h0.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_fit_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["slope", "r_squared", "collapse_slope", "r_squared_collapse", "n_points", "excluded", "background", "h0"])?;
        let f = &self.fit;
        out.write_record([
            f.slope.to_string(),
            f.r_squared.to_string(),
            f.collapse_slope.to_string(),
            f.r_squared_collapse.to_string(),
            f.n_points.to_string(),
            f.excluded.join(";"),
            self.background.describe(),
            self.h0.to_string(),
        ])?;
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;
    use rand_distr::Exp;

    const EXACT: BackgroundModel = BackgroundModel::TwoClassExact;
    const APPROX: BackgroundModel = BackgroundModel::TwoClassApprox;

    fn direct_entropy(logits: &[f64]) -> f64 {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        -logits.iter().map(|l| (l - m).exp() / z).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    #[test]
    fn closed_forms() {
        assert!((entropy_of_gap(0.0, &EXACT) - 2f64.ln()).abs() < 1e-15);
        let p = 1.0 / (1.0 + (-5f64).exp());
        let h = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        assert!((entropy_of_gap(5.0, &EXACT) - h).abs() < 1e-14);
        assert!((entropy_of_gap(5.0, &EXACT) - 0.0402).abs() < 5e-5);
        assert!((entropy_of_gap(5.25, &APPROX) - 0.0276).abs() < 5e-4);
    }

    #[test]
    fn flat_tail_matches_explicit_vector() {
        let bg = BackgroundModel::FlatTail { v: 50, tail_offset_g: 2.5 };
        for &d in &[0.0, 0.7, 3.0, 9.0] {
            let mut logits = vec![d, 0.0];
            logits.extend(std::iter::repeat(-2.5).take(48));
            assert!((entropy_of_gap(d, &bg) - direct_entropy(&logits)).abs() < 1e-12);
        }
    }

    #[test]
    fn cutoff_anchors() {
        assert!((entropy_cutoff(0.1, &APPROX).unwrap() - 3.577).abs() < 0.01);
        let exact = entropy_cutoff(0.1, &EXACT).unwrap();
        // independent bisection on -p ln p - q ln q
        assert!((exact - 3.866343).abs() < 1e-5, "{exact}");
        let flat = entropy_cutoff(0.1, &BackgroundModel::calibrated_flat_tail()).unwrap();
        assert!((flat - 5.0).abs() < 1e-6, "{flat}");
    }

    #[test]
    fn calibrated_offset_reproduces_by_bisection() {
        let (mut lo, mut hi) = (0.0, 60.0);
        for _ in 0..200 {
            let g = 0.5 * (lo + hi);
            let bg = BackgroundModel::FlatTail { v: DEFAULT_VOCAB, tail_offset_g: g };
            if entropy_of_gap(5.0, &bg) > 0.1 {
                lo = g;
            } else {
                hi = g;
            }
        }
        assert!((lo - CALIBRATED_TAIL_OFFSET).abs() < 1e-9);
    }

    #[test]
    fn cutoff_rejects_out_of_range() {
        assert!(entropy_cutoff(0.0, &EXACT).is_err());
        assert!(entropy_cutoff(0.7, &EXACT).is_err());
        assert!(entropy_cutoff(0.1, &BackgroundModel::FlatTail { v: 2, tail_offset_g: 1.0 }).is_err());
    }

    #[test]
    fn monotone_and_ordered() {
        let bgs = [EXACT, APPROX, BackgroundModel::calibrated_flat_tail(), BackgroundModel::FlatTail { v: 3, tail_offset_g: 0.0 }];
        for bg in &bgs {
            let start = decreasing_from(bg);
            let mut prev = f64::INFINITY;
            let mut d = start;
            while d <= 20.0 {
                let h = entropy_of_gap(d, bg);
                assert!(h < prev, "{} not decreasing at {d}", bg.name());
                prev = h;
                d += 0.01;
            }
        }
        let mut d = 2.0;
        while d <= 20.0 {
            assert!(entropy_of_gap(d, &EXACT) > entropy_of_gap(d, &APPROX));
            d += 0.05;
        }
    }

    #[test]
    fn cutoff_consistency() {
        for bg in [EXACT, APPROX, BackgroundModel::calibrated_flat_tail()] {
            for h0 in [0.01, 0.1, 0.5] {
                if h0 >= entropy_of_gap(decreasing_from(&bg), &bg) {
                    continue;
                }
                let d = entropy_cutoff(h0, &bg).unwrap();
                assert!((entropy_of_gap(d, &bg) - h0).abs() < 1e-8);
            }
        }
    }

    fn exp_samples(mean: f64, n: usize, s: u64) -> Vec<f64> {
        let mut rng = seed::rng(s);
        let dist = Exp::new(1.0 / mean).unwrap();
        (0..n).map(|_| rng.sample(dist)).collect()
    }

    #[test]
    fn gap_stats_basics() {
        let c = gap_stats(&[2.0; 12]).unwrap();
        assert_eq!(c.std_over_mean, 0.0);
        assert!(gap_stats(&[0.0; 12]).is_err());
        assert!(gap_stats(&[1.0; 5]).is_err());
        let s = gap_stats(&exp_samples(1.0, 10_000, 11)).unwrap();
        assert!((0.97..=1.03).contains(&s.std_over_mean), "{}", s.std_over_mean);
        assert!((s.std_over_mean - s.std / s.mean).abs() < 1e-12);
    }

    #[test]
    fn ks_sanity() {
        let mut accepted = 0;
        let mut rejected = 0;
        for s in 0..100 {
            if gap_stats(&exp_samples(1.7, 1000, s)).unwrap().ks_p > 0.05 {
                accepted += 1;
            }
            let mut rng = seed::rng_for(s, "uniform");
            let u: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..2.0)).collect();
            if gap_stats(&u).unwrap().ks_p < 0.01 {
                rejected += 1;
            }
        }
        assert!(accepted >= 90, "{accepted}");
        assert!(rejected >= 95, "{rejected}");
    }

    #[test]
    fn kolmogorov_reference_values() {
        // 5% and 1% critical values of the limiting distribution
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn confident_fraction_tail_law() {
        assert_eq!(confident_fraction(&[0.2, 0.3], 0.1).unwrap(), 0.0);
        assert_eq!(confident_fraction(&[0.1, 0.05], 0.1).unwrap(), 0.5);
        assert!(confident_fraction(&[], 0.1).is_err());
        let bg = BackgroundModel::calibrated_flat_tail();
        let gaps = exp_samples(2.5, 10_000, 3);
        let hs: Vec<f64> = gaps.iter().map(|&d| entropy_of_gap(d, &bg)).collect();
        let c = confident_fraction(&hs, 0.1).unwrap();
        assert!((c - (-2f64).exp()).abs() < 0.01, "{c}");
    }

    #[test]
    fn tail_law_within_three_standard_errors() {
        let bg = BackgroundModel::calibrated_flat_tail();
        let ds = entropy_cutoff(0.1, &bg).unwrap();
        for s in 0..10u64 {
            for mean in [0.8, 1.5, 3.0] {
                let hs: Vec<f64> = exp_samples(mean, 10_000, s * 7 + 1).iter().map(|&d| entropy_of_gap(d, &bg)).collect();
                let c = confident_fraction(&hs, 0.1).unwrap();
                let p = (-ds / mean).exp();
                // delta method: se(ln C) = sqrt((1 - p) / (n p))
                let se = ((1.0 - p) / (10_000.0 * p)).sqrt();
                assert!((c.ln() + ds / mean).abs() <= 3.0 * se, "mean {mean} seed {s}: C={c}");
            }
        }
    }

    #[test]
    fn predictions() {
        assert!((predict_log_c(4.75, 3.01).unwrap() + 1.578).abs() < 1e-3);
        assert!((predict_log_c(5.50, 0.86).unwrap() + 6.40).abs() < 5e-3);
        assert!(predict_log_c(5.0, 1e12).unwrap().abs() < 1e-10);
        assert!(predict_log_c(5.0, 0.0).is_err());
    }

    #[test]
    fn fit_exact_and_noisy() {
        let pts: Vec<LawPoint> = [0.8, 1.2, 2.0, 3.0, 4.5]
            .iter()
            .map(|&d| LawPoint::new("s", "x", d, 5.0, (-5.0 / d as f64).exp(), None).unwrap())
            .collect();
        let f = fit_law(&pts).unwrap();
        assert!((f.slope + 5.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);

        let mut rng = seed::rng(17);
        let pts: Vec<LawPoint> = (0..40)
            .map(|i| {
                let d = 0.8 + 0.1 * i as f64;
                let c = (-5.0 / d).exp() * (1.0 + rng.random_range(-0.1..0.1));
                LawPoint::new("n", "x", d, 5.0, c, None).unwrap()
            })
            .collect();
        let f = fit_law(&pts).unwrap();
        assert!((f.slope + 5.0).abs() < 0.5, "{}", f.slope);
    }

    #[test]
    fn zero_points_are_excluded() {
        let mut pts = vec![
            LawPoint::new("a", "x", 1.0, 5.0, 0.01, None).unwrap(),
            LawPoint::new("b", "x", 2.0, 5.0, 0.08, None).unwrap(),
            LawPoint::new("c", "x", 1.0, 5.0, 0.0, None).unwrap(),
        ];
        let f = fit_law(&pts).unwrap();
        assert_eq!(f.n_points, 2);
        assert_eq!(f.excluded, vec!["c/x".to_string()]);
        pts.truncate(1);
        assert!(fit_law(&pts).is_err());
    }

    #[test]
    fn u_rate_is_product() {
        let p = LawPoint::new("a", "x", 2.0, 5.0, 0.2, Some(0.5)).unwrap();
        assert!((p.u_rate.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(p.log_c_pred, -2.5);
    }

    #[test]
    fn scaling_exponent() {
        let e = delta_scaling_exponent(&[0.5, 3.0, 14.0], &[0.86, 1.59, 3.01]).unwrap();
        assert!((e - 0.38).abs() < 0.01, "{e}");
        let n = [1.0, 8.0, 27.0, 1000.0];
        let cube: Vec<f64> = n.iter().map(|x: &f64| x.cbrt()).collect();
        assert!((delta_scaling_exponent(&n, &cube).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(delta_scaling_exponent(&n, &[2.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn bundled_tables_load() {
        let law = bundled_law_table();
        assert_eq!(law.len(), 21);
        let q14 = law.iter().find(|p| p.label == "Qwen2.5-14B" && p.benchmark == "TriviaQA").unwrap();
        assert_eq!(q14.c_emp, 0.198);
        let gaps = bundled_gap_table();
        assert_eq!(gaps.len(), 3);
        assert_eq!(gaps[1].delta_bar, 1.59);
        assert_eq!(gaps[1].std_over_mean, 1.24);
    }

    #[test]
    fn report_exports_background() {
        let pts = bundled_law_table();
        let report = LawReport { background: BackgroundModel::calibrated_flat_tail(), h0: 0.1, fit: fit_law(&pts).unwrap(), points: pts };
        let json = report.to_json().unwrap();
        assert!(json.contains("flat_tail") && json.contains("tail_offset_g"));
        let back: LawReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.fit, report.fit);
        let mut buf = Vec::new();
        report.write_points_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 22);
        assert!(text.lines().nth(1).unwrap().contains("flat_tail(v=30000"));
    }
}
