//! The seven experiments. Each writes its artifacts through [`Outputs`] and
//! returns the checks evaluated on its results.

use std::path::Path;

use anyhow::{Context, Result};
use basinlab::detect::{self, Direction, MethodRow};
use basinlab::geometry::{self, basin_centers, perturb_sweep, separation_ratio, signal_sweep, Condition, SignalRecord};
use basinlab::jacobian::{self, HeadSet};
use basinlab::metacog::{self, DistillConfig, DistillSchedule};
use basinlab::nnkit::{train, Checkpoint, ModelParams, TrainConfig, TrainReport};
use basinlab::scalinglaw::{self, BackgroundModel, LawFit, LawPoint, LawReport};
use basinlab::seed::{self, derive};
use basinlab::stats;
use basinlab::taskgen::{generate_dataset, Dataset};
use rand::Rng;
use rand_distr::Exp;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind, LawMode};
use crate::plot::{PlotKind, PlotTable};
use crate::runner::{Check, Outputs};

pub fn dispatch(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    match cfg.experiment {
        ExperimentKind::WidthSweep => Ok(width_sweep(cfg, out)?.checks()),
        ExperimentKind::LawVerify => law_verify(cfg, out),
        ExperimentKind::LawFitReference => law_fit_reference(cfg, out),
        ExperimentKind::JacobianSuite => jacobian_suite(cfg, out),
        ExperimentKind::Perturb => perturb(cfg, out),
        ExperimentKind::DetectSuite => detect_suite(cfg, out),
        ExperimentKind::Distill => distill(cfg, out),
    }
}

pub fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    Ok(generate_dataset(d.n_seen, d.n_unseen, d.d_in, d.classes, derive(cfg.seed, "dataset"))?)
}

fn train_config(cfg: &ExperimentConfig, width: usize) -> TrainConfig {
    let s = &cfg.student;
    TrainConfig {
        steps: s.steps,
        learning_rate: s.learning_rate,
        batch_size: s.batch_size,
        seed: derive(cfg.seed, &format!("train/{width}")),
        loss_threshold: s.loss_threshold,
        teacher_beta: None,
    }
}

/// Student of the given width trained under the config's student block.
pub fn train_student(cfg: &ExperimentConfig, data: &Dataset, width: usize) -> Result<(ModelParams, TrainReport)> {
    let d = &cfg.dataset;
    let init = ModelParams::init(d.d_in, width, d.classes, cfg.student.activation, derive(cfg.seed, &format!("init/{width}")))?;
    Ok(train(&init, data, &train_config(cfg, width))?)
}

pub fn signals(cfg: &ExperimentConfig, model: &ModelParams, data: &Dataset) -> Result<Vec<SignalRecord>> {
    let c = &cfg.centers;
    let centers = basin_centers(model, data, c.variants, c.noise, derive(cfg.seed, "centers"))?;
    Ok(signal_sweep(model, data, &centers, c.stability_variants, derive(cfg.seed, "signals"))?)
}

fn mean_of(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        stats::mean(&v)
    }
}

/// Fraction of wrong answers whose entropy (nats) is below `h0`.
pub fn confident_wrong_fraction(records: &[SignalRecord], h0: f64) -> f64 {
    let wrong: Vec<f64> = records.iter().filter(|r| !r.correct).map(|r| r.entropy).collect();
    if wrong.is_empty() {
        return f64::NAN;
    }
    scalinglaw::confident_fraction(&wrong, h0).unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WidthRow {
    pub m: usize,
    pub params: usize,
    pub seen_acc: f64,
    pub h_seen: f64,
    pub h_unseen: f64,
    pub separation_ratio: f64,
    pub c_at_h0: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub status: String,
}

impl WidthRow {
    fn failed(m: usize, steps: usize, reason: String) -> Self {
        WidthRow {
            m,
            params: 0,
            seen_acc: f64::NAN,
            h_seen: f64::NAN,
            h_unseen: f64::NAN,
            separation_ratio: f64::NAN,
            c_at_h0: f64::NAN,
            final_loss: f64::NAN,
            steps,
            status: format!("failed: {reason}"),
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub struct WidthSweep {
    pub rows: Vec<WidthRow>,
}

impl WidthSweep {
    /// Trend checks between the first and last successful rows.
    pub fn checks(&self) -> Vec<Check> {
        let mut checks = vec![Check::new(
            "width_sweep.rows_ok",
            self.rows.iter().all(WidthRow::ok),
            format!("{}/{} rows ok", self.rows.iter().filter(|r| r.ok()).count(), self.rows.len()),
        )];
        let ok: Vec<&WidthRow> = self.rows.iter().filter(|r| r.ok()).collect();
        if let (Some(first), Some(last)) = (ok.first(), ok.last()) {
            let growth = last.separation_ratio / first.separation_ratio;
            checks.push(Check::new(
                "width_sweep.separation_growth",
                growth >= 20.0,
                format!(
                    "ratio m={}: {:.2}, m={}: {:.2}, growth {:.2}x (need >= 20x)",
                    first.m, first.separation_ratio, last.m, last.separation_ratio, growth
                ),
            ));
            checks.push(Check::new(
                "width_sweep.confident_fraction",
                last.c_at_h0 > first.c_at_h0 && last.c_at_h0 >= 0.5,
                format!("C m={}: {:.3}, m={}: {:.3} (need rising and >= 0.5)", first.m, first.c_at_h0, last.m, last.c_at_h0),
            ));
            checks.push(Check::new(
                "width_sweep.narrow_accuracy",
                first.seen_acc >= 0.5,
                format!("seen accuracy m={}: {:.3} (need >= 0.5)", first.m, first.seen_acc),
            ));
        }
        checks
    }
}

fn width_run(cfg: &ExperimentConfig, data: &Dataset, m: usize) -> Result<(WidthRow, Vec<SignalRecord>, Checkpoint)> {
    let (model, report) = train_student(cfg, data, m)?;
    let records = signals(cfg, &model, data)?;
    let entropy_of = |c: Condition| mean_of(records.iter().filter(|r| r.condition == c).map(|r| r.entropy));
    let row = WidthRow {
        m,
        params: model.param_count(),
        seen_acc: report.seen_accuracy,
        h_seen: entropy_of(Condition::Seen),
        h_unseen: entropy_of(Condition::Unseen),
        separation_ratio: separation_ratio(&records)?,
        c_at_h0: confident_wrong_fraction(&records, cfg.centers.h0),
        final_loss: report.final_loss,
        steps: report.steps_run,
        status: "ok".into(),
    };
    if !(row.final_loss.is_finite() && row.separation_ratio.is_finite()) {
        anyhow::bail!("non-finite loss or separation ratio");
    }
    Ok((row, records, Checkpoint { seed: derive(cfg.seed, &format!("init/{m}")), model }))
}

pub fn width_sweep(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<WidthSweep> {
    let data = dataset(cfg)?;
    let results: Vec<_> = cfg.width_sweep.widths.par_iter().map(|&m| (m, width_run(cfg, &data, m))).collect();
    let mut rows = Vec::new();
    for (m, result) in results {
        match result {
            Ok((row, records, ckpt)) => {
                out.write_with(&format!("signals_m{m}.csv"), |b| geometry::write_signal_csv(&records, b))?;
                out.write(&format!("model_m{m}.bin"), &ckpt.to_bytes())?;
                rows.push(row);
            }
            Err(e) => rows.push(WidthRow::failed(m, cfg.student.steps, e.to_string())),
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    out.write("width_sweep.csv", &w.into_inner()?)?;

    let mut ratio = PlotTable::new("separation ratio vs width", &["x", "separation_ratio"]);
    let mut conf = PlotTable::new("confident fraction vs width", &["x", "c_at_h0", "seen_acc"]);
    for r in rows.iter().filter(|r| r.ok()) {
        if r.separation_ratio.is_finite() {
            ratio.push(vec![r.m as f64, r.separation_ratio]);
        }
        if r.c_at_h0.is_finite() {
            conf.push(vec![r.m as f64, r.c_at_h0, r.seen_acc]);
        }
    }
    if !ratio.rows.is_empty() {
        out.plot("separation_ratio_plot.svg", &ratio, PlotKind::Line)?;
    }
    if !conf.rows.is_empty() {
        out.plot("confident_fraction_plot.svg", &conf, PlotKind::Line)?;
    }
    Ok(WidthSweep { rows })
}

fn law_points_from(cfg: &ExperimentConfig) -> Result<Vec<LawPoint>> {
    Ok(match &cfg.law.reference {
        Some(p) => scalinglaw::parse_law_table(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => scalinglaw::bundled_law_table(),
    })
}

fn write_law(out: &mut Outputs, report: &LawReport, fit_line_slope: f64) -> Result<()> {
    out.write("law_report.json", report.to_json()?.as_bytes())?;
    out.write_with("law_points.csv", |b| report.write_points_csv(b))?;
    out.write_with("law_fit.csv", |b| report.write_fit_csv(b))?;
    let mut t = PlotTable::new("ln C vs -1/mean gap", &["x", "y", "fit"]);
    for p in report.points.iter().filter(|p| p.c_emp > 0.0) {
        let x = -1.0 / p.delta_bar;
        t.push(vec![x, p.c_emp.ln(), -fit_line_slope * x]);
    }
    if !t.rows.is_empty() {
        out.plot("law_fit_plot.svg", &t, PlotKind::LawFit)?;
    }
    Ok(())
}

pub struct ReferenceLaw {
    pub points: Vec<LawPoint>,
    pub fit: LawFit,
    pub scaling_exponent: f64,
}

pub fn reference_law(cfg: &ExperimentConfig) -> Result<ReferenceLaw> {
    let points = law_points_from(cfg)?;
    let fit = scalinglaw::fit_law(&points)?;
    let gaps = scalinglaw::bundled_gap_table();
    let sizes: Vec<f64> = gaps.iter().map(|g| g.size_b).collect();
    let bars: Vec<f64> = gaps.iter().map(|g| g.delta_bar).collect();
    let scaling_exponent = scalinglaw::delta_scaling_exponent(&sizes, &bars)?;
    Ok(ReferenceLaw { points, fit, scaling_exponent })
}

pub fn reference_checks(law: &ReferenceLaw) -> Vec<Check> {
    let f = &law.fit;
    let ratios: Vec<f64> = law.points.iter().map(|p| p.ratio).collect();
    let mean_ratio = stats::mean(&ratios);
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    vec![
        Check::new(
            "law_fit.slope",
            (-6.2..=-5.5).contains(&f.slope),
            format!("slope {:.3} (need in [-6.2, -5.5])", f.slope),
        ),
        Check::new(
            "law_fit.r_squared",
            f.r_squared_collapse >= 0.85,
            format!(
                "collapse r2 {:.3} (need >= 0.85); single-slope r2 {:.3}; n={}",
                f.r_squared_collapse, f.r_squared, f.n_points
            ),
        ),
        Check::new(
            "law_fit.per_point_ratio",
            lo >= 0.6 && hi <= 1.3 && (mean_ratio - 0.96).abs() <= 0.15,
            format!("ratios in [{lo:.3}, {hi:.3}] (need [0.6, 1.3]), mean {mean_ratio:.3} (need 0.96 +- 0.15)"),
        ),
    ]
}

pub fn cutoff_anchor_checks() -> Result<Vec<Check>> {
    let approx = BackgroundModel::TwoClassApprox;
    let c = scalinglaw::entropy_cutoff(0.1, &approx)?;
    let h = scalinglaw::entropy_of_gap(5.25, &approx);
    let flat = scalinglaw::entropy_cutoff(0.1, &BackgroundModel::calibrated_flat_tail())?;
    Ok(vec![
        Check::new("anchors.two_class_cutoff", (c - 3.577).abs() <= 0.01, format!("cutoff {c:.4} (need 3.577 +- 0.01)")),
        Check::new("anchors.two_class_entropy", (h - 0.0276).abs() <= 0.0005, format!("H(5.25) {h:.5} (need 0.0276 +- 0.0005)")),
        Check::new("anchors.flat_tail_cutoff", (flat - 5.0).abs() <= 0.01, format!("cutoff {flat:.6} (need 5.0 +- 0.01)")),
    ])
}

pub fn law_fit_reference(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let law = reference_law(cfg)?;
    let report = LawReport { background: cfg.law.background.model(), h0: cfg.law.h0, points: law.points.clone(), fit: law.fit.clone() };
    write_law(out, &report, law.fit.slope)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for g in scalinglaw::bundled_gap_table() {
        w.serialize(&g)?;
    }
    out.write("gap_reference.csv", &w.into_inner()?)?;
    out.write("scaling_exponent.csv", format!("exponent\n{}\n", law.scaling_exponent).as_bytes())?;
    let mut checks = reference_checks(&law);
    checks.extend(cutoff_anchor_checks()?);
    Ok(checks)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticLawRow {
    pub delta_bar: f64,
    pub delta_star: f64,
    pub samples: usize,
    pub c_emp: f64,
    pub log_c_emp: f64,
    pub log_c_pred: f64,
    pub abs_error: f64,
    pub sample_mean: f64,
    pub std_over_mean: f64,
    pub ks_p: f64,
    pub background: String,
}

pub fn synthetic_law(cfg: &ExperimentConfig) -> Result<Vec<SyntheticLawRow>> {
    let bg = cfg.law.background.model();
    let delta_star = scalinglaw::entropy_cutoff(cfg.law.h0, &bg)?;
    let mut rows = Vec::new();
    for (i, &bar) in cfg.law.delta_bars.iter().enumerate() {
        let mut rng = seed::rng_for(cfg.seed, &format!("law_verify/{i}"));
        let dist = Exp::new(1.0 / bar)?;
        let gaps: Vec<f64> = (0..cfg.law.samples).map(|_| rng.sample(dist)).collect();
        let entropies: Vec<f64> = gaps.iter().map(|&d| scalinglaw::entropy_of_gap(d, &bg)).collect();
        let c = scalinglaw::confident_fraction(&entropies, cfg.law.h0)?;
        let stats = scalinglaw::gap_stats(&gaps)?;
        let pred = scalinglaw::predict_log_c(delta_star, bar)?;
        rows.push(SyntheticLawRow {
            delta_bar: bar,
            delta_star,
            samples: cfg.law.samples,
            c_emp: c,
            log_c_emp: c.ln(),
            log_c_pred: pred,
            abs_error: (c.ln() - pred).abs(),
            sample_mean: stats.mean,
            std_over_mean: stats.std_over_mean,
            ks_p: stats.ks_p,
            background: bg.describe(),
        });
    }
    Ok(rows)
}

pub fn law_verify(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    if cfg.law.mode == LawMode::Reference {
        let law = reference_law(cfg)?;
        let report = LawReport { background: cfg.law.background.model(), h0: cfg.law.h0, points: law.points.clone(), fit: law.fit.clone() };
        write_law(out, &report, law.fit.slope)?;
        return Ok(reference_checks(&law));
    }
    let rows = synthetic_law(cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    out.write("synthetic_law.csv", &w.into_inner()?)?;

    let points: Vec<LawPoint> = rows
        .iter()
        .map(|r| LawPoint::new("synthetic", &format!("dbar={}", r.delta_bar), r.delta_bar, r.delta_star, r.c_emp, None))
        .collect::<basinlab::Result<_>>()?;
    let usable = points.iter().filter(|p| p.c_emp > 0.0).count();
    if usable >= 2 {
        let fit = scalinglaw::fit_law(&points)?;
        let slope = fit.slope;
        write_law(out, &LawReport { background: cfg.law.background.model(), h0: cfg.law.h0, points, fit }, slope)?;
    } else {
        out.write("law_fit.csv", b"status\nsingle point; fit and r_squared omitted\n")?;
    }
    Ok(rows
        .iter()
        .map(|r| {
            Check::new(
                &format!("law_verify.tail_dbar_{}", r.delta_bar),
                r.abs_error <= 0.1,
                format!("|ln C - pred| = {:.4} (ln C {:.4}, pred {:.4}; need <= 0.1)", r.abs_error, r.log_c_emp, r.log_c_pred),
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianSuiteSummary {
    pub max_orthogonality_error: f64,
    pub max_phi_sym_error: f64,
    pub max_phi_anti_error: f64,
    pub max_invariance_error: f64,
    pub max_energy_error: f64,
    pub boost_wins: usize,
    pub boost_trials: usize,
    pub model_phi: f64,
    pub model_s_share: f64,
}

pub fn jacobian_properties(cfg: &ExperimentConfig) -> Result<JacobianSuiteSummary> {
    let j = &cfg.jacobian;
    let d = j.dim;
    let mut s = JacobianSuiteSummary {
        max_orthogonality_error: 0.0,
        max_phi_sym_error: 0.0,
        max_phi_anti_error: 0.0,
        max_invariance_error: 0.0,
        max_energy_error: 0.0,
        boost_wins: 0,
        boost_trials: j.head_seeds,
        model_phi: f64::NAN,
        model_s_share: f64::NAN,
    };
    for t in 0..j.random_trials {
        let mut rng = seed::rng_for(cfg.seed, &format!("jacobian_suite/{t}"));
        let jm = jacobian::random_gaussian(d, &mut rng);
        let r = jacobian::decompose(&jm)?;
        let total: f64 = jm.iter().map(|v| v * v).sum();
        s.max_orthogonality_error = s.max_orthogonality_error.max((total - r.s_frob_sq - r.a_frob_sq).abs());
        let base = jacobian::phi(&jm)?;
        let scaled = jacobian::phi(&(&jm * 3.7))?;
        let transposed = jacobian::phi(&jm.t().to_owned())?;
        s.max_invariance_error = s.max_invariance_error.max((scaled - base).abs()).max((transposed - base).abs());
        s.max_phi_sym_error = s.max_phi_sym_error.max((jacobian::phi(&jacobian::random_symmetric(d, &mut rng))? - 1.0).abs());
        s.max_phi_anti_error = s.max_phi_anti_error.max((jacobian::phi(&jacobian::random_antisymmetric(d, &mut rng))? + 1.0).abs());

        let mats: Vec<_> = (0..j.heads).map(|_| jacobian::random_gaussian(d, &mut rng)).collect();
        let raw: Vec<f64> = (0..j.heads).map(|_| rng.random_range(0.0..1.0)).collect();
        let total_w: f64 = raw.iter().sum();
        let heads = HeadSet::new(mats, raw.iter().map(|a| a / total_w).collect())?;
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = jacobian::vo_energy(&h, &heads)?;
        let mut brute = 0.0;
        for (m, a) in heads.heads.iter().zip(&heads.attn_weights) {
            for r in 0..d {
                for c in 0..d {
                    brute += a * h[r] * m[[r, c]] * h[c];
                }
            }
        }
        s.max_energy_error = s.max_energy_error.max((e.energy - brute).abs()).max((e.energy_symmetric - brute).abs());
    }
    for k in 0..j.head_seeds {
        let heads = jacobian::symmetric_dominant_heads(d, j.symmetric_weight, derive(cfg.seed, &format!("jacobian_suite/heads/{k}")))?;
        let vo = jacobian::vo_composite(&heads)?;
        if vo.phi_weighted > vo.phi_uniform {
            s.boost_wins += 1;
        }
    }
    let model = ModelParams::init(d, d, 4, cfg.student.activation, derive(cfg.seed, "jacobian_suite/model"))?;
    let mut rng = seed::rng_for(cfg.seed, "jacobian_suite/probe");
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    if let Ok(r) = jacobian::model_jacobian_report_eps(&model, &x, j.eps) {
        s.model_phi = r.phi.unwrap_or(f64::NAN);
        s.model_s_share = r.s_frob_sq / r.j_frob_sq();
    }
    Ok(s)
}

pub fn jacobian_checks(s: &JacobianSuiteSummary) -> Vec<Check> {
    vec![
        Check::new("jacobian.orthogonality", s.max_orthogonality_error <= 1e-9, format!("max | |J|^2 - |S|^2 - |A|^2 | = {:.2e}", s.max_orthogonality_error)),
        Check::new(
            "jacobian.phi_extremes",
            s.max_phi_sym_error <= 1e-9 && s.max_phi_anti_error <= 1e-9,
            format!("max |phi_sym - 1| = {:.2e}, max |phi_anti + 1| = {:.2e}", s.max_phi_sym_error, s.max_phi_anti_error),
        ),
        Check::new("jacobian.phi_invariance", s.max_invariance_error <= 1e-9, format!("max scale/transpose drift {:.2e}", s.max_invariance_error)),
        Check::new("jacobian.vo_energy", s.max_energy_error <= 1e-9, format!("max brute-force difference {:.2e}", s.max_energy_error)),
        Check::new(
            "jacobian.attention_boost",
            s.boost_wins * 100 >= 95 * s.boost_trials,
            format!("phi_weighted > phi_uniform in {}/{} seeds (need >= 95%)", s.boost_wins, s.boost_trials),
        ),
    ]
}

pub fn jacobian_suite(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let s = jacobian_properties(cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(&s)?;
    out.write("jacobian_suite.csv", &w.into_inner()?)?;
    Ok(jacobian_checks(&s))
}

pub fn perturb_curve(cfg: &ExperimentConfig) -> Result<geometry::PerturbCurve> {
    let data = dataset(cfg)?;
    let (model, _) = train_student(cfg, &data, cfg.perturb.width)?;
    Ok(perturb_sweep(&model, &data, &cfg.perturb.alphas, cfg.perturb.trials, derive(cfg.seed, "perturb/noise"))?)
}

pub fn perturb_checks(curve: &geometry::PerturbCurve) -> Vec<Check> {
    let rho = stats::spearman(&curve.alphas, &curve.error_rate);
    let r = stats::pearson(&curve.mean_entropy, &curve.error_rate);
    let show = |v: &basinlab::Result<f64>| v.as_ref().map(|x| format!("{x:.3}")).unwrap_or_else(|e| e.to_string());
    vec![
        Check::new("perturb.monotone_error", matches!(rho, Ok(v) if v >= 0.9), format!("Spearman(alpha, error) = {} (need >= 0.9)", show(&rho))),
        Check::new("perturb.entropy_tracks_error", matches!(r, Ok(v) if v > 0.0), format!("Pearson(entropy, error) = {} (need > 0)", show(&r))),
    ]
}

pub fn perturb(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let curve = perturb_curve(cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["alpha", "error_rate", "sem", "mean_entropy", "entropy_sem", "trials"])?;
    let mut t = PlotTable::new("perturbation sweep", &["x", "error_rate", "mean_entropy"]);
    for i in 0..curve.alphas.len() {
        w.write_record([
            curve.alphas[i].to_string(),
            curve.error_rate[i].to_string(),
            curve.sem[i].to_string(),
            curve.mean_entropy[i].to_string(),
            curve.entropy_sem[i].to_string(),
            curve.trials_per_alpha.to_string(),
        ])?;
        t.push(vec![curve.alphas[i], curve.error_rate[i], curve.mean_entropy[i]]);
    }
    out.write("perturb.csv", &w.into_inner()?)?;
    out.plot("perturb_plot.svg", &t, PlotKind::Line)?;
    Ok(perturb_checks(&curve))
}

pub fn signal_value(r: &SignalRecord, name: &str) -> f64 {
    match name {
        "margin" => r.margin,
        "gap" => r.gap,
        "stability" => r.stability,
        "entropy" => r.entropy,
        "top1_prob" => r.top1_prob,
        "hidden_variance" => r.hidden_variance,
        other => panic!("unknown signal {other}"),
    }
}

/// Which side of each signal indicates a correct answer.
pub fn signal_direction(name: &str) -> Direction {
    match name {
        "margin" | "entropy" => Direction::LowerIsPositive,
        _ => Direction::HigherIsPositive,
    }
}

pub struct DetectResults {
    pub signals: Vec<MethodRow>,
    pub interventions: Vec<MethodRow>,
    pub ladder: Vec<detect::CvResult>,
}

impl DetectResults {
    fn row<'a>(rows: &'a [MethodRow], name: &str) -> Option<&'a MethodRow> {
        rows.iter().find(|r| r.method == name)
    }

    pub fn checks(&self) -> Vec<Check> {
        let (m, e) = (Self::row(&self.signals, "margin"), Self::row(&self.signals, "entropy"));
        let (mi, ei) = (Self::row(&self.interventions, "margin"), Self::row(&self.interventions, "entropy"));
        match (m, e, mi, ei) {
            (Some(m), Some(e), Some(mi), Some(ei)) => vec![
                Check::new("detect.margin_auroc", m.auroc > e.auroc, format!("margin AUROC {:.3} vs entropy {:.3}", m.auroc, e.auroc)),
                Check::new(
                    "detect.margin_intervention",
                    mi.correct_preserved >= ei.correct_preserved,
                    format!("correct preserved: margin {:.3} vs entropy {:.3}", mi.correct_preserved, ei.correct_preserved),
                ),
            ],
            _ => vec![Check::new("detect.margin_auroc", false, "margin or entropy rows missing")],
        }
    }
}

pub fn detect_on(records: &[SignalRecord], ladder: &[Vec<String>], folds: usize, seed_value: u64) -> Result<DetectResults> {
    let labels: Vec<bool> = records.iter().map(|r| r.correct).collect();
    let mut signal_rows = Vec::new();
    for name in crate::config::SIGNAL_NAMES {
        let scores: Vec<f64> = records.iter().map(|r| signal_value(r, name)).collect();
        signal_rows.push(MethodRow::evaluate(name, &scores, &labels, signal_direction(name))?);
    }
    let interventions = signal_rows.iter().filter(|r| ["margin", "gap", "entropy"].contains(&r.method.as_str())).cloned().collect();
    let mut cv = Vec::new();
    for set in ladder {
        let rows: Vec<Vec<f64>> = records.iter().map(|r| set.iter().map(|f| signal_value(r, f)).collect()).collect();
        cv.push(detect::logistic_cv(&rows, &labels, set, folds, seed_value)?);
    }
    Ok(DetectResults { signals: signal_rows, interventions, ladder: cv })
}

pub fn detect_suite(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let data = dataset(cfg)?;
    let model = match &cfg.detect.checkpoint {
        Some(p) => Checkpoint::load(Path::new(p))?.model,
        None => train_student(cfg, &data, cfg.detect.width)?.0,
    };
    let records = signals(cfg, &model, &data)?;
    out.write_with("signals.csv", |b| geometry::write_signal_csv(&records, b))?;
    let res = detect_on(&records, &cfg.detect.ladder, cfg.detect.folds, derive(cfg.seed, "detect_suite/folds"))?;
    out.write_with("auroc.csv", |b| detect::write_method_csv(&res.signals, b))?;
    out.write_with("interventions.csv", |b| detect::write_method_csv(&res.interventions, b))?;

    let labels: Vec<bool> = records.iter().map(|r| r.correct).collect();
    for name in ["margin", "gap", "entropy"] {
        let scores: Vec<f64> = records.iter().map(|r| signal_value(r, name)).collect();
        let roc = detect::auroc(&scores, &labels, signal_direction(name))?;
        out.write_with(&format!("roc_{name}.csv"), |b| roc.write_csv(b))?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["signal", "r", "p"])?;
    for name in crate::config::SIGNAL_NAMES {
        let scores: Vec<f64> = records.iter().map(|r| signal_value(r, name)).collect();
        match detect::point_biserial(&scores, &labels) {
            Ok((r, p)) => w.write_record([name.to_string(), r.to_string(), p.to_string()])?,
            Err(_) => w.write_record([name, "undefined", "undefined"])?,
        }
    }
    out.write("point_biserial.csv", &w.into_inner()?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["features", "mean_auroc", "std_auroc", "folds"])?;
    for cv in &res.ladder {
        w.write_record([cv.feature_names.join("+"), cv.mean_auroc.to_string(), cv.std_auroc.to_string(), cv.folds.to_string()])?;
    }
    out.write("ladder.csv", &w.into_inner()?)?;
    out.write("ladder.json", serde_json::to_string_pretty(&res.ladder)?.as_bytes())?;
    Ok(res.checks())
}

pub struct DistillOutcome {
    pub evaluation: metacog::HeadEvaluation,
    pub report: metacog::DistillReport,
}

impl DistillOutcome {
    pub fn checks(&self) -> Vec<Check> {
        let mut checks = Vec::new();
        match self.evaluation.margin_correlation() {
            Ok(r) => checks.push(Check::new("distill.margin_correlation", r >= 0.7, format!("r(predicted, oracle margin) over seen + held-out unseen = {r:.3} (need >= 0.7)"))),
            Err(e) => checks.push(Check::new("distill.margin_correlation", false, e.to_string())),
        }
        if let (Some(o), Some(p)) = (self.evaluation.method("oracle_margin"), self.evaluation.method("predicted_margin")) {
            checks.push(Check::new(
                "distill.oracle_dominance",
                p.auroc <= o.auroc + 0.02,
                format!("predicted AUROC {:.3} vs oracle {:.3}", p.auroc, o.auroc),
            ));
        }
        checks
    }
}

pub fn run_distill(cfg: &ExperimentConfig) -> Result<DistillOutcome> {
    let t = &cfg.distill;
    let data = dataset(cfg)?;
    let d = &cfg.dataset;
    let init = ModelParams::init(d.d_in, t.width, d.classes, cfg.student.activation, derive(cfg.seed, &format!("init/{}", t.width)))?;
    let mut schedule = DistillSchedule::from_epochs(t.phase1_epochs, t.phase2_epochs, t.phase3_epochs, t.steps_per_epoch);
    schedule.center_refresh_interval = t.refresh_epochs * t.steps_per_epoch;
    schedule.geo_loss_weight = t.geo_loss_weight;
    schedule.lm_loss_weight = 1.0 - t.geo_loss_weight;
    let mut dc = DistillConfig::new(schedule, train_config(cfg, t.width));
    dc.head_width = t.head_width;
    dc.head_learning_rate = t.head_learning_rate;
    dc.co_train = t.co_train;
    dc.center_variants = cfg.centers.variants;
    dc.center_noise = cfg.centers.noise;
    let (student, head, report) = metacog::distill(&init, &data, &dc, derive(cfg.seed, "distill"))?;
    let centers = basin_centers(&student, &data, cfg.centers.variants, cfg.centers.noise, derive(cfg.seed, "centers"))?;
    let (_, held) = metacog::head_pool(&data);
    let queries: Vec<_> = data.seen.iter().chain(held).collect();
    let evaluation = metacog::evaluate_head(&head, &student, &queries, &centers)?;
    Ok(DistillOutcome { evaluation, report })
}

pub fn distill(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let outcome = run_distill(cfg)?;
    out.write_with("head_comparison.csv", |b| detect::write_method_csv(&outcome.evaluation.methods, b))?;
    out.write_with("head_queries.csv", |b| outcome.evaluation.write_rows_csv(b))?;
    out.write("distill_report.json", serde_json::to_string_pretty(&outcome.report)?.as_bytes())?;
    Ok(outcome.checks())
}
