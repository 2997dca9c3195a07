//! A small head that reads the student's hidden state and learns to predict
//! its basin margin and gap, then a correctness probability.
//!
//! Training runs in three phases: the student alone, student and head
//! together (cross-entropy plus a weighted geometric MSE), and finally the
//! head's confidence output alone with binary cross-entropy.

use std::io::Write;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::{Direction, MethodRow};
use crate::error::{invalid, Error, Result};
use crate::geometry::{basin_centers, gap, margin, BasinCenterSet};
use crate::nnkit::{cross_entropy, one_hot_targets, seen_matrix, train, Activation, BatchSampler, ModelParams, TrainConfig, TrainReport};
use crate::seed;
use crate::stats;
use crate::taskgen::{Dataset, Entity};

pub const HEAD_OUTPUTS: usize = 2;
pub const DEFAULT_HEAD_WIDTH: usize = 64;

/// Output 0 is the normalized margin; output 1 is the gap during phase 2 and
/// the confidence logit after phase 3.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub net: ModelParams,
    pub norm: TargetNorm,
}

impl HeadParams {
    pub fn init(input_width: usize, hidden_width: usize, seed_value: u64) -> Result<Self> {
        let net = ModelParams::init(input_width, hidden_width, HEAD_OUTPUTS, Activation::Relu, seed::derive(seed_value, "metacog/head"))?;
        Ok(HeadParams { net, norm: TargetNorm::identity() })
    }

    pub fn hidden_width(&self) -> usize {
        self.net.width()
    }

    /// (predicted margin in original units, confidence probability)
    pub fn predict(&self, student_hidden: &[f64]) -> Result<(f64, f64)> {
        let out = self.net.forward(student_hidden)?.logits;
        Ok((self.norm.margin_mean + self.norm.margin_std * out[0], sigmoid(out[1])))
    }
}

/// Target standardization, fixed at the start of phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub margin_mean: f64,
    pub margin_std: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
}

impl TargetNorm {
    pub fn identity() -> Self {
        TargetNorm { margin_mean: 0.0, margin_std: 1.0, gap_mean: 0.0, gap_std: 1.0 }
    }

    fn fit(margins: &[f64], gaps: &[f64]) -> Self {
        let pop_std = |v: &[f64], m: f64| {
            let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        };
        let (mm, gm) = (stats::mean(margins), stats::mean(gaps));
        TargetNorm { margin_mean: mm, margin_std: pop_std(margins, mm), gap_mean: gm, gap_std: pop_std(gaps, gm) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSchedule {
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub phase3_steps: usize,
    pub geo_loss_weight: f64,
    pub lm_loss_weight: f64,
    pub center_refresh_interval: usize,
}

impl DistillSchedule {
    /// Epoch-denominated phases, refresh every two epochs.
    pub fn from_epochs(p1: usize, p2: usize, p3: usize, steps_per_epoch: usize) -> Self {
        DistillSchedule {
            phase1_steps: p1 * steps_per_epoch,
            phase2_steps: p2 * steps_per_epoch,
            phase3_steps: p3 * steps_per_epoch,
            geo_loss_weight: 0.2,
            lm_loss_weight: 0.8,
            center_refresh_interval: 2 * steps_per_epoch,
        }
    }

    pub fn default_for(steps_per_epoch: usize) -> Self {
        Self::from_epochs(3, 4, 3, steps_per_epoch)
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.geo_loss_weight, self.lm_loss_weight];
        if w.iter().any(|v| !(*v >= 0.0)) || (w[0] + w[1] - 1.0).abs() > 1e-9 {
            return Err(invalid("loss weights must be nonnegative and sum to 1"));
        }
        if self.phase2_steps > 0 && self.center_refresh_interval == 0 {
            return Err(invalid("center_refresh_interval must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub schedule: DistillSchedule,
    /// Student optimizer settings; `steps` is ignored in favour of the schedule.
    pub train: TrainConfig,
    pub head_width: usize,
    pub head_learning_rate: f64,
    /// Let the geometric loss reach the student in phase 2.
    pub co_train: bool,
    pub center_variants: usize,
    pub center_noise: f64,
}

impl DistillConfig {
    pub fn new(schedule: DistillSchedule, train: TrainConfig) -> Self {
        DistillConfig {
            schedule,
            train,
            head_width: DEFAULT_HEAD_WIDTH,
            head_learning_rate: 0.05,
            co_train: true,
            center_variants: 3,
            center_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub phase1: TrainReport,
    /// Seen-set cross-entropy after phase 2 (phase-1 value when phase 2 is empty).
    pub phase2_lm_loss: Option<f64>,
    /// Mean squared error of both geometric outputs over the pool after phase 2.
    pub phase2_geo_loss: Option<f64>,
    pub phase3_bce: Option<f64>,
    pub refresh_steps: Vec<usize>,
    /// SHA-256 of the center coordinates at each refresh.
    pub center_fingerprints: Vec<String>,
    pub norm: Option<TargetNorm>,
}

/// Entities the head trains on: every seen entity plus the first half of the
/// unseen ones. The second half of the unseen set stays held out.
pub fn head_pool(dataset: &Dataset) -> (Vec<&Entity>, Vec<&Entity>) {
    let cut = dataset.unseen.len() / 2;
    let pool = dataset.seen.iter().chain(&dataset.unseen[..cut]).collect();
    let held = dataset.unseen[cut..].iter().collect();
    (pool, held)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn fingerprint(centers: &BasinCenterSet) -> String {
    let mut h = Sha256::new();
    for (id, c) in &centers.centers {
        h.update((*id as u64).to_le_bytes());
        for v in c {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

fn entity_matrix(entities: &[&Entity], d_in: usize) -> Array2<f64> {
    let mut m = Array2::zeros((entities.len(), d_in));
    for (mut row, e) in m.rows_mut().into_iter().zip(entities) {
        row.assign(&ArrayView1::from(&e.embedding[..]));
    }
    m
}

/// Oracle margin and gap for each row of `hidden`. A single center has gap 0.
fn oracle_targets(hidden: &Array2<f64>, centers: &BasinCenterSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ms = Vec::with_capacity(hidden.nrows());
    let mut gs = Vec::with_capacity(hidden.nrows());
    for row in hidden.rows() {
        let h = row.as_slice().expect("row-major");
        ms.push(margin(h, centers)?.0);
        gs.push(if centers.len() >= 2 { gap(h, centers)? } else { 0.0 });
    }
    Ok((ms, gs))
}

pub fn distill(model: &ModelParams, dataset: &Dataset, cfg: &DistillConfig, seed_value: u64) -> Result<(ModelParams, HeadParams, DistillReport)> {
    let sched = &cfg.schedule;
    sched.validate()?;
    if sched.phase2_steps > 0 && dataset.seen.is_empty() {
        return Err(invalid("phase 2 needs seen entities"));
    }
    if !(cfg.head_learning_rate > 0.0) {
        return Err(invalid("head_learning_rate must be positive"));
    }

    let p1_cfg = TrainConfig { steps: sched.phase1_steps, ..cfg.train.clone() };
    let (mut student, phase1) = train(model, dataset, &p1_cfg)?;
    let mut head = HeadParams::init(student.width(), cfg.head_width, seed_value)?;
    let mut report = DistillReport {
        phase1,
        phase2_lm_loss: None,
        phase2_geo_loss: None,
        phase3_bce: None,
        refresh_steps: Vec::new(),
        center_fingerprints: Vec::new(),
        norm: None,
    };
    if sched.phase2_steps == 0 && sched.phase3_steps == 0 {
        return Ok((student, head, report));
    }

    let (pool, _) = head_pool(dataset);
    let pool_x = entity_matrix(&pool, dataset.d_in);
    let (seen_x, _) = seen_matrix(&student, dataset)?;
    let seen_t = one_hot_targets(dataset, student.classes())?;
    let center_seed = seed::derive(seed_value, "metacog/centers");

    if sched.phase2_steps > 0 {
        let mut lm_sampler = BatchSampler::new(seen_x.nrows(), cfg.train.batch_size, seed::derive(seed_value, "metacog/lm"));
        let mut geo_sampler = BatchSampler::new(pool_x.nrows(), cfg.train.batch_size, seed::derive(seed_value, "metacog/geo"));
        let mut targets = Array2::<f64>::zeros((pool_x.nrows(), HEAD_OUTPUTS));
        let mut norm = TargetNorm::identity();
        let (lm_w, geo_w) = (sched.lm_loss_weight, sched.geo_loss_weight);

        for step in 0..sched.phase2_steps {
            if step % sched.center_refresh_interval == 0 {
                let centers = basin_centers(&student, dataset, cfg.center_variants, cfg.center_noise, center_seed)?;
                let hidden = student.forward_batch(pool_x.view())?.hidden;
                let (ms, gs) = oracle_targets(&hidden, &centers)?;
                if step == 0 {
                    norm = TargetNorm::fit(&ms, &gs);
                    head.norm = norm;
                }
                for (i, (m, g)) in ms.iter().zip(&gs).enumerate() {
                    targets[[i, 0]] = (m - norm.margin_mean) / norm.margin_std;
                    targets[[i, 1]] = (g - norm.gap_mean) / norm.gap_std;
                }
                report.refresh_steps.push(step);
                report.center_fingerprints.push(fingerprint(&centers));
            }

            let idx = lm_sampler.next_batch();
            let xb = seen_x.select(Axis(0), &idx);
            let tb = seen_t.select(Axis(0), &idx);
            let trace = student.forward_batch(xb.view())?;
            let (loss, d_logits) = cross_entropy(trace.probs.view(), tb.view());
            if !loss.is_finite() {
                return Err(Error::Diverged { step: sched.phase1_steps + step });
            }
            let mut grads = student.backward(xb.view(), &trace, (d_logits * lm_w).view(), None);

            let gidx = geo_sampler.next_batch();
            let gx = pool_x.select(Axis(0), &gidx);
            let gt = targets.select(Axis(0), &gidx);
            let s_trace = student.forward_batch(gx.view())?;
            let h_trace = head.net.forward_batch(s_trace.hidden.view())?;
            let n = gidx.len() as f64;
            let d_out = (&h_trace.logits - &gt) * (2.0 * geo_w / (n * HEAD_OUTPUTS as f64));
            if d_out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: sched.phase1_steps + step });
            }
            let head_grads = head.net.backward(s_trace.hidden.view(), &h_trace, d_out.view(), None);
            if cfg.co_train {
                let d_hidden = head.net.input_gradient(&h_trace, d_out.view());
                let zeros = Array2::zeros((gidx.len(), student.classes()));
                let geo_grads = student.backward(gx.view(), &s_trace, zeros.view(), Some(d_hidden.view()));
                grads.w1 += &geo_grads.w1;
                grads.b1 += &geo_grads.b1;
            }
            student.apply(&grads, cfg.train.learning_rate);
            head.net.apply(&head_grads, cfg.head_learning_rate);
        }

        let trace = student.forward_batch(seen_x.view())?;
        report.phase2_lm_loss = Some(cross_entropy(trace.probs.view(), seen_t.view()).0);
        let hidden = student.forward_batch(pool_x.view())?.hidden;
        let out = head.net.forward_batch(hidden.view())?.logits;
        let mse = (&out - &targets).mapv(|v| v * v).mean().unwrap_or(0.0);
        report.phase2_geo_loss = Some(mse);
        report.norm = Some(norm);
    }

    if sched.phase3_steps > 0 {
        let s_trace = student.forward_batch(pool_x.view())?;
        let labels: Vec<f64> = s_trace
            .logits
            .rows()
            .into_iter()
            .zip(&pool)
            .map(|(row, e)| if crate::nnkit::argmax(row.as_slice().expect("row-major")) == e.code { 1.0 } else { 0.0 })
            .collect();
        let head_hidden = head.net.forward_batch(s_trace.hidden.view())?.hidden;
        let mut sampler = BatchSampler::new(pool_x.nrows(), cfg.train.batch_size, seed::derive(seed_value, "metacog/confidence"));
        for _ in 0..sched.phase3_steps {
            let idx = sampler.next_batch();
            let n = idx.len() as f64;
            let mut gw = vec![0.0; head.net.width()];
            let mut gb = 0.0;
            for &i in &idx {
                let hrow = head_hidden.row(i);
                let z = head.net.w2.row(1).dot(&hrow) + head.net.b2[1];
                let err = (sigmoid(z) - labels[i]) / n;
                for (g, h) in gw.iter_mut().zip(hrow.iter()) {
                    *g += err * h;
                }
                gb += err;
            }
            for (w, g) in head.net.w2.row_mut(1).iter_mut().zip(&gw) {
                *w -= cfg.head_learning_rate * g;
            }
            head.net.b2[1] -= cfg.head_learning_rate * gb;
        }
        let mut bce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z = head.net.w2.row(1).dot(&head_hidden.row(i)) + head.net.b2[1];
            let p = sigmoid(z).clamp(1e-15, 1.0 - 1e-15);
            bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        report.phase3_bce = Some(bce / labels.len() as f64);
    }

    Ok((student, head, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadQueryRow {
    pub query_id: usize,
    pub predicted_margin: f64,
    pub oracle_margin: f64,
    pub confidence: f64,
    pub entropy: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEvaluation {
    pub rows: Vec<HeadQueryRow>,
    /// Oracle margin, predicted margin, confidence and entropy, in that order.
    /// Empty when the queries contain only one class.
    pub methods: Vec<MethodRow>,
}

impl HeadEvaluation {
    /// Pearson correlation of predicted against oracle margin.
    pub fn margin_correlation(&self) -> Result<f64> {
        let p: Vec<f64> = self.rows.iter().map(|r| r.predicted_margin).collect();
        let o: Vec<f64> = self.rows.iter().map(|r| r.oracle_margin).collect();
        stats::pearson(&p, &o)
    }

    pub fn method(&self, name: &str) -> Option<&MethodRow> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["query_id", "predicted_margin", "oracle_margin", "confidence", "entropy", "correct"])?;
        for r in &self.rows {
            out.write_record([
                r.query_id.to_string(),
                r.predicted_margin.to_string(),
                r.oracle_margin.to_string(),
                r.confidence.to_string(),
                r.entropy.to_string(),
                r.correct.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn evaluate_head(head: &HeadParams, model: &ModelParams, queries: &[&Entity], centers: &BasinCenterSet) -> Result<HeadEvaluation> {
    let mut rows = Vec::with_capacity(queries.len());
    for e in queries {
        let trace = model.forward(&e.embedding)?;
        let (pm, conf) = head.predict(&trace.hidden)?;
        rows.push(HeadQueryRow {
            query_id: e.id,
            predicted_margin: pm,
            oracle_margin: margin(&trace.hidden, centers)?.0,
            confidence: conf,
            entropy: trace.entropy(crate::nnkit::EntropyBase::Nats),
            correct: trace.argmax() == e.code,
        });
    }
    let labels: Vec<bool> = rows.iter().map(|r| r.correct).collect();
    let both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
    let mut methods = Vec::new();
    if both {
        let col = |f: fn(&HeadQueryRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        methods.push(MethodRow::evaluate("oracle_margin", &col(|r| r.oracle_margin), &labels, Direction::LowerIsPositive)?);
        methods.push(MethodRow::evaluate("predicted_margin", &col(|r| r.predicted_margin), &labels, Direction::LowerIsPositive)?);
        methods.push(MethodRow::evaluate("confidence", &col(|r| r.confidence), &labels, Direction::HigherIsPositive)?);
        methods.push(MethodRow::evaluate("entropy", &col(|r| r.entropy), &labels, Direction::LowerIsPositive)?);
    }
    Ok(HeadEvaluation { rows, methods })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::generate_dataset;

    fn small() -> (Dataset, ModelParams, TrainConfig) {
        let d = generate_dataset(40, 20, 16, 10, 3).unwrap();
        let m = ModelParams::init(16, 32, 10, Activation::Relu, 4).unwrap();
        let cfg = TrainConfig { steps: 0, learning_rate: 0.5, batch_size: 10, seed: 9, ..Default::default() };
        (d, m, cfg)
    }

    #[test]
    fn reduction_matches_plain_training() {
        let (d, m, cfg) = small();
        let sched = DistillSchedule { phase1_steps: 300, phase2_steps: 0, phase3_steps: 0, ..DistillSchedule::default_for(4) };
        let (student, head, rep) = distill(&m, &d, &DistillConfig::new(sched, cfg.clone()), 1).unwrap();
        let (plain, plain_rep) = train(&m, &d, &TrainConfig { steps: 300, ..cfg }).unwrap();
        assert_eq!(student, plain);
        assert_eq!(rep.phase1, plain_rep);
        assert_eq!(head, HeadParams::init(32, DEFAULT_HEAD_WIDTH, 1).unwrap());
        assert!(rep.phase2_geo_loss.is_none() && rep.refresh_steps.is_empty());
    }

    #[test]
    fn schedule_defaults() {
        let s = DistillSchedule::default_for(10);
        assert_eq!((s.phase1_steps, s.phase2_steps, s.phase3_steps, s.center_refresh_interval), (30, 40, 30, 20));
        assert_eq!((s.lm_loss_weight, s.geo_loss_weight), (0.8, 0.2));
        assert!(s.validate().is_ok());
        assert!(DistillSchedule { geo_loss_weight: 0.5, ..s }.validate().is_err());
    }

    #[test]
    fn rejects_phase2_without_seen() {
        let (mut d, m, cfg) = small();
        d.seen.clear();
        let sched = DistillSchedule { phase1_steps: 0, ..DistillSchedule::default_for(2) };
        assert!(distill(&m, &d, &DistillConfig::new(sched, cfg), 0).is_err());
    }

    #[test]
    fn constant_targets_give_constant_predictions() {
        // every pool query is the same point, so the oracle margin is constant
        let base = generate_dataset(1, 0, 8, 4, 5).unwrap();
        let e = base.seen[0].clone();
        let unseen: Vec<Entity> = (1..21).map(|id| Entity { id, ..e.clone() }).collect();
        let d = Dataset { unseen, ..base };
        let m = ModelParams::init(8, 16, 4, Activation::Relu, 1).unwrap();
        let cfg = TrainConfig { steps: 0, learning_rate: 0.1, batch_size: 8, seed: 2, ..Default::default() };
        let sched = DistillSchedule {
            phase1_steps: 0,
            phase2_steps: 1500,
            phase3_steps: 0,
            geo_loss_weight: 1.0,
            lm_loss_weight: 0.0,
            center_refresh_interval: 5000,
        };
        let mut dc = DistillConfig::new(sched, cfg);
        dc.co_train = false;
        dc.center_variants = 1;
        let (student, head, _) = distill(&m, &d, &dc, 3).unwrap();
        let centers = basin_centers(&student, &d, 1, 0.0, 0).unwrap();
        let h = student.hidden(&e.embedding).unwrap().to_vec();
        let oracle = margin(&h, &centers).unwrap().0;
        let (pred, _) = head.predict(&h).unwrap();
        assert!((pred - oracle).abs() < 1e-3, "{pred} vs {oracle}");
    }

    #[test]
    fn refresh_is_deterministic() {
        let (d, m, cfg) = small();
        let sched = DistillSchedule { phase1_steps: 50, phase2_steps: 40, phase3_steps: 10, center_refresh_interval: 15, ..DistillSchedule::default_for(1) };
        let dc = DistillConfig::new(sched, cfg);
        let (s1, h1, r1) = distill(&m, &d, &dc, 7).unwrap();
        let (s2, h2, r2) = distill(&m, &d, &dc, 7).unwrap();
        assert_eq!(r1.refresh_steps, vec![0, 15, 30]);
        assert_eq!(r1.center_fingerprints, r2.center_fingerprints);
        assert_eq!((s1, h1), (s2, h2));
        assert!(r1.phase3_bce.unwrap().is_finite());
    }

    #[test]
    fn exact_head_ties_oracle_rows() {
        let (d, m, cfg) = small();
        let (student, _) = train(&m, &d, &TrainConfig { steps: 400, ..cfg }).unwrap();
        let centers = basin_centers(&student, &d, 1, 0.0, 0).unwrap();
        let queries: Vec<&Entity> = d.entities().collect();
        let eval = evaluate_head(&HeadParams::init(32, 8, 0).unwrap(), &student, &queries, &centers).unwrap();
        let mut exact = eval.clone();
        for r in &mut exact.rows {
            r.predicted_margin = r.oracle_margin;
        }
        let labels: Vec<bool> = exact.rows.iter().map(|r| r.correct).collect();
        let o: Vec<f64> = exact.rows.iter().map(|r| r.oracle_margin).collect();
        let a = MethodRow::evaluate("a", &o, &labels, Direction::LowerIsPositive).unwrap();
        let p: Vec<f64> = exact.rows.iter().map(|r| r.predicted_margin).collect();
        let b = MethodRow::evaluate("a", &p, &labels, Direction::LowerIsPositive).unwrap();
        assert_eq!(a, b);
        assert_eq!(eval.methods.len(), 4);
    }
}
