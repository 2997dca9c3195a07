//! Basin centers and the per-query epistemic signals measured against them.
//!
//! A basin center is the mean hidden state of a memorized entity over a few
//! input variants. Margin is the distance from a query's hidden state to the
//! nearest center, gap is how much farther the runner-up is.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nnkit::{argmax, EntropyBase, ModelParams};
use crate::seed;
use crate::taskgen::{euclidean, make_variants, Dataset, Entity, VariantSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceLayer {
    #[default]
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinCenterSet {
    /// Keyed by entity id; iteration order is ascending id.
    pub centers: BTreeMap<usize, Vec<f64>>,
    pub variants_used: usize,
    pub noise_scale: f64,
    pub source_layer: SourceLayer,
}

impl BasinCenterSet {
    pub fn from_centers(centers: impl IntoIterator<Item = (usize, Vec<f64>)>) -> Result<Self> {
        let centers: BTreeMap<_, _> = centers.into_iter().collect();
        if centers.is_empty() {
            return Err(Error::EmptyCenters);
        }
        let dim = centers.values().next().map(Vec::len).unwrap_or(0);
        for c in centers.values() {
            if c.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.len() });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("basin center".into()));
            }
        }
        Ok(Self {
            centers,
            variants_used: 1,
            noise_scale: 0.0,
            source_layer: SourceLayer::Hidden,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers.values().next().map(Vec::len).unwrap_or(0)
    }

    /// Smallest and second-smallest center distances with their ids.
    /// Ties resolve to the smaller id because iteration is in id order and
    /// only strict improvements replace the incumbent.
    fn nearest_two(&self, h: &[f64]) -> Result<((f64, usize), Option<(f64, usize)>)> {
        if self.centers.is_empty() {
            return Err(Error::EmptyCenters);
        }
        if h.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: h.len() });
        }
        let mut best: Option<(f64, usize)> = None;
        let mut second: Option<(f64, usize)> = None;
        for (&id, c) in &self.centers {
            let d = euclidean(h, c);
            match best {
                Some((bd, _)) if d >= bd => {
                    if second.is_none_or(|(sd, _)| d < sd) {
                        second = Some((d, id));
                    }
                }
                _ => {
                    second = best;
                    best = Some((d, id));
                }
            }
        }
        Ok((best.expect("nonempty"), second))
    }
}

/// Running mean `m += (x - m) / n`; identical inputs reproduce themselves exactly.
fn running_mean<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut mean: Vec<f64> = Vec::new();
    for (n, row) in rows.into_iter().enumerate() {
        if n == 0 {
            mean = row.to_vec();
            continue;
        }
        let k = (n + 1) as f64;
        for (m, x) in mean.iter_mut().zip(row) {
            *m += (x - *m) / k;
        }
    }
    mean
}

fn variants_for(entity: &Entity, k: usize, noise_scale: f64, seed: u64) -> Result<VariantSet> {
    make_variants(entity, k, noise_scale, seed)
}

pub fn basin_centers(
    model: &ModelParams,
    dataset: &Dataset,
    k_variants: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<BasinCenterSet> {
    if dataset.seen.is_empty() {
        return Err(invalid("basin centers need at least one seen entity"));
    }
    if k_variants == 0 {
        return Err(invalid("k_variants must be at least 1"));
    }
    let mut centers = BTreeMap::new();
    for e in &dataset.seen {
        let vs = variants_for(e, k_variants, noise_scale, seed)?;
        let hidden: Vec<Vec<f64>> = vs
            .variants
            .iter()
            .map(|v| model.hidden(v).map(|h| h.to_vec()))
            .collect::<Result<_>>()?;
        centers.insert(e.id, running_mean(hidden.iter().map(Vec::as_slice)));
    }
    let mut set = BasinCenterSet::from_centers(centers)?;
    set.variants_used = k_variants;
    set.noise_scale = noise_scale;
    Ok(set)
}

/// Distance to the nearest basin center and that center's id.
pub fn margin(h: &[f64], centers: &BasinCenterSet) -> Result<(f64, usize)> {
    let (best, _) = centers.nearest_two(h)?;
    Ok(best)
}

/// Second-nearest minus nearest center distance.
pub fn gap(h: &[f64], centers: &BasinCenterSet) -> Result<f64> {
    if centers.len() < 2 {
        return Err(Error::SingleCenter);
    }
    let ((d1, _), second) = centers.nearest_two(h)?;
    let (d2, _) = second.expect("two or more centers");
    Ok(d2 - d1)
}

/// Fraction of variant pairs whose argmax predictions agree.
pub fn stability(model: &ModelParams, variant_set: &VariantSet) -> Result<f64> {
    let k = variant_set.variants.len();
    if k < 2 {
        return Err(invalid("stability needs at least two variants"));
    }
    let preds: Vec<usize> = variant_set
        .variants
        .iter()
        .map(|v| model.forward(v).map(|t| t.argmax()))
        .collect::<Result<_>>()?;
    Ok(pairwise_agreement(&preds))
}

pub(crate) fn pairwise_agreement(preds: &[usize]) -> f64 {
    let k = preds.len();
    let mut agree = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            if preds[i] == preds[j] {
                agree += 1;
            }
        }
    }
    agree as f64 / (k * (k - 1) / 2) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Seen,
    Unseen,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Seen => "seen",
            Condition::Unseen => "unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub query_id: usize,
    pub condition: Condition,
    pub margin: f64,
    pub gap: f64,
    pub nearest_id: usize,
    pub entropy: f64,
    pub entropy_base: EntropyBase,
    pub stability: f64,
    pub top1_prob: f64,
    pub hidden_variance: f64,
    pub correct: bool,
    /// Top-2 logit gap; not part of the CSV export.
    #[serde(default)]
    pub logit_gap: f64,
}

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn signal_sweep(
    model: &ModelParams,
    dataset: &Dataset,
    centers: &BasinCenterSet,
    k_variants: usize,
    seed: u64,
) -> Result<Vec<SignalRecord>> {
    signal_sweep_in(model, dataset, centers, k_variants, seed, EntropyBase::Nats)
}

/// One record per seen and unseen entity, ordered by query id. Queries are
/// canonical embeddings; stability uses `k_variants` fresh variants at the
/// centers' noise scale (stability is 1 when `k_variants < 2`).
pub fn signal_sweep_in(
    model: &ModelParams,
    dataset: &Dataset,
    centers: &BasinCenterSet,
    k_variants: usize,
    seed: u64,
    base: EntropyBase,
) -> Result<Vec<SignalRecord>> {
    if centers.dim() != model.width() {
        return Err(Error::DimensionMismatch { expected: model.width(), got: centers.dim() });
    }
    let stab_seed = seed::derive(seed, "signal_sweep/stability");
    let queries = dataset
        .seen
        .iter()
        .map(|e| (e, Condition::Seen))
        .chain(dataset.unseen.iter().map(|e| (e, Condition::Unseen)));
    let mut records = Vec::with_capacity(dataset.seen.len() + dataset.unseen.len());
    for (e, condition) in queries {
        let trace = model.forward(&e.embedding)?;
        let (delta, nearest_id) = margin(&trace.hidden, centers)?;
        let g = if centers.len() >= 2 { gap(&trace.hidden, centers)? } else { 0.0 };
        let stab = if k_variants >= 2 {
            stability(model, &make_variants(e, k_variants, centers.noise_scale, stab_seed)?)?
        } else {
            1.0
        };
        let pred = trace.argmax();
        records.push(SignalRecord {
            query_id: e.id,
            condition,
            margin: delta,
            gap: g,
            nearest_id,
            entropy: trace.entropy(base),
            entropy_base: base,
            stability: stab,
            top1_prob: trace.probs[pred],
            hidden_variance: population_variance(&trace.hidden),
            correct: pred == e.code,
            logit_gap: trace.top2_gap(),
        });
    }
    records.sort_by_key(|r| r.query_id);
    Ok(records)
}

pub const SIGNAL_CSV_HEADER: [&str; 11] = [
    "query_id",
    "condition",
    "margin",
    "gap",
    "nearest_id",
    "entropy",
    "entropy_base",
    "stability",
    "top1_prob",
    "hidden_variance",
    "correct",
];

pub fn write_signal_csv<W: Write>(records: &[SignalRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SIGNAL_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.query_id.to_string(),
            r.condition.as_str().to_string(),
            r.margin.to_string(),
            r.gap.to_string(),
            r.nearest_id.to_string(),
            r.entropy.to_string(),
            r.entropy_base.as_str().to_string(),
            r.stability.to_string(),
            r.top1_prob.to_string(),
            r.hidden_variance.to_string(),
            r.correct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbCurve {
    pub alphas: Vec<f64>,
    pub error_rate: Vec<f64>,
    pub mean_entropy: Vec<f64>,
    /// Standard error of the error rate.
    pub sem: Vec<f64>,
    pub entropy_sem: Vec<f64>,
    pub trials_per_alpha: usize,
}

pub const DEFAULT_ALPHAS: [f64; 6] = [0.0, 0.005, 0.01, 0.02, 0.05, 0.1];

fn mean_and_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Error rate and mean entropy of the seen entities under isotropic input
/// noise with standard deviation `alpha * mean‖e‖`.
pub fn perturb_sweep(
    model: &ModelParams,
    dataset: &Dataset,
    alphas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<PerturbCurve> {
    if alphas.is_empty() {
        return Err(invalid("alphas must be nonempty"));
    }
    if trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    if dataset.seen.is_empty() {
        return Err(invalid("perturbation sweep needs seen entities"));
    }
    let mean_norm = dataset
        .seen
        .iter()
        .map(|e| e.embedding.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum::<f64>()
        / dataset.seen.len() as f64;

    let mut curve = PerturbCurve {
        alphas: alphas.to_vec(),
        error_rate: Vec::new(),
        mean_entropy: Vec::new(),
        sem: Vec::new(),
        entropy_sem: Vec::new(),
        trials_per_alpha: trials,
    };
    for (ai, &alpha) in alphas.iter().enumerate() {
        let sigma = alpha * mean_norm;
        let mut rng = seed::rng_for(seed, &format!("perturb/{ai}"));
        let mut errors = Vec::with_capacity(trials * dataset.seen.len());
        let mut entropies = Vec::with_capacity(errors.capacity());
        for e in &dataset.seen {
            for _ in 0..trials {
                let x: Vec<f64> = if sigma == 0.0 {
                    e.embedding.clone()
                } else {
                    e.embedding.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
                };
                let trace = model.forward(&x)?;
                errors.push(if argmax(&trace.logits) == e.code { 0.0 } else { 1.0 });
                entropies.push(trace.entropy(EntropyBase::Nats));
            }
        }
        let (err, err_sem) = mean_and_sem(&errors);
        let (ent, ent_sem) = mean_and_sem(&entropies);
        curve.error_rate.push(err);
        curve.sem.push(err_sem);
        curve.mean_entropy.push(ent);
        curve.entropy_sem.push(ent_sem);
    }
    Ok(curve)
}

/// Mean unseen margin over mean seen margin; `+inf` when the seen mean is zero.
pub fn separation_ratio(records: &[SignalRecord]) -> Result<f64> {
    let mean_of = |c: Condition| {
        let v: Vec<f64> = records.iter().filter(|r| r.condition == c).map(|r| r.margin).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let seen = mean_of(Condition::Seen).ok_or_else(|| invalid("no seen records"))?;
    let unseen = mean_of(Condition::Unseen).ok_or_else(|| invalid("no unseen records"))?;
    if seen == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(unseen / seen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::nnkit::{train, Activation, TrainConfig};
    use crate::taskgen::generate_dataset;
    use proptest::prelude::*;

    fn two_centers() -> BasinCenterSet {
        BasinCenterSet::from_centers([(0, vec![0.0, 0.0]), (1, vec![3.0, 4.0])]).unwrap()
    }

    fn brute_force(h: &[f64], centers: &[(usize, Vec<f64>)]) -> (f64, usize, f64) {
        let mut d: Vec<(f64, usize)> = centers.iter().map(|(id, c)| (euclidean(h, c), *id)).collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        (d[0].0, d[0].1, d[1].0 - d[0].0)
    }

    #[test]
    fn hand_checked_margin_and_gap() {
        let c = two_centers();
        assert_eq!(margin(&[0.0, 1.0], &c).unwrap(), (1.0, 0));
        let g = gap(&[0.0, 1.0], &c).unwrap();
        assert!((g - (18f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!((g - 3.243).abs() < 1e-3);
        assert_eq!(margin(&[3.0, 4.0], &c).unwrap(), (0.0, 1));
        assert_eq!(gap(&[1.5, 2.0], &c).unwrap(), 0.0);
        // equidistant: tie goes to smaller id
        assert_eq!(margin(&[1.5, 2.0], &c).unwrap().1, 0);
    }

    #[test]
    fn degenerate_center_sets() {
        let one = BasinCenterSet::from_centers([(4, vec![1.0, 1.0])]).unwrap();
        assert!(matches!(gap(&[0.0, 0.0], &one), Err(Error::SingleCenter)));
        assert!(matches!(BasinCenterSet::from_centers(Vec::new()), Err(Error::EmptyCenters)));
        assert!(matches!(margin(&[0.0], &one), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn margin_matches_exhaustive_scan() {
        let mut rng = seed::rng(42);
        let centers: Vec<(usize, Vec<f64>)> = (0..50)
            .map(|i| (i * 3 + 1, (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
            .collect();
        let set = BasinCenterSet::from_centers(centers.clone()).unwrap();
        for _ in 0..20 {
            let h: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let (d, id, g) = brute_force(&h, &centers);
            assert_eq!(margin(&h, &set).unwrap(), (d, id));
            assert_eq!(gap(&h, &set).unwrap(), g);
        }
    }

    #[test]
    fn stability_counts_agreeing_pairs() {
        assert_eq!(pairwise_agreement(&[2, 2, 2]), 1.0);
        assert_eq!(pairwise_agreement(&[0, 1, 2]), 0.0);
        assert_eq!(pairwise_agreement(&[5, 5, 5, 1]), 0.5);
    }

    #[test]
    fn stability_requires_two_variants() {
        let d = generate_dataset(1, 0, 8, 3, 0).unwrap();
        let model = ModelParams::init(8, 4, 3, Activation::Relu, 0).unwrap();
        let vs = make_variants(&d.seen[0], 1, 0.1, 0).unwrap();
        assert!(stability(&model, &vs).is_err());
        let vs = make_variants(&d.seen[0], 4, 0.0, 0).unwrap();
        assert_eq!(stability(&model, &vs).unwrap(), 1.0);
    }

    fn trained() -> (ModelParams, Dataset) {
        let d = generate_dataset(20, 10, 16, 20, 3).unwrap();
        let model = ModelParams::init(16, 48, 20, Activation::Relu, 3).unwrap();
        let cfg = TrainConfig { steps: 3000, learning_rate: 0.5, batch_size: 20, seed: 3, ..Default::default() };
        (train(&model, &d, &cfg).unwrap().0, d)
    }

    #[test]
    fn centers_reduce_to_hidden_states() {
        let (model, d) = trained();
        let single = basin_centers(&model, &d, 1, 0.0, 5).unwrap();
        for e in &d.seen {
            assert_eq!(single.centers[&e.id], model.hidden(&e.embedding).unwrap().to_vec());
        }
        let triple = basin_centers(&model, &d, 3, 0.0, 5).unwrap();
        assert_eq!(triple.centers, single.centers);
        assert_eq!(basin_centers(&model, &d, 3, 0.05, 5).unwrap().variants_used, 3);
        assert!(d.unseen.iter().all(|e| !single.centers.contains_key(&e.id)));

        let empty = Dataset { seen: vec![], ..d.clone() };
        assert!(basin_centers(&model, &empty, 3, 0.0, 0).is_err());
    }

    #[test]
    fn sweep_shape_and_seen_signals() {
        let (model, d) = trained();
        let noise = 0.02;
        let centers = basin_centers(&model, &d, 3, noise, 1).unwrap();
        let recs = signal_sweep(&model, &d, &centers, 3, 1).unwrap();
        assert_eq!(recs.len(), d.seen.len() + d.unseen.len());
        assert!(recs.windows(2).all(|w| w[0].query_id < w[1].query_id));
        for r in recs.iter().filter(|r| r.condition == Condition::Seen) {
            assert!(r.correct);
            assert_eq!(r.nearest_id, r.query_id);
            assert!(r.gap >= 0.0);
            assert!((0.0..=1.0).contains(&r.stability));
            // the center averages this query with two nearby variants
            let vs = make_variants(&d.seen[r.query_id], 3, noise, 1).unwrap();
            let spread = vs
                .variants
                .iter()
                .map(|v| euclidean(&model.hidden(v).unwrap().to_vec(), &centers.centers[&r.query_id]))
                .fold(0.0, f64::max);
            assert!(r.margin <= spread + 1e-12);
        }
        let ratio = separation_ratio(&recs).unwrap();
        assert!(ratio > 1.0, "ratio {ratio}");
    }

    #[test]
    fn separation_ratio_arithmetic() {
        let rec = |id, condition, margin| SignalRecord {
            query_id: id,
            condition,
            margin,
            gap: 0.0,
            nearest_id: 0,
            entropy: 0.0,
            entropy_base: EntropyBase::Nats,
            stability: 1.0,
            top1_prob: 1.0,
            hidden_variance: 0.0,
            correct: true,
            logit_gap: 0.0,
        };
        let recs = vec![rec(0, Condition::Seen, 1.0), rec(1, Condition::Seen, 1.0), rec(2, Condition::Unseen, 5.0)];
        assert_eq!(separation_ratio(&recs).unwrap(), 5.0);
        let same = vec![rec(0, Condition::Seen, 2.0), rec(1, Condition::Unseen, 2.0)];
        assert_eq!(separation_ratio(&same).unwrap(), 1.0);
        let zero = vec![rec(0, Condition::Seen, 0.0), rec(1, Condition::Unseen, 2.0)];
        assert_eq!(separation_ratio(&zero).unwrap(), f64::INFINITY);
        assert!(separation_ratio(&recs[..2]).is_err());
    }

    #[test]
    fn csv_has_fixed_header() {
        let (model, d) = trained();
        let centers = basin_centers(&model, &d, 1, 0.0, 0).unwrap();
        let recs = signal_sweep(&model, &d, &centers, 2, 0).unwrap();
        let mut buf = Vec::new();
        write_signal_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "query_id,condition,margin,gap,nearest_id,entropy,entropy_base,stability,top1_prob,hidden_variance,correct"
        );
        assert_eq!(text.lines().count(), recs.len() + 1);
    }

    #[test]
    fn perturbation_extremes() {
        let (model, d) = trained();
        let clean_err = d
            .seen
            .iter()
            .filter(|e| model.forward(&e.embedding).unwrap().argmax() != e.code)
            .count() as f64
            / d.seen.len() as f64;
        let curve = perturb_sweep(&model, &d, &[0.0, 100.0], 50, 2).unwrap();
        assert_eq!(curve.error_rate[0], clean_err);
        let chance = 1.0 - 1.0 / d.classes as f64;
        assert!((curve.error_rate[1] - chance).abs() < 0.1, "{}", curve.error_rate[1]);
        assert!(perturb_sweep(&model, &d, &[], 5, 0).is_err());
        assert!(perturb_sweep(&model, &d, &[0.1], 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn margin_is_a_lower_bound_and_order_free(
            pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..12),
            h in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let items: Vec<(usize, Vec<f64>)> = pts.into_iter().enumerate().collect();
            let set = BasinCenterSet::from_centers(items.clone()).unwrap();
            let mut reversed = items.clone();
            reversed.reverse();
            let set_rev = BasinCenterSet::from_centers(reversed).unwrap();
            let (d, _) = margin(&h, &set).unwrap();
            for (_, c) in &items {
                prop_assert!(d <= euclidean(&h, c));
            }
            prop_assert!(gap(&h, &set).unwrap() >= 0.0);
            prop_assert_eq!(margin(&h, &set).unwrap(), margin(&h, &set_rev).unwrap());
            prop_assert_eq!(gap(&h, &set).unwrap(), gap(&h, &set_rev).unwrap());
        }
    }
}
