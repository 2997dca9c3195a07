//! Symmetric/antisymmetric split of Jacobians.
//!
//! `J = S + A` with `S = (J + Jᵀ)/2` and `A = (J - Jᵀ)/2`. The symmetry
//! correlation φ is the Pearson correlation of `J[i][j]` against `J[j][i]`
//! over the strict upper triangle: +1 for gradient-like maps, −1 for purely
//! rotational ones. ‖S‖²_F measures how strongly a map contracts or expands.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nnkit::{numerical_jacobian, ModelParams};
use crate::seed;
use crate::stats::pearson;

pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    /// `None` when the off-diagonal pairs have zero variance.
    pub phi: Option<f64>,
    pub s_frob_sq: f64,
    pub a_frob_sq: f64,
    pub dim: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_matrix: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a_matrix: Option<Vec<Vec<f64>>>,
}

impl JacobianReport {
    pub fn j_frob_sq(&self) -> f64 {
        self.s_frob_sq + self.a_frob_sq
    }

    pub fn to_json(&self, include_matrices: bool) -> Result<String> {
        if include_matrices {
            Ok(serde_json::to_string_pretty(self)?)
        } else {
            let slim = JacobianReport { s_matrix: None, a_matrix: None, ..self.clone() };
            Ok(serde_json::to_string_pretty(&slim)?)
        }
    }
}

fn check_square(j: &Array2<f64>) -> Result<usize> {
    if j.nrows() != j.ncols() {
        return Err(invalid(format!("jacobian must be square, got {}x{}", j.nrows(), j.ncols())));
    }
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("jacobian".into()));
    }
    Ok(j.nrows())
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn symmetric_part(j: &Array2<f64>) -> Array2<f64> {
    (j + &j.t()) * 0.5
}

pub fn antisymmetric_part(j: &Array2<f64>) -> Array2<f64> {
    (j - &j.t()) * 0.5
}

fn frob_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn decompose(j: &Array2<f64>) -> Result<JacobianReport> {
    let dim = check_square(j)?;
    let s = symmetric_part(j);
    let a = antisymmetric_part(j);
    let phi = match phi(j) {
        Ok(p) => Some(p),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(JacobianReport {
        phi,
        s_frob_sq: frob_sq(&s),
        a_frob_sq: frob_sq(&a),
        dim,
        s_matrix: Some(to_rows(&s)),
        a_matrix: Some(to_rows(&a)),
    })
}

/// Off-diagonal pairs `(J[i][j], J[j][i])` for `i < j`.
pub fn mirror_pairs(j: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = j.nrows();
    let mut upper = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    let mut lower = Vec::with_capacity(upper.capacity());
    for i in 0..n {
        for k in i + 1..n {
            upper.push(j[[i, k]]);
            lower.push(j[[k, i]]);
        }
    }
    (upper, lower)
}

pub fn phi(j: &Array2<f64>) -> Result<f64> {
    let dim = check_square(j)?;
    if dim < 2 {
        return Err(Error::UndefinedCorrelation("dimension below 2".into()));
    }
    let (upper, lower) = mirror_pairs(j);
    pearson(&upper, &lower)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSet {
    /// Per-head products standing for `W_O · W_V`, each `d × d`.
    pub heads: Vec<Array2<f64>>,
    pub attn_weights: Vec<f64>,
}

impl HeadSet {
    pub fn new(heads: Vec<Array2<f64>>, attn_weights: Vec<f64>) -> Result<Self> {
        if heads.is_empty() {
            return Err(invalid("head set is empty"));
        }
        if heads.len() != attn_weights.len() {
            return Err(Error::DimensionMismatch { expected: heads.len(), got: attn_weights.len() });
        }
        let d = heads[0].nrows();
        for m in &heads {
            if m.nrows() != d || m.ncols() != d {
                return Err(invalid(format!("head must be {d}x{d}, got {}x{}", m.nrows(), m.ncols())));
            }
        }
        if attn_weights.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(invalid("attention weights must lie in [0, 1]"));
        }
        if attn_weights.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(invalid("attention weights sum above 1"));
        }
        Ok(Self { heads, attn_weights })
    }

    pub fn dim(&self) -> usize {
        self.heads[0].nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoComposite {
    pub j_weighted: Array2<f64>,
    pub phi_weighted: f64,
    pub phi_uniform: f64,
}

/// `Σ a_h M_h` and its symmetry correlation, against the unweighted mean of heads.
pub fn vo_composite(heads: &HeadSet) -> Result<VoComposite> {
    let d = heads.dim();
    let mut weighted = Array2::zeros((d, d));
    let mut uniform = Array2::zeros((d, d));
    for (m, &a) in heads.heads.iter().zip(&heads.attn_weights) {
        weighted.scaled_add(a, m);
        uniform += m;
    }
    uniform /= heads.heads.len() as f64;
    Ok(VoComposite {
        phi_weighted: phi(&weighted)?,
        phi_uniform: phi(&uniform)?,
        j_weighted: weighted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoEnergy {
    /// `Σ_h a_h hᵀ M_h h`
    pub energy: f64,
    /// `hᵀ S h` with `S` the symmetric part of the weighted composite.
    pub energy_symmetric: f64,
}

pub fn vo_energy(h: &[f64], heads: &HeadSet) -> Result<VoEnergy> {
    let d = heads.dim();
    if h.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: h.len() });
    }
    let hv = ArrayView1::from(h);
    let energy = heads
        .heads
        .iter()
        .zip(&heads.attn_weights)
        .map(|(m, a)| a * hv.dot(&m.dot(&hv)))
        .sum();
    let mut weighted = Array2::zeros((d, d));
    for (m, &a) in heads.heads.iter().zip(&heads.attn_weights) {
        weighted.scaled_add(a, m);
    }
    let s = symmetric_part(&weighted);
    let energy_symmetric = hv.dot(&s.dot(&hv));
    Ok(VoEnergy { energy, energy_symmetric })
}

/// Decomposition of the input→hidden Jacobian of a square (`d_in == width`) model.
pub fn model_jacobian_report(model: &ModelParams, x: &[f64]) -> Result<JacobianReport> {
    model_jacobian_report_eps(model, x, DEFAULT_EPS)
}

pub fn model_jacobian_report_eps(model: &ModelParams, x: &[f64], eps: f64) -> Result<JacobianReport> {
    if model.input_dim() != model.width() {
        return Err(invalid(format!(
            "input-to-hidden map is {}x{}; the symmetric/antisymmetric split needs a square map (use d_in == width)",
            model.width(),
            model.input_dim()
        )));
    }
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), got: x.len() });
    }
    let j = numerical_jacobian(|v| model.hidden(v).map(|h| h.to_vec()).unwrap_or_default(), x, eps)?;
    let report = decompose(&j)?;
    if report.phi.is_none() {
        return Err(Error::UndefinedCorrelation("model jacobian has constant off-diagonal pairs".into()));
    }
    Ok(report)
}

pub fn random_gaussian(d: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |_| rng.sample(StandardNormal))
}

pub fn random_symmetric(d: usize, rng: &mut impl Rng) -> Array2<f64> {
    symmetric_part(&random_gaussian(d, rng))
}

pub fn random_antisymmetric(d: usize, rng: &mut impl Rng) -> Array2<f64> {
    antisymmetric_part(&random_gaussian(d, rng))
}

/// Synthetic attention-sink configuration: one symmetric head carrying most of
/// the attention mass and one antisymmetric head carrying the rest.
pub fn symmetric_dominant_heads(d: usize, sym_weight: f64, seed: u64) -> Result<HeadSet> {
    let mut rng = seed::rng_for(seed, "heads/symmetric_dominant");
    let sym = random_symmetric(d, &mut rng);
    let anti = random_antisymmetric(d, &mut rng);
    HeadSet::new(vec![sym, anti], vec![sym_weight, 1.0 - sym_weight])
}
