//! Synthetic entity→code association tasks.
//!
//! Entities are unit-norm Gaussian embeddings with a class code. Seen entities
//! are what a student memorizes; unseen entities come from the same embedding
//! distribution and carry codes only so that accuracy has a denominator.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nnkit::{softmax, Activation, ModelParams};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub embedding: Vec<f64>,
    pub code: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seen: Vec<Entity>,
    pub unseen: Vec<Entity>,
    pub d_in: usize,
    #[serde(rename = "K")]
    pub classes: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.seen.iter().chain(&self.unseen)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let data: Dataset = serde_json::from_str(text)?;
        data.validate()?;
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<usize> = self.entities().map(|e| e.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("entity ids are not unique"));
        }
        for e in self.entities() {
            if e.embedding.len() != self.d_in {
                return Err(Error::DimensionMismatch { expected: self.d_in, got: e.embedding.len() });
            }
            if e.code >= self.classes {
                return Err(invalid(format!("entity {} code {} out of range", e.id, e.code)));
            }
        }
        Ok(())
    }

    /// Replaces every code with the teacher's argmax so that accuracy is
    /// measured against the function the student is distilled from.
    pub fn relabel_with_teacher(&mut self, teacher: &ModelParams) -> Result<()> {
        for e in self.seen.iter_mut().chain(self.unseen.iter_mut()) {
            e.code = teacher.forward(&e.embedding)?.argmax();
        }
        Ok(())
    }

    /// Smallest Euclidean distance between any two embeddings.
    pub fn min_pairwise_distance(&self) -> f64 {
        let all: Vec<&Entity> = self.entities().collect();
        let mut best = f64::INFINITY;
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                best = best.min(euclidean(&a.embedding, &b.embedding));
            }
        }
        best
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn unit_gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate_dataset(n_seen: usize, n_unseen: usize, d_in: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n_seen + n_unseen == 0 {
        return Err(invalid("dataset needs at least one entity"));
    }
    if classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    if d_in == 0 {
        return Err(invalid("d_in must be positive"));
    }
    if d_in < 8 && n_seen > (1usize << d_in) {
        return Err(Error::CollisionRisk { n_seen, d_in });
    }
    let mut emb_rng = seed::rng_for(seed, "taskgen/embeddings");
    let mut code_rng = seed::rng_for(seed, "taskgen/codes");
    let mut make = |id: usize| Entity {
        id,
        embedding: unit_gaussian(&mut emb_rng, d_in),
        code: code_rng.random_range(0..classes),
    };
    let seen = (0..n_seen).map(&mut make).collect();
    let unseen = (n_seen..n_seen + n_unseen).map(&mut make).collect();
    Ok(Dataset { seen, unseen, d_in, classes, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSet {
    pub entity_id: usize,
    pub variants: Vec<Vec<f64>>,
    pub noise_scale: f64,
}

/// Variant 0 is the embedding itself; the others add isotropic Gaussian noise
/// whose expected norm is `noise_scale * ‖e‖` (per-coordinate standard
/// deviation `noise_scale * ‖e‖ / sqrt(d)`), then re-normalize.
pub fn make_variants(entity: &Entity, k: usize, noise_scale: f64, seed: u64) -> Result<VariantSet> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if !(noise_scale >= 0.0) {
        return Err(invalid("noise_scale must be nonnegative"));
    }
    let norm = entity.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sigma = noise_scale * norm / (entity.embedding.len() as f64).sqrt();
    let mut rng = seed::rng_for(seed, &format!("variants/{}", entity.id));
    let mut variants = Vec::with_capacity(k);
    variants.push(entity.embedding.clone());
    for _ in 1..k {
        if sigma == 0.0 {
            variants.push(entity.embedding.clone());
            continue;
        }
        let v: Vec<f64> = entity
            .embedding
            .iter()
            .map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        variants.push(v.into_iter().map(|x| x / n).collect());
    }
    Ok(VariantSet { entity_id: entity.id, variants, noise_scale })
}

pub fn make_teacher(d_in: usize, classes: usize, width: usize, seed: u64) -> Result<ModelParams> {
    if width == 0 {
        return Err(invalid("teacher width must be at least 1"));
    }
    ModelParams::init_unit_inputs(d_in, width, classes, Activation::Relu, seed::derive(seed, "teacher"))
}

/// `softmax(beta * logits)`.
pub fn tempered_targets(logits: &[f64], beta: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| beta * l).collect();
    softmax(&scaled)
}
