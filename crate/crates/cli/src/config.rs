//! TOML experiment configuration.
//!
//! Every block has defaults, so a config only needs `experiment` and
//! whatever it wants to override. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use basinlab::nnkit::Activation;
use basinlab::scalinglaw::{BackgroundModel, CALIBRATED_TAIL_OFFSET, DEFAULT_VOCAB};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn bad(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    WidthSweep,
    LawVerify,
    LawFitReference,
    JacobianSuite,
    Perturb,
    DetectSuite,
    Distill,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::WidthSweep => "width_sweep",
            ExperimentKind::LawVerify => "law_verify",
            ExperimentKind::LawFitReference => "law_fit_reference",
            ExperimentKind::JacobianSuite => "jacobian_suite",
            ExperimentKind::Perturb => "perturb",
            ExperimentKind::DetectSuite => "detect_suite",
            ExperimentKind::Distill => "distill",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetBlock {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub d_in: usize,
    pub classes: usize,
}

impl Default for DatasetBlock {
    fn default() -> Self {
        DatasetBlock { n_seen: 500, n_unseen: 200, d_in: 64, classes: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentBlock {
    pub activation: Activation,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss_threshold: f64,
}

impl Default for StudentBlock {
    fn default() -> Self {
        StudentBlock { activation: Activation::Relu, steps: 100_000, learning_rate: 0.5, batch_size: 50, loss_threshold: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentersBlock {
    pub variants: usize,
    pub noise: f64,
    pub stability_variants: usize,
    pub h0: f64,
}

impl Default for CentersBlock {
    fn default() -> Self {
        CentersBlock { variants: 3, noise: 0.05, stability_variants: 5, h0: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WidthSweepBlock {
    pub widths: Vec<usize>,
}

impl Default for WidthSweepBlock {
    fn default() -> Self {
        WidthSweepBlock { widths: vec![16, 32, 64, 128, 256] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    TwoClassExact,
    TwoClassApprox,
    FlatTail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundBlock {
    pub kind: BackgroundKind,
    pub v: usize,
    pub tail_offset_g: f64,
}

impl Default for BackgroundBlock {
    fn default() -> Self {
        BackgroundBlock { kind: BackgroundKind::FlatTail, v: DEFAULT_VOCAB, tail_offset_g: CALIBRATED_TAIL_OFFSET }
    }
}

impl BackgroundBlock {
    pub fn model(&self) -> BackgroundModel {
        match self.kind {
            BackgroundKind::TwoClassExact => BackgroundModel::TwoClassExact,
            BackgroundKind::TwoClassApprox => BackgroundModel::TwoClassApprox,
            BackgroundKind::FlatTail => BackgroundModel::FlatTail { v: self.v, tail_offset_g: self.tail_offset_g },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawMode {
    Synthetic,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LawBlock {
    pub mode: LawMode,
    pub delta_bars: Vec<f64>,
    pub samples: usize,
    pub h0: f64,
    /// Reference CSV; the bundled table when absent.
    pub reference: Option<PathBuf>,
    pub background: BackgroundBlock,
}

impl Default for LawBlock {
    fn default() -> Self {
        LawBlock {
            mode: LawMode::Synthetic,
            delta_bars: vec![0.8, 1.5, 3.0],
            samples: 10_000,
            h0: 0.1,
            reference: None,
            background: BackgroundBlock::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JacobianBlock {
    pub dim: usize,
    pub random_trials: usize,
    pub head_seeds: usize,
    pub heads: usize,
    pub symmetric_weight: f64,
    pub eps: f64,
}

impl Default for JacobianBlock {
    fn default() -> Self {
        JacobianBlock { dim: 16, random_trials: 100, head_seeds: 100, heads: 4, symmetric_weight: 0.8, eps: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbBlock {
    pub width: usize,
    pub alphas: Vec<f64>,
    pub trials: usize,
}

impl Default for PerturbBlock {
    fn default() -> Self {
        PerturbBlock { width: 64, alphas: basinlab::geometry::DEFAULT_ALPHAS.to_vec(), trials: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectBlock {
    /// Trained student checkpoint; when absent the student is trained inline.
    pub checkpoint: Option<PathBuf>,
    pub width: usize,
    pub folds: usize,
    /// Feature sets for the logistic ladder, by signal name.
    pub ladder: Vec<Vec<String>>,
}

impl Default for DetectBlock {
    fn default() -> Self {
        DetectBlock {
            checkpoint: None,
            width: 256,
            folds: 5,
            ladder: vec![
                vec!["entropy".into()],
                vec!["margin".into()],
                vec!["margin".into(), "stability".into()],
                vec!["margin".into(), "gap".into(), "stability".into(), "entropy".into(), "top1_prob".into(), "hidden_variance".into()],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillBlock {
    pub width: usize,
    pub steps_per_epoch: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase3_epochs: usize,
    pub refresh_epochs: usize,
    pub geo_loss_weight: f64,
    pub head_width: usize,
    pub head_learning_rate: f64,
    pub co_train: bool,
}

impl Default for DistillBlock {
    fn default() -> Self {
        DistillBlock {
            width: 128,
            steps_per_epoch: 1000,
            phase1_epochs: 3,
            phase2_epochs: 4,
            phase3_epochs: 3,
            refresh_epochs: 2,
            geo_loss_weight: 0.2,
            head_width: 64,
            head_learning_rate: 0.05,
            co_train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetBlock,
    #[serde(default)]
    pub student: StudentBlock,
    #[serde(default)]
    pub centers: CentersBlock,
    #[serde(default)]
    pub width_sweep: WidthSweepBlock,
    #[serde(default)]
    pub law: LawBlock,
    #[serde(default)]
    pub jacobian: JacobianBlock,
    #[serde(default)]
    pub perturb: PerturbBlock,
    #[serde(default)]
    pub detect: DetectBlock,
    #[serde(default)]
    pub distill: DistillBlock,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

pub const SIGNAL_NAMES: [&str; 6] = ["margin", "gap", "stability", "entropy", "top1_prob", "hidden_variance"];

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        ExperimentConfig {
            experiment,
            seed: 0,
            output_dir: default_output_dir(),
            dataset: DatasetBlock::default(),
            student: StudentBlock::default(),
            centers: CentersBlock::default(),
            width_sweep: WidthSweepBlock::default(),
            law: LawBlock::default(),
            jacobian: JacobianBlock::default(),
            perturb: PerturbBlock::default(),
            detect: DetectBlock::default(),
            distill: DistillBlock::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if d.n_seen == 0 {
            return Err(bad("dataset.n_seen", "must be positive"));
        }
        if d.d_in == 0 {
            return Err(bad("dataset.d_in", "must be positive"));
        }
        if d.classes < 2 {
            return Err(bad("dataset.classes", "must be at least 2"));
        }
        let s = &self.student;
        if !(s.learning_rate > 0.0) || !s.learning_rate.is_finite() {
            return Err(bad("student.learning_rate", "must be positive"));
        }
        if s.batch_size == 0 {
            return Err(bad("student.batch_size", "must be positive"));
        }
        if self.centers.variants == 0 {
            return Err(bad("centers.variants", "must be at least 1"));
        }
        if !(self.centers.noise >= 0.0) {
            return Err(bad("centers.noise", "must be nonnegative"));
        }
        if !(self.centers.h0 > 0.0) {
            return Err(bad("centers.h0", "must be positive"));
        }
        match self.experiment {
            ExperimentKind::WidthSweep => {
                if self.width_sweep.widths.is_empty() {
                    return Err(bad("width_sweep.widths", "must be nonempty"));
                }
                if self.width_sweep.widths.contains(&0) {
                    return Err(bad("width_sweep.widths", "widths must be positive"));
                }
            }
            ExperimentKind::LawVerify | ExperimentKind::LawFitReference => {
                let l = &self.law;
                if self.experiment == ExperimentKind::LawVerify && l.mode == LawMode::Synthetic {
                    if l.delta_bars.is_empty() {
                        return Err(bad("law.delta_bars", "must be nonempty in synthetic mode"));
                    }
                    if l.delta_bars.iter().any(|v| !(*v > 0.0)) {
                        return Err(bad("law.delta_bars", "values must be positive"));
                    }
                    if l.samples < 10 {
                        return Err(bad("law.samples", "must be at least 10"));
                    }
                }
                if !(l.h0 > 0.0) {
                    return Err(bad("law.h0", "must be positive"));
                }
                l.background.model().validate().map_err(|e| bad("law.background", e.to_string()))?;
                if let Some(p) = &l.reference {
                    if !p.exists() {
                        return Err(bad("law.reference", format!("{} does not exist", p.display())));
                    }
                }
            }
            ExperimentKind::JacobianSuite => {
                let j = &self.jacobian;
                if j.dim < 2 {
                    return Err(bad("jacobian.dim", "must be at least 2"));
                }
                if j.heads == 0 {
                    return Err(bad("jacobian.heads", "must be positive"));
                }
                if !(j.eps > 0.0) {
                    return Err(bad("jacobian.eps", "must be positive"));
                }
                if !(0.0..=1.0).contains(&j.symmetric_weight) {
                    return Err(bad("jacobian.symmetric_weight", "must lie in [0, 1]"));
                }
            }
            ExperimentKind::Perturb => {
                if self.perturb.alphas.is_empty() {
                    return Err(bad("perturb.alphas", "must be nonempty"));
                }
                if self.perturb.alphas.iter().any(|a| !(*a >= 0.0)) {
                    return Err(bad("perturb.alphas", "values must be nonnegative"));
                }
                if self.perturb.width == 0 {
                    return Err(bad("perturb.width", "must be positive"));
                }
                if self.perturb.trials == 0 {
                    return Err(bad("perturb.trials", "must be positive"));
                }
            }
            ExperimentKind::DetectSuite => {
                let t = &self.detect;
                if t.folds < 2 {
                    return Err(bad("detect.folds", "must be at least 2"));
                }
                if t.width == 0 {
                    return Err(bad("detect.width", "must be positive"));
                }
                for (i, set) in t.ladder.iter().enumerate() {
                    if set.is_empty() {
                        return Err(bad(&format!("detect.ladder[{i}]"), "feature set is empty"));
                    }
                    if let Some(f) = set.iter().find(|f| !SIGNAL_NAMES.contains(&f.as_str())) {
                        return Err(bad(&format!("detect.ladder[{i}]"), format!("unknown signal `{f}`")));
                    }
                }
                if let Some(p) = &t.checkpoint {
                    if !p.exists() {
                        return Err(bad("detect.checkpoint", format!("{} does not exist", p.display())));
                    }
                }
            }
            ExperimentKind::Distill => {
                let t = &self.distill;
                if t.width == 0 || t.head_width == 0 {
                    return Err(bad("distill.width", "widths must be positive"));
                }
                if t.steps_per_epoch == 0 {
                    return Err(bad("distill.steps_per_epoch", "must be positive"));
                }
                if t.phase2_epochs > 0 && t.refresh_epochs == 0 {
                    return Err(bad("distill.refresh_epochs", "must be positive"));
                }
                if !(0.0..=1.0).contains(&t.geo_loss_weight) {
                    return Err(bad("distill.geo_loss_weight", "must lie in [0, 1]"));
                }
                if !(t.head_learning_rate > 0.0) {
                    return Err(bad("distill.head_learning_rate", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("experiment = \"width_sweep\"\nseed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.width_sweep.widths, vec![16, 32, 64, 128, 256]);
        assert_eq!(cfg.dataset, DatasetBlock::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::Distill);
        cfg.distill.co_train = false;
        cfg.law.reference = None;
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_offending_key() {
        let err = ExperimentConfig::from_toml("experiment = \"width_sweep\"\n[width_sweep]\nwidths = []\n").unwrap_err();
        assert_eq!(err.to_string(), "width_sweep.widths: must be nonempty");
        let err = ExperimentConfig::from_toml("experiment = \"detect_suite\"\n[detect]\nladder = [[\"margn\"]]\n").unwrap_err();
        assert!(err.to_string().starts_with("detect.ladder[0]"));
        assert!(matches!(ExperimentConfig::from_toml("experiment = \"nope\""), Err(ConfigError::Parse(_))));
        assert!(matches!(ExperimentConfig::from_toml("experiment = \"perturb\"\ntypo = 1\n"), Err(ConfigError::Parse(_))));
    }
}
