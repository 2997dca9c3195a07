//! Output directories, manifests and replay.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::experiments;
use crate::plot::{emit_plot, sidecar_path, PlotKind, PlotTable};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const SEED_SCHEME: &str =
    "child = first 8 bytes (little-endian) of SHA-256(seed_le_bytes || label); labels: dataset, centers, signals, init/<width>, train/<width>, <experiment>/<task>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.to_string(), passed, detail: detail.into() }
    }
}

/// Collects artifacts written for one run together with their checksums.
pub struct Outputs {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs { dir: dir.to_path_buf(), artifacts: BTreeMap::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path(name), bytes).with_context(|| format!("writing {name}"))?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Runs `f` against an in-memory buffer and stores the result as `name`.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> basinlab::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn plot(&mut self, name: &str, table: &PlotTable, kind: PlotKind) -> Result<()> {
        let path = self.path(name);
        emit_plot(table, kind, &path)?;
        for p in [path.clone(), sidecar_path(&path)] {
            let bytes = fs::read(&p)?;
            let key = p.file_name().expect("file name").to_string_lossy().into_owned();
            self.artifacts.insert(key, sha256_hex(&bytes));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub versions: BTreeMap<String, String>,
    pub experiment: String,
    pub seed: u64,
    pub seed_scheme: String,
    /// Fully resolved configuration, TOML text.
    pub config: String,
    pub artifacts: BTreeMap<String, String>,
    pub checks: Vec<Check>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn resolved_config(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig::from_toml(&self.config)?)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn versions() -> BTreeMap<String, String> {
    let v = env!("CARGO_PKG_VERSION").to_string();
    ["basinlab-core", "basinlab-cli"].iter().map(|k| (k.to_string(), v.clone())).collect()
}

/// Runs one experiment and writes its manifest. Rows that fail inside a sweep
/// are recorded, not propagated.
pub fn run(cfg: &ExperimentConfig, jobs: usize) -> Result<Manifest> {
    cfg.validate()?;
    let mut out = Outputs::create(&cfg.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let checks = pool.install(|| experiments::dispatch(cfg, &mut out))?;
    let manifest = Manifest {
        tool: "basinlab".into(),
        versions: versions(),
        experiment: cfg.experiment.as_str().into(),
        seed: cfg.seed,
        seed_scheme: SEED_SCHEME.into(),
        config: cfg.to_toml(),
        artifacts: out.artifacts.clone(),
        checks,
    };
    fs::write(out.path(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Re-runs the experiment recorded in `manifest_path` into `out_dir` and
/// compares every CSV checksum against the recorded one.
pub fn replay(manifest_path: &Path, out_dir: &Path, jobs: usize) -> Result<(Manifest, Vec<String>)> {
    let original = Manifest::load(manifest_path)?;
    let mut cfg = original.resolved_config()?;
    cfg.output_dir = out_dir.to_path_buf();
    let fresh = run(&cfg, jobs)?;
    let mut mismatches = Vec::new();
    for (name, sum) in original.artifacts.iter().filter(|(n, _)| n.ends_with(".csv")) {
        match fresh.artifacts.get(name) {
            Some(s) if s == sum => {}
            Some(_) => mismatches.push(format!("{name}: checksum differs")),
            None => mismatches.push(format!("{name}: missing from replay")),
        }
    }
    Ok((fresh, mismatches))
}
