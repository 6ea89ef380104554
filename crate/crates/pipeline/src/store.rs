//! On-disk layout, stage keys and the run record.
//!
//! ```text
//! <root>/manifest.json         run record, rewritten after every stage
//! <root>/checkpoints/<stage>-<key>/
//! <root>/samples/<key>/       sample dump and CSV index
//! <root>/reports/
//! <root>/plots/
//! ```
//!
//! Every stage output is keyed by a hash of exactly the config fields (and
//! upstream keys) it depends on, so runs that differ only downstream share
//! upstream artifacts.

use crate::config::RunConfig;
use crate::PipelineError;
use riskydiff_core::models::ClassifierArch;
use riskydiff_core::seed;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::cell::RefCell;
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

const COMPLETE: &str = ".complete";

fn key_of(stage: &str, parts: Value) -> String {
    let h = seed::hash_hex(json!({ "stage": stage, "parts": parts }).to_string().as_bytes());
    h[..16].to_string()
}

/// Cache keys for every stage of one config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageKeys {
    pub data: String,
    pub embedder: String,
    pub denoiser: String,
    pub classifiers: BTreeMap<String, String>,
    pub error_predictor: String,
    pub generation: String,
    pub evaluation: String,
    pub retrain: String,
}

impl StageKeys {
    pub fn new(cfg: &RunConfig) -> Self {
        let data = key_of("data", json!({ "dataset": cfg.dataset, "seed": cfg.seed }));
        let embedder = key_of("embedder", json!({ "data": data, "cfg": cfg.embedder }));
        let denoiser = key_of(
            "denoiser",
            json!({ "embedder": embedder, "schedule": cfg.schedule, "cfg": cfg.denoiser }),
        );
        let classifiers: BTreeMap<String, String> = ClassifierArch::ALL
            .iter()
            .map(|a| {
                let k = key_of(
                    "classifier",
                    json!({ "data": data, "arch": a, "cfg": cfg.classifier }),
                );
                (a.tag().to_string(), k)
            })
            .collect();
        let target = &classifiers[cfg.generation.target.tag()];
        let error_predictor = key_of(
            "error_predictor",
            json!({
                "target": target,
                "embedder": embedder,
                "cfg": cfg.error_predictor,
                "val_fraction": cfg.generation.val_fraction,
            }),
        );
        let generation = key_of(
            "generation",
            json!({
                "denoiser": denoiser,
                "error_predictor": error_predictor,
                "guidance": cfg.guidance,
                "per_category": cfg.generation.per_category,
            }),
        );
        let evaluation = key_of(
            "evaluation",
            json!({ "generation": generation, "classifiers": classifiers, "cfg": cfg.evaluation }),
        );
        let retrain = key_of(
            "retrain",
            json!({
                "generation": generation,
                "cfg": cfg.retrain,
                "arch": cfg.retrain_arch(),
                "classifier": cfg.retrain_classifier(),
            }),
        );
        Self {
            data,
            embedder,
            denoiser,
            classifiers,
            error_predictor,
            generation,
            evaluation,
            retrain,
        }
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// A run directory plus the cache policy.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    /// Reuse complete stage outputs found on disk from earlier invocations.
    resume: bool,
    /// Outputs written by this process; always reusable.
    fresh: RefCell<HashSet<PathBuf>>,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>, resume: bool) -> Result<Self, PipelineError> {
        let root = root.into();
        for sub in ["checkpoints", "samples", "reports", "plots"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self {
            root,
            resume,
            fresh: RefCell::new(HashSet::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}-{key}"))
    }

    pub fn samples_dir(&self, key: &str) -> PathBuf {
        self.root.join("samples").join(key)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn plot_path(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }

    /// Whether the output whose last-written file is `sentinel` may be
    /// reused.
    pub fn is_cached(&self, sentinel: &Path) -> bool {
        sentinel.exists() && (self.resume || self.fresh.borrow().contains(sentinel))
    }

    pub fn is_cached_dir(&self, dir: &Path) -> bool {
        self.is_cached(&dir.join(COMPLETE))
    }

    /// Starts a directory stage: clears stale output and recreates it.
    pub fn begin(&self, dir: &Path) -> Result<(), PipelineError> {
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
        std::fs::create_dir_all(dir)?;
        Ok(())
    }

    /// Marks the directory stage at `dir` as complete.
    pub fn finish_dir(&self, dir: &Path) -> Result<(), PipelineError> {
        let marker = dir.join(COMPLETE);
        write_atomic(&marker, b"")?;
        self.register(&marker);
        Ok(())
    }

    /// Records that this process wrote `path`.
    pub fn register(&self, path: &Path) {
        self.fresh.borrow_mut().insert(path.to_path_buf());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub done: bool,
    pub key: String,
    /// Output paths relative to the run directory.
    pub paths: Vec<PathBuf>,
}

/// `manifest.json`: what ran, where its outputs are and the headline
/// metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub config: Value,
    pub stages: BTreeMap<String, StageStatus>,
    pub metrics: BTreeMap<String, f64>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn new(cfg: &RunConfig) -> Self {
        let hash = cfg.hash();
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            run_id: format!("{}-{secs}", &hash[..16]),
            config_hash: hash,
            config: cfg.snapshot(),
            stages: BTreeMap::new(),
            metrics: BTreeMap::new(),
            error: None,
        }
    }

    pub fn mark(&mut self, stage: &str, key: &str, root: &Path, paths: &[PathBuf]) {
        let rel = paths
            .iter()
            .map(|p| p.strip_prefix(root).unwrap_or(p).to_path_buf())
            .collect();
        self.stages.insert(
            stage.to_string(),
            StageStatus {
                done: true,
                key: key.to_string(),
                paths: rel,
            },
        );
    }

    pub fn save(&self, root: &Path) -> Result<(), PipelineError> {
        write_json(&root.join("manifest.json"), self)
    }

    /// Every path of every completed stage exists.
    pub fn paths_exist(&self, root: &Path) -> bool {
        self.stages
            .values()
            .filter(|s| s.done)
            .flat_map(|s| &s.paths)
            .all(|p| root.join(p).exists())
    }
}
