//! Stage orchestration with resumable, content-addressed manifests.
//!
//! Every stage writes into `out/<stage>/` and records a manifest in
//! `out/manifests/<stage>.json` holding the digests of what it read and
//! wrote. A stage whose config section, inputs and outputs still match its
//! manifest is skipped.

pub mod config;
pub mod manifest;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::ChainError;
use crate::features::FeatureError;
use crate::labels::LabelError;
use crate::nodes::NodeError;
use crate::resolve::ResolveError;
use crate::sampler::SamplerError;
use crate::store::StoreError;

pub use config::Config;
pub use manifest::{digest_file, digest_tree, StageManifest, Status, Throughput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parse,
    Filter,
    Cluster,
    Edges,
    Attributes,
    Label,
    Features,
    Sample,
    Export,
}

impl Stage {
    /// Dependency order.
    pub const ALL: [Stage; 9] = [
        Stage::Parse,
        Stage::Filter,
        Stage::Cluster,
        Stage::Edges,
        Stage::Attributes,
        Stage::Label,
        Stage::Features,
        Stage::Sample,
        Stage::Export,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Parse => "parse",
            Stage::Filter => "filter",
            Stage::Cluster => "cluster",
            Stage::Edges => "edges",
            Stage::Attributes => "attributes",
            Stage::Label => "label",
            Stage::Features => "features",
            Stage::Sample => "sample",
            Stage::Export => "export",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Parse => &[],
            Stage::Filter => &[Stage::Parse],
            Stage::Cluster => &[Stage::Filter],
            Stage::Edges => &[Stage::Filter, Stage::Cluster],
            Stage::Attributes => &[Stage::Filter, Stage::Cluster, Stage::Edges],
            Stage::Label => &[Stage::Parse, Stage::Cluster, Stage::Attributes],
            Stage::Features => &[Stage::Parse, Stage::Label],
            Stage::Sample => &[Stage::Edges, Stage::Label, Stage::Features],
            Stage::Export => &[Stage::Edges, Stage::Label],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("stage {stage} needs {upstream} to complete first")]
    UpstreamIncomplete { stage: Stage, upstream: Stage },
    #[error("chain: {0}")]
    Chain(#[from] ChainError),
    #[error("resolve: {0}")]
    Resolve(#[from] ResolveError),
    #[error("labels: {0}")]
    Label(#[from] LabelError),
    #[error("features: {0}")]
    Feature(#[from] FeatureError),
    #[error("sampler: {0}")]
    Sampler(#[from] SamplerError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("inconsistent intermediate data: {0}")]
    Inconsistent(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<NodeError> for PipelineError {
    fn from(e: NodeError) -> Self {
        PipelineError::Inconsistent(e.to_string())
    }
}

impl PipelineError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Inconsistent(_) => 1,
            PipelineError::ConfigInvalid(_) => 2,
            PipelineError::UpstreamIncomplete { .. } => 3,
            PipelineError::Chain(_) => 4,
            PipelineError::Resolve(_) => 5,
            PipelineError::Label(_) => 6,
            PipelineError::Feature(_) => 7,
            PipelineError::Sampler(_) => 8,
            PipelineError::Store(_) => 9,
            PipelineError::Io(_) => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRun {
    pub manifest: StageManifest,
    pub skipped: bool,
}

/// Items processed by a stage body, for the throughput record.
pub(crate) struct Work {
    pub items: u64,
    pub unit: &'static str,
}

/// The config sections a stage depends on directly. Upstream changes reach
/// a stage through its input digests.
fn stage_config_hash(stage: Stage, cfg: &Config) -> String {
    use manifest::hash_json;
    let v = match stage {
        Stage::Parse => serde_json::json!({
            "magic": cfg.chain.magic,
            "height_limit": cfg.chain.height_limit,
            "require_full": cfg.chain.require_full,
        }),
        Stage::Filter => serde_json::to_value(cfg.filters).unwrap(),
        Stage::Cluster | Stage::Edges | Stage::Attributes => serde_json::Value::Null,
        Stage::Label => serde_json::json!({
            "files": cfg.labels.files.len(),
            "patterns": cfg.labels.coinbase_patterns.is_some(),
        }),
        Stage::Features => serde_json::Value::Null,
        Stage::Sample => serde_json::json!({ "sampler": cfg.sampler, "buffer": cfg.buffer }),
        Stage::Export => serde_json::to_value(&cfg.output.export_formats).unwrap(),
    };
    hash_json(&serde_json::json!({ "stage": stage.as_str(), "config": v }))
}

/// Digests of external files a stage reads.
fn external_inputs(stage: Stage, cfg: &Config) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut out = BTreeMap::new();
    match stage {
        Stage::Parse => {
            let dir = cfg.resolve(&cfg.chain.blocks_dir);
            let files = crate::chain::list_block_files(&dir)
                .map_err(|e| PipelineError::ConfigInvalid(format!("chain.blocks_dir {}: {e}", dir.display())))?;
            for f in files {
                let name = f.file_name().unwrap().to_string_lossy().into_owned();
                out.insert(format!("blocks/{name}"), digest_file(&f)?);
            }
        }
        Stage::Label => {
            for (i, f) in cfg.labels.files.iter().enumerate() {
                out.insert(format!("labels/{i}"), digest_external(cfg, f)?);
            }
            if let Some(p) = &cfg.labels.coinbase_patterns {
                out.insert("labels/coinbase_patterns".into(), digest_external(cfg, p)?);
            }
        }
        Stage::Features => {
            out.insert("features/rates".into(), digest_external(cfg, &cfg.features.rates)?);
        }
        _ => {}
    }
    Ok(out)
}

fn digest_external(cfg: &Config, p: &Path) -> Result<String, PipelineError> {
    let path = cfg.resolve(p);
    digest_file(&path).map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))
}

fn stage_outputs(out: &Path, stage: Stage) -> std::io::Result<BTreeMap<String, String>> {
    let dir = out.join(stage.as_str());
    Ok(digest_tree(&dir)?
        .into_iter()
        .map(|(k, v)| (format!("{}/{k}", stage.as_str()), v))
        .collect())
}

fn upstream_inputs(out: &Path, stage: Stage) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut inputs = BTreeMap::new();
    for &up in stage.upstream() {
        match StageManifest::read(out, up) {
            Some(m) if m.is_complete() => inputs.extend(m.outputs),
            _ => return Err(PipelineError::UpstreamIncomplete { stage, upstream: up }),
        }
    }
    Ok(inputs)
}

/// Run one stage, or skip it when its manifest still matches.
pub fn run(stage: Stage, cfg: &Config, force: bool) -> Result<StageRun, PipelineError> {
    let out = cfg.out_dir();
    let mut inputs = upstream_inputs(&out, stage)?;
    inputs.extend(external_inputs(stage, cfg)?);
    let config_hash = stage_config_hash(stage, cfg);

    if !force {
        if let Some(prev) = StageManifest::read(&out, stage) {
            let current = stage_outputs(&out, stage).ok();
            if prev.is_complete()
                && prev.config_hash == config_hash
                && prev.inputs == inputs
                && current.as_ref() == Some(&prev.outputs)
            {
                return Ok(StageRun {
                    manifest: prev,
                    skipped: true,
                });
            }
        }
    }

    let dir = out.join(stage.as_str());
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut manifest = StageManifest {
        stage,
        status: Status::Failed,
        config_hash,
        inputs,
        outputs: BTreeMap::new(),
        error: None,
        throughput: None,
        peak_rss_bytes: None,
    };
    let started = Instant::now();
    let result = stages::execute(stage, cfg, &out, &dir);
    manifest.peak_rss_bytes = manifest::peak_rss_bytes();
    match result {
        Ok(work) => {
            let seconds = started.elapsed().as_secs_f64();
            manifest.status = Status::Complete;
            manifest.outputs = stage_outputs(&out, stage)?;
            manifest.throughput = Some(Throughput {
                items: work.items,
                unit: work.unit.into(),
                seconds,
                per_second: if seconds > 0.0 {
                    work.items as f64 / seconds
                } else {
                    0.0
                },
            });
            manifest.write(&out)?;
            Ok(StageRun {
                manifest,
                skipped: false,
            })
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            manifest.write(&out)?;
            Err(e)
        }
    }
}

/// Run every stage in dependency order, halting at the first failure.
pub fn run_all(cfg: &Config, force: bool) -> Result<Vec<StageRun>, PipelineError> {
    cfg.validate()?;
    Stage::ALL.into_iter().map(|s| run(s, cfg, force)).collect()
}
