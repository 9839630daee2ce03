use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::chain::{ChainOptions, NetworkMagic};
use crate::filters::FilterConfig;
use crate::sampler::{SamplerConfig, BUFFER_COPIES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    pub blocks_dir: PathBuf,
    #[serde(default = "default_magic")]
    pub magic: String,
    #[serde(default = "default_height_limit")]
    pub height_limit: u64,
    #[serde(default)]
    pub require_full: bool,
}

fn default_magic() -> String {
    "mainnet".into()
}

fn default_height_limit() -> u64 {
    700_000
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    pub files: Vec<PathBuf>,
    pub coinbase_patterns: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    pub rates: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferSection {
    pub copies: usize,
    pub split_seed: u64,
}

impl Default for BufferSection {
    fn default() -> Self {
        BufferSection {
            copies: BUFFER_COPIES,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub export_formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            export_formats: vec!["csv".into(), "sql_text".into(), "binary".into()],
        }
    }
}

/// The single run configuration. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub chain: ChainSection,
    #[serde(default)]
    pub filters: FilterConfig,
    #[serde(default)]
    pub labels: LabelSection,
    pub features: FeatureSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub buffer: BufferSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::parse(&text, &base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.magic()?;
        self.filters
            .coinjoin_config()
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        self.sampler
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        if self.buffer.copies == 0 {
            return Err(PipelineError::ConfigInvalid("buffer.copies must be at least 1".into()));
        }
        for f in &self.output.export_formats {
            if !matches!(f.as_str(), "csv" | "sql_text" | "binary") {
                return Err(PipelineError::ConfigInvalid(format!("unknown export format {f:?}")));
            }
        }
        Ok(())
    }

    pub fn magic(&self) -> Result<NetworkMagic, PipelineError> {
        self.chain
            .magic
            .parse()
            .map_err(|e: String| PipelineError::ConfigInvalid(format!("chain.magic: {e}")))
    }

    pub fn chain_options(&self) -> Result<ChainOptions, PipelineError> {
        Ok(ChainOptions {
            magic: self.magic()?,
            height_limit: self.chain.height_limit,
            require_full: self.chain.require_full,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }
}
