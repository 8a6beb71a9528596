use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use lppa_core::annotate::RetryPolicy;
use lppa_core::deid::DeidPolicy;
use lppa_core::NormalizationPolicy;

/// Contents of the `--config` JSON file. Every field is optional; flags
/// given on the command line win.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// `offline`, `replay:<file>` or an http(s) base URL.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: Option<u64>,
    pub seed: u64,
    pub concurrency: Option<usize>,
    pub retry: RetryPolicy,
    pub normalization: NormalizationPolicy,
    pub deid: DeidPolicy,
    pub rules: Option<RulesPaths>,
    pub pools: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub pricing: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesPaths {
    pub patterns: PathBuf,
    pub dictionaries: PathBuf,
}

impl AppConfig {
    /// Reads the file and checks that every referenced path exists. Relative
    /// paths are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: AppConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(r) = &mut cfg.rules {
            resolve(&mut r.patterns);
            resolve(&mut r.dictionaries);
        }
        for p in [&mut cfg.pools, &mut cfg.ontology, &mut cfg.pricing]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    fn check_paths(&self) -> Result<()> {
        let mut paths: Vec<&Path> = Vec::new();
        if let Some(r) = &self.rules {
            paths.push(&r.patterns);
            paths.push(&r.dictionaries);
        }
        paths.extend(
            [&self.pools, &self.ontology, &self.pricing]
                .into_iter()
                .flatten()
                .map(PathBuf::as_path),
        );
        for p in paths {
            if !p.exists() {
                bail!("config references missing path {}", p.display());
            }
        }
        Ok(())
    }
}
