//! Optional TOML config file. Every key mirrors a flag; flags win.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub taxonomy: Option<PathBuf>,
    pub predictions: Option<Vec<PathBuf>>,
    pub k: Option<usize>,
    pub confidence_threshold: Option<f64>,
    pub max_per_label: Option<usize>,
    pub tolerance: Option<f64>,
    pub smoothing: Option<f64>,
    pub oracle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub listen: Option<String>,
    pub images: Option<PathBuf>,
    pub ui: Option<PathBuf>,
    pub annotators: Option<PathBuf>,
    pub lease_ttl: Option<u64>,
}

impl FileConfig {
    /// Relative paths in the file are taken relative to the file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.taxonomy);
        rebase(&mut cfg.oracle);
        rebase(&mut cfg.out);
        rebase(&mut cfg.images);
        rebase(&mut cfg.ui);
        rebase(&mut cfg.annotators);
        if let Some(ps) = &mut cfg.predictions {
            for p in ps {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

pub fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .with_context(|| format!("missing --{name} (pass the flag or set `{name}` in the config file)"))
}
