//! Files kept in the output directory between stages.
//!
//! ```text
//! models.txt                 competition order, one model id per line
//! selection.toml             k, threshold and label cap used by `select`
//! manifests/<i>__<j>.csv     ranked candidates of each pair
//! verdicts.csv               labeling outcomes
//! ranking.txt                ranking report
//! stability.csv              SRCC against the full ranking per k'
//! session.log                live-session vote log
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mad_core::selection::{parse_manifest, SelectionConfig};
use mad_core::{all_pairs, Confidence, ModelId, PairSubset, TaxonomyGraph};
use serde::{Deserialize, Serialize};

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models.txt")
    }

    pub fn selection(&self) -> PathBuf {
        self.root.join("selection.toml")
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn manifest(&self, i: &ModelId, j: &ModelId) -> PathBuf {
        self.manifests().join(format!("{i}__{j}.csv"))
    }

    pub fn verdicts(&self) -> PathBuf {
        self.root.join("verdicts.csv")
    }

    pub fn ranking(&self) -> PathBuf {
        self.root.join("ranking.txt")
    }

    pub fn stability(&self) -> PathBuf {
        self.root.join("stability.csv")
    }

    pub fn session_log(&self) -> PathBuf {
        self.root.join("session.log")
    }
}

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes through a sibling temp file so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

pub fn remove_if_present(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => {
            Err(e).with_context(|| format!("removing {}", path.display()))
        }
        _ => Ok(()),
    }
}

pub fn format_models(models: &[ModelId]) -> String {
    models.iter().map(|m| format!("{m}\n")).collect()
}

pub fn read_models(out: &OutDir) -> Result<Vec<ModelId>> {
    let path = out.models();
    let models: Vec<ModelId> = read(&path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(ModelId::from)
        .collect();
    if models.len() < 2 {
        bail!("{} lists {} models, need at least two", path.display(), models.len());
    }
    Ok(models)
}

/// Model ids end up in file names.
pub fn check_model_ids(models: &[ModelId]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for m in models {
        if m.0.contains(['/', '\\']) || m.0.contains("__") || m.0.starts_with('.') {
            bail!("model id `{m}` cannot be used in a file name");
        }
        if !seen.insert(m) {
            bail!("model `{m}` is given twice");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SelectionFile {
    pub k: usize,
    pub confidence_threshold: f64,
    pub max_per_label: usize,
}

impl SelectionFile {
    pub fn of(config: &SelectionConfig) -> Self {
        Self {
            k: config.k,
            confidence_threshold: config.threshold.as_f64(),
            max_per_label: config.max_per_label,
        }
    }

    pub fn config(&self) -> Result<SelectionConfig> {
        let config = SelectionConfig {
            k: self.k,
            threshold: Confidence::from_f64(self.confidence_threshold)?,
            max_per_label: self.max_per_label,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_text(self) -> String {
        toml::to_string(&self).expect("plain struct serializes")
    }

    pub fn load(out: &OutDir) -> Result<Self> {
        let path = out.selection();
        toml::from_str(&read(&path)?).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Rebuilds every pair's top-k selection from the manifests.
pub fn load_subsets(
    out: &OutDir,
    graph: &TaxonomyGraph,
    models: &[ModelId],
    selection: &SelectionConfig,
) -> Result<Vec<PairSubset>> {
    all_pairs(models.len())
        .into_iter()
        .map(|(i, j)| {
            let path = out.manifest(&models[i], &models[j]);
            let candidates = parse_manifest(&read(&path)?, &path, graph, &models[i], &models[j])?;
            Ok(PairSubset::select_top_k(
                (i, j),
                candidates,
                selection.k,
                selection.max_per_label,
            ))
        })
        .collect()
}
