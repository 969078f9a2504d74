use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{read_features, write_binary_features, write_text_features, FeatureFormat};
use super::{Dataset, Sample, ScenarioError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub id: u16,
    pub name: String,
    /// Dimension of every tapped layer, earliest first.
    pub layer_dims: Vec<usize>,
    /// Feature files, relative to the manifest's directory.
    #[serde(default)]
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: u32,
    pub classes: Vec<u32>,
}

/// Domains and the task schedule. Tasks are shared by all domains: task `t`
/// introduces the same classes in every domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub name: String,
    pub domains: Vec<DomainEntry>,
    pub tasks: Vec<TaskEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.domains.is_empty() {
            return Err(ScenarioError::NoDomains);
        }
        if self.tasks.is_empty() {
            return Err(ScenarioError::NoTasks);
        }
        let mut ids = std::collections::BTreeSet::new();
        for d in &self.domains {
            if !ids.insert(d.id) {
                return Err(ScenarioError::InvalidSpec(format!(
                    "domain id {} declared twice",
                    d.id
                )));
            }
            if d.layer_dims.is_empty() || d.layer_dims.contains(&0) {
                return Err(ScenarioError::InvalidSpec(format!(
                    "domain {} needs at least one layer and positive layer dimensions",
                    d.id
                )));
            }
        }
        let mut owner: BTreeMap<u32, u32> = BTreeMap::new();
        let mut task_ids = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !task_ids.insert(t.id) {
                return Err(ScenarioError::InvalidSpec(format!(
                    "task id {} declared twice",
                    t.id
                )));
            }
            if t.classes.is_empty() {
                return Err(ScenarioError::InvalidSpec(format!(
                    "task {} has no classes",
                    t.id
                )));
            }
            for &c in &t.classes {
                if let Some(&first) = owner.get(&c) {
                    return Err(ScenarioError::ClassInTwoTasks {
                        class: c,
                        first,
                        second: t.id,
                    });
                }
                owner.insert(c, t.id);
            }
        }
        Ok(())
    }

    pub fn domain(&self, id: u16) -> Option<&DomainEntry> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn task(&self, id: u32) -> Option<&TaskEntry> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn task_of(&self, class: u32) -> Option<u32> {
        self.tasks
            .iter()
            .find(|t| t.classes.contains(&class))
            .map(|t| t.id)
    }

    pub fn class_count(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.len()).sum()
    }
}

/// Reads a manifest and every feature file it lists, checking each sample
/// against the declared domains, layer dimensions and task schedule.
pub fn load_manifest(path: &Path) -> Result<Dataset, ScenarioError> {
    if !path.is_file() {
        return Err(ScenarioError::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| ScenarioError::ManifestParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for domain in &manifest.domains {
        for (fi, rel) in domain.files.iter().enumerate() {
            let file = base.join(rel);
            if !file.is_file() {
                return Err(ScenarioError::MissingFile { path: file });
            }
            for s in read_features(&file, fi)? {
                check_sample(&manifest, domain, &file, &s)?;
                samples.push(s);
            }
        }
    }
    Ok(Dataset { manifest, samples })
}

fn check_sample(
    manifest: &DatasetManifest,
    domain: &DomainEntry,
    file: &Path,
    s: &Sample,
) -> Result<(), ScenarioError> {
    let location = || format!("{}:{}", file.display(), s.source.offset);
    if s.domain != domain.id {
        return Err(ScenarioError::WrongDomain {
            location: location(),
            expected: domain.id,
            found: s.domain,
        });
    }
    let dims = s.features.dims();
    if dims.len() != domain.layer_dims.len() {
        return Err(ScenarioError::Parse {
            location: location(),
            message: format!(
                "sample has {} layers, manifest declares {}",
                dims.len(),
                domain.layer_dims.len()
            ),
        });
    }
    for (layer, (&found, &expected)) in dims.iter().zip(&domain.layer_dims).enumerate() {
        if found != expected {
            return Err(ScenarioError::DimMismatch {
                location: location(),
                layer,
                expected,
                found,
            });
        }
    }
    if manifest.task_of(s.class) != Some(s.task) {
        return Err(ScenarioError::ClassNotInTask {
            location: location(),
            class: s.class,
            task: s.task,
        });
    }
    Ok(())
}

fn file_stem(entry: &DomainEntry) -> String {
    let clean: String = entry
        .name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if clean.is_empty() {
        format!("domain{}", entry.id)
    } else {
        format!("{}_{}", entry.id, clean)
    }
}

/// Writes `manifest.toml` plus one feature file per domain into `dir` and
/// returns the manifest path. The manifest's file lists are rewritten to
/// point at the new files.
pub fn save_dataset(
    dataset: &Dataset,
    dir: &Path,
    format: FeatureFormat,
) -> Result<PathBuf, ScenarioError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ScenarioError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut manifest = dataset.manifest.clone();
    for entry in &mut manifest.domains {
        let ext = match format {
            FeatureFormat::Text => "csv",
            FeatureFormat::Binary => "bin",
        };
        let name = PathBuf::from(format!("{}.{ext}", file_stem(entry)));
        let samples: Vec<&Sample> = dataset
            .samples
            .iter()
            .filter(|s| s.domain == entry.id)
            .collect();
        let path = dir.join(&name);
        match format {
            FeatureFormat::Text => write_text_features(&path, &samples)?,
            FeatureFormat::Binary => write_binary_features(&path, &samples)?,
        }
        entry.files = vec![name];
    }
    let text = toml::to_string(&manifest).map_err(|e| ScenarioError::InvalidSpec(e.to_string()))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}
