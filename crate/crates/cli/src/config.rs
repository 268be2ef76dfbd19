//! TOML run configuration shared by `fit`, `score`, `evaluate` and `report`.

use std::path::{Path, PathBuf};

use eventscore::baselines::{default_catalog, restrict_catalog};
use eventscore::cohort::FeatureCatalog;
use eventscore::model::Encoding;
use eventscore::pipeline::{EvalOptions, PipelineConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub records: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Feature catalog of the data files; the built-in catalog when absent.
    pub catalog: Option<PathBuf>,
    /// Rule tables for `evaluate`; MEWS and qSOFA when empty.
    pub tables: Vec<PathBuf>,
    /// Saved models for `evaluate`.
    pub models: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSelection {
    /// Feature ids the model may use; all catalog features when absent.
    pub subset: Option<Vec<String>>,
    /// Drop features that need manual assessment (GCS, AVPU).
    pub exclude_manual: bool,
}

fn default_name() -> String {
    "EventScore".into()
}

fn default_encoding() -> Encoding {
    Encoding::MultiHot
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_encoding")]
    pub encoding: Encoding,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub features: FeatureSelection,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub evaluation: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            name: default_name(),
            encoding: default_encoding(),
            paths: Paths::default(),
            features: FeatureSelection::default(),
            pipeline: PipelineConfig::default(),
            evaluation: EvalOptions::default(),
        }
    }
}

/// Command-line flags that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub features: Option<Vec<String>>,
    pub exclude_manual: bool,
    pub tables: Vec<PathBuf>,
    pub models: Vec<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, CliError> {
        toml::from_str(s).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
    }

    /// Parse a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.paths.out = Some(out.clone());
        }
        if let Some(f) = &o.features {
            self.features.subset = Some(f.clone());
        }
        self.features.exclude_manual |= o.exclude_manual;
        if !o.tables.is_empty() {
            self.paths.tables = o.tables.clone();
        }
        if !o.models.is_empty() {
            self.paths.models = o.models.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline.validate()?;
        if self.name.trim().is_empty() {
            return Err(CliError::Usage("model name must not be empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration, as recorded in model files.
    /// The output directory is left out so a fit does not depend on where it
    /// is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out = None;
        let canonical = serde_json::to_string(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn data_files(&self) -> Result<(&Path, &Path), CliError> {
        let need = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf, CliError> {
            let p = p.clone().ok_or_else(|| CliError::Usage(format!("config sets no `paths.{what}`")))?;
            if !p.exists() {
                return Err(CliError::Usage(format!("{what} file {} does not exist", p.display())));
            }
            Ok(p)
        };
        need(&self.paths.records, "records")?;
        need(&self.paths.labels, "labels")?;
        Ok((self.paths.records.as_deref().unwrap(), self.paths.labels.as_deref().unwrap()))
    }

    pub fn data_catalog(&self) -> Result<FeatureCatalog, CliError> {
        match &self.paths.catalog {
            Some(p) => Ok(FeatureCatalog::load(p)?),
            None => Ok(default_catalog()),
        }
    }

    /// The features a model fitted under this config may use.
    pub fn model_catalog(&self, data: &FeatureCatalog) -> Result<FeatureCatalog, CliError> {
        let chosen = match &self.features.subset {
            Some(ids) => data.subset(ids)?,
            None => data.clone(),
        };
        Ok(restrict_catalog(&chosen, self.features.exclude_manual)?)
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.records, &mut self.labels, &mut self.catalog, &mut self.out]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        self.tables.iter_mut().for_each(fix);
        self.models.iter_mut().for_each(fix);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let mut cfg = RunConfig::from_toml_str("seed = 3\n[features]\nsubset = [\"RR\"]\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.pipeline, PipelineConfig::default());
        let h = cfg.hash();
        cfg.apply(&Overrides {
            seed: Some(9),
            exclude_manual: true,
            ..Default::default()
        });
        assert_eq!(cfg.seed, 9);
        assert!(cfg.features.exclude_manual);
        assert_ne!(cfg.hash(), h);
        let h = cfg.hash();
        cfg.apply(&Overrides {
            out: Some("elsewhere".into()),
            ..Default::default()
        });
        assert_eq!(cfg.hash(), h);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let e = RunConfig::from_toml_str("sed = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[paths]\nrecords = \"data/r.csv\"\nout = \"/abs/out\"\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.paths.records.unwrap(), dir.path().join("data/r.csv"));
        assert_eq!(cfg.paths.out.unwrap(), PathBuf::from("/abs/out"));
    }
}
