//! TOML configuration. Relative paths resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use dqm_core::catalog::ClassSet;
use dqm_core::dataset::SplitConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub catalog: CatalogSection,
    #[serde(default)]
    pub roots: Vec<RootEntry>,
    #[serde(default)]
    pub gatekeeper: GatekeeperSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub service: ServiceSection,
    /// Class set per plot type; unlisted plot types get Good/Bad/NoData.
    #[serde(default)]
    pub plot_types: BTreeMap<String, PlotTypeSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogSection {
    pub db_path: PathBuf,
}

impl Default for CatalogSection {
    fn default() -> Self {
        Self {
            db_path: "hydra.db".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootEntry {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatekeeperSection {
    pub poll_interval_s: u64,
    pub sample_rate: f64,
    pub log_path: PathBuf,
    pub seed: u64,
}

impl Default for GatekeeperSection {
    fn default() -> Self {
        Self {
            poll_interval_s: 60,
            sample_rate: 0.05,
            log_path: "gatekeeper.log".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_fraction: f64,
    pub undersample_ratio: f64,
    pub seed: u64,
    pub class_weight: BTreeMap<String, u32>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let split = SplitConfig::default();
        Self {
            train_fraction: split.train_fraction,
            undersample_ratio: split.undersample_ratio,
            seed: split.seed,
            class_weight: BTreeMap::new(),
        }
    }
}

impl DatasetSection {
    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            train_fraction: self.train_fraction,
            seed: self.seed,
            undersample_ratio: self.undersample_ratio,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceSection {
    pub bind_addr: String,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            bind_addr: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotTypeSection {
    pub classes: Vec<String>,
    pub alarm_classes: Vec<String>,
}

impl Config {
    /// Reads `path`; a missing file at the default location yields defaults.
    pub fn load(path: &Path, required: bool) -> Result<Self, ConfigError> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && !required => String::new(),
            Err(e) => return Err(ConfigError(format!("{}: {e}", path.display()))),
        };
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| ConfigError(e.to_string()))?;
        cfg.catalog.db_path = base.join(&cfg.catalog.db_path);
        cfg.gatekeeper.log_path = base.join(&cfg.gatekeeper.log_path);
        for r in &mut cfg.roots {
            r.path = base.join(&r.path);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        if self.gatekeeper.poll_interval_s == 0 {
            return bad("gatekeeper.poll_interval_s must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.gatekeeper.sample_rate) {
            return bad(format!("gatekeeper.sample_rate {} outside [0, 1]", self.gatekeeper.sample_rate));
        }
        self.dataset
            .split()
            .validate()
            .map_err(|e| ConfigError(format!("dataset: {e}")))?;
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.roots {
            if !ids.insert(&r.id) {
                return bad(format!("root `{}` listed twice", r.id));
            }
        }
        self.class_sets()?;
        Ok(())
    }

    pub fn class_sets(&self) -> Result<Vec<ClassSet>, ConfigError> {
        self.plot_types
            .iter()
            .map(|(name, s)| {
                ClassSet::new(name, s.classes.clone(), s.alarm_classes.clone())
                    .map_err(|e| ConfigError(format!("plot_types.{name}: {e}")))
            })
            .collect()
    }

    pub fn root_ids(&self) -> Vec<String> {
        self.roots.iter().map(|r| r.id.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_when_empty() {
        let cfg: Config = toml::from_str("").unwrap();
        assert_eq!(cfg.gatekeeper.poll_interval_s, 60);
        assert_eq!(cfg.gatekeeper.sample_rate, 0.05);
        assert_eq!(cfg.dataset.train_fraction, 0.95);
        assert_eq!(cfg.dataset.undersample_ratio, 1.0);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn full_file_parses() {
        let cfg: Config = toml::from_str(
            r#"
            [catalog]
            db_path = "cat.db"

            [[roots]]
            id = "syn"
            path = "data"

            [gatekeeper]
            poll_interval_s = 2
            sample_rate = 0.1
            log_path = "gk.log"

            [dataset]
            train_fraction = 0.9
            undersample_ratio = 1.5
            [dataset.class_weight]
            Bad = 3

            [service]
            bind_addr = "0.0.0.0:9000"

            [plot_types.occupancy]
            classes = ["Good", "Bad", "NoData"]
            alarm_classes = ["Bad", "NoData"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.roots[0].id, "syn");
        assert_eq!(cfg.dataset.class_weight["Bad"], 3);
        assert_eq!(cfg.class_sets().unwrap()[0].alarm_classes.len(), 2);
    }

    #[test]
    fn typos_and_bad_values_are_rejected() {
        assert!(toml::from_str::<Config>("[gatekeeper]\npoll_interval = 5").is_err());
        let cfg: Config = toml::from_str("[dataset]\ntrain_fraction = 1.5").unwrap();
        assert!(cfg.validate().is_err());
        let cfg: Config =
            toml::from_str("[plot_types.x]\nclasses = [\"A\"]\nalarm_classes = [\"B\"]").unwrap();
        assert!(cfg.validate().is_err());
    }
}
