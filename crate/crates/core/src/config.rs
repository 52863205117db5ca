//! TOML run configuration. Every field is optional; omitted fields keep the
//! defaults of [`ExperimentSpec`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::experiments::{ExperimentError, ExperimentSpec};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Where results go. Falls back to `DRONENET_OUTPUT_ROOT`, then `runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub spec: ExperimentSpec,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        let known = toml::Table::try_from(RunConfig::default()).map_err(|e| e.to_string())?;
        if let Some(key) = table
            .keys()
            .find(|k| *k != "output_dir" && !known.contains_key(*k))
        {
            return Err(format!("unknown field `{key}`"));
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| e.to_string())?;
        config.spec.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|message| ExperimentError::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{Budget, ExperimentKind, LengthMode, LocationMode};

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        let s = &c.spec;
        assert_eq!(s.grid.side_points, 5);
        assert_eq!(s.grid.battery_capacity, 1800.0);
        assert_eq!(s.grid.episode_length, 600);
        assert_eq!(s.agent.warmup_multiplier, 5);
        assert_eq!(s.schedule.start, 0.5);
        assert_eq!(s.schedule.floor, 0.2);
        assert_eq!(s.budget, Budget::UntilFloor);
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.output_dir = Some("out".into());
        c.spec.kind = ExperimentKind::Density;
        c.spec.budget = Budget::Episodes(7);
        c.spec.locations = LocationMode::Random;
        c.spec.lengths = LengthMode::Uniform(1, 5);
        c.spec.task_counts = vec![2, 8];
        let text = c.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_document() {
        let c = RunConfig::from_toml_str(
            "kind = \"geometry\"\nseeds = [9]\n[agent]\nbatch_size = 16\n[grid]\nepisode_length = 50\n",
        )
        .unwrap();
        assert_eq!(c.spec.kind, ExperimentKind::Geometry);
        assert_eq!(c.spec.seeds, vec![9]);
        assert_eq!(c.spec.agent.batch_size, 16);
        assert_eq!(c.spec.agent.sync_period, 200);
        assert_eq!(c.spec.grid.episode_length, 50);
        assert_eq!(c.spec.grid.side_points, 5);
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(RunConfig::from_toml_str("sedes = [1]").is_err());
        assert!(RunConfig::from_toml_str("[agent]\nbatchsize = 3").is_err());
        assert!(RunConfig::from_toml_str("seeds = []").is_err());
        assert!(RunConfig::from_toml_str("[schedule]\nfloor = 0.9").is_err());
        assert!(RunConfig::from_toml_str("task_count = 5").is_err());
    }
}
