//! JSON run configuration with dotted-path `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{Map, Value};
use uwbnav::observer::Gains;
use uwbnav::replay::{ColumnMap, DatasetPaths, SummaryOptions};
use uwbnav::sim::{EstimateInit, NoiseModel};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gains: Gains,
    /// Initial estimate. Simulation falls back to the scenario's own.
    pub estimate: Option<EstimateInit>,
    /// Body-frame UWB tag lever arm in meters.
    pub tag_offset: Option<[f64; 3]>,
    /// Triad confidence weights, summing to 3.
    pub weights: [f64; 3],
    pub reduced_fallback: bool,
    pub anchors: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub scenario: ScenarioConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub summary: SummaryOptions,
    pub velocity_window: usize,
    pub velocity_order: usize,
    /// Analysis parameter for `validate-gains`.
    pub delta: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            gains: Gains::paper(),
            estimate: None,
            tag_offset: None,
            weights: [1.0; 3],
            reduced_fallback: false,
            anchors: None,
            dataset: DatasetConfig::default(),
            scenario: ScenarioConfig::default(),
            seeds: vec![0],
            out: PathBuf::from("out"),
            summary: SummaryOptions::default(),
            velocity_window: 11,
            velocity_order: 2,
            delta: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory holding `imu.csv`, `uwb.csv` and `gt.csv`.
    pub dir: Option<PathBuf>,
    /// Several trial directories, replayed independently.
    pub trials: Vec<PathBuf>,
    pub imu: Option<PathBuf>,
    pub uwb: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub columns: ColumnMap,
}

impl DatasetConfig {
    /// One entry per trial with its name.
    pub fn resolve(&self) -> Result<Vec<(String, DatasetPaths)>, CliError> {
        if !self.trials.is_empty() {
            return Ok(self
                .trials
                .iter()
                .map(|d| (trial_name(d), DatasetPaths::in_dir(d)))
                .collect());
        }
        let base = self.dir.as_deref().map(DatasetPaths::in_dir);
        let pick = |explicit: &Option<PathBuf>, fallback: Option<&PathBuf>, name: &str| {
            explicit
                .clone()
                .or_else(|| fallback.cloned())
                .ok_or_else(|| CliError::Usage(format!("dataset.{name} is not set (or set dataset.dir)")))
        };
        let paths = DatasetPaths {
            imu: pick(&self.imu, base.as_ref().map(|b| &b.imu), "imu")?,
            uwb: pick(&self.uwb, base.as_ref().map(|b| &b.uwb), "uwb")?,
            gt: pick(&self.gt, base.as_ref().map(|b| &b.gt), "gt")?,
        };
        Ok(vec![(String::new(), paths)])
    }
}

fn trial_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Simulation selection and overrides applied on top of the preset.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Preset name or path to a scenario JSON file.
    pub name: Option<String>,
    pub duration: Option<f64>,
    pub imu_rate: Option<f64>,
    pub tdoa_rate: Option<f64>,
    pub noise: Option<NoiseModel>,
    pub b_omega: Option<[f64; 3]>,
    pub b_a: Option<[f64; 3]>,
    /// Also write the generated streams as a replayable dataset.
    pub export: bool,
}

/// Parses a `--set` value: JSON when it parses, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value`, creating intermediate objects.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed key {key:?}")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(CliError::Usage(format!("{key}: {part} is not an object")));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("{key}: parent is not an object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads the optional config file, applies overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !doc.is_object() {
        return Err(CliError::Usage("config must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let config: Config = serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    config.gains.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if config.seeds.is_empty() {
        return Err(CliError::Usage("seeds must not be empty".into()));
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dotted_overrides() {
        let mut doc = json!({"gains": {"k_v": 2.0}});
        apply_override(&mut doc, "gains.k_v=3.5").unwrap();
        apply_override(&mut doc, "scenario.name=figure8").unwrap();
        apply_override(&mut doc, "tag_offset=[0.1, 0, 0]").unwrap();
        assert_eq!(doc["gains"]["k_v"], json!(3.5));
        assert_eq!(doc["scenario"]["name"], json!("figure8"));
        assert_eq!(doc["tag_offset"], json!([0.1, 0, 0]));
        assert!(apply_override(&mut doc, "novalue").is_err());
        assert!(apply_override(&mut doc, "gains..k=1").is_err());
        assert!(apply_override(&mut doc, "gains.k_v.x=1").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = load(None, &["gainz.k_v=1".into()]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        let err = load(None, &["gains.k_v=-1".into()]).unwrap_err();
        assert!(err.to_string().contains("k_v"), "{err}");
    }

    #[test]
    fn partial_gains_keep_defaults() {
        let c = load(None, &["gains.k_a=50".into()]).unwrap();
        assert_eq!(c.gains.k_a, 50.0);
        assert_eq!(c.gains.k_v, Gains::paper().k_v);
    }

    #[test]
    fn defaults_are_paper() {
        let c = load(None, &[]).unwrap();
        assert_eq!(c.gains, Gains::paper());
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.delta, 0.01);
    }

    #[test]
    fn dataset_paths_resolve() {
        let mut d = DatasetConfig { dir: Some("trial".into()), ..DatasetConfig::default() };
        d.gt = Some("elsewhere/gt.csv".into());
        let resolved = d.resolve().unwrap();
        assert_eq!(resolved[0].1.imu, PathBuf::from("trial/imu.csv"));
        assert_eq!(resolved[0].1.gt, PathBuf::from("elsewhere/gt.csv"));
        assert!(DatasetConfig::default().resolve().is_err());
        let t = DatasetConfig { trials: vec!["a/const1".into(), "b/const2".into()], ..DatasetConfig::default() };
        let names: Vec<String> = t.resolve().unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["const1", "const2"]);
    }
}
