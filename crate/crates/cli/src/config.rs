//! Declarative run configuration with per-command sections.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use apsense_core::abm::AbmConfig;
use apsense_core::hud::SimulationConfig;
use apsense_core::imagery::{LiveClient, Split, SplitFractions};
use apsense_core::model::{CamLayer, Label, TrainMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for every random choice made by any command.
    pub seed: u64,
    /// Root directory holding every command's artifacts.
    pub workdir: PathBuf,
    pub cluster: ClusterSection,
    pub fetch: FetchSection,
    pub train: TrainSection,
    pub explain: ExplainSection,
    pub evaluate: EvaluateSection,
    pub simulate: SimulateSection,
    pub monitor: MonitorSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            workdir: PathBuf::from("run"),
            cluster: ClusterSection::default(),
            fetch: FetchSection::default(),
            train: TrainSection::default(),
            explain: ExplainSection::default(),
            evaluate: EvaluateSection::default(),
            simulate: SimulateSection::default(),
            monitor: MonitorSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    /// Collision CSV with latitude / longitude columns.
    pub input: PathBuf,
    /// Neighbourhood radius in degrees.
    pub epsilon: f64,
    pub min_points: usize,
    /// Neighbour rank for the k-distance curve; 0 skips it.
    pub k_distance: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            input: PathBuf::from("collisions.csv"),
            epsilon: 0.0003,
            min_points: 50,
            k_distance: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FetchSource {
    /// Fixture directory served by the mock client.
    #[default]
    Mock,
    /// The street-view web service.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FetchSection {
    pub source: FetchSource,
    /// Fixture directory for the mock source.
    pub fixtures: PathBuf,
    pub endpoint: String,
    /// Environment variable holding the API key for the live source.
    pub api_key_env: String,
    pub base_heading: f64,
    pub fov: Option<f64>,
    /// Use only the first N hotspots; all when unset.
    pub max_hotspots: Option<usize>,
    /// Non-hotspot locations to sample; defaults to the hotspot count.
    pub non_hotspot_count: Option<usize>,
    /// Requests per second; 0 disables throttling.
    pub rate_limit: f64,
    pub parallelism: usize,
    pub timeout_s: f64,
    pub split: SplitFractions,
}

impl Default for FetchSection {
    fn default() -> Self {
        Self {
            source: FetchSource::Mock,
            fixtures: PathBuf::from("fixtures"),
            endpoint: LiveClient::DEFAULT_ENDPOINT.to_string(),
            api_key_env: "STREETVIEW_API_KEY".to_string(),
            base_heading: 0.0,
            fov: None,
            max_hotspots: None,
            non_hotspot_count: None,
            rate_limit: 10.0,
            parallelism: 4,
            timeout_s: 30.0,
            split: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub widths: Vec<usize>,
    pub abm: AbmConfig,
    pub input_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub mode: TrainMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = apsense_core::train::TrainConfig::default();
        Self {
            widths: vec![8, 16, 32],
            abm: AbmConfig::default(),
            input_size: apsense_core::imagery::MODEL_INPUT_SIZE,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            mode: t.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    pub methods: Vec<String>,
    pub layer: CamLayer,
    pub target: Label,
    /// `0.5`-style fixed value or `otsu`.
    pub threshold: String,
    pub split: Split,
    /// Image classes to explain.
    pub labels: Vec<Label>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            methods: vec!["gradcam".into(), "gradcampp".into(), "scorecam".into()],
            layer: CamLayer::BackboneLastConv,
            target: Label::Hotspot,
            threshold: "0.5".into(),
            split: Split::Test,
            labels: vec![Label::Hotspot],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// `kind` or `kind@T` entries.
    pub strategies: Vec<String>,
    /// Directory of `<image stem>.png` gaze saliency maps.
    pub saliency_dir: Option<PathBuf>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        let mut strategies: Vec<String> = ["black_patch", "explain_only", "inverse_cam", "road_imputation"]
            .map(String::from)
            .to_vec();
        strategies.extend(["inverse_cam@25", "road_imputation@10", "road_imputation@25"].map(String::from));
        strategies.extend([20, 40, 60, 80].map(|t| format!("road_imputation@{t}")));
        Self {
            strategies,
            saliency_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    /// Scenario TOML file.
    pub scenario_file: Option<PathBuf>,
    /// Inline scenario, used when no file is given.
    pub scenario: Option<SimulationConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorSection {
    /// GPS trace CSV `timestamp,lat,lon`.
    pub trace: PathBuf,
    /// Hotspot CSV; defaults to the `cluster` output.
    pub hotspots: Option<PathBuf>,
    pub radius_m: f64,
    /// Extra distance beyond the radius required to leave detection mode.
    pub hysteresis_m: f64,
}

impl Default for MonitorSection {
    fn default() -> Self {
        Self {
            trace: PathBuf::from("trace.csv"),
            hotspots: None,
            radius_m: apsense_core::geo::DEFAULT_RADIUS_M,
            hysteresis_m: 0.0,
        }
    }
}

/// Parse the right-hand side of a `key=value` override as a TOML value,
/// falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set a dotted key inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a section"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Load `path` (defaults when `None`) and apply `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| apsense_core::Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}
