//! Run configuration: one TOML document with every key documented below,
//! plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SplitSpec, SynthProfile};
use crate::entropy::DEFAULT_BINS;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatChoice {
    /// Decide by file extension.
    #[default]
    Auto,
    Container,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Series file; when absent the synthetic generator supplies the data.
    pub series: Option<PathBuf>,
    pub format: FormatChoice,
    /// Edge-list CSVs, one per prior graph.
    pub graphs: Vec<PathBuf>,
    pub directed: bool,
    pub forward_fill: bool,
    pub per_node_norm: bool,
    pub split: SplitSpec,
    pub target_feature: usize,
    /// Time axis for container input, which stores no timestamps. Both must
    /// be given to enable calendar features on such data.
    pub start_timestamp: Option<i64>,
    pub step_seconds: Option<i64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            series: None,
            format: FormatChoice::Auto,
            graphs: Vec::new(),
            directed: false,
            forward_fill: false,
            per_node_norm: false,
            split: SplitSpec::default(),
            target_feature: 0,
            start_timestamp: None,
            step_seconds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub nodes: usize,
    pub days: usize,
    pub step_minutes: usize,
    pub seed: u64,
    pub profile: SynthProfile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 30,
            days: 7,
            step_minutes: 5,
            seed: 7,
            profile: SynthProfile::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    pub windows: Vec<usize>,
    pub bins: usize,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig {
            windows: vec![12, 288, 672, 1344],
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub window_values: Vec<usize>,
    /// Ranks to try; 0 entries are replaced by the node count.
    pub rank_values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            window_values: vec![12, 96, 288, 576],
            rank_values: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub nodes: usize,
    pub graphs: usize,
    pub t_short: usize,
    pub t_long: usize,
    pub layers: usize,
    pub batch: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            nodes: 4,
            graphs: 2,
            t_short: 8,
            t_long: 32,
            layers: 2,
            batch: 2,
            eps: 1e-5,
            tolerance: 1e-4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub entropy: EntropyConfig,
    pub sweep: SweepConfig,
    pub gradcheck: GradcheckConfig,
    pub output: OutputConfig,
}

/// Parses `key=value`, reading the value as TOML and falling back to a bare
/// string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "malformed key"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        Self::from_table(toml::from_str(text).map_err(|e| toml_err(origin, &e))?, origin)
    }

    fn from_table(table: toml::Table, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| toml_err(origin, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (defaults when `None`) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let origin = path.unwrap_or(Path::new("<defaults>"));
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                // Typed parse of the file alone keeps byte offsets in errors.
                toml::from_str::<RunConfig>(&text).map_err(|e| toml_err(p, &e))?;
                toml::from_str(&text).map_err(|e| toml_err(p, &e))?
            }
            None => toml::Table::try_from(RunConfig::default()).expect("defaults serialize"),
        };
        for spec in overrides {
            let (path, value) = parse_override(spec)?;
            let full = path.join(".");
            let mut node = &mut table;
            for part in &path[..path.len() - 1] {
                let entry = node
                    .entry(part.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                node = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::config(&full, format!("`{part}` is not a table")))?;
            }
            node.insert(path[path.len() - 1].clone(), value);
            toml::Value::Table(table.clone())
                .try_into::<RunConfig>()
                .map_err(|e| Error::config(&full, e.message().to_string()))?;
        }
        Self::from_table(table, origin)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split.validate()?;
        self.model.temporal.validate()?;
        self.model.fusion.validate()?;
        self.train.validate()?;
        if self.model.embedding.lambda < 0.0 {
            return Err(Error::config("model.embedding.lambda", "must be non-negative"));
        }
        if self.model.embedding.rank == 0 {
            return Err(Error::config("model.embedding.rank", "must be positive"));
        }
        if self.entropy.bins < 2 {
            return Err(Error::config("entropy.bins", "need at least 2 bins"));
        }
        if !(1e-7..=1e-3).contains(&self.gradcheck.eps) {
            return Err(Error::config("gradcheck.eps", "must lie in [1e-7, 1e-3]"));
        }
        if self.data.start_timestamp.is_some() != self.data.step_seconds.is_some() {
            return Err(Error::config(
                "data.step_seconds",
                "data.start_timestamp and data.step_seconds must be given together",
            ));
        }
        if self.data.series.is_some() && self.data.graphs.len() != self.model.fusion.graphs {
            return Err(Error::config(
                "data.graphs",
                format!(
                    "{} graph files given but model.fusion.graphs is {}",
                    self.data.graphs.len(),
                    self.model.fusion.graphs
                ),
            ));
        }
        if self.data.series.is_none() && !(1..=2).contains(&self.model.fusion.graphs) {
            return Err(Error::config(
                "model.fusion.graphs",
                "synthetic data provides two graphs (distance, binary)",
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn toml_err(origin: &Path, e: &toml::de::Error) -> Error {
    let location = e.span().map_or_else(|| "config".to_string(), |s| format!("byte {}", s.start));
    Error::parse(origin, location, e.message().to_string())
}
