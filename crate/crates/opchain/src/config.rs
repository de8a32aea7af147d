//! Run configuration: a TOML file with `[dataset]`, `[model]`, `[train]`,
//! `[filters]` and `[analysis]` sections. Precedence is flags > file >
//! defaults. The resolved form is echoed into every output.

use std::path::{Path, PathBuf};

use opchain_core::metrics::ChainUniverse;
use opchain_core::nn::{NoiseInput, TMFNetConfig, TrainConfig};
use opchain_core::ops::parse_operation_list;
use opchain_core::{Chain, PatchMode, PatchSpec};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

pub const RESOLUTIONS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub sources: String,
    pub resolution: usize,
    /// `center` or `grid`.
    pub patch_mode: String,
    pub stride: usize,
    /// Operations of the enumerated universe, e.g. `MF5,GB1.0`.
    pub ops: String,
    pub max_len: usize,
    /// Explicit class list; replaces `ops`/`max_len` when non-empty.
    pub chains: Vec<String>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            sources: String::new(),
            resolution: 64,
            patch_mode: "center".into(),
            stride: 64,
            ops: "MF5,GB1.0".into(),
            max_len: 2,
            chains: Vec::new(),
            ratios: [0.81, 0.09, 0.10],
            seed: 0,
        }
    }
}

impl DatasetSection {
    pub fn patch_spec(&self) -> Result<PatchSpec> {
        if !RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Config(format!("dataset.resolution must be one of {RESOLUTIONS:?}, got {}", self.resolution)));
        }
        let mode = match self.patch_mode.as_str() {
            "center" => PatchMode::CenterCrop,
            "grid" => PatchMode::Grid,
            other => return Err(Error::Config(format!("dataset.patch_mode must be `center` or `grid`, got `{other}`"))),
        };
        let spec = PatchSpec { size: self.resolution, stride: self.stride, mode };
        spec.validate()?;
        Ok(spec)
    }

    pub fn universe(&self) -> Result<ChainUniverse> {
        if self.chains.is_empty() {
            let ops = parse_operation_list(&self.ops)?;
            Ok(ChainUniverse::enumerate(&ops, self.max_len)?)
        } else {
            let chains = self.chains.iter().map(|c| Chain::parse(c)).collect::<opchain_core::Result<Vec<_>>>()?;
            Ok(ChainUniverse::from_chains(chains)?)
        }
    }

    pub fn check_ratios(&self) -> Result<()> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("dataset.ratios must be non-negative and sum to 1, got {:?}", self.ratios)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_size: usize,
    pub width_scale: f64,
    pub spatial_stream: bool,
    pub noise_stream: bool,
    pub rgb_filter: bool,
    /// `residual` or `filtered`.
    pub noise_input: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub dropout: f64,
    pub noise_backbone_depth: usize,
    pub part2_projection: bool,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = TMFNetConfig::default();
        Self {
            input_size: d.input_size,
            width_scale: d.width_scale,
            spatial_stream: d.spatial_stream_on,
            noise_stream: d.noise_stream_on,
            rgb_filter: d.rgb_filter_on,
            noise_input: "residual".into(),
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            dropout: d.dropout_p,
            noise_backbone_depth: d.noise_backbone_depth,
            part2_projection: d.part2_projection,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lr0: d.lr0,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            lr_step: d.lr_step,
            lr_gamma: d.lr_gamma,
            epochs: d.epochs,
            batch_size: d.batch_size,
            seed: d.seed,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_step: self.lr_step,
            lr_gamma: self.lr_gamma,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub sigma: f64,
    pub c: u32,
    pub ccl_seed: u64,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self { sigma: 1.0, c: 1, ccl_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub patch: usize,
    pub stride: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { patch: 256, stride: 128, bins: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub filters: FilterSection,
    pub analysis: AnalysisSection,
}

impl RunConfig {
    pub fn model_config(&self, num_classes: usize) -> Result<TMFNetConfig> {
        let m = &self.model;
        let noise_input = match m.noise_input.as_str() {
            "residual" => NoiseInput::Residual,
            "filtered" => NoiseInput::Filtered,
            other => return Err(Error::Config(format!("model.noise_input must be `residual` or `filtered`, got `{other}`"))),
        };
        let cfg = TMFNetConfig {
            input_size: m.input_size,
            num_classes,
            width_scale: m.width_scale,
            spatial_stream_on: m.spatial_stream,
            noise_stream_on: m.noise_stream,
            rgb_filter_on: m.rgb_filter,
            noise_input,
            lambda1: m.lambda1,
            lambda2: m.lambda2,
            dropout_p: m.dropout,
            noise_backbone_depth: m.noise_backbone_depth,
            part2_projection: m.part2_projection,
            filter_sigma: self.filters.sigma,
            filter_c: self.filters.c,
            seed: m.seed,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// The resolved config as `# `-prefixed lines for CSV headers.
    pub fn comment_header(&self) -> String {
        self.to_toml().lines().map(|l| format!("# {l}\n")).collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        resolve_text(text, &[])
    }

    pub fn sources_dir(&self) -> Option<PathBuf> {
        (!self.dataset.sources.is_empty()).then(|| PathBuf::from(&self.dataset.sources))
    }
}

/// One `section.key=value` assignment; `origin` names the flag it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
    pub origin: String,
}

impl Override {
    pub fn parse(text: &str) -> Result<Self> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form section.key=value")))?;
        Ok(Self { key: k.trim().into(), value: v.trim().into(), origin: format!("--set {text}") })
    }

    pub fn flag(key: &str, value: impl ToString, flag: &str) -> Self {
        Self { key: key.into(), value: value.to_string(), origin: flag.into() }
    }
}

fn literal(text: &str) -> Value {
    // Values that are not valid TOML literals are taken as bare strings.
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

fn known_keys() -> Table {
    toml::Value::try_from(RunConfig::default())
        .ok()
        .and_then(|v| v.as_table().cloned())
        .unwrap_or_default()
}

fn unknown_keys(table: &Table) -> Vec<String> {
    let known = known_keys();
    let mut bad = Vec::new();
    for (section, value) in table {
        match (known.get(section).and_then(|v| v.as_table()), value.as_table()) {
            (Some(k), Some(t)) => bad.extend(t.keys().filter(|key| !k.contains_key(*key)).map(|key| format!("{section}.{key}"))),
            (Some(_), None) => bad.push(format!("{section} (expected a section)")),
            (None, _) => bad.push(section.clone()),
        }
    }
    bad
}

pub fn resolve_text(text: &str, overrides: &[Override]) -> Result<RunConfig> {
    let mut table: Table = text.parse().map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    let mut seen: Vec<&Override> = Vec::new();
    let mut conflicts = Vec::new();
    for o in overrides {
        if let Some(prev) = seen.iter().find(|p| p.key == o.key) {
            if literal(&prev.value) != literal(&o.value) {
                conflicts.push(format!("{} ({} vs {})", o.key, prev.origin, o.origin));
            }
            continue;
        }
        seen.push(o);
    }
    if !conflicts.is_empty() {
        return Err(Error::Config(format!("conflicting settings: {}", conflicts.join(", "))));
    }
    for o in &seen {
        let (section, key) = o
            .key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key `{}` must be section.key", o.key)))?;
        let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
        let t = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{section}` is not a section")))?;
        t.insert(key.into(), literal(&o.value));
    }
    let bad = unknown_keys(&table);
    if !bad.is_empty() {
        return Err(Error::Config(format!("unknown config keys: {}", bad.join(", "))));
    }
    table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))
}

/// Reads `file` (when given), applies overrides, and validates keys.
pub fn resolve_config(file: Option<&Path>, overrides: &[Override]) -> Result<RunConfig> {
    let text = match file {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    resolve_text(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.model.lambda1 = 0.25;
        c.dataset.chains = vec!["AU".into(), "MF5".into()];
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn literal_values() {
        assert_eq!(literal("0"), Value::Integer(0));
        assert_eq!(literal("0.5"), Value::Float(0.5));
        assert_eq!(literal("true"), Value::Boolean(true));
        assert_eq!(literal("grid"), Value::String("grid".into()));
        assert_eq!(literal("MF5,GB1.0"), Value::String("MF5,GB1.0".into()));
    }
}
