//! Run configuration: a TOML file plus `--set key=value` overrides.
//!
//! ```toml
//! checkpoint = "runs/seed0/model.ckpt"   # input model (adapt, evaluate)
//! base_branch = "source"                 # branch new targets are copied from
//! domain = "target"                      # branch used by evaluate (or "auto")
//!
//! [train]                                # every key optional
//! batch_size = 32
//! eval_batch_size = 64
//! max_epochs = 30
//! patience = 5
//! lr = 1e-4                              # source training
//! adapt_lr = 5e-5
//! adapt_steps = 1000
//! checkpoint_window = 50
//! seed = 0                               # used when no --seed is given
//! sigma_floor = 0.1
//! ema_alpha = 0.1
//! bn_policy = "ema-from-source"          # or "reset-then-estimate"
//! mean_penalty = "squared"               # or "absolute"
//! crop = [32, 32]
//!
//! [model]
//! blocks = [8, 16]
//! hidden = 32
//!
//! [scale]
//! lower = 1.0
//! upper = 5.0
//! levels = 5
//!
//! [source]                               # train-source only
//! domain = "source"
//! manifest = "data/source.csv"           # or: synthetic = { seed = 3, ... }
//!
//! [[targets]]                            # adapt / adapt-continual, in order
//! name = "target"
//! manifest = "data/target.csv"
//! split = "train"                        # optional subset of the manifest
//! lambda_ent = 1.0
//! lambda_div = 1.0
//! lambda_gau = 0.2
//!
//! [[datasets]]                           # evaluate
//! name = "target-test"
//! manifest = "data/target.csv"
//! split = "test"
//!
//! [gof]                                  # gof; [cluster] takes the same keys plus k
//! histograms = "ratings.csv"             # or: synthetic = { count = 500, raters = 50 }
//! ranges = [1.0, 2.0, 3.0, 4.0, 5.0]
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sfiqa::data::SyntheticDomainSpec;
use sfiqa::engine::{BnStatsPolicy, TrainConfig};
use sfiqa::losses::{AdaptWeights, MeanPenalty};
use sfiqa::{Architecture, Error, RatingScale, Result, SplitTag};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub adapt_lr: f64,
    pub adapt_steps: usize,
    pub checkpoint_window: usize,
    pub seed: u64,
    pub sigma_floor: f64,
    pub ema_alpha: f64,
    pub bn_policy: BnStatsPolicy,
    pub mean_penalty: MeanPenalty,
    pub crop: Option<[usize; 2]>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            eval_batch_size: d.eval_batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            lr: d.source_lr,
            adapt_lr: d.adapt_lr,
            adapt_steps: d.adapt_steps,
            checkpoint_window: d.checkpoint_window,
            seed: d.seed,
            sigma_floor: d.sigma_floor,
            ema_alpha: d.ema_alpha,
            bn_policy: d.bn_policy,
            mean_penalty: d.mean_penalty,
            crop: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub blocks: Vec<usize>,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            blocks: a.blocks,
            hidden: a.hidden,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleSection {
    pub lower: f64,
    pub upper: f64,
    pub levels: usize,
}

impl Default for ScaleSection {
    fn default() -> Self {
        Self {
            lower: 1.0,
            upper: 5.0,
            levels: 5,
        }
    }
}

fn default_count() -> usize {
    2000
}

/// Where a dataset comes from: a manifest on disk or the synthetic generator.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticDomainSpec>,
    /// Number of synthetic images.
    #[serde(default = "default_count")]
    pub count: usize,
    /// Restrict to one split of the dataset.
    pub split: Option<SplitTag>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    #[serde(default = "default_source_domain")]
    pub domain: String,
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticDomainSpec>,
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_source_domain() -> String {
    "source".into()
}

impl SourceSection {
    pub fn data(&self) -> DataSource {
        DataSource {
            manifest: self.manifest.clone(),
            synthetic: self.synthetic.clone(),
            count: self.count,
            split: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    pub name: String,
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticDomainSpec>,
    #[serde(default = "default_count")]
    pub count: usize,
    pub split: Option<SplitTag>,
    #[serde(default = "default_lambda_ent")]
    pub lambda_ent: f64,
    #[serde(default = "default_lambda_div")]
    pub lambda_div: f64,
    #[serde(default = "default_lambda_gau")]
    pub lambda_gau: f64,
}

fn default_lambda_ent() -> f64 {
    AdaptWeights::default().lambda_ent
}

fn default_lambda_div() -> f64 {
    AdaptWeights::default().lambda_div
}

fn default_lambda_gau() -> f64 {
    AdaptWeights::default().lambda_gau
}

impl TargetSection {
    pub fn data(&self) -> DataSource {
        DataSource {
            manifest: self.manifest.clone(),
            synthetic: self.synthetic.clone(),
            count: self.count,
            split: self.split,
        }
    }

    pub fn weights(&self) -> AdaptWeights {
        AdaptWeights {
            lambda_ent: self.lambda_ent,
            lambda_div: self.lambda_div,
            lambda_gau: self.lambda_gau,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticDomainSpec>,
    #[serde(default = "default_count")]
    pub count: usize,
    pub split: Option<SplitTag>,
}

impl DatasetSection {
    pub fn data(&self) -> DataSource {
        DataSource {
            manifest: self.manifest.clone(),
            synthetic: self.synthetic.clone(),
            count: self.count,
            split: self.split,
        }
    }
}

/// Rater histograms drawn from discretised Gaussians.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSpec {
    pub count: usize,
    pub raters: u64,
    pub mean_range: [f64; 2],
    pub sd_range: [f64; 2],
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            count: 500,
            raters: 50,
            mean_range: [1.5, 4.5],
            sd_range: [0.4, 1.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// CSV of rater counts, one histogram per row, one column per level.
    pub histograms: Option<PathBuf>,
    pub synthetic: Option<HistogramSpec>,
    /// MOS range boundaries for the GoF table.
    #[serde(default = "default_ranges")]
    pub ranges: Vec<f64>,
    /// Number of clusters.
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_ranges() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0, 5.0]
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub checkpoint: Option<PathBuf>,
    pub base_branch: Option<String>,
    pub domain: Option<String>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub scale: ScaleSection,
    pub source: Option<SourceSection>,
    #[serde(default)]
    pub targets: Vec<TargetSection>,
    #[serde(default)]
    pub datasets: Vec<DatasetSection>,
    pub gof: Option<AnalysisSection>,
    pub cluster: Option<AnalysisSection>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn scale(&self) -> Result<RatingScale> {
        RatingScale::new(self.scale.lower, self.scale.upper, self.scale.levels)
            .map_err(|e| Error::Config(format!("[scale]: {e}")))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    /// Engine configuration for one seed.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            adapt_steps: t.adapt_steps,
            checkpoint_window: t.checkpoint_window,
            seed,
            source_lr: t.lr,
            adapt_lr: t.adapt_lr,
            scale: self.scale()?,
            sigma_floor: t.sigma_floor,
            mean_penalty: t.mean_penalty,
            ema_alpha: t.ema_alpha,
            bn_policy: t.bn_policy,
            weights: self
                .targets
                .iter()
                .map(|s| (s.name.as_str().into(), s.weights()))
                .collect(),
            crop: t.crop.map(|[h, w]| (h, w)),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value`; numeric segments index into arrays of tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    assign(table, &parts, parse_value(raw.trim()), key)
}

fn assign(table: &mut toml::Table, parts: &[&str], value: toml::Value, key: &str) -> Result<()> {
    let [head, rest @ ..] = parts else {
        unreachable!("keys have at least one segment")
    };
    if rest.is_empty() {
        table.insert(head.to_string(), value);
        return Ok(());
    }
    let not_section = || Error::Config(format!("`{head}` in `{key}` is not a section"));
    match table
        .entry(head.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
    {
        toml::Value::Table(t) => assign(t, rest, value, key),
        toml::Value::Array(items) => {
            let idx: usize = rest[0].parse().map_err(|_| {
                Error::Config(format!(
                    "`{head}` is a list; index it numerically in `{key}`"
                ))
            })?;
            match items.get_mut(idx) {
                Some(toml::Value::Table(t)) if rest.len() > 1 => assign(t, &rest[1..], value, key),
                Some(_) => Err(not_section()),
                None => Err(Error::Config(format!(
                    "index {idx} out of range in `{key}`"
                ))),
            }
        }
        _ => Err(not_section()),
    }
}

/// Adaptation must never see source data: any `source` section or key
/// beginning with `source_` is rejected.
pub fn reject_source_keys(table: &toml::Table) -> Result<()> {
    fn walk(value: &toml::Value, path: &str) -> Result<()> {
        match value {
            toml::Value::Table(t) => check(t, path),
            toml::Value::Array(items) => items
                .iter()
                .enumerate()
                .try_for_each(|(i, v)| walk(v, &format!("{path}.{i}"))),
            _ => Ok(()),
        }
    }
    fn check(table: &toml::Table, prefix: &str) -> Result<()> {
        for (k, v) in table {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            let lower = k.to_ascii_lowercase();
            if lower == "source" || lower.starts_with("source_") || lower.starts_with("source-") {
                return Err(Error::Config(format!(
                    "adaptation is source-free: configuration key `{path}` refers to source data"
                )));
            }
            walk(v, &path)?;
        }
        Ok(())
    }
    check(table, "")
}

/// Reads the config file, applies overrides and deserialises it.
pub fn load(path: &Path, overrides: &[String], source_free: bool) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if source_free {
        reject_source_keys(&table)?;
    }
    let mut cfg: Config = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(s: &str) -> toml::Table {
        s.parse().unwrap()
    }

    #[test]
    fn overrides_create_and_replace() {
        let mut t = table("[train]\nlr = 1e-4\n");
        apply_override(&mut t, "train.lr=1e-3").unwrap();
        apply_override(&mut t, "train.bn_policy=reset-then-estimate").unwrap();
        apply_override(&mut t, "model.blocks=[4, 8]").unwrap();
        let cfg: Config = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.bn_policy, BnStatsPolicy::ResetThenEstimate);
        assert_eq!(cfg.model.blocks, [4, 8]);
    }

    #[test]
    fn overrides_index_arrays_of_tables() {
        let mut t = table("[[targets]]\nname = \"a\"\n[[targets]]\nname = \"b\"\n");
        apply_override(&mut t, "targets.1.lambda_div=0").unwrap();
        let cfg: Config = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.targets[1].lambda_div, 0.0);
        assert_eq!(cfg.targets[0].lambda_div, 1.0);
    }

    #[test]
    fn malformed_overrides() {
        let mut t = toml::Table::new();
        assert!(matches!(
            apply_override(&mut t, "novalue"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            apply_override(&mut t, "a..b=1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn source_keys_are_rejected() {
        for bad in [
            "source_manifest = \"x.csv\"",
            "[source]\nmanifest = \"x.csv\"",
            "[[targets]]\nname = \"t\"\nsource_dir = \"x\"",
        ] {
            assert!(
                matches!(reject_source_keys(&table(bad)), Err(Error::Config(_))),
                "{bad}"
            );
        }
        assert!(reject_source_keys(&table(
            "base_branch = \"source\"\n[[targets]]\nname = \"t\""
        ))
        .is_ok());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let t = table("[train]\nlearning_rate = 1.0");
        assert!(toml::Value::Table(t).try_into::<Config>().is_err());
    }

    #[test]
    fn defaults_match_engine() {
        let cfg = Config::default().train_config(7).unwrap();
        let d = TrainConfig::default();
        assert_eq!(cfg.seed, 7);
        assert_eq!(
            (cfg.source_lr, cfg.adapt_lr, cfg.adapt_steps),
            (d.source_lr, d.adapt_lr, d.adapt_steps)
        );
    }
}
