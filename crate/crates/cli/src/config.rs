use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use modflow::graph::LabelMode;
use modflow::metrics::Property;
use modflow::model::TrainConfig;
use modflow::ode::SolverConfig;

/// Error in the configuration file or in a flag value.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Every recognized key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("out", "out"),
    ("data", ""),
    ("format", "smiles"),
    ("heldout", ""),
    ("input", ""),
    ("atoms", "C,N,O,F"),
    ("mode", "atom"),
    ("vocab", ""),
    ("vocab_size", "30"),
    ("dim", "2"),
    ("rtol", "1e-5"),
    ("atol", "1e-5"),
    ("eps", "0.05"),
    ("lr", "1e-3"),
    ("batch_size", "64"),
    ("epochs", "50"),
    ("shuffle", "true"),
    ("seed", "0"),
    ("threads", "0"),
    ("checkpoint", ""),
    ("resume", ""),
    ("count", "1000"),
    ("bins", "20"),
    ("property", "mw"),
    ("lambda", "0.1"),
    ("ascent_steps", "10"),
    ("molecule", ""),
    ("pattern", "chessboard"),
    ("grid", "4"),
    ("block", "1"),
    ("stripe_w", "2"),
    ("toy_steps", "300"),
    ("toy_lr", "1e-3"),
    ("toy_samples", "8"),
];

/// Parses flat `key = value` text with `#` comments.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(format!("config line {}: expected key=value, got {raw:?}", idx + 1));
        };
        let k = k.trim();
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return err(format!("config line {}: unknown key {k:?}", idx + 1));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub raw: BTreeMap<String, String>,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub format: modflow::chem::CorpusFormat,
    pub heldout: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub atoms: Vec<String>,
    pub mode: LabelMode,
    pub vocab: Option<PathBuf>,
    pub vocab_size: usize,
    pub dim: usize,
    pub solver: SolverConfig,
    pub eps: f64,
    pub train: TrainConfig,
    pub seed: u64,
    pub threads: usize,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub count: usize,
    pub bins: usize,
    pub property: Property,
    pub lambda: f64,
    pub ascent_steps: usize,
    pub molecule: Option<String>,
    pub pattern: String,
    pub grid: usize,
    pub block: usize,
    pub stripe_w: usize,
    pub toy_steps: usize,
    pub toy_lr: f64,
    pub toy_samples: usize,
}

fn value<T: FromStr>(raw: &BTreeMap<String, String>, key: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    let v = &raw[key];
    v.parse()
        .or_else(|e| err(format!("invalid value {v:?} for {key}: {e}")))
}

fn path(raw: &BTreeMap<String, String>, key: &str) -> Option<PathBuf> {
    Some(&raw[key]).filter(|v| !v.is_empty()).map(PathBuf::from)
}

impl RunConfig {
    /// Defaults, then the file at `file` if any, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut raw: BTreeMap<String, String> = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .or_else(|e| err(format!("cannot read config {}: {e}", p.display())))?;
            raw.extend(parse_config_text(&text)?);
        }
        for (k, v) in overrides {
            if !raw.contains_key(k) {
                return err(format!("unknown key {k:?}"));
            }
            raw.insert(k.clone(), v.clone());
        }
        Self::from_raw(raw)
    }

    fn from_raw(raw: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mode = match raw["mode"].as_str() {
            "atom" => LabelMode::Atom,
            "tree" => LabelMode::Tree,
            other => return err(format!("invalid value {other:?} for mode: expected atom or tree")),
        };
        let atoms: Vec<String> = raw["atoms"]
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        let solver = SolverConfig {
            rtol: value(&raw, "rtol")?,
            atol: value(&raw, "atol")?,
            ..SolverConfig::default()
        };
        solver.validate().or_else(|e| err(e.to_string()))?;
        let seed: u64 = value(&raw, "seed")?;
        let train = TrainConfig {
            lr: value(&raw, "lr")?,
            batch_size: value(&raw, "batch_size")?,
            epochs: value(&raw, "epochs")?,
            seed,
            shuffle: value(&raw, "shuffle")?,
            ..TrainConfig::default()
        };
        train.validate().map_err(ConfigError)?;
        let dim: usize = value(&raw, "dim")?;
        if !(dim == 2 || dim == 3) {
            return err(format!("dim must be 2 or 3, got {dim}"));
        }
        let eps: f64 = value(&raw, "eps")?;
        if !(eps > 0.0 && eps < 1.0) {
            return err(format!("eps must lie in (0, 1), got {eps}"));
        }
        let lambda: f64 = value(&raw, "lambda")?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return err(format!("lambda must be finite and non-negative, got {lambda}"));
        }
        let pattern = raw["pattern"].clone();
        if pattern != "chessboard" && pattern != "stripes" {
            return err(format!("invalid value {pattern:?} for pattern: expected chessboard or stripes"));
        }
        Ok(Self {
            out: PathBuf::from(&raw["out"]),
            data: path(&raw, "data"),
            format: value(&raw, "format")?,
            heldout: path(&raw, "heldout"),
            input: path(&raw, "input"),
            atoms,
            mode,
            vocab: path(&raw, "vocab"),
            vocab_size: value(&raw, "vocab_size")?,
            dim,
            solver,
            eps,
            train,
            seed,
            threads: value(&raw, "threads")?,
            checkpoint: path(&raw, "checkpoint"),
            resume: path(&raw, "resume"),
            count: value(&raw, "count")?,
            bins: value(&raw, "bins")?,
            property: value(&raw, "property")?,
            lambda,
            ascent_steps: value(&raw, "ascent_steps")?,
            molecule: Some(raw["molecule"].clone()).filter(|m| !m.is_empty()),
            pattern,
            grid: value(&raw, "grid")?,
            block: value(&raw, "block")?,
            stripe_w: value(&raw, "stripe_w")?,
            toy_steps: value(&raw, "toy_steps")?,
            toy_lr: value(&raw, "toy_lr")?,
            toy_samples: value(&raw, "toy_samples")?,
            raw,
        })
    }

    /// `key=value` lines of every resolved setting, sorted by key.
    pub fn echo(&self) -> String {
        self.raw.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
