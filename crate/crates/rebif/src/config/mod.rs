//! Run configuration: a fixed registry of typed `key = value` settings.
//!
//! Configuration comes from three layers, later ones winning: built-in
//! defaults, an optional config file (`key = value` lines, `#` comments,
//! dotted keys), and `--set key=value` command-line overrides. Unknown keys
//! are rejected outright — a typo must fail the run, not silently fall back
//! to a default — and every error names the offending key and where it came
//! from. The resolved configuration (every key, defaults included) is what
//! run manifests record.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::experiments::sweep::StudySettings;
use crate::experiments::train::TrainConfig;
use crate::pyramid::Variant;

/// Where a configuration value came from, for error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Default,
    /// 1-based line in the config file.
    File { line: usize },
    /// 1-based position among the `--set` overrides.
    Override { index: usize },
    /// The `REBIF_OUT` environment variable.
    Env,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => write!(f, "default"),
            Origin::File { line } => write!(f, "line {line}"),
            Origin::Override { index } => write!(f, "override {index}"),
            Origin::Env => write!(f, "environment"),
        }
    }
}

/// A parsed configuration value.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Count(usize),
    Real(f64),
    Seed(u64),
    Seeds(Vec<u64>),
    VariantName(Variant),
    Text(String),
}

impl Value {
    /// Canonical text form, used by manifests; parsing this back yields the
    /// same value.
    pub fn render(&self) -> String {
        match self {
            Value::Count(v) => v.to_string(),
            Value::Real(v) => v.to_string(),
            Value::Seed(v) => v.to_string(),
            Value::Seeds(v) => v
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            Value::VariantName(v) => v.name().to_string(),
            Value::Text(v) => v.clone(),
        }
    }
}

/// The value type a key accepts.
#[derive(Clone, Copy, Debug)]
enum Kind {
    /// Unsigned integer within an inclusive range.
    Count { min: usize, max: usize },
    /// Finite non-negative real.
    Real,
    /// Any u64.
    Seed,
    /// Non-empty comma-separated list of u64 seeds.
    Seeds,
    /// A pyramid variant name.
    VariantName,
    /// Free text (paths, tags); may be empty.
    Text,
}

struct KeySpec {
    key: &'static str,
    kind: Kind,
    default: &'static str,
    help: &'static str,
}

/// Every key the configuration accepts, sorted by name.
const REGISTRY: &[KeySpec] = &[
    KeySpec {
        key: "data.count",
        kind: Kind::Count { min: 1, max: 1_000_000 },
        default: "200",
        help: "images written by gen-data",
    },
    KeySpec {
        key: "data.seed",
        kind: Kind::Seed,
        default: "17",
        help: "seed for synthetic dataset generation",
    },
    KeySpec {
        key: "data.tag",
        kind: Kind::Text,
        default: "train",
        help: "substream tag for gen-data (datasets with different tags are disjoint)",
    },
    KeySpec {
        key: "eval.checkpoint",
        kind: Kind::Text,
        default: "",
        help: "checkpoint file to evaluate (required by eval)",
    },
    KeySpec {
        key: "eval.dataset",
        kind: Kind::Text,
        default: "",
        help: "dataset directory to evaluate on; empty synthesizes eval.images test images",
    },
    KeySpec {
        key: "eval.images",
        kind: Kind::Count { min: 1, max: 1_000_000 },
        default: "100",
        help: "synthesized test images when eval.dataset is empty",
    },
    KeySpec {
        key: "out.dir",
        kind: Kind::Text,
        default: "out",
        help: "output directory (the REBIF_OUT environment variable changes this default)",
    },
    KeySpec {
        key: "pyramid.num_scales",
        kind: Kind::Count { min: 2, max: 5 },
        default: "3",
        help: "pyramid scale count",
    },
    KeySpec {
        key: "pyramid.variant",
        kind: Kind::VariantName,
        default: "recore+bfm",
        help: "fusion variant: plain-fpn, recore, bfm, or recore+bfm",
    },
    KeySpec {
        key: "shift.seed",
        kind: Kind::Seed,
        default: "21",
        help: "seed for the pooling-shift study",
    },
    KeySpec {
        key: "shift.trials",
        kind: Kind::Count { min: 1, max: 10_000_000 },
        default: "1000",
        help: "random grids in the pooling-shift study",
    },
    KeySpec {
        key: "study.iterations",
        kind: Kind::Count { min: 1, max: 10_000_000 },
        default: "3000",
        help: "training iterations per sweep/ablation run",
    },
    KeySpec {
        key: "study.seeds",
        kind: Kind::Seeds,
        default: "1,2,3",
        help: "run seeds shared by every sweep/ablation cell",
    },
    KeySpec {
        key: "study.test_images",
        kind: Kind::Count { min: 1, max: 1_000_000 },
        default: "500",
        help: "held-out images for sweep/ablation evaluation",
    },
    KeySpec {
        key: "study.train_images",
        kind: Kind::Count { min: 1, max: 1_000_000 },
        default: "2000",
        help: "training images for sweep/ablation runs",
    },
    KeySpec {
        key: "train.batch",
        kind: Kind::Count { min: 1, max: 65_536 },
        default: "8",
        help: "training batch size",
    },
    KeySpec {
        key: "train.images",
        kind: Kind::Count { min: 1, max: 1_000_000 },
        default: "200",
        help: "synthesized training images for the train command",
    },
    KeySpec {
        key: "train.iterations",
        kind: Kind::Count { min: 1, max: 10_000_000 },
        default: "300",
        help: "training iterations for the train command",
    },
    KeySpec {
        key: "train.lr",
        kind: Kind::Real,
        default: "0.0003",
        help: "SGD step size",
    },
    KeySpec {
        key: "train.momentum",
        kind: Kind::Real,
        default: "0.9",
        help: "SGD momentum in [0, 1)",
    },
    KeySpec {
        key: "train.seed",
        kind: Kind::Seed,
        default: "11",
        help: "weight-init and batch-order seed for the train command",
    },
];

fn spec_for(key: &str) -> Option<&'static KeySpec> {
    REGISTRY.iter().find(|s| s.key == key)
}

/// Clips hostile tokens before they are echoed into error messages.
fn snip(s: &str) -> String {
    const LIMIT: usize = 60;
    if s.chars().count() <= LIMIT {
        s.to_string()
    } else {
        let head: String = s.chars().take(LIMIT).collect();
        format!("{head}…")
    }
}

fn parse_value(kind: Kind, raw: &str) -> Result<Value, String> {
    match kind {
        Kind::Count { min, max } => {
            let v: usize = raw
                .parse()
                .map_err(|_| format!("`{}` is not an unsigned integer", snip(raw)))?;
            if (min..=max).contains(&v) {
                Ok(Value::Count(v))
            } else {
                Err(format!("{v} is outside the valid range [{min}, {max}]"))
            }
        }
        Kind::Real => {
            let v: f64 = raw
                .parse()
                .map_err(|_| format!("`{}` is not a number", snip(raw)))?;
            if v.is_finite() && v >= 0.0 {
                Ok(Value::Real(v))
            } else {
                Err(format!("{v} is not finite and non-negative"))
            }
        }
        Kind::Seed => raw
            .parse()
            .map(Value::Seed)
            .map_err(|_| format!("`{}` is not a u64 seed", snip(raw))),
        Kind::Seeds => {
            let mut seeds = Vec::new();
            for (i, piece) in raw.split(',').enumerate() {
                let piece = piece.trim();
                seeds.push(piece.parse::<u64>().map_err(|_| {
                    format!("entry {} (`{}`) is not a u64 seed", i + 1, snip(piece))
                })?);
            }
            if seeds.is_empty() {
                return Err("seed list must not be empty".to_string());
            }
            Ok(Value::Seeds(seeds))
        }
        Kind::VariantName => Variant::parse(raw).map(Value::VariantName).ok_or_else(|| {
            format!(
                "`{}` is not a variant (expected plain-fpn, recore, bfm, or recore+bfm)",
                snip(raw)
            )
        }),
        Kind::Text => Ok(Value::Text(raw.to_string())),
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config file {path} is not valid UTF-8")]
    NotUtf8 { path: String },
    #[error("config {origin}: expected `key = value`, got `{got}`")]
    Syntax { origin: Origin, got: String },
    #[error("config {origin}: unknown key `{key}`")]
    UnknownKey { key: String, origin: Origin },
    #[error("config {origin}: key `{key}`: {message}")]
    BadValue {
        key: &'static str,
        origin: Origin,
        message: String,
    },
    #[error("missing required key `{key}`: {needed_for}")]
    MissingKey {
        key: &'static str,
        needed_for: &'static str,
    },
}

/// The resolved configuration: one typed value per registry key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, (Value, Origin)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::defaults()
    }
}

impl RunConfig {
    /// Every key at its built-in default.
    pub fn defaults() -> RunConfig {
        let values = REGISTRY
            .iter()
            .map(|s| {
                let v = parse_value(s.kind, s.default)
                    .expect("registry defaults parse under their own kind");
                (s.key, (v, Origin::Default))
            })
            .collect();
        RunConfig { values }
    }

    /// Reads the layered configuration: defaults, then `file` (if given),
    /// then `--set` overrides, then the `REBIF_OUT` fallback for `out.dir`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::defaults();
        if let Some(path) = file {
            let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let text = String::from_utf8(bytes).map_err(|_| ConfigError::NotUtf8 {
                path: path.display().to_string(),
            })?;
            cfg.apply_text(&text)?;
        }
        for (i, spec) in overrides.iter().enumerate() {
            cfg.apply_override(spec, i + 1)?;
        }
        cfg.apply_out_env(std::env::var("REBIF_OUT").ok());
        Ok(cfg)
    }

    /// Applies a config file body: `key = value` lines, `#` comments.
    /// Repeated keys keep the last assignment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw_line) in text.lines().enumerate() {
            let origin = Origin::File { line: idx + 1 };
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    origin,
                    got: snip(line),
                });
            };
            self.assign(key.trim(), value.trim(), origin)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override (the 1-based `index` names it in
    /// errors).
    pub fn apply_override(&mut self, spec: &str, index: usize) -> Result<(), ConfigError> {
        let origin = Origin::Override { index };
        let Some((key, value)) = spec.split_once('=') else {
            return Err(ConfigError::Syntax {
                origin,
                got: snip(spec),
            });
        };
        self.assign(key.trim(), value.trim(), origin)
    }

    /// `REBIF_OUT` supplies the default output directory: it applies only
    /// when nothing else has set `out.dir`.
    fn apply_out_env(&mut self, var: Option<String>) {
        if let Some(dir) = var {
            let slot = self.values.get_mut("out.dir").expect("registry key");
            if slot.1 == Origin::Default {
                *slot = (Value::Text(dir), Origin::Env);
            }
        }
    }

    fn assign(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), ConfigError> {
        let spec = spec_for(key).ok_or_else(|| ConfigError::UnknownKey {
            key: snip(key),
            origin,
        })?;
        let parsed = parse_value(spec.kind, value).map_err(|message| ConfigError::BadValue {
            key: spec.key,
            origin,
            message,
        })?;
        self.values.insert(spec.key, (parsed, origin));
        Ok(())
    }

    fn value(&self, key: &str) -> &Value {
        &self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` is not in the registry"))
            .0
    }

    pub fn count(&self, key: &str) -> usize {
        match self.value(key) {
            Value::Count(v) => *v,
            other => panic!("key `{key}` is not a count: {other:?}"),
        }
    }

    pub fn real(&self, key: &str) -> f64 {
        match self.value(key) {
            Value::Real(v) => *v,
            other => panic!("key `{key}` is not a real: {other:?}"),
        }
    }

    pub fn seed(&self, key: &str) -> u64 {
        match self.value(key) {
            Value::Seed(v) => *v,
            other => panic!("key `{key}` is not a seed: {other:?}"),
        }
    }

    pub fn seeds(&self, key: &str) -> &[u64] {
        match self.value(key) {
            Value::Seeds(v) => v,
            other => panic!("key `{key}` is not a seed list: {other:?}"),
        }
    }

    pub fn variant(&self, key: &str) -> Variant {
        match self.value(key) {
            Value::VariantName(v) => *v,
            other => panic!("key `{key}` is not a variant: {other:?}"),
        }
    }

    pub fn text(&self, key: &str) -> &str {
        match self.value(key) {
            Value::Text(v) => v,
            other => panic!("key `{key}` is not text: {other:?}"),
        }
    }

    /// Like [`RunConfig::text`] but empty values are an error naming the key.
    pub fn require_text(
        &self,
        key: &'static str,
        needed_for: &'static str,
    ) -> Result<&str, ConfigError> {
        let v = self.text(key);
        if v.is_empty() {
            Err(ConfigError::MissingKey { key, needed_for })
        } else {
            Ok(v)
        }
    }

    /// The training recipe under `train.*` and `pyramid.*`.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.count("train.iterations"),
            batch_size: self.count("train.batch"),
            lr: self.real("train.lr"),
            momentum: self.real("train.momentum"),
            seed: self.seed("train.seed"),
            variant: self.variant("pyramid.variant"),
            num_scales: self.count("pyramid.num_scales"),
        }
    }

    /// The sweep/ablation recipe: `study.*` schedules with the `train.*`
    /// optimizer knobs.
    pub fn study_settings(&self) -> StudySettings {
        StudySettings {
            iterations: self.count("study.iterations"),
            batch_size: self.count("train.batch"),
            lr: self.real("train.lr"),
            momentum: self.real("train.momentum"),
            seeds: self.seeds("study.seeds").to_vec(),
        }
    }

    /// Every key with its resolved value, in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&'static str, String)> + '_ {
        self.values.iter().map(|(k, (v, _))| (*k, v.render()))
    }

    /// The resolved-config manifest. Reports themselves never carry
    /// timestamps; the run record here is the only place one appears.
    pub fn manifest(&self, command: &str, timestamp_utc: &str) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (key, value) in self.entries() {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out.push_str("\n# run record (not configuration; timestamps appear only here)\n");
        out.push_str(&format!("command = {command}\n"));
        out.push_str(&format!("timestamp_utc = {timestamp_utc}\n"));
        out
    }

    /// One `key<TAB>default<TAB>description` line per registry key, for
    /// `--help` style listings.
    pub fn describe_keys() -> String {
        let mut out = String::new();
        for s in REGISTRY {
            out.push_str(&format!("{}\t{}\t{}\n", s.key, s.default, s.help));
        }
        out
    }
}
