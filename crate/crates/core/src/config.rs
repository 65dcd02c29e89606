//! Plain-text run configuration.
//!
//! The format is line based: `[section]` headers, `key = value` pairs and `#`
//! comments. Values are integers, decimals, `true`/`false`, double-quoted
//! strings, or comma-separated lists of those. Every error carries the line
//! number it was found on.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::data::{SyntheticTaskSpec, TaskKind};
use crate::error::{NasError, Result};
use crate::oracle::DEFAULT_CAP;
use crate::search::NasConfig;
use crate::supernet::{NetworkShape, SearchSpaceSpec};
use crate::train::TrainConfig;

/// A parsed scalar or list value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    List(Vec<Value>),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Int(_) => "integer",
            Value::Float(_) => "decimal",
            Value::Bool(_) => "boolean",
            Value::Str(_) => "string",
            Value::List(_) => "list",
        }
    }
}

/// File locations used by the commands.
#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/dataset.synd`.
    pub dataset: Option<PathBuf>,
    /// Defaults to `<out_dir>/supernet.tdnf`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("out"),
            dataset: None,
            checkpoint: None,
        }
    }
}

impl Paths {
    pub fn dataset(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset.synd"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("supernet.tdnf"))
    }
}

/// Everything a command needs, with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub space: SearchSpaceSpec,
    pub hidden_dim: usize,
    pub nas: NasConfig,
    pub train: TrainConfig,
    pub data: SyntheticTaskSpec,
    /// Largest space the oracle will enumerate.
    pub oracle_cap: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            space: SearchSpaceSpec::new(2, 2, 2, vec![2, 4, 8], true, true).expect("static space is valid"),
            hidden_dim: 16,
            nas: NasConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticTaskSpec::default(),
            oracle_cap: DEFAULT_CAP,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Network shape implied by the data and hidden width.
    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            input_dim: self.data.feature_dim,
            hidden_dim: self.hidden_dim,
            num_classes: self.data.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.nas.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.hidden_dim == 0 {
            return Err(NasError::value("hidden_dim must be at least 1"));
        }
        Ok(())
    }
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Parses config text; keys that are absent keep their defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section: Option<String> = None;
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut contexts = (cfg.space.d_left, cfg.space.d_right);
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = strip_comment(raw).trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| config_err(line, "unterminated section header"))?
                .trim();
            if !matches!(name, "space" | "search" | "train" | "data" | "paths") {
                return Err(config_err(line, format!("unknown section `{name}`")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| config_err(line, "expected `key = value`"))?;
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(config_err(line, format!("invalid key `{key}`")));
        }
        let sec = section
            .clone()
            .ok_or_else(|| config_err(line, format!("key `{key}` appears before any section")))?;
        if !seen.insert((sec.clone(), key.to_string())) {
            return Err(config_err(line, format!("duplicate key `{key}` in [{sec}]")));
        }
        let value = parse_value(value.trim()).map_err(|r| config_err(line, r))?;
        let f = Field { line, key, value: &value };
        match (sec.as_str(), key) {
            ("space", "num_layers") => cfg.space.num_layers = f.usize()?,
            ("space", "d_left") => contexts.0 = f.usize()?,
            ("space", "d_right") => contexts.1 = f.usize()?,
            ("space", "dim_choices") => cfg.space.dim_choices = f.usize_list()?,
            ("space", "search_contexts") => cfg.space.search_contexts = f.bool()?,
            ("space", "search_dims") => cfg.space.search_dims = f.bool()?,
            ("space", "hidden_dim") => cfg.hidden_dim = f.usize()?,
            ("search", "method") => cfg.nas.method = f.str()?.parse().map_err(|e| f.wrap(e))?,
            ("search", "gumbel_samples") => cfg.nas.gumbel_samples = f.usize()?,
            ("search", "temperature_start") => cfg.nas.temperature.start = f.float()?,
            ("search", "temperature_end") => cfg.nas.temperature.end = f.float()?,
            ("search", "eta") => cfg.nas.eta = f.float()?,
            ("search", "penalty_unit") => cfg.nas.penalty_unit = f.str()?.parse().map_err(|e| f.wrap(e))?,
            ("search", "heldout_fraction") => cfg.nas.heldout_fraction = f.float()?,
            ("search", "search_epochs") => cfg.nas.search_epochs = f.usize()?,
            ("search", "stage2_epochs") => cfg.nas.stage2_epochs = f.usize()?,
            ("search", "top_n") => cfg.nas.top_n = f.usize()?,
            ("search", "oracle_cap") => cfg.oracle_cap = f.usize()?,
            ("train", "lr_layers") => cfg.train.lr_layers = f.float()?,
            ("train", "lr_arch") => cfg.train.lr_arch = f.float()?,
            ("train", "momentum") => cfg.train.momentum = f.float()?,
            ("train", "batch_size") => cfg.train.batch_size = f.usize()?,
            ("train", "epochs") => cfg.train.epochs = f.usize()?,
            ("train", "seed") => cfg.train.seed = f.u64()?,
            ("train", "orth_period") => cfg.train.orth_period = f.usize()?,
            ("data", "task") => {
                let s = f.str()?;
                cfg.data.kind = TaskKind::parse(s)
                    .ok_or_else(|| config_err(line, format!("unknown task `{s}` (context, rank)")))?;
            }
            ("data", "num_sequences") => cfg.data.num_sequences = f.usize()?,
            ("data", "frames") => cfg.data.frames = f.usize()?,
            ("data", "feature_dim") => cfg.data.feature_dim = f.usize()?,
            ("data", "num_classes") => cfg.data.num_classes = f.usize()?,
            ("data", "left_offset") => cfg.data.left_offset = f.usize()?,
            ("data", "right_offset") => cfg.data.right_offset = f.usize()?,
            ("data", "rank") => cfg.data.rank = f.usize()?,
            ("data", "noise") => cfg.data.noise = f.float()?,
            ("data", "seed") => cfg.data.seed = f.u64()?,
            ("paths", "out_dir") => cfg.paths.out_dir = PathBuf::from(f.str()?),
            ("paths", "dataset") => cfg.paths.dataset = Some(PathBuf::from(f.str()?)),
            ("paths", "checkpoint") => cfg.paths.checkpoint = Some(PathBuf::from(f.str()?)),
            _ => return Err(config_err(line, format!("unknown key `{key}` in [{sec}]"))),
        }
    }
    let pinned = SearchSpaceSpec::new(
        cfg.space.num_layers,
        contexts.0,
        contexts.1,
        cfg.space.dim_choices.clone(),
        cfg.space.search_contexts,
        cfg.space.search_dims,
    )?;
    cfg.space = pinned;
    cfg.validate()?;
    Ok(cfg)
}

fn config_err(line: usize, reason: impl Into<String>) -> NasError {
    NasError::Config {
        line,
        reason: reason.into(),
    }
}

/// Drops a trailing `#` comment that is not inside a quoted string.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Parses a value; a top-level comma makes a list.
pub fn parse_value(s: &str) -> std::result::Result<Value, String> {
    let mut parts = Vec::new();
    let mut quoted = false;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '"' => quoted = !quoted,
            ',' if !quoted => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if quoted {
        return Err("unterminated string".into());
    }
    if parts.is_empty() {
        return parse_scalar(s);
    }
    parts.push(&s[start..]);
    parts.into_iter().map(|p| parse_scalar(p.trim())).collect::<std::result::Result<_, _>>().map(Value::List)
}

fn parse_scalar(s: &str) -> std::result::Result<Value, String> {
    if s.is_empty() {
        return Err("missing value".into());
    }
    if let Some(body) = s.strip_prefix('"') {
        let inner = body.strip_suffix('"').ok_or("unterminated string")?;
        if inner.contains('"') {
            return Err("stray quote inside string".into());
        }
        return Ok(Value::Str(inner.to_string()));
    }
    match s {
        "true" => return Ok(Value::Bool(true)),
        "false" => return Ok(Value::Bool(false)),
        _ => {}
    }
    if let Ok(v) = s.parse::<i64>() {
        return Ok(Value::Int(v));
    }
    if s.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')) {
        if let Ok(v) = s.parse::<f64>() {
            if v.is_finite() {
                return Ok(Value::Float(v));
            }
        }
    }
    Err(format!("cannot parse value `{s}` (strings must be quoted)"))
}

/// A value together with where it came from, for typed extraction.
struct Field<'a> {
    line: usize,
    key: &'a str,
    value: &'a Value,
}

impl Field<'_> {
    fn mismatch(&self, expected: &str) -> NasError {
        config_err(
            self.line,
            format!("`{}` expects {expected}, found {}", self.key, self.value.kind()),
        )
    }

    fn wrap(&self, e: NasError) -> NasError {
        config_err(self.line, format!("`{}`: {e}", self.key))
    }

    fn u64(&self) -> Result<u64> {
        match self.value {
            Value::Int(v) if *v >= 0 => Ok(*v as u64),
            _ => Err(self.mismatch("a non-negative integer")),
        }
    }

    fn usize(&self) -> Result<usize> {
        self.u64().map(|v| v as usize)
    }

    fn float(&self) -> Result<f64> {
        match self.value {
            Value::Float(v) => Ok(*v),
            Value::Int(v) => Ok(*v as f64),
            _ => Err(self.mismatch("a decimal")),
        }
    }

    fn bool(&self) -> Result<bool> {
        match self.value {
            Value::Bool(v) => Ok(*v),
            _ => Err(self.mismatch("a boolean")),
        }
    }

    fn str(&self) -> Result<&str> {
        match self.value {
            Value::Str(v) => Ok(v),
            _ => Err(self.mismatch("a quoted string")),
        }
    }

    fn usize_list(&self) -> Result<Vec<usize>> {
        let items: Vec<&Value> = match self.value {
            Value::List(items) => items.iter().collect(),
            v => vec![v],
        };
        items
            .into_iter()
            .map(|v| match v {
                Value::Int(i) if *i >= 0 => Ok(*i as usize),
                _ => Err(self.mismatch("a list of non-negative integers")),
            })
            .collect()
    }
}
