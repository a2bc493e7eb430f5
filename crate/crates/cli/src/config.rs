//! Run configuration: one TOML document plus dotted `section.key=value`
//! overrides, validated as a whole so every problem is reported together.

use std::path::PathBuf;

use fuxi::analysis::{MAX_ORACLE_LAYERS, MAX_ORACLE_LEN};
use fuxi::baselines::VariantKind;
use fuxi::data::SyntheticSpec;
use fuxi::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    MovielensDat,
    Csv,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Interaction file; unused for `synthetic`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub format: SourceFormat,
    /// Most recent events kept per user.
    pub n: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            format: SourceFormat::Synthetic,
            n: 200,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![1, 5, 10, 20, 50],
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub seq_lengths: Vec<usize>,
    pub batch: usize,
    /// Training sequences timed per length.
    pub sequences: usize,
    pub variants: Vec<VariantKind>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            seq_lengths: vec![200, 400, 600, 800],
            batch: 4,
            sequences: 16,
            variants: vec![VariantKind::Full, VariantKind::Vanilla],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub layers: Vec<usize>,
    pub lengths: Vec<usize>,
    pub scaling_layers: Vec<usize>,
    pub scaling_dims: Vec<usize>,
    /// Sequences in the batch timed by the scaling probe.
    pub scaling_batch: usize,
    pub repeats: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            layers: vec![1, 2, 3, 4],
            lengths: vec![2, 3],
            scaling_layers: vec![1, 2, 3, 4],
            scaling_dims: vec![16, 32, 48, 64],
            scaling_batch: 8,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub seeds: u64,
    pub fd_step: f64,
    pub tolerance: f64,
    pub variants: Vec<VariantKind>,
    pub model: ModelConfig,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            seeds: 5,
            fd_step: 1e-6,
            tolerance: 1e-4,
            variants: VariantKind::ALL.to_vec(),
            model: ModelConfig {
                dim: 4,
                head_dim: 4,
                heads_per_channel: 1,
                ffn_dim: 8,
                layers: 2,
                max_len: 4,
                time_buckets: 8,
                negatives: 3,
                vocab: 7,
                max_time_span: 1000,
                ..ModelConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { directory: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub analysis: AnalysisSection,
    pub gradcheck: GradcheckSection,
    pub output: OutputSection,
}

/// Keys that are absent from the serialized defaults but still accepted.
const OPTIONAL_KEYS: &[(&str, &str)] = &[("data.path", "string")];

/// Tables whose contents are checked by deserialization alone (tagged
/// enums whose fields depend on the chosen kind).
const OPAQUE_KEYS: &[&str] = &["data.synthetic.rule"];

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn compatible(expected: &Value, got: &Value) -> bool {
    matches!(
        (expected, got),
        (Value::Float(_), Value::Integer(_))
            | (Value::String(_), Value::String(_))
            | (Value::Integer(_), Value::Integer(_))
            | (Value::Float(_), Value::Float(_))
            | (Value::Boolean(_), Value::Boolean(_))
            | (Value::Array(_), Value::Array(_))
            | (Value::Table(_), Value::Table(_))
    )
}

fn check_array(key: &str, expected: &[Value], got: &[Value], problems: &mut Vec<String>) {
    let Some(proto) = expected.first() else { return };
    for (i, item) in got.iter().enumerate() {
        if !compatible(proto, item) {
            problems.push(format!("{key}[{i}]: expected {}, got {}", type_name(proto), type_name(item)));
        } else if let (Value::Table(e), Value::Table(g)) = (proto, item) {
            walk(&format!("{key}[{i}]"), e, g, problems);
        }
    }
}

fn walk(prefix: &str, defaults: &Table, doc: &Table, problems: &mut Vec<String>) {
    for (name, got) in doc {
        let key = if prefix.is_empty() { name.clone() } else { format!("{prefix}.{name}") };
        match defaults.get(name) {
            None => match OPTIONAL_KEYS.iter().find(|(k, _)| *k == key) {
                Some((_, "string")) if got.is_str() => {}
                Some((_, ty)) => problems.push(format!("{key}: expected {ty}, got {}", type_name(got))),
                None => problems.push(format!("{key}: unknown key")),
            },
            Some(expected) if !compatible(expected, got) => {
                problems.push(format!("{key}: expected {}, got {}", type_name(expected), type_name(got)));
            }
            Some(Value::Table(e)) if !OPAQUE_KEYS.contains(&key.as_str()) => {
                if let Value::Table(g) = got {
                    walk(&key, e, g, problems);
                }
            }
            Some(Value::Array(e)) => {
                if let Value::Array(g) = got {
                    check_array(&key, e, g, problems);
                }
            }
            Some(_) => {}
        }
    }
}

/// Parses the right-hand side of an override as a TOML literal; bare words
/// that are not valid TOML are taken as strings.
fn parse_literal(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(doc: &mut Table, spec: &str, problems: &mut Vec<String>) {
    let Some((path, raw)) = spec.split_once('=') else {
        problems.push(format!("override `{spec}`: expected section.key=value"));
        return;
    };
    let path = path.trim();
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        problems.push(format!("override `{spec}`: empty key segment"));
        return;
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        match entry {
            Value::Table(t) => table = t,
            other => {
                problems.push(format!("{path}: `{part}` is a {}, not a table", type_name(other)));
                return;
            }
        }
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(raw.trim()));
}

fn semantic_checks(cfg: &RunConfig, problems: &mut Vec<String>) {
    let mut push = |r: fuxi::Result<()>, section: &str| {
        if let Err(e) = r {
            problems.push(format!("{section}: {e}"));
        }
    };
    push(cfg.model.validate(), "model");
    push(cfg.train.validate(), "train");
    push(cfg.gradcheck.model.validate(), "gradcheck.model");
    if cfg.data.format == SourceFormat::Synthetic {
        push(cfg.data.synthetic.validate(), "data.synthetic");
    } else if cfg.data.path.is_none() {
        problems.push("data.path: required when data.format is not synthetic".into());
    }
    if cfg.data.n == 0 {
        problems.push("data.n: must be positive".into());
    }
    if cfg.data.n > cfg.model.max_len {
        problems.push(format!("data.n: {} exceeds model.n = {}", cfg.data.n, cfg.model.max_len));
    }
    if cfg.eval.ks.is_empty() || cfg.eval.ks.contains(&0) {
        problems.push("eval.ks: must be a non-empty list of positive cutoffs".into());
    }
    if cfg.eval.batch_size == 0 {
        problems.push("eval.batch_size: must be positive".into());
    }
    if cfg.bench.batch == 0 {
        problems.push("bench.batch: must be positive".into());
    }
    if cfg.bench.sequences < cfg.bench.batch {
        problems.push("bench.sequences: must be at least bench.batch".into());
    }
    if cfg.analysis.layers.iter().any(|&b| b == 0 || b > MAX_ORACLE_LAYERS) {
        problems.push(format!("analysis.layers: each value must lie in 1..={MAX_ORACLE_LAYERS}"));
    }
    if cfg.analysis.lengths.iter().any(|&n| n == 0 || n > MAX_ORACLE_LEN) {
        problems.push(format!("analysis.lengths: each value must lie in 1..={MAX_ORACLE_LEN}"));
    }
    for (key, values) in [("analysis.scaling_layers", &cfg.analysis.scaling_layers), ("analysis.scaling_dims", &cfg.analysis.scaling_dims)] {
        if values.contains(&0) || values.windows(2).any(|w| w[0] >= w[1]) {
            problems.push(format!("{key}: must be strictly ascending positive values"));
        }
    }
    if cfg.analysis.scaling_batch == 0 {
        problems.push("analysis.scaling_batch: must be positive".into());
    }
    if cfg.gradcheck.seeds == 0 {
        problems.push("gradcheck.seeds: must be positive".into());
    }
}

/// Resolves `document` (TOML text) with `overrides` applied last. On
/// failure returns every problem found.
pub fn resolve_config(document: &str, overrides: &[String]) -> Result<RunConfig, Vec<String>> {
    let mut doc: Table = document.parse().map_err(|e: toml::de::Error| vec![format!("config document: {}", e.message())])?;
    let mut problems = Vec::new();
    for spec in overrides {
        apply_override(&mut doc, spec, &mut problems);
    }
    let defaults = Value::try_from(RunConfig::default()).expect("defaults serialize");
    let Value::Table(defaults) = defaults else { unreachable!("config serializes to a table") };
    walk("", &defaults, &doc, &mut problems);
    if !problems.is_empty() {
        return Err(problems);
    }
    let cfg: RunConfig = Value::Table(doc).try_into().map_err(|e: toml::de::Error| vec![e.message().to_string()])?;
    semantic_checks(&cfg, &mut problems);
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(problems)
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
