//! Run directory handling, data loading and the error record printed on
//! failure.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use fuxi::data::{build_sequences, parse_interactions, split_leave_last, synthesize_dataset, DataFormat, DatasetSplit};
use fuxi::FuxiError;
use serde_json::json;

use crate::commands;
use crate::config::{resolve_config, RunConfig, SourceFormat};
use crate::Command;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const RUN_MANIFEST: &str = "run.manifest.json";
const LOCK: &str = ".lock";

#[derive(Debug)]
pub enum RunError {
    Config(Vec<String>),
    Data(String),
    Numeric(String),
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Io(_) => 1,
            RunError::Config(_) => 2,
            RunError::Data(_) => 3,
            RunError::Numeric(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            RunError::Io(_) => "io",
            RunError::Config(_) => "config",
            RunError::Data(_) => "data",
            RunError::Numeric(_) => "numeric",
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        let mut rec = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let RunError::Config(problems) = self {
            rec["problems"] = json!(problems);
        }
        rec.to_string()
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        RunError::Io(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(problems) => write!(f, "invalid configuration: {}", problems.join("; ")),
            RunError::Data(m) | RunError::Numeric(m) | RunError::Io(m) => f.write_str(m),
        }
    }
}

impl From<FuxiError> for RunError {
    fn from(err: FuxiError) -> Self {
        match err {
            FuxiError::Config(_) => RunError::Config(vec![err.to_string()]),
            FuxiError::NonFinite(_) => RunError::Numeric(err.to_string()),
            FuxiError::Io { .. } => RunError::Io(err.to_string()),
            _ => RunError::Data(err.to_string()),
        }
    }
}

pub type RunResult<T> = Result<T, RunError>;

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> RunResult<Self> {
        let path = dir.join(LOCK);
        let mut file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                RunError::Io(format!("{} is in use by another run ({} exists)", dir.display(), path.display()))
            } else {
                RunError::io(&path, e)
            }
        })?;
        writeln!(file, "{}", std::process::id()).map_err(|e| RunError::io(&path, e))?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> RunResult<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| RunError::io(&path, e))?;
    Ok(path)
}

pub fn create(dir: &Path, name: &str) -> RunResult<(PathBuf, File)> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| RunError::io(&path, e))?;
    Ok((path, file))
}

/// Loads and splits the configured dataset.
pub fn load_split(cfg: &RunConfig) -> RunResult<DatasetSplit> {
    let events = match cfg.data.format {
        SourceFormat::Synthetic => synthesize_dataset(&cfg.data.synthetic)?,
        format => {
            let path = cfg.data.path.as_deref().ok_or_else(|| RunError::Config(vec!["data.path: required".into()]))?;
            if !path.is_file() {
                return Err(RunError::Data(format!("data.path: {} does not exist", path.display())));
            }
            let format = if format == SourceFormat::Csv { DataFormat::Csv } else { DataFormat::MovielensDat };
            parse_interactions(path, format)?
        }
    };
    Ok(split_leave_last(&build_sequences(&events, cfg.data.n)?)?)
}

fn load_document(path: Option<&Path>) -> RunResult<String> {
    match path {
        None => Ok(String::new()),
        Some(p) => fs::read_to_string(p).map_err(|e| RunError::Config(vec![format!("{}: {e}", p.display())])),
    }
}

pub fn execute(command: Command, config: Option<&Path>, overrides: &[String]) -> RunResult<()> {
    let document = load_document(config)?;
    let mut cfg = resolve_config(&document, overrides).map_err(RunError::Config)?;
    let dir = cfg.output.directory.clone();
    fs::create_dir_all(&dir).map_err(|e| RunError::io(&dir, e))?;
    let _lock = DirLock::acquire(&dir)?;

    let split = if command == Command::Gradcheck {
        None
    } else {
        let split = load_split(&cfg)?;
        cfg.model.vocab = split.vocab();
        Some(split)
    };
    write_file(&dir, RESOLVED_CONFIG, cfg.to_toml())?;
    println!("# resolved configuration ({})", dir.join(RESOLVED_CONFIG).display());
    print!("{}", cfg.to_toml());

    let artifacts = commands::dispatch(command, &cfg, split.as_ref(), &dir)?;

    let manifest = json!({
        "command": format!("{command:?}").to_lowercase(),
        "seed": cfg.train.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "machine": fuxi::analysis::machine_tag(),
        "config": RESOLVED_CONFIG,
        "artifacts": artifacts,
    });
    write_file(&dir, RUN_MANIFEST, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    println!("# seed {} ; artifacts: {}", cfg.train.seed, artifacts.join(", "));
    Ok(())
}
