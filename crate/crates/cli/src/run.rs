//! Configuration loading, artifact I/O with provenance, and the run manifest
//! written next to every command's outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gvr_core::bank::{load_bank, manifest_path, write_file, EmbeddingBank};
use gvr_core::checkpoint::{load_checkpoint, save_checkpoint};
use gvr_core::config::{content_hash, Paths, RunConfig};
use gvr_core::optim::ParamGroup;
use serde::Serialize;
use serde_json::Value;

use crate::args::Common;

/// Failure of one command, printed as a single JSON line.
#[derive(Debug)]
pub enum CliError {
    /// Missing or inconsistent flags and artifacts.
    Validation(String),
    Core(gvr_core::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        use gvr_core::Error as E;
        match self {
            CliError::Validation(_) => "validation",
            CliError::Core(e) => match e {
                E::Dimension(_) => "dimension",
                E::DegenerateInput(_) => "degenerate-input",
                E::Contract(_) => "contract",
                E::Range(_) => "range",
                E::Capacity(_) => "capacity",
                E::Config(_) => "config",
                E::Usage(_) => "usage",
                E::Format { .. } => "format",
                E::CorruptBank(_) => "corrupt-bank",
                E::Divergence(_) => "divergence",
                E::MissingArtifact(_) => "missing-artifact",
                E::Io { .. } => "io",
                E::Json(_) => "json",
            },
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Core(gvr_core::Error::Usage(_)) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<gvr_core::Error> for CliError {
    fn from(e: gvr_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn required<T: Clone>(value: &Option<T>, fallback: Option<&T>, flag: &str) -> CliResult<T> {
    value
        .clone()
        .or_else(|| fallback.cloned())
        .ok_or_else(|| CliError::Validation(format!("missing required flag --{flag}")))
}

/// Sets a dotted key inside a JSON document; the key must already exist.
fn set_key(doc: &mut Value, key: &str, raw: &str) -> CliResult<()> {
    let mut node = doc;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| CliError::Validation(format!("unknown configuration key {key}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// The configuration file (or defaults), then `--set` overrides, then `--seed`.
pub fn load_config(common: &Common) -> CliResult<RunConfig> {
    let base = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut doc = serde_json::to_value(&base)?;
    for o in &common.overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got {o}")))?;
        set_key(&mut doc, key, value)?;
    }
    let mut cfg = RunConfig::from_json(&serde_json::to_vec(&doc)?)
        .map_err(|e| CliError::Validation(format!("configuration override rejected: {e}")))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.propagate();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct FileRecord {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    config_digest: String,
    seed: u64,
    threads: Option<usize>,
    forced: &'a [String],
    inputs: &'a [FileRecord],
    outputs: &'a [FileRecord],
    timings_ms: &'a BTreeMap<String, u128>,
}

/// State of one command: resolved configuration, output directory and the
/// provenance collected while it runs.
pub struct Context {
    pub command: &'static str,
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    pub threads: Option<usize>,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    forced: Vec<String>,
    timings: BTreeMap<String, u128>,
    clock: Instant,
}

impl Context {
    pub fn new(command: &'static str, common: &Common) -> CliResult<Self> {
        let cfg = load_config(common)?;
        let out = required(&common.out, cfg.paths.out.as_ref(), "out")?;
        let threads = match std::env::var("GVR_THREADS") {
            Ok(v) => Some(v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::Validation(format!("GVR_THREADS must be a positive integer, got {v}"))
            })?),
            Err(_) => None,
        };
        Ok(Self {
            command,
            cfg,
            out,
            force: common.force,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            forced: Vec::new(),
            timings: BTreeMap::new(),
            clock: Instant::now(),
        })
    }

    pub fn digest(&self) -> String {
        self.cfg.digest()
    }

    /// Configuration as embedded in artifacts, without machine-local paths.
    pub fn config_json(&self) -> CliResult<Value> {
        let mut c = self.cfg.clone();
        c.paths = Paths::default();
        Ok(serde_json::to_value(&c)?)
    }

    /// Closes the current timing phase under `name`.
    pub fn lap(&mut self, name: &str) {
        self.timings.insert(name.to_string(), self.clock.elapsed().as_millis());
        self.clock = Instant::now();
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn read_input(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| {
            CliError::Core(gvr_core::Error::MissingArtifact(format!("{}: {e}", path.display())))
        })?;
        self.inputs.push(FileRecord {
            path: path.to_path_buf(),
            sha256: content_hash(&bytes),
        });
        Ok(bytes)
    }

    pub fn record_output(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| {
            CliError::Core(gvr_core::Error::MissingArtifact(format!("{}: {e}", path.display())))
        })?;
        self.outputs.push(FileRecord {
            path: path.to_path_buf(),
            sha256: content_hash(&bytes),
        });
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out_path(name);
        write_file(&path, bytes)?;
        self.record_output(&path)?;
        Ok(path)
    }

    pub fn bank(&mut self, flag: &Option<PathBuf>) -> CliResult<EmbeddingBank> {
        let path = required(flag, self.cfg.paths.bank.as_ref(), "bank")?;
        self.read_input(&path)?;
        self.read_input(&manifest_path(&path))?;
        Ok(load_bank(&path)?)
    }

    /// Refuses an artifact from another configuration unless `--force`.
    pub fn check_digest(&mut self, path: &Path, digest: &str) -> CliResult<()> {
        let current = self.digest();
        if digest == current {
            return Ok(());
        }
        if self.force {
            self.forced.push(format!("{} (digest {digest})", path.display()));
            return Ok(());
        }
        Err(CliError::Validation(format!(
            "{} was produced by configuration {digest}, current configuration is {current}; pass --force to accept it",
            path.display()
        )))
    }

    pub fn load_params(&mut self, path: &Path, kind: &str) -> CliResult<ParamGroup> {
        self.read_input(path)?;
        let (header, params) = load_checkpoint(path)?;
        if header.kind != kind {
            return Err(CliError::Validation(format!(
                "{} holds a {} checkpoint, expected {kind}",
                path.display(),
                header.kind
            )));
        }
        self.check_digest(path, &header.digest)?;
        Ok(params)
    }

    pub fn save_params(&mut self, name: &str, kind: &str, step: u64, params: &ParamGroup) -> CliResult<PathBuf> {
        let path = self.out_path(name);
        let seed = self.cfg.seed;
        let digest = self.digest();
        save_checkpoint(&path, kind, self.config_json()?, step, seed, &digest, params, self.cfg.precision)?;
        self.record_output(&path)?;
        Ok(path)
    }

    /// Writes `<command>.run.json` into the output directory.
    pub fn finish(mut self) -> CliResult<()> {
        self.lap("finish");
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config_digest: self.digest(),
            seed: self.cfg.seed,
            threads: self.threads,
            forced: &self.forced,
            inputs: &self.inputs,
            outputs: &self.outputs,
            timings_ms: &self.timings,
        };
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        write_file(&self.out_path(&format!("{}.run.json", self.command)), &bytes)?;
        Ok(())
    }
}
