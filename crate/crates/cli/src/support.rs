//! Run plumbing shared by every subcommand: config-file merging, input
//! hashing, and the manifest written beside each run's outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use bevtsr::Error;

/// A subcommand failure, split by exit-code class: usage mistakes exit 1,
/// data problems 2, numerical failures 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Numerical(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(err) => write!(f, "{err}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError::Core(err)
    }
}

pub type CmdResult<T> = Result<T, CliError>;

/// Parses an optional JSON config file into a struct of optional fields.
/// Unknown keys are rejected so typos cannot silently fall back to defaults.
pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CmdResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&raw)
                .map_err(|e| Error::parse_at(format!("config file: {e}"), p, None).into())
        }
    }
}

pub fn sha256_file(path: &Path) -> CmdResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects input hashes and output names for one run, then writes the
/// manifest (resolved config included) beside the outputs.
pub struct RunManifest {
    subcommand: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &'static str) -> Self {
        RunManifest {
            subcommand,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Records one input file by path and content hash.
    pub fn input(&mut self, path: &Path) -> CmdResult<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn input_optional(&mut self, path: Option<&Path>) -> CmdResult<()> {
        if let Some(p) = path {
            self.input(p)?;
        }
        Ok(())
    }

    /// Registers an output file name (relative to the out directory).
    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write<C: Serialize>(mut self, out_dir: &Path, config: &C) -> CmdResult<()> {
        #[derive(Serialize)]
        struct Manifest<'a, C> {
            subcommand: &'static str,
            config: &'a C,
            inputs: &'a BTreeMap<String, String>,
            outputs: &'a [String],
        }
        self.outputs.push("manifest.json".to_string());
        let manifest = Manifest {
            subcommand: self.subcommand,
            config,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        write_json(&out_dir.join("manifest.json"), &manifest)
    }
}

/// Creates the output directory if needed.
pub fn ensure_out_dir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Pretty JSON plus trailing newline; byte-stable for identical values.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialization failed: {e}")))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Compact single-line JSON on stdout for piping.
pub fn print_json<T: Serialize>(value: &T) {
    if let Ok(json) = serde_json::to_string(value) {
        println!("{json}");
    }
}

/// Corpus directory file names, shared with the core on-disk layout. The
/// tensor container carries a JSON sidecar describing its records.
pub const CORPUS_FILES: [&str; 4] = [
    "features.tsr",
    "features.tsr.json",
    "captions.jsonl",
    "split.json",
];

/// Checkpoint file suffixes relative to the extensionless base name.
pub const CHECKPOINT_SUFFIXES: [&str; 3] = ["tsr", "tsr.json", "json"];

/// Hashes the corpus files as inputs.
pub fn hash_corpus_inputs(manifest: &mut RunManifest, dir: &Path) -> CmdResult<()> {
    for name in CORPUS_FILES {
        manifest.input(&dir.join(name))?;
    }
    Ok(())
}

/// Hashes a checkpoint triple (`<base>.tsr`, sidecar, header) as inputs.
pub fn hash_checkpoint_inputs(manifest: &mut RunManifest, base: &Path) -> CmdResult<()> {
    for suffix in CHECKPOINT_SUFFIXES {
        manifest.input(&base.with_extension(suffix))?;
    }
    Ok(())
}

/// Seed resolution: flag (or `BEVTSR_SEED`, handled by the parser) wins,
/// then the config file, then the built-in default.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>, default: u64) -> u64 {
    flag.or(file).unwrap_or(default)
}

pub fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
