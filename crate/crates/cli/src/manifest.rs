//! Run manifests: the resolved command line of a run plus digests of
//! everything it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::{Command, ToyCommand};
use crate::commands::{Failure, Files, Outcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Every flag value after defaults were applied.
    pub args: Command,
    /// Seeds by role, e.g. `data` or `random`.
    pub seeds: BTreeMap<String, Vec<u64>>,
    pub inputs: Vec<String>,
    pub outputs: Vec<FileDigest>,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Toy(ToyCommand::Train(_)) => "toy train",
        Command::Toy(ToyCommand::Profiles(_)) => "toy profiles",
        Command::Fit(_) => "fit",
        Command::Rank(_) => "rank",
        Command::Eval(_) => "eval",
        Command::Replay(_) => "replay",
    }
}

fn seeds(c: &Command) -> BTreeMap<String, Vec<u64>> {
    let named: Vec<(&str, Vec<u64>)> = match c {
        Command::Toy(ToyCommand::Train(a)) => vec![("init", vec![a.seed]), ("data", vec![a.data_seed])],
        Command::Toy(ToyCommand::Profiles(a)) => vec![("data", vec![a.data_seed])],
        Command::Rank(a) => vec![("data", vec![a.data_seed])],
        Command::Eval(a) => vec![("data", vec![a.data_seed]), ("random", a.seeds.clone())],
        Command::Fit(_) | Command::Replay(_) => vec![],
    };
    named.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn sha256_hex(path: &Path) -> Outcome<String> {
    let bytes = fs::read(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl RunManifest {
    pub fn new(command: &Command, files: &Files) -> Outcome<Self> {
        let outputs = files
            .outputs
            .iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.display().to_string(),
                    sha256: sha256_hex(p)?,
                })
            })
            .collect::<Outcome<_>>()?;
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command_name(command).to_string(),
            args: command.clone(),
            seeds: seeds(command),
            inputs: files.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs,
        })
    }

    pub fn write(&self, path: &Path) -> Outcome {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
    }
}

pub fn read_manifest(path: &Path) -> Outcome<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}
