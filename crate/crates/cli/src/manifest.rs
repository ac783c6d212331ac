//! `run.json`: what was run, on which inputs, with which seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub env: Vec<(String, String)>,
    pub inputs: Vec<InputHash>,
    /// Hash over the config bytes and every input hash.
    pub input_hash: String,
    pub output: PathBuf,
    pub version: String,
}

/// `sha256("blob <len>\0" || bytes)`, git's object framing.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Path>, config_bytes: &[u8], seed: u64, env: Vec<(String, String)>) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: config.map(Path::to_path_buf),
            seed,
            env,
            inputs: Vec::new(),
            input_hash: blob_hash(config_bytes),
            output: PathBuf::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn rehash(&mut self, config_hash: &str) {
        let mut tree = format!("config {config_hash}\n");
        for i in &self.inputs {
            tree.push_str(&format!("{} {}\n", i.hash, i.path.display()));
        }
        self.input_hash = blob_hash(tree.as_bytes());
    }

    pub fn add_inputs(&mut self, config_bytes: &[u8], paths: &[&Path]) -> CliResult<()> {
        for p in paths {
            let bytes = std::fs::read(p).map_err(|e| crate::error::CliError::data(format!("{}: {e}", p.display())))?;
            self.inputs.push(InputHash {
                path: p.to_path_buf(),
                hash: blob_hash(&bytes),
            });
        }
        self.rehash(&blob_hash(config_bytes));
        Ok(())
    }

    pub fn write(&mut self, output: &Path, to: &Path) -> CliResult<()> {
        self.output = output.to_path_buf();
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(to, s)?;
        Ok(())
    }
}
