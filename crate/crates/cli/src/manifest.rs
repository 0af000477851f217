//! Run manifests: enough to re-run a command and check its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const BUILD_ID: &str = env!("CFSCM_BUILD_ID");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub build: String,
    pub command: String,
    pub seed: Option<u64>,
    /// Arguments after the program name, verbatim.
    pub argv: Vec<String>,
    /// Directory relative paths in `argv` resolve against.
    pub cwd: PathBuf,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputHash>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// `dir/stem.ext` next to `path`.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

impl Manifest {
    pub fn path_for(primary: &Path) -> PathBuf {
        sibling(primary, "manifest.json")
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Outputs whose current contents differ from the recorded hash.
    pub fn mismatches(&self) -> CliResult<Vec<PathBuf>> {
        let mut bad = Vec::new();
        for o in &self.outputs {
            let p = if o.path.is_absolute() { o.path.clone() } else { self.cwd.join(&o.path) };
            if !p.exists() || sha256_file(&p)? != o.sha256 {
                bad.push(o.path.clone());
            }
        }
        Ok(bad)
    }
}
