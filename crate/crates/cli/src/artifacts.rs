//! Output directory handling: refuse to clobber, stamp every artifact with
//! the config hash, and list them in a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const CONFIG_FILE: &str = "config.ini";
pub const MANIFEST_FILE: &str = "manifest.csv";

pub struct OutDir {
    dir: PathBuf,
    hash: String,
    written: Vec<(String, String)>,
}

impl OutDir {
    /// Fails before any work if one of `names` (or the config and manifest
    /// files) already exists and `force` is off.
    pub fn create(dir: &Path, names: &[String], force: bool, hash: &str) -> Result<Self, CliError> {
        if !force {
            let clash: Vec<String> = names
                .iter()
                .map(String::as_str)
                .chain([CONFIG_FILE, MANIFEST_FILE])
                .filter(|n| dir.join(n).exists())
                .map(|n| dir.join(n).display().to_string())
                .collect();
            if !clash.is_empty() {
                return Err(CliError::Exists(clash.join(", ")));
            }
        }
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash: hash.to_string(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        let digest: String = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
        self.written.push((name.to_string(), digest));
        Ok(())
    }

    /// Text artifacts carry the hash in a leading comment line.
    pub fn write_text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let text = format!("# config_hash={}\n{body}", self.hash);
        self.write(name, text.as_bytes())
    }

    /// Writes the resolved config and the manifest of everything written.
    pub fn finish(mut self, config: &RunConfig) -> Result<PathBuf, CliError> {
        let ini = config.to_ini();
        self.write(CONFIG_FILE, ini.as_bytes())?;
        let mut manifest = String::from("file,sha256,config_hash\n");
        for (name, digest) in &self.written {
            manifest.push_str(&format!("{name},{digest},{}\n", self.hash));
        }
        let path = self.path(MANIFEST_FILE);
        fs::write(&path, manifest).map_err(|e| CliError::io(&path, e))?;
        Ok(self.dir)
    }
}
