//! Output directory bookkeeping and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use dcpanel::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct OutDir {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_sha256: String,
    dcpanel_version: &'a str,
    cli_version: &'a str,
    files: &'a [FileEntry],
    config: toml::Value,
}

impl OutDir {
    /// The directory itself is created on the first write, so a run that
    /// fails early leaves nothing behind.
    pub fn create(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Creates the directory and returns its path, for writers that place
    /// files there themselves.
    pub fn path(&self) -> Result<&Path> {
        self.ensure()?;
        Ok(&self.dir)
    }

    fn ensure(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::from(e).context(format!("creating {}", self.dir.display())))
    }

    /// Renders into memory, then writes `name` and records its digest.
    pub fn write(&mut self, name: &str, render: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.ensure()?;
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))?;
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Registers a file some other writer already placed in the directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Writes `manifest.toml` last; it lists every file written before it.
    pub fn finish(mut self, command: &str, seed: u64, canonical_config: &str) -> Result<()> {
        let config: toml::Value = toml::from_str(canonical_config)
            .map_err(|e| Error::InvalidConfig(format!("re-reading config: {e}")))?;
        self.ensure()?;
        let files = std::mem::take(&mut self.files);
        let manifest = Manifest {
            command,
            seed,
            config_sha256: sha256_hex(canonical_config.as_bytes()),
            dcpanel_version: dcpanel::VERSION,
            cli_version: env!("CARGO_PKG_VERSION"),
            files: &files,
            config,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::InvalidConfig(format!("manifest: {e}")))?;
        let path = self.dir.join("manifest.toml");
        fs::write(&path, text).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))?;
        Ok(())
    }
}
