use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed.txt";
pub const MANIFEST_HASH_FILE: &str = "manifest_hash.txt";
pub const HOST_FILE: &str = "host.txt";

/// One run's output directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

/// Host descriptor embedded next to latency numbers.
pub fn host_descriptor() -> String {
    format!(
        "os={} arch={} threads={} rayon_threads={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        rayon::current_num_threads()
    )
}

impl RunDir {
    /// Opens an existing run directory without writing anything.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "run directory missing")));
        }
        Ok(Self { root: root.to_path_buf() })
    }

    /// Creates the directory and echoes the effective config and seed.
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let dir = Self { root: root.to_path_buf() };
        dir.write_text(CONFIG_FILE, &cfg.to_toml())?;
        dir.write_text(SEED_FILE, &format!("{}\n", cfg.seed))?;
        dir.write_text(HOST_FILE, &format!("{}\n", host_descriptor()))?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn read_text(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }

    pub fn write_csv<S: Serialize>(&self, name: &str, rows: &[S]) -> Result<()> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Parse { path: p.clone(), detail: e.to_string() })?;
        for r in rows {
            w.serialize(r).map_err(|e| Error::Parse { path: p.clone(), detail: e.to_string() })?;
        }
        w.flush().map_err(|e| Error::io(&p, e))
    }

    pub fn read_csv<D: DeserializeOwned>(&self, name: &str) -> Result<Vec<D>> {
        let p = self.path(name);
        let mut r = csv::Reader::from_path(&p).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string())),
            _ => Error::Parse { path: p.clone(), detail: e.to_string() },
        })?;
        r.deserialize()
            .map(|row| row.map_err(|e| Error::Parse { path: p.clone(), detail: e.to_string() }))
            .collect()
    }
}
