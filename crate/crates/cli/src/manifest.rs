use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub coefficients: Vec<CoefficientEntry>,
    #[serde(default)]
    pub replicate_failures: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CoefficientEntry {
    pub name: String,
    pub file: String,
    pub lambda: f64,
    pub q95: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        Self {
            subcommand: subcommand.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: BTreeMap::new(),
            outputs: Vec::new(),
            coefficients: Vec::new(),
            replicate_failures: 0,
            wall_time_s: 0.0,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.into(), value.to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(mut self, dir: &Path, started: Instant) -> Result<PathBuf> {
        self.wall_time_s = started.elapsed().as_secs_f64();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| svyfosr::Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    }
}

/// File-name-safe form of a coefficient name.
pub fn file_stem(name: &str) -> String {
    if name == svyfosr::data::INTERCEPT {
        return "intercept".into();
    }
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        svyfosr::Error::Io {
            path: dir.display().to_string(),
            source: e,
        }
        .into()
    })
}

pub fn create_file(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| svyfosr::Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(std::io::BufWriter::new(f))
}

pub fn open_file(path: &Path) -> Result<std::io::BufReader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| svyfosr::Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(std::io::BufReader::new(f))
}

/// Runs `f` on a pool of `threads` workers, or the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .context("building thread pool")?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}
