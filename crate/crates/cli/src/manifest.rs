use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Everything needed to reproduce one command invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub exit: String,
}

pub struct ManifestBuilder {
    m: RunManifest,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            m: RunManifest {
                command: command.into(),
                argv: std::env::args().collect(),
                config: serde_json::Value::Null,
                seed: None,
                code_version: code_version(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
                wall_clock_seconds: 0.0,
                exit: String::new(),
            },
            start: Instant::now(),
        }
    }

    pub fn config(&mut self, c: impl Serialize) {
        self.m.config = serde_json::to_value(c).unwrap_or(serde_json::Value::Null);
    }

    pub fn seed(&mut self, s: u64) {
        self.m.seed = Some(s);
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let d = digest_path(path).with_context(|| format!("hashing {}", path.display()))?;
        self.m.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.m.outputs.push(path.into());
    }

    pub fn finish(mut self, dir: &Path, exit: &str) -> anyhow::Result<PathBuf> {
        self.m.wall_clock_seconds = self.start.elapsed().as_secs_f64();
        self.m.exit = exit.into();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&self.m)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the running executable, so a manifest pins the exact build.
fn code_version() -> String {
    let exe = std::env::current_exe().ok().and_then(|p| fs::read(p).ok());
    match exe {
        Some(bytes) => format!("{}+sha256:{}", env!("CARGO_PKG_VERSION"), hex(&Sha256::digest(&bytes))),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// SHA-256 of a file, or of every file under a directory in path order
/// (relative names included).
pub fn digest_path(path: &Path) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            h.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
            hash_file(&f, &mut h)?;
        }
    } else {
        hash_file(path, &mut h)?;
    }
    Ok(hex(&h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn hash_file(path: &Path, h: &mut Sha256) -> anyhow::Result<()> {
    let mut f = fs::File::open(path)?;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        h.update(&buf[..n]);
    }
}
