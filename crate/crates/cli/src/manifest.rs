//! Run manifests: what a command was run with and the SHA-256 of everything it read and
//! wrote, stored as `manifests/<command>.txt` in the work directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileRecord {
    /// Path relative to the work directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub threads: usize,
    pub config: Vec<(String, String)>,
    pub seeds: Vec<(String, String)>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub timings: Vec<(String, f64)>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Files of an artifact: `stem` itself and every `stem.<ext>` sibling, sorted.
pub fn artifact_files(dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let prefix = format!("{stem}.");
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_file() && (name == stem || name.starts_with(&prefix)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn relative(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).to_string_lossy().into_owned()
}

impl RunManifest {
    pub fn new(command: &str, cfg: &Config, threads: usize) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
            config: cfg.snapshot(),
            seeds: cfg.seeds(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn record_input(&mut self, dir: &Path, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord { path: relative(dir, path), sha256: sha256_file(path)? });
        Ok(())
    }

    pub fn record_output(&mut self, dir: &Path, path: &Path) -> Result<()> {
        self.outputs.push(FileRecord { path: relative(dir, path), sha256: sha256_file(path)? });
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command {}", self.command);
        let _ = writeln!(s, "version {}", self.version);
        let _ = writeln!(s, "threads {}", self.threads);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config {k}={v}");
        }
        for (k, v) in &self.seeds {
            let _ = writeln!(s, "seed {k}={v}");
        }
        for f in &self.inputs {
            let _ = writeln!(s, "input {} {}", f.sha256, f.path);
        }
        for f in &self.outputs {
            let _ = writeln!(s, "output {} {}", f.sha256, f.path);
        }
        for (label, secs) in &self.timings {
            let _ = writeln!(s, "time {label} {secs:.3}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest {
            command: String::new(),
            version: String::new(),
            threads: 1,
            config: Vec::new(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            let pair = || rest.split_once('=').map(|(k, v)| (k.to_string(), v.to_string()));
            let file = || {
                rest.split_once(' ').map(|(h, p)| FileRecord { path: p.to_string(), sha256: h.to_string() })
            };
            match tag {
                "command" => m.command = rest.to_string(),
                "version" => m.version = rest.to_string(),
                "threads" => m.threads = rest.parse().context("bad threads line")?,
                "config" => m.config.extend(pair()),
                "seed" => m.seeds.extend(pair()),
                "input" => m.inputs.extend(file()),
                "output" => m.outputs.extend(file()),
                "time" => {
                    if let Some((label, secs)) = rest.rsplit_once(' ') {
                        m.timings.push((label.to_string(), secs.parse().unwrap_or(f64::NAN)));
                    }
                }
                other => bail!("unknown manifest line {other:?}"),
            }
        }
        if m.command.is_empty() {
            bail!("manifest has no command line");
        }
        Ok(m)
    }

    pub fn path(dir: &Path, command: &str) -> PathBuf {
        dir.join(MANIFEST_DIR).join(format!("{command}.txt"))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = RunManifest::path(dir, &self.command);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        fs::write(&path, self.to_text())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunManifest::parse(&fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?)
    }
}

/// Refuses to consume `files` when the manifest that produced them disagrees with what is
/// on disk: either the files were changed afterwards, or the producer's own inputs were.
/// Files no manifest claims are taken as external inputs.
pub fn check_fresh(dir: &Path, files: &[PathBuf]) -> Result<()> {
    let mdir = dir.join(MANIFEST_DIR);
    if !mdir.is_dir() {
        return Ok(());
    }
    let wanted: Vec<String> = files.iter().map(|f| relative(dir, f)).collect();
    let mut paths: Vec<PathBuf> = fs::read_dir(&mdir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for mpath in paths {
        let m = RunManifest::load(&mpath)?;
        if m.command == "pipeline" || !m.outputs.iter().any(|o| wanted.contains(&o.path)) {
            continue;
        }
        for rec in m.outputs.iter().chain(&m.inputs) {
            let p = dir.join(&rec.path);
            if !p.exists() {
                if wanted.contains(&rec.path) {
                    bail!("missing artifact {}", rec.path);
                }
                continue;
            }
            if sha256_file(&p)? != rec.sha256 {
                bail!(
                    "stale artifact {}: its content no longer matches the hash recorded by `{}` ({})",
                    rec.path,
                    m.command,
                    relative(dir, &mpath)
                );
            }
        }
    }
    Ok(())
}
