//! Plain-text `key=value` configuration, one namespace per pipeline stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Keys whose values are secret and never copied into manifests.
pub const SECRET_KEYS: &[&str] = &["trigger.key_seed"];

const DEFAULTS: &[(&str, &str)] = &[
    ("data.source", "synthetic"),
    ("data.path", ""),
    ("data.seed", "1"),
    ("data.classes", "3"),
    ("data.per_class", "400"),
    ("data.height", "32"),
    ("data.width", "32"),
    ("data.channels", "1"),
    ("nn.arch", "tinycnn"),
    ("nn.seed", "1"),
    ("train.lr", "0.01"),
    ("train.momentum", "0.9"),
    ("train.batch", "512"),
    ("train.seed", "1"),
    ("train.clip", "0"),
    ("train.augment", "false"),
    ("train.baseline_epochs", "30"),
    ("train.marked_epochs", "30"),
    ("heatmap.samples_per_freq", "256"),
    ("heatmap.lambda_lo", "-1"),
    ("heatmap.lambda_hi", "1"),
    ("heatmap.seed", "1"),
    ("cluster.rho", "0.65"),
    ("cluster.seed", "1"),
    ("cluster.max_iters", "100"),
    ("cluster.tol", "1e-9"),
    ("cluster.selection", "nearest"),
    ("trigger.q_t", "500"),
    ("trigger.partition_seed", "1"),
    ("trigger.key_seed", "43980"),
    ("trigger.lambda_lo", "-1"),
    ("trigger.lambda_hi", "1"),
    ("trigger.shared_channels", "false"),
    ("trigger.mirrored", "true"),
    ("trigger.strategy", "new-class"),
    ("verify.delta", "0.15"),
    (
        "eval.attacks",
        "finetune:epochs=10,fraction=0.5,seed=1;prune:rate=0.3;hflip;jpeg:qf=100;jpeg:qf=80;lowpass:B=4;lowpass:B=8;lowpass:B=mask",
    ),
];

// Desk-scale run on the synthetic textures.
const TOY: &[(&str, &str)] = &[
    ("trigger.q_t", "50"),
    ("train.batch", "64"),
    ("train.clip", "1"),
    ("train.augment", "true"),
    ("train.baseline_epochs", "60"),
    ("train.marked_epochs", "200"),
    ("heatmap.samples_per_freq", "60"),
    ("heatmap.lambda_lo", "-6"),
    ("heatmap.lambda_hi", "6"),
];

// Non-config lines of a run manifest.
const MANIFEST_TAGS: &[&str] = &["command", "version", "threads", "seed", "input", "output", "time"];

pub const PROFILES: &[&str] = &["default", "toy"];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn defaults() -> Self {
        Config { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    pub fn profile(name: &str) -> Result<Self> {
        let mut cfg = Config::defaults();
        match name {
            "default" => {}
            "toy" => {
                for (k, v) in TOY {
                    cfg.insert(k, v)?;
                }
            }
            other => bail!("unknown profile {other:?} (expected one of {})", PROFILES.join(", ")),
        }
        Ok(cfg)
    }

    fn insert(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => bail!("unknown config key {key:?}"),
        }
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
        self.insert(k.trim(), v.trim())
    }

    /// Merges a config file. Blank lines and `#` comments are skipped; `config key=value`
    /// lines from a run manifest are accepted too, so a manifest can be replayed. Redacted
    /// secrets are left untouched.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let line = match line.split_once(' ') {
                Some(("config", rest)) => rest,
                Some((tag, _)) if MANIFEST_TAGS.contains(&tag) => continue,
                _ => line,
            };
            if line.ends_with("=<redacted>") {
                continue;
            }
            self.set(line).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| anyhow!("unknown config key {key:?}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse().map_err(|e| anyhow!("config {key}={raw:?}: {e}"))
    }

    /// All keys in order, secrets replaced by `<redacted>`.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .map(|(k, v)| {
                let v = if SECRET_KEYS.contains(&k.as_str()) { "<redacted>".to_string() } else { v.clone() };
                (k.clone(), v)
            })
            .collect()
    }

    /// Every `*.seed` / `*_seed` entry, secrets excluded.
    pub fn seeds(&self) -> Vec<(String, String)> {
        self.snapshot().into_iter().filter(|(k, v)| (k.ends_with(".seed") || k.ends_with("_seed")) && v != "<redacted>").collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
