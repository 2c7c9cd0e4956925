//! `manifest.txt`: the recorded command line, the resolved configuration and
//! a SHA-256 per artifact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

const MAGIC: &str = "overdilute-manifest 1";

pub struct Manifest {
    out: PathBuf,
    args: Vec<String>,
    config: Vec<(String, String)>,
    artifacts: Vec<String>,
}

impl Manifest {
    /// `argv` without the program name; `--out` is dropped so a rerun can
    /// target another directory.
    pub fn new(out: &Path, argv: &[String]) -> Self {
        let mut args = Vec::new();
        let mut it = argv.iter();
        while let Some(a) = it.next() {
            if a == "--out" {
                it.next();
            } else if !a.starts_with("--out=") {
                args.push(a.clone());
            }
        }
        Self {
            out: out.to_path_buf(),
            args,
            config: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn config(&mut self, k: impl Into<String>, v: impl ToString) {
        self.config.push((k.into(), v.to_string()));
    }

    pub fn config_all(&mut self, prefix: &str, kv: Vec<(String, String)>) {
        for (k, v) in kv {
            self.config.push((format!("{prefix}{k}"), v));
        }
    }

    /// Writes `bytes` to `out/rel` and records it.
    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(rel.to_string());
        Ok(())
    }

    /// Records a file already written under `out`.
    pub fn record(&mut self, rel: &str) {
        self.artifacts.push(rel.to_string());
    }

    pub fn finish(self) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{MAGIC}")?;
        for a in &self.args {
            writeln!(s, "arg={a}")?;
        }
        for (k, v) in &self.config {
            writeln!(s, "config.{k}={v}")?;
        }
        for rel in &self.artifacts {
            let bytes = fs::read(self.out.join(rel))
                .with_context(|| format!("artifact {rel} missing"))?;
            writeln!(s, "sha256.{rel}={}", hex(&Sha256::digest(&bytes)))?;
        }
        fs::write(self.out.join("manifest.txt"), s).context("writing manifest.txt")?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Recorded arguments of a manifest.
pub fn read_args(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        bail!("{} is not a manifest", path.display());
    }
    Ok(lines
        .filter_map(|l| l.strip_prefix("arg="))
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_is_not_recorded() {
        let argv: Vec<String> = ["train", "--out", "x", "--seeds=1", "--out=y"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let m = Manifest::new(Path::new("."), &argv);
        assert_eq!(m.args, vec!["train", "--seeds=1"]);
    }
}
