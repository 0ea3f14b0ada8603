//! Dual-format reports (aligned text table plus TSV columns) and the run
//! manifest written into every output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::formats::{sha256_hex, TOKENIZER_FORMAT_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUT_ENV: &str = "SPLITTRACK_OUT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    pub rows: Vec<(String, String)>,
}

impl Report {
    pub fn new(title: &str) -> Self {
        Self {
            title: title.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.rows.push((key.into(), value.to_string()));
    }

    pub fn push_opt(&mut self, key: &str, value: Option<f64>) {
        self.push(key, value.map_or_else(|| "NA".to_string(), fmt_f));
    }

    pub fn render(&self) -> String {
        let w = self.rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = format!("{}\n{}\n", self.title, "=".repeat(self.title.len()));
        for (k, v) in &self.rows {
            let _ = writeln!(s, "{k:<w$}  {v}");
        }
        s
    }
}

pub fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

/// Plot-ready columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Columns {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Columns {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t") + "\n";
        for r in &self.rows {
            s += &r.join("\t");
            s.push('\n');
        }
        s
    }
}

/// Writes the table to `path` and the columns beside it as `.tsv`.
pub fn write_report(path: &Path, report: &Report, columns: Option<&Columns>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, report.render())?;
    if let Some(c) = columns {
        std::fs::write(path.with_extension("tsv"), c.to_tsv())?;
    }
    Ok(())
}

/// Output directory: `--out` if given, else `$SPLITTRACK_OUT/<command>`,
/// else `runs/<command>`.
pub fn output_dir(flag: Option<&Path>, command: &str) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    }
}

pub fn format_versions() -> BTreeMap<String, u32> {
    BTreeMap::from([
        ("checkpoint".to_string(), splittrack_core::model::CHECKPOINT_FORMAT_VERSION),
        ("tokenizer".to_string(), TOKENIZER_FORMAT_VERSION),
        ("registry".to_string(), crate::formats::REGISTRY_FORMAT_VERSION),
        ("pathways".to_string(), crate::formats::PATHWAY_FORMAT_VERSION),
    ])
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_digest: String,
    pub corpus_digest: Option<String>,
    pub seed: u64,
    pub artifact_version: String,
    pub formats: BTreeMap<String, u32>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Digest over every field above except the timestamps.
    pub run_digest: String,
}

impl RunManifest {
    pub fn start(command: &[String], config_canonical: &str, seed: u64) -> Self {
        let mut m = Self {
            command: command.to_vec(),
            config_digest: sha256_hex(config_canonical.as_bytes()),
            corpus_digest: None,
            seed,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            formats: format_versions(),
            started_unix: now(),
            finished_unix: 0,
            run_digest: String::new(),
        };
        m.refresh_digest();
        m
    }

    pub fn with_corpus(mut self, digest: String) -> Self {
        self.corpus_digest = Some(digest);
        self.refresh_digest();
        self
    }

    fn refresh_digest(&mut self) {
        let key = serde_json::json!({
            "command": self.command,
            "config": self.config_digest,
            "corpus": self.corpus_digest,
            "seed": self.seed,
            "version": self.artifact_version,
            "formats": self.formats,
        });
        self.run_digest = sha256_hex(key.to_string().as_bytes());
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`,
    /// replacing any earlier manifest there.
    pub fn finish(mut self, dir: &Path) -> anyhow::Result<Self> {
        self.finished_unix = now();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_and_columns() {
        let mut r = Report::new("t");
        r.push("a", 1);
        r.push("long_key", "x");
        assert_eq!(r.render(), "t\n=\na         1\nlong_key  x\n");
        let mut c = Columns::new(&["x", "y"]);
        c.push(vec!["1".into(), "2".into()]);
        assert_eq!(c.to_tsv(), "x\ty\n1\t2\n");
    }

    #[test]
    fn manifest_digest_ignores_time() {
        let argv = vec!["splittrack".to_string(), "inspect".to_string()];
        let a = RunManifest::start(&argv, "cfg", 3);
        let mut b = RunManifest::start(&argv, "cfg", 3);
        b.started_unix += 10;
        assert_eq!(a.run_digest, b.run_digest);
        assert_ne!(a.run_digest, RunManifest::start(&argv, "cfg", 4).run_digest);
    }
}
