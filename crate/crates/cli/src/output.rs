//! Artifact writing. Every CSV starts with one `#` comment line recording
//! the tool version, the spec hash and the seed; numbers are printed in
//! shortest round-trip form so identical results give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::RunError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance stamped on every artifact.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub spec_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn comment(&self) -> String {
        format!("# hel {VERSION} spec_sha256={} seed={}\n", self.spec_hash, self.seed)
    }
}

/// Writes artifacts into one directory and remembers what it wrote.
pub struct Artifacts {
    dir: PathBuf,
    stamp: Stamp,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path, stamp: Stamp) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
        Ok(Artifacts { dir: dir.to_path_buf(), stamp, written: Vec::new() })
    }

    pub fn stamp(&self) -> &Stamp {
        &self.stamp
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| RunError::io(&p, e))?;
        self.written.push(p);
        Ok(())
    }

    /// Writes a CSV table under the provenance comment.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
        let mut buf = self.stamp.comment().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let io = |e: csv::Error| RunError::Message(format!("{name}: {e}"));
            w.write_record(header).map_err(io)?;
            for r in rows {
                w.write_record(r).map_err(io)?;
            }
            w.flush().map_err(|e| RunError::Message(format!("{name}: {e}")))?;
        }
        self.put(name, &buf)
    }

    /// Writes raw bytes that already carry their own provenance.
    pub fn raw(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        self.put(name, bytes)
    }

    /// Pretty JSON with `hel_version`, `spec_sha256` and `seed` fields
    /// alongside `body`.
    pub fn json(&mut self, name: &str, body: serde_json::Value) -> Result<(), RunError> {
        let v = serde_json::json!({
            "hel_version": VERSION,
            "spec_sha256": self.stamp.spec_hash,
            "seed": self.stamp.seed,
            "body": body,
        });
        let mut s = serde_json::to_string_pretty(&v).map_err(|e| RunError::Message(e.to_string()))?;
        s.push('\n');
        self.put(name, s.as_bytes())
    }
}

/// Shortest round-trip form; exponent notation for very small or very large
/// magnitudes.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// `***` at p < .01, `**` at p < .05, `*` at p < .1.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Left-aligned first column, right-aligned others.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let n = header.len();
    let mut w: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(n) {
            w[i] = w[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = w[i] - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&"-".repeat(w.iter().sum::<usize>() + 2 * (n - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

/// Four significant decimals for console tables.
pub fn short(x: f64) -> String {
    format!("{x:.4}")
}
