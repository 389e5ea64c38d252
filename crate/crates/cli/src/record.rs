//! Persisted experiment results: named checks, a metric map, and a content
//! digest that makes reproducibility verifiable by hash comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckKind {
    /// pass iff value <= threshold
    AtMost,
    /// pass iff value >= threshold
    AtLeast,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub kind: CheckKind,
    pub pass: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub version: u32,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    /// Digest over scenario, seed, metrics (exact bits) and check outcomes;
    /// wall time and artifact paths are excluded.
    pub metrics_digest: String,
    pub wall_ms: u64,
    pub artifacts: Vec<String>,
}

impl RunRecord {
    pub fn new(scenario: &str, version: u32, seed: u64) -> Self {
        RunRecord {
            scenario: scenario.to_string(),
            version,
            seed,
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            metrics_digest: String::new(),
            wall_ms: 0,
            artifacts: Vec::new(),
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn check_at_most(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        let pass = value <= threshold;
        self.checks.push(Check {
            name: name.to_string(),
            value,
            threshold,
            kind: CheckKind::AtMost,
            pass,
        });
        self.metrics.insert(name.to_string(), value);
        pass
    }

    pub fn check_at_least(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        let pass = value >= threshold;
        self.checks.push(Check {
            name: name.to_string(),
            value,
            threshold,
            kind: CheckKind::AtLeast,
            pass,
        });
        self.metrics.insert(name.to_string(), value);
        pass
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.pass)
    }

    /// Canonical digest: metric values hashed by exact bit pattern.
    pub fn seal(&mut self) {
        let mut hasher = Sha256::new();
        hasher.update(self.scenario.as_bytes());
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.version.to_le_bytes());
        for (k, v) in &self.metrics {
            hasher.update(k.as_bytes());
            hasher.update(v.to_bits().to_le_bytes());
        }
        for c in &self.checks {
            hasher.update(c.name.as_bytes());
            hasher.update([c.pass as u8]);
        }
        self.metrics_digest = hex_digest(hasher);
    }

    pub fn result_line(&self) -> String {
        format!(
            "RESULT {} {} {}",
            self.scenario,
            if self.all_pass() { "PASS" } else { "FAIL" },
            self.checks.len()
        )
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.scenario));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self).expect("serializable"))?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> std::io::Result<RunRecord> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes CSV content atomically (write-then-rename).
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_metric_bits() {
        let mut a = RunRecord::new("demo", 1, 7);
        a.metric("x", 0.1 + 0.2);
        a.seal();
        let mut b = RunRecord::new("demo", 1, 7);
        b.metric("x", 0.3);
        b.seal();
        assert_ne!(a.metrics_digest, b.metrics_digest); // 0.1 + 0.2 != 0.3 in bits
        let mut c = RunRecord::new("demo", 1, 7);
        c.metric("x", 0.1 + 0.2);
        c.seal();
        assert_eq!(a.metrics_digest, c.metrics_digest);
    }

    #[test]
    fn checks_drive_pass_and_result_line() {
        let mut r = RunRecord::new("demo", 1, 0);
        assert!(r.check_at_most("small", 1e-12, 1e-10));
        assert!(!r.check_at_least("big", 0.5, 0.9));
        assert!(!r.all_pass());
        assert_eq!(r.first_failure().unwrap().name, "big");
        assert_eq!(r.result_line(), "RESULT demo FAIL 2");
    }
}
