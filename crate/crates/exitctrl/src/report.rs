//! Run manifests, deterministic artifact writing, and report merging.
//!
//! Summaries are byte-stable for fixed configs and seeds: JSON maps are
//! key-sorted, numbers use shortest round-trip form, and wall-clock data
//! goes to a separate metadata file that is excluded from comparisons.

use crate::error::{Error, Result};
use crate::verify::CheckReport;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Provenance record of one CLI run. Wall-clock timings live in the
/// companion `run_meta.json` so the manifest itself stays byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 over the resolved input document stored next to the
    /// manifest; recomputing over that file must reproduce this digest.
    pub config_digest: String,
    pub master_seed: u64,
    /// Artifact paths (relative to the run directory) written by the run.
    pub artifacts: Vec<String>,
    pub version: String,
    /// Name of the metadata file carrying timings and timestamps.
    pub meta_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMeta {
    /// Wall-clock per stage, milliseconds.
    pub wall_clock_ms: BTreeMap<String, u64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes a value as pretty, key-sorted JSON (serde_json maps are ordered,
/// so output is deterministic).
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Builder collecting artifacts and stage timings for one run directory.
pub struct RunWriter {
    pub dir: PathBuf,
    command: String,
    master_seed: u64,
    artifacts: Vec<String>,
    meta: RunMeta,
    config_digest: String,
}

impl RunWriter {
    /// Creates the run directory and stores the resolved config document
    /// (the digest input).
    pub fn create(dir: &Path, command: &str, resolved_config: &str, master_seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let config_path = dir.join("config_resolved.json");
        std::fs::write(&config_path, resolved_config)?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            master_seed,
            artifacts: vec!["config_resolved.json".into()],
            meta: RunMeta::default(),
            config_digest: sha256_hex(resolved_config.as_bytes()),
        })
    }

    pub fn add_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        write_json(&self.dir.join(name), value)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    pub fn add_text(&mut self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), text)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    pub fn record_stage(&mut self, stage: &str, elapsed: std::time::Duration) {
        self.meta
            .wall_clock_ms
            .insert(stage.to_string(), elapsed.as_millis() as u64);
    }

    /// Writes `manifest.json` and `run_meta.json`; all listed artifacts must
    /// exist.
    pub fn finish(mut self) -> Result<RunManifest> {
        write_json(&self.dir.join("run_meta.json"), &self.meta)?;
        self.artifacts.push("run_meta.json".into());
        let manifest = RunManifest {
            command: self.command,
            config_digest: self.config_digest,
            master_seed: self.master_seed,
            artifacts: self.artifacts,
            version: env!("CARGO_PKG_VERSION").to_string(),
            meta_file: "run_meta.json".into(),
        };
        for artifact in &manifest.artifacts {
            if !self.dir.join(artifact).exists() {
                return Err(Error::Config(format!(
                    "artifact {artifact} listed but missing"
                )));
            }
        }
        write_json(&self.dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }
}

/// Renders check reports as a fixed-width text table.
pub fn report_table(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:<14} {:>12} {}\n",
        "check", "status", "tolerance", "narrative"
    ));
    out.push_str(&"-".repeat(96));
    out.push('\n');
    for r in reports {
        let status = match &r.status {
            crate::verify::CheckStatus::Pass => "pass".to_string(),
            crate::verify::CheckStatus::Fail { margin } => format!("FAIL({margin:.2e})"),
            crate::verify::CheckStatus::Skipped { .. } => "skipped".to_string(),
        };
        out.push_str(&format!(
            "{:<28} {:<14} {:>12.3e} {}\n",
            r.name, status, r.tolerance, r.narrative
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergedEntry {
    pub run_dir: String,
    pub manifest: RunManifest,
    /// Flagged when another run with the same digest was already merged.
    pub duplicate_of: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reports: Option<Vec<CheckReport>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergedReport {
    pub entries: Vec<MergedEntry>,
}

/// Merges every run manifest found under `dir` (direct children) into one
/// report, deduplicating runs with identical config digests, and emits
/// plot-ready CSV tables for the checks that carry them. Idempotent.
pub fn emit_report(dir: &Path) -> Result<MergedReport> {
    let mut run_dirs: Vec<PathBuf> = Vec::new();
    if dir.join("manifest.json").exists() {
        run_dirs.push(dir.to_path_buf());
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("manifest.json").exists())
        .collect();
    children.sort();
    run_dirs.extend(children);
    if run_dirs.is_empty() {
        return Err(Error::Config(format!(
            "no manifest.json found under {}",
            dir.display()
        )));
    }

    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    let mut entries = Vec::new();
    for run in &run_dirs {
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json"))?)?;
        let reports: Option<Vec<CheckReport>> = std::fs::read_to_string(run.join("report.json"))
            .ok()
            .and_then(|text| serde_json::from_str(&text).ok());
        let run_name = run
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| run.display().to_string());
        let duplicate_of = seen.get(&manifest.config_digest).cloned();
        if duplicate_of.is_none() {
            seen.insert(manifest.config_digest.clone(), run_name.clone());
        }
        entries.push(MergedEntry {
            run_dir: run_name,
            manifest,
            duplicate_of,
            reports,
        });
    }

    let merged = MergedReport { entries };
    write_json(&dir.join("merged_report.json"), &merged)?;

    // Plot-ready tables from the expansion-chain and Hoelder checks.
    let mut chain_csv = String::from("epsilon,gap12,gap34,stderr12,stderr34\n");
    let mut holder_csv = String::from("separation,mean_abs_du\n");
    let mut have_chain = false;
    let mut have_holder = false;
    for entry in &merged.entries {
        if entry.duplicate_of.is_some() {
            continue;
        }
        let Some(reports) = &entry.reports else {
            continue;
        };
        for r in reports {
            if r.name == "expansion-chain" {
                if let Some(rows) = r.measured.get("per_epsilon").and_then(|v| v.as_array()) {
                    for row in rows {
                        chain_csv.push_str(&format!(
                            "{},{},{},{},{}\n",
                            row["epsilon"], row["gap12"], row["gap34"],
                            row["gap12_stderr"], row["y3_stderr"],
                        ));
                        have_chain = true;
                    }
                }
            }
            if r.name == "holder" {
                if let Some(rows) = r.measured.get("table").and_then(|v| v.as_array()) {
                    for row in rows {
                        holder_csv.push_str(&format!(
                            "{},{}\n",
                            row["separation"], row["mean_abs_du"]
                        ));
                        have_holder = true;
                    }
                }
            }
        }
    }
    if have_chain {
        std::fs::write(dir.join("chain_gaps.csv"), chain_csv)?;
    }
    if have_holder {
        std::fs::write(dir.join("holder_pairs.csv"), holder_csv)?;
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = sha256_hex(b"hello");
        let b = sha256_hex(b"hello");
        let c = sha256_hex(b"hello!");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn manifest_round_trips_and_links_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut writer =
            RunWriter::create(dir.path(), "hjb", "{\"problem\": \"poisson1d\"}", 42).unwrap();
        writer.add_text("field.csv", "x,u\n0,0.5\n").unwrap();
        writer.record_stage("solve", std::time::Duration::from_millis(7));
        let manifest = writer.finish().unwrap();
        assert!(manifest.artifacts.contains(&"field.csv".to_string()));
        let back: RunManifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(back, manifest);
        // Digest recomputation over the stored input matches.
        let stored = std::fs::read(dir.path().join("config_resolved.json")).unwrap();
        assert_eq!(sha256_hex(&stored), back.config_digest);
    }

    #[test]
    fn merge_deduplicates_identical_digests() {
        let root = tempfile::tempdir().unwrap();
        for name in ["run1", "run2"] {
            let sub = root.path().join(name);
            let writer = RunWriter::create(&sub, "verify", "{\"same\": true}", 1).unwrap();
            writer.finish().unwrap();
        }
        let merged = emit_report(root.path()).unwrap();
        assert_eq!(merged.entries.len(), 2);
        assert!(merged.entries[0].duplicate_of.is_none());
        assert_eq!(merged.entries[1].duplicate_of.as_deref(), Some("run1"));
        // Idempotent: a second merge sees the same runs (merged_report.json
        // itself is not a run directory).
        let again = emit_report(root.path()).unwrap();
        assert_eq!(again.entries.len(), 2);
    }

    #[test]
    fn merge_requires_at_least_one_manifest() {
        let empty = tempfile::tempdir().unwrap();
        assert!(emit_report(empty.path()).is_err());
    }

    #[test]
    fn chain_reports_emit_plot_table() {
        let root = tempfile::tempdir().unwrap();
        let sub = root.path().join("chain-run");
        let mut writer = RunWriter::create(&sub, "verify", "{}", 9).unwrap();
        let report = serde_json::json!([{
            "name": "expansion-chain",
            "status": { "status": "pass" },
            "measured": { "per_epsilon": [
                { "epsilon": 0.2, "gap12": 0.07, "gap34": 0.15,
                  "gap12_stderr": 1e-3, "y3_stderr": 4e-4 },
                { "epsilon": 0.1, "gap12": 0.02, "gap34": 0.04,
                  "gap12_stderr": 5e-4, "y3_stderr": 2e-4 }
            ]},
            "tolerance": 1.4,
            "sample_sizes": [1000],
            "seeds": [9],
            "narrative": "synthetic"
        }]);
        writer.add_json("report.json", &report).unwrap();
        writer.finish().unwrap();
        emit_report(root.path()).unwrap();
        let csv = std::fs::read_to_string(root.path().join("chain_gaps.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epsilon,gap12,gap34,stderr12,stderr34"
        );
        assert_eq!(lines.count(), 2);
    }
}
