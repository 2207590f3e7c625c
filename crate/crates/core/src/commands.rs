//! The operations behind the `leakbench` binary, callable as a library.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, read_manifest, write_manifest, GroupedDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::features::{read_features, write_features, FeatureSet};
use crate::io::{read_json, write_atomic, write_json};
use crate::pipeline::{degraded_split_experiment, run_matrix, DegradedConfig, EvalReport, ProtocolConfig};
use crate::split::{
    audit_plan, make_kfold_plans, split_clean_frame_sample, split_holdout_by_group, split_leaky_frame_pool,
    AuditReport, Ratio, SplitPlan,
};
use crate::{report, seed};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FEATURES_FILE: &str = "features.lbfs";
pub const REPORT_FILE: &str = "report.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Files { manifest: PathBuf, features: PathBuf },
}

/// A full run: data, a list of protocol cells and optional degraded-split
/// experiments. `base_seed` and `replicates` override every cell's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub data: DataSource,
    #[serde(default)]
    pub base_seed: Option<u64>,
    #[serde(default)]
    pub replicates: Option<usize>,
    #[serde(default)]
    pub cells: Vec<ProtocolConfig>,
    #[serde(default)]
    pub degraded: Option<DegradedConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_path: String,
    pub out_dir: String,
    pub base_seed: u64,
    /// Cell tag to the `(replicate, cell seed, split seed)` triples it used.
    pub seeds: BTreeMap<String, Vec<(usize, u64, u64)>>,
    pub files: Vec<FileDigest>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads or generates the data a config names. Relative paths are taken
/// from the config file's directory.
pub fn load_data(source: &DataSource, config_dir: &Path) -> Result<(GroupedDataset, FeatureSet)> {
    match source {
        DataSource::Synthetic(cfg) => generate_synthetic(cfg),
        DataSource::Files { manifest, features } => Ok((
            read_manifest(&resolve(config_dir, manifest))?,
            read_features(&resolve(config_dir, features))?,
        )),
    }
}

/// Reads the manifest and features written by [`generate`] from `dir`.
pub fn load_data_dir(dir: &Path) -> Result<(GroupedDataset, FeatureSet)> {
    Ok((
        read_manifest(&dir.join(MANIFEST_FILE))?,
        read_features(&dir.join(FEATURES_FILE))?,
    ))
}

fn file_digests(out: &Path, names: &[&str]) -> Result<Vec<FileDigest>> {
    names
        .iter()
        .map(|name| {
            Ok(FileDigest {
                path: (*name).into(),
                sha256: sha256_file(&out.join(name))?,
            })
        })
        .collect()
}

/// Generates a synthetic dataset into `out`, with a run manifest recording
/// the seed and file digests. Returns the written paths.
pub fn generate(config: &SynthConfig, config_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (dataset, features) = generate_synthetic(config)?;
    write_manifest(&dataset, &out.join(MANIFEST_FILE))?;
    write_features(&features, &out.join(FEATURES_FILE))?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_path: config_path.display().to_string(),
        out_dir: out.display().to_string(),
        base_seed: config.seed,
        seeds: BTreeMap::new(),
        files: file_digests(out, &[MANIFEST_FILE, FEATURES_FILE])?,
    };
    write_json(&out.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok([MANIFEST_FILE, FEATURES_FILE, RUN_MANIFEST_FILE].iter().map(|n| out.join(n)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitConfig {
    Holdout {
        test_fraction: f64,
        trainval: Ratio,
    },
    LeakyFramePool {
        test_fraction: f64,
        frame_fraction: f64,
        train_val: Ratio,
    },
    CleanFrameSample {
        test_fraction: f64,
        frame_fraction: f64,
        train_val: Ratio,
    },
    /// Writes fold 0 of the first replicate.
    Kfold { k: usize, grouped: bool },
}

pub fn make_split(dataset: &GroupedDataset, config: &SplitConfig, seed_: u64) -> Result<SplitPlan> {
    match *config {
        SplitConfig::Holdout { test_fraction, trainval } => split_holdout_by_group(dataset, test_fraction, trainval, seed_),
        SplitConfig::LeakyFramePool {
            test_fraction,
            frame_fraction,
            train_val,
        } => split_leaky_frame_pool(dataset, test_fraction, frame_fraction, train_val, seed_),
        SplitConfig::CleanFrameSample {
            test_fraction,
            frame_fraction,
            train_val,
        } => split_clean_frame_sample(dataset, test_fraction, frame_fraction, train_val, seed_),
        SplitConfig::Kfold { k, grouped } => Ok(make_kfold_plans(dataset, k, 1, grouped, seed_)?.remove(0)),
    }
}

pub fn audit(dataset: &GroupedDataset, plan: &SplitPlan, finetune_plan: Option<&SplitPlan>) -> Result<AuditReport> {
    let ft = finetune_plan
        .map(|p| p.aligned(dataset).map(|labels| crate::split::trained_groups(dataset, &labels)))
        .transpose()?;
    audit_plan(plan, dataset, ft.as_ref())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(seed::digest_hex(&bytes))
}

/// Serialized reports. Byte-identical across runs with the same config.
pub fn report_bytes(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(reports)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Runs every cell (and the degraded experiments) and writes `report.json`
/// and `run_manifest.json` into `out`.
pub fn run(
    config: &MatrixConfig,
    config_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
    jobs: Option<usize>,
) -> Result<Vec<EvalReport>> {
    let config_dir = config_path.parent().unwrap_or(Path::new("."));
    let (dataset, raw) = load_data(&config.data, config_dir)?;
    let base_seed = seed_override.or(config.base_seed);
    let mut cells = config.cells.clone();
    for cell in &mut cells {
        if let Some(s) = base_seed {
            cell.base_seed = s;
        }
        if let Some(r) = config.replicates {
            cell.replicates = r;
        }
    }
    if cells.is_empty() && config.degraded.is_none() {
        return Err(Error::Config("config has no cells and no degraded experiment".into()));
    }
    let mut reports = if cells.is_empty() {
        Vec::new()
    } else {
        run_matrix(&dataset, &raw, &cells, jobs)?
    };
    if let Some(deg) = &config.degraded {
        let mut deg = deg.clone();
        if let Some(s) = base_seed {
            deg.base_seed = s;
        }
        if let Some(r) = config.replicates {
            deg.replicates = r;
        }
        for grouped in [true, false] {
            log::info!("degraded experiment, grouped = {grouped}");
            reports.push(degraded_split_experiment(&dataset, &raw, grouped, &deg)?);
        }
    }

    let report_path = out.join(REPORT_FILE);
    write_atomic(&report_path, &report_bytes(&reports)?)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_path: config_path.display().to_string(),
        out_dir: out.display().to_string(),
        base_seed: base_seed.unwrap_or_else(|| reports.first().map_or(0, |r| r.seeds.base_seed)),
        seeds: reports
            .iter()
            .map(|r| {
                let triples = r
                    .seeds
                    .per_replicate
                    .iter()
                    .map(|s| (s.replicate, s.cell_seed, s.split_seed))
                    .collect();
                (r.protocol.clone(), triples)
            })
            .collect(),
        files: file_digests(out, &[REPORT_FILE])?,
    };
    write_json(&out.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok(reports)
}

/// `input` is a `report.json` or the directory holding one.
pub fn render_report(input: &Path, svg: &Path) -> Result<()> {
    let input = if input.is_dir() { input.join(REPORT_FILE) } else { input.to_path_buf() };
    let reports: Vec<EvalReport> = read_json(&input)?;
    write_atomic(svg, report::render_svg(&reports)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_config_parses_with_defaults() {
        let cfg: MatrixConfig = serde_json::from_str(
            r#"{"data": {"files": {"manifest": "m.csv", "features": "f.lbfs"}},
                "replicates": 2,
                "cells": [{"ft_mode": "leaky", "test_mode": "tainted"}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.cells.len(), 1);
        assert_eq!(cfg.cells[0].split.folds, 5);
        assert!(cfg.degraded.is_none());
    }

    #[test]
    fn split_config_tags() {
        let cfg: SplitConfig =
            serde_json::from_str(r#"{"kind": "leaky-frame-pool", "test_fraction": 0.2, "frame_fraction": 0.2, "train_val": [3, 1]}"#)
                .unwrap();
        assert!(matches!(cfg, SplitConfig::LeakyFramePool { .. }));
    }
}
