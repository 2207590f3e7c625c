//! Grouped datasets: items that belong to a content group (the frames of one
//! video, or the degraded variants of one reference image), the manifest CSV
//! they are stored in, and a synthetic generator that reproduces both
//! structures with controllable feature identifiability.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSet, Provenance};
use crate::seed;

pub const MOS_MIN: f64 = 1.0;
pub const MOS_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub group_id: String,
    pub seq_index: u32,
    pub mos: f64,
}

/// How items relate to their group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    /// Every item of a group shares the group's MOS.
    VideoFrames,
    /// Items of a group share content but carry their own MOS.
    DegradedVariants,
}

#[derive(Debug, Clone)]
pub struct Group {
    pub id: String,
    /// Item indices in `seq_index` order.
    pub items: Vec<usize>,
}

/// An ordered item collection partitioned by group.
#[derive(Debug, Clone)]
pub struct GroupedDataset {
    items: Vec<ItemRecord>,
    groups: Vec<Group>,
    structure: Structure,
    item_lookup: HashMap<String, usize>,
    group_lookup: HashMap<String, usize>,
    item_group: Vec<usize>,
}

impl PartialEq for GroupedDataset {
    fn eq(&self, other: &Self) -> bool {
        self.structure == other.structure && self.items == other.items
    }
}

impl GroupedDataset {
    /// Builds a dataset, inferring the structure from label coherence.
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        Self::build(items, None)
    }

    pub fn with_structure(items: Vec<ItemRecord>, structure: Structure) -> Result<Self> {
        Self::build(items, Some(structure))
    }

    fn build(items: Vec<ItemRecord>, structure: Option<Structure>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("dataset has no items"));
        }
        let mut item_lookup = HashMap::with_capacity(items.len());
        let mut group_lookup: HashMap<String, usize> = HashMap::new();
        let mut groups: Vec<Group> = Vec::new();
        let mut item_group = Vec::with_capacity(items.len());
        let mut keys = HashSet::with_capacity(items.len());
        for (idx, item) in items.iter().enumerate() {
            let line = idx + 2;
            check_mos(item.mos).map_err(|message| Error::Parse { line, message })?;
            if item_lookup.insert(item.item_id.clone(), idx).is_some() {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate item_id {}", item.item_id),
                });
            }
            if !keys.insert((item.group_id.as_str(), item.seq_index)) {
                return Err(Error::DuplicateKey {
                    group_id: item.group_id.clone(),
                    seq_index: item.seq_index,
                    line,
                });
            }
            let g = *group_lookup.entry(item.group_id.clone()).or_insert_with(|| {
                groups.push(Group {
                    id: item.group_id.clone(),
                    items: Vec::new(),
                });
                groups.len() - 1
            });
            groups[g].items.push(idx);
            item_group.push(g);
        }
        for group in &mut groups {
            group.items.sort_by_key(|&i| items[i].seq_index);
        }
        let coherent = groups.iter().all(|g| {
            let first = items[g.items[0]].mos;
            g.items.iter().all(|&i| items[i].mos == first)
        });
        let structure = match structure {
            Some(Structure::VideoFrames) if !coherent => {
                return Err(Error::Data(
                    "video-frames dataset has a group with differing MOS values".into(),
                ))
            }
            Some(s) => s,
            None if coherent => Structure::VideoFrames,
            None => Structure::DegradedVariants,
        };
        Ok(Self {
            items,
            groups,
            structure,
            item_lookup,
            group_lookup,
            item_group,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn item(&self, idx: usize) -> &ItemRecord {
        &self.items[idx]
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.item_lookup.get(item_id).copied()
    }

    pub fn group_index(&self, group_id: &str) -> Option<usize> {
        self.group_lookup.get(group_id).copied()
    }

    /// Index of the group that item `idx` belongs to.
    pub fn group_of(&self, idx: usize) -> usize {
        self.item_group[idx]
    }

    /// `group_id -> item ids` in `seq_index` order.
    pub fn group_map(&self) -> BTreeMap<&str, Vec<&str>> {
        self.groups
            .iter()
            .map(|g| {
                let ids = g.items.iter().map(|&i| self.items[i].item_id.as_str()).collect();
                (g.id.as_str(), ids)
            })
            .collect()
    }
}

/// Read access to item labels by dataset index.
///
/// Learners take labels through this trait so a caller can interpose a
/// recording view and prove which labels a stage actually touched.
pub trait LabelSource {
    fn mos(&self, item: usize) -> f64;
}

impl LabelSource for GroupedDataset {
    fn mos(&self, item: usize) -> f64 {
        self.items[item].mos
    }
}

fn check_mos(mos: f64) -> std::result::Result<(), String> {
    if !mos.is_finite() {
        return Err("MOS is not finite".into());
    }
    if !(MOS_MIN..=MOS_MAX).contains(&mos) {
        return Err(format!("MOS out of range: {mos}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest CSV
// ---------------------------------------------------------------------------

const MANIFEST_HEADER: [&str; 4] = ["item_id", "group_id", "seq_index", "mos"];

pub fn write_manifest(dataset: &GroupedDataset, path: &Path) -> Result<()> {
    let bytes = manifest_bytes(dataset);
    crate::io::write_atomic(path, &bytes)
}

/// Manifest encoding; MOS is written in shortest round-trip decimal form.
pub fn manifest_bytes(dataset: &GroupedDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(dataset.len() * 32);
    writeln!(out, "{}", MANIFEST_HEADER.join(",")).unwrap();
    for item in dataset.items() {
        writeln!(
            out,
            "{},{},{},{:?}",
            item.item_id, item.group_id, item.seq_index, item.mos
        )
        .unwrap();
    }
    out
}

pub fn read_manifest(path: &Path) -> Result<GroupedDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file))
}

pub fn parse_manifest(reader: impl std::io::Read) -> Result<GroupedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut items = Vec::new();
    let mut seen_items = HashSet::new();
    let mut seen_keys = HashSet::new();
    for (row, record) in rdr.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let field = |i: usize| record.get(i).unwrap_or_default();
        let seq_index: u32 = field(2).parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad seq_index {:?}", field(2)),
        })?;
        let mos: f64 = field(3).parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad mos {:?}", field(3)),
        })?;
        check_mos(mos).map_err(|message| Error::Parse { line, message })?;
        let item = ItemRecord {
            item_id: field(0).to_string(),
            group_id: field(1).to_string(),
            seq_index,
            mos,
        };
        if item.item_id.is_empty() || item.group_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty identifier".into(),
            });
        }
        if !seen_items.insert(item.item_id.clone()) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate item_id {}", item.item_id),
            });
        }
        if !seen_keys.insert((item.group_id.clone(), seq_index)) {
            return Err(Error::DuplicateKey {
                group_id: item.group_id,
                seq_index,
                line,
            });
        }
        items.push(item);
    }
    GroupedDataset::new(items)
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthStructure {
    VideoFrames,
    DegradedVariants { n_distortions: usize, n_levels: usize },
}

fn default_quality_signal() -> f64 {
    0.6
}

fn default_distortion_scale() -> f64 {
    1.0
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_groups: usize,
    pub items_per_group: usize,
    pub feature_dim: usize,
    /// Standard deviation of per-item feature noise around the group embedding.
    pub within_group_noise: f64,
    pub label_noise: f64,
    pub structure: SynthStructure,
    /// Correlation between the group embedding's quality axis and latent
    /// quality, in `[0, 1]`. Zero makes raw features carry no quality signal.
    #[serde(default = "default_quality_signal")]
    pub quality_signal: f64,
    /// Norm scale of the per-distortion feature directions.
    #[serde(default = "default_distortion_scale")]
    pub distortion_scale: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn video(n_groups: usize, items_per_group: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            n_groups,
            items_per_group,
            feature_dim,
            within_group_noise: 0.3,
            label_noise: 0.15,
            structure: SynthStructure::VideoFrames,
            quality_signal: default_quality_signal(),
            distortion_scale: default_distortion_scale(),
            seed,
        }
    }

    /// Reference images, each degraded by `n_distortions` kinds at `n_levels` levels.
    pub fn degraded(
        n_groups: usize,
        n_distortions: usize,
        n_levels: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_groups,
            items_per_group: n_distortions * n_levels,
            feature_dim,
            within_group_noise: 0.3,
            label_noise: 0.15,
            structure: SynthStructure::DegradedVariants {
                n_distortions,
                n_levels,
            },
            quality_signal: default_quality_signal(),
            distortion_scale: default_distortion_scale(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_groups == 0 || self.items_per_group == 0 || self.feature_dim == 0 {
            return fail("n_groups, items_per_group and feature_dim must be positive");
        }
        for (name, v) in [
            ("within_group_noise", self.within_group_noise),
            ("label_noise", self.label_noise),
            ("distortion_scale", self.distortion_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.quality_signal) {
            return fail("quality_signal must lie in [0, 1]");
        }
        if let SynthStructure::DegradedVariants {
            n_distortions,
            n_levels,
        } = self.structure
        {
            if n_distortions == 0 || n_levels == 0 {
                return fail("n_distortions and n_levels must be positive");
            }
            if n_distortions * n_levels != self.items_per_group {
                return fail("items_per_group must equal n_distortions * n_levels");
            }
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut seed::Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_direction(rng: &mut seed::Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit-variance group embedding whose projection on `axis` correlates with
/// `quality` (given in `[lo, hi]`, assumed uniform) at level `signal`.
fn group_embedding(
    rng: &mut seed::Rng,
    axis: &[f64],
    quality: f64,
    (lo, hi): (f64, f64),
    signal: f64,
) -> Vec<f64> {
    let mid = 0.5 * (lo + hi);
    let sd = (hi - lo) / 12f64.sqrt();
    let standardized = (quality - mid) / sd;
    let z = normal_vec(rng, axis.len());
    // Remove z's own component along the axis so the axis variance stays one.
    let along: f64 = z.iter().zip(axis).map(|(a, b)| a * b).sum();
    let keep = (1.0 - signal * signal).sqrt();
    z.iter()
        .zip(axis)
        .map(|(&zi, &ui)| {
            let orth = zi - along * ui;
            orth + ui * (keep * along + signal * standardized)
        })
        .collect()
}

/// Generates a dataset and raw features with the group structure in `config`.
///
/// Video frames: every group draws a latent quality uniform on `[1, 5]` and
/// an embedding; frames are the embedding plus isotropic noise and share the
/// group MOS. Degraded variants: a reference embedding plus a per-distortion
/// direction scaled by the relative level, with MOS falling monotonically in
/// the level from the reference's base quality.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(GroupedDataset, FeatureSet)> {
    config.validate()?;
    let mut rng = seed::rng(config.seed);
    let dim = config.feature_dim;
    let axis = unit_direction(&mut rng, dim);
    let mut items = Vec::with_capacity(config.n_groups * config.items_per_group);
    let mut features = FeatureSet::new(dim, Provenance::Raw);

    match config.structure {
        SynthStructure::VideoFrames => {
            for g in 0..config.n_groups {
                let quality: f64 = rng.gen_range(MOS_MIN..MOS_MAX);
                let embedding =
                    group_embedding(&mut rng, &axis, quality, (MOS_MIN, MOS_MAX), config.quality_signal);
                let noise: f64 = StandardNormal.sample(&mut rng);
                let mos = (quality + config.label_noise * noise).clamp(MOS_MIN, MOS_MAX);
                let group_id = format!("v{g:04}");
                for f in 0..config.items_per_group {
                    let vector: Vec<f64> = embedding
                        .iter()
                        .map(|&e| {
                            let n: f64 = StandardNormal.sample(&mut rng);
                            e + config.within_group_noise * n
                        })
                        .collect();
                    let item_id = format!("{group_id}_f{f:03}");
                    features.insert(item_id.clone(), vector)?;
                    items.push(ItemRecord {
                        item_id,
                        group_id: group_id.clone(),
                        seq_index: f as u32,
                        mos,
                    });
                }
            }
        }
        SynthStructure::DegradedVariants {
            n_distortions,
            n_levels,
        } => {
            let scale = config.distortion_scale;
            let directions: Vec<Vec<f64>> = (0..n_distortions)
                .map(|_| normal_vec(&mut rng, dim).into_iter().map(|x| x * scale).collect())
                .collect();
            let severity: Vec<f64> = (0..n_distortions).map(|_| rng.gen_range(0.3..1.0)).collect();
            let base_range = (3.0, MOS_MAX);
            for g in 0..config.n_groups {
                let base: f64 = rng.gen_range(base_range.0..base_range.1);
                let embedding =
                    group_embedding(&mut rng, &axis, base, base_range, config.quality_signal);
                let group_id = format!("r{g:03}");
                for (k, direction) in directions.iter().enumerate() {
                    for level in 1..=n_levels {
                        let frac = level as f64 / n_levels as f64;
                        let vector: Vec<f64> = embedding
                            .iter()
                            .zip(direction)
                            .map(|(&e, &d)| {
                                let n: f64 = StandardNormal.sample(&mut rng);
                                e + frac * d + config.within_group_noise * n
                            })
                            .collect();
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        let mos = (base - severity[k] * frac * (base - MOS_MIN)
                            + config.label_noise * noise)
                            .clamp(MOS_MIN, MOS_MAX);
                        let seq_index = (k * n_levels + level - 1) as u32;
                        let item_id = format!("{group_id}_d{k:02}_l{level}");
                        features.insert(item_id.clone(), vector)?;
                        items.push(ItemRecord {
                            item_id,
                            group_id: group_id.clone(),
                            seq_index,
                            mos,
                        });
                    }
                }
            }
        }
    }

    let structure = match config.structure {
        SynthStructure::VideoFrames => Structure::VideoFrames,
        SynthStructure::DegradedVariants { .. } => Structure::DegradedVariants,
    };
    let dataset = GroupedDataset::with_structure(items, structure)?;
    Ok((dataset, features))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, group: &str, seq: u32, mos: f64) -> ItemRecord {
        ItemRecord {
            item_id: id.into(),
            group_id: group.into(),
            seq_index: seq,
            mos,
        }
    }

    #[test]
    fn counts_match_config() {
        let (ds, fs) = generate_synthetic(&SynthConfig::video(2, 3, 4, 1)).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.n_groups(), 2);
        assert!(ds.groups().iter().all(|g| g.items.len() == 3));
        assert_eq!(fs.len(), 6);
        assert_eq!(fs.provenance(), Provenance::Raw);
    }

    #[test]
    fn zero_noise_gives_identical_group_vectors() {
        let mut cfg = SynthConfig::video(4, 5, 6, 3);
        cfg.within_group_noise = 0.0;
        let (ds, fs) = generate_synthetic(&cfg).unwrap();
        for g in ds.groups() {
            let first = fs.get(&ds.item(g.items[0]).item_id).unwrap();
            for &i in &g.items {
                assert_eq!(fs.get(&ds.item(i).item_id).unwrap(), first);
            }
        }
    }

    #[test]
    fn video_labels_are_group_coherent() {
        let (ds, _) = generate_synthetic(&SynthConfig::video(20, 7, 3, 9)).unwrap();
        for g in ds.groups() {
            let m = ds.item(g.items[0]).mos;
            assert!(g.items.iter().all(|&i| ds.item(i).mos == m));
        }
        assert_eq!(ds.structure(), Structure::VideoFrames);
    }

    #[test]
    fn degraded_mos_falls_with_level() {
        let mut cfg = SynthConfig::degraded(3, 4, 5, 8, 2);
        cfg.label_noise = 0.0;
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.structure(), Structure::DegradedVariants);
        for g in ds.groups() {
            for k in 0..4 {
                let run: Vec<f64> = (0..5).map(|l| ds.item(g.items[k * 5 + l]).mos).collect();
                assert!(run.windows(2).all(|w| w[1] < w[0]), "{run:?}");
            }
        }
    }

    #[test]
    fn kadid_shape_item_count() {
        let cfg = SynthConfig::degraded(81, 25, 5, 4, 0);
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.len(), 10_125);
    }

    #[test]
    fn zero_sizes_rejected() {
        let mut cfg = SynthConfig::video(0, 3, 4, 1);
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        cfg.n_groups = 2;
        cfg.feature_dim = 0;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let mut bad = SynthConfig::degraded(2, 3, 2, 4, 1);
        bad.items_per_group = 5;
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = SynthConfig::video(10, 4, 5, 77);
        let (a, fa) = generate_synthetic(&cfg).unwrap();
        let (b, fb) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(fa, fb);
        assert_eq!(manifest_bytes(&a), manifest_bytes(&b));
    }

    #[test]
    fn manifest_round_trip() {
        let (ds, _) = generate_synthetic(&SynthConfig::video(2, 3, 2, 5)).unwrap();
        let back = parse_manifest(&manifest_bytes(&ds)[..]).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn manifest_rejects_out_of_range_mos() {
        let text = "item_id,group_id,seq_index,mos\na,g1,0,3.0\nb,g1,1,5.5\n";
        match parse_manifest(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("MOS out of range"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_duplicate_key() {
        let text = "item_id,group_id,seq_index,mos\na,g1,0,3.0\nb,g1,0,3.0\n";
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(Error::DuplicateKey { line: 3, .. })
        ));
    }

    #[test]
    fn manifest_rejects_malformed_rows() {
        let text = "item_id,group_id,seq_index,mos\na,g1,zero,3.0\n";
        assert!(matches!(parse_manifest(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let text = "item_id,group_id,seq_index,mos\na,g1,0\n";
        assert!(matches!(parse_manifest(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let text = "id,group,seq,mos\n";
        assert!(matches!(parse_manifest(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn group_index_orders_by_seq() {
        let ds = GroupedDataset::new(vec![
            item("b", "g", 2, 2.0),
            item("a", "g", 0, 2.0),
            item("c", "h", 0, 4.0),
        ])
        .unwrap();
        let map = ds.group_map();
        assert_eq!(map["g"], vec!["a", "b"]);
        assert_eq!(map["h"], vec!["c"]);
    }

    #[test]
    fn forced_video_structure_requires_coherent_labels() {
        let items = vec![item("a", "g", 0, 2.0), item("b", "g", 1, 3.0)];
        assert!(GroupedDataset::with_structure(items.clone(), Structure::VideoFrames).is_err());
        assert_eq!(
            GroupedDataset::new(items).unwrap().structure(),
            Structure::DegradedVariants
        );
    }
}
