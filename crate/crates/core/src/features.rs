//! Dense per-item feature vectors and their two on-disk encodings.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "LBFS" | u32 version = 1 | u32 dim | u64 count
//! count x ( u16 id_len | id bytes (UTF-8) | dim x f64 )
//! ```
//!
//! The CSV encoding has header `item_id,v0,...,v{dim-1}` and writes every
//! value in shortest round-trip decimal form.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::GroupedDataset;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LBFS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Raw,
    LastLayer,
    AllLayers,
}

#[derive(Debug, Clone)]
pub struct FeatureSet {
    dim: usize,
    provenance: Provenance,
    ids: Vec<String>,
    data: Vec<f64>,
    lookup: HashMap<String, usize>,
}

impl PartialEq for FeatureSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.provenance == other.provenance
            && self.ids == other.ids
            && self.data.iter().map(|v| v.to_bits()).eq(other.data.iter().map(|v| v.to_bits()))
    }
}

impl FeatureSet {
    pub fn new(dim: usize, provenance: Provenance) -> Self {
        Self {
            dim,
            provenance,
            ids: Vec::new(),
            data: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.provenance = provenance;
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: String, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::dim(self.dim, vector.len(), format!("vector {id}")));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature vector {id}")));
        }
        if self.lookup.contains_key(&id) {
            return Err(Error::Data(format!("duplicate feature id {id}")));
        }
        self.lookup.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(&vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.lookup.get(id).map(|&i| self.row(i))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), self.row(i)))
    }

    /// Vectors in dataset item order; the key set must equal the dataset's.
    pub fn aligned<'a>(&'a self, dataset: &GroupedDataset) -> Result<Vec<&'a [f64]>> {
        if self.len() != dataset.len() {
            return Err(Error::Data(format!(
                "feature set has {} vectors, dataset has {} items",
                self.len(),
                dataset.len()
            )));
        }
        dataset
            .items()
            .iter()
            .map(|item| {
                self.get(&item.item_id)
                    .ok_or_else(|| Error::Data(format!("no features for item {}", item.item_id)))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Encodings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Binary,
    Csv,
}

impl FeatureFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

pub fn write_features(features: &FeatureSet, path: &Path) -> Result<()> {
    let bytes = match FeatureFormat::from_path(path) {
        FeatureFormat::Binary => encode_binary(features)?,
        FeatureFormat::Csv => encode_csv(features),
    };
    crate::io::write_atomic(path, &bytes)
}

/// Reads either encoding, detected from the leading magic bytes.
pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        decode_binary(&bytes)
    } else {
        decode_csv(&bytes)
    }
}

pub fn encode_binary(features: &FeatureSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + features.len() * (features.dim * 8 + 24));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let dim = u32::try_from(features.dim).map_err(|_| Error::Data("dimension exceeds u32".into()))?;
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(features.len() as u64).to_le_bytes());
    for (id, vector) in features.iter() {
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Data(format!("item id longer than 65535 bytes: {id}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!("feature file truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<FeatureSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Data("bad feature file magic".into()));
    }
    let version = u32::from_le_bytes(cur.array()?);
    if version != VERSION {
        return Err(Error::Data(format!("unsupported feature file version {version}")));
    }
    let dim = u32::from_le_bytes(cur.array()?) as usize;
    if dim == 0 {
        return Err(Error::Data("feature dimension is zero".into()));
    }
    let count = u64::from_le_bytes(cur.array()?);
    let mut features = FeatureSet::new(dim, Provenance::Raw);
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.array()?) as usize;
        let id = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Data("item id is not UTF-8".into()))?
            .to_string();
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(f64::from_le_bytes(cur.array()?));
        }
        features.insert(id, vector)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after {count} vectors",
            bytes.len() - cur.pos
        )));
    }
    Ok(features)
}

pub fn encode_csv(features: &FeatureSet) -> Vec<u8> {
    let mut out = Vec::new();
    write!(out, "item_id").unwrap();
    for j in 0..features.dim {
        write!(out, ",v{j}").unwrap();
    }
    out.push(b'\n');
    for (id, vector) in features.iter() {
        out.extend_from_slice(id.as_bytes());
        for v in vector {
            write!(out, ",{v:?}").unwrap();
        }
        out.push(b'\n');
    }
    out
}

pub fn decode_csv(bytes: &[u8]) -> Result<FeatureSet> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.get(0) != Some("item_id") || headers.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "expected header item_id,v0,...".into(),
        });
    }
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("v{j}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected column {h:?}"),
            });
        }
    }
    let dim = headers.len() - 1;
    let mut features = FeatureSet::new(dim, Provenance::Raw);
    for (row, record) in rdr.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let found = record.len().saturating_sub(1);
        if found != dim {
            return Err(Error::dim(dim, found, format!("line {line}")));
        }
        let vector = record
            .iter()
            .skip(1)
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad value {s:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("line {line}")));
        }
        features.insert(record[0].to_string(), vector)?;
    }
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(dim: usize, n: usize) -> FeatureSet {
        let mut fs = FeatureSet::new(dim, Provenance::Raw);
        for i in 0..n {
            let v = (0..dim).map(|j| (i * dim + j) as f64 * 0.1 - 1.0 / 3.0).collect();
            fs.insert(format!("item{i}"), v).unwrap();
        }
        fs
    }

    #[test]
    fn binary_round_trip_dim16() {
        let fs = sample(16, 6);
        assert_eq!(decode_binary(&encode_binary(&fs).unwrap()).unwrap(), fs);
    }

    #[test]
    fn binary_header_layout() {
        let fs = sample(2, 1);
        let bytes = encode_binary(&fs).unwrap();
        assert_eq!(&bytes[..4], b"LBFS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[20..22].try_into().unwrap()), 5);
        assert_eq!(&bytes[22..27], b"item0");
        assert_eq!(bytes.len(), 27 + 16);
    }

    #[test]
    fn short_vector_is_dimension_error() {
        let mut fs = FeatureSet::new(16, Provenance::Raw);
        assert!(matches!(
            fs.insert("a".into(), vec![0.0; 15]),
            Err(Error::Dimension { expected: 16, found: 15, .. })
        ));
        let mut text = String::from("item_id");
        for j in 0..16 {
            text.push_str(&format!(",v{j}"));
        }
        text.push_str("\na");
        for _ in 0..15 {
            text.push_str(",1.0");
        }
        text.push('\n');
        assert!(matches!(
            decode_csv(text.as_bytes()),
            Err(Error::Dimension { expected: 16, found: 15, .. })
        ));
    }

    #[test]
    fn nan_is_rejected() {
        let mut fs = FeatureSet::new(2, Provenance::Raw);
        assert!(matches!(fs.insert("a".into(), vec![0.0, f64::NAN]), Err(Error::NonFinite(_))));
        let text = "item_id,v0,v1\na,1.0,NaN\n";
        assert!(matches!(decode_csv(text.as_bytes()), Err(Error::NonFinite(_))));
        let mut bytes = encode_binary(&sample(2, 1)).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_binary(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let bytes = encode_binary(&sample(3, 2)).unwrap();
        assert!(decode_binary(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn both_encodings_round_trip_exactly(
            rows in proptest::collection::vec(proptest::collection::vec(-1e300f64..1e300, 3), 1..20)
        ) {
            let mut fs = FeatureSet::new(3, Provenance::Raw);
            for (i, r) in rows.into_iter().enumerate() {
                fs.insert(format!("id-{i}"), r).unwrap();
            }
            prop_assert_eq!(&decode_binary(&encode_binary(&fs).unwrap()).unwrap(), &fs);
            prop_assert_eq!(&decode_csv(&encode_csv(&fs)).unwrap(), &fs);
        }
    }
}
