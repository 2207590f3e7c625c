//! Model files: a JSON header describing the architecture (and, for trained
//! networks, the schedule and seed) followed by the weights as little-endian
//! `f64`s.
//!
//! ```text
//! "LBCK" | version u32 | header_len u64 | header JSON | n u64 | n × f64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::neural::{LstmModel, MlpModel, TrainSchedule};
use crate::svr::SvrModel;

pub const MAGIC: &[u8; 4] = b"LBCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    Lstm,
    Svr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    /// The model description with its weight arrays removed.
    pub arch: Value,
    pub schedule: Option<TrainSchedule>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: Vec<f64>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(24 + header.len() + 8 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Data("checkpoint truncated".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(truncated)?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Data("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(header_len)?)?;
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let payload = take(n.checked_mul(8).ok_or_else(truncated)?)?;
        let weights: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint payload".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("checkpoint weights".into()));
        }
        Ok(Self { header, weights })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Data(format!(
                "checkpoint holds a {:?} model, not {kind:?}",
                self.header.kind
            )));
        }
        Ok(())
    }
}

/// Splits the `params` array off a serialized network.
fn split_params<T: Serialize>(model: &T) -> Result<(Value, Vec<f64>)> {
    let mut arch = serde_json::to_value(model)?;
    let params = arch
        .as_object_mut()
        .and_then(|o| o.remove("params"))
        .ok_or_else(|| Error::Data("model has no params".into()))?;
    Ok((arch, serde_json::from_value(params)?))
}

fn join_params<T: for<'de> Deserialize<'de>>(arch: &Value, weights: &[f64]) -> Result<T> {
    let mut v = arch.clone();
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Data("checkpoint arch is not an object".into()))?;
    obj.insert("params".into(), serde_json::to_value(weights)?);
    Ok(serde_json::from_value(v)?)
}

pub fn mlp_checkpoint(model: &MlpModel, schedule: Option<&TrainSchedule>) -> Result<Checkpoint> {
    let (arch, weights) = split_params(model)?;
    Ok(Checkpoint {
        header: CheckpointHeader {
            kind: ModelKind::Mlp,
            arch,
            schedule: schedule.cloned(),
            seed: schedule.map(|s| s.seed),
        },
        weights,
    })
}

pub fn lstm_checkpoint(model: &LstmModel, schedule: Option<&TrainSchedule>) -> Result<Checkpoint> {
    let (arch, weights) = split_params(model)?;
    Ok(Checkpoint {
        header: CheckpointHeader {
            kind: ModelKind::Lstm,
            arch,
            schedule: schedule.cloned(),
            seed: schedule.map(|s| s.seed),
        },
        weights,
    })
}

/// Support vectors (row-major) followed by their coefficients.
pub fn svr_checkpoint(model: &SvrModel) -> Result<Checkpoint> {
    let mut arch = serde_json::to_value(model)?;
    let obj = arch.as_object_mut().expect("struct serializes to an object");
    obj.remove("support");
    obj.remove("coef");
    obj.insert("n_support".into(), model.support.len().into());
    let mut weights: Vec<f64> = model.support.iter().flatten().copied().collect();
    weights.extend_from_slice(&model.coef);
    Ok(Checkpoint {
        header: CheckpointHeader {
            kind: ModelKind::Svr,
            arch,
            schedule: None,
            seed: None,
        },
        weights,
    })
}

impl Checkpoint {
    pub fn to_mlp(&self) -> Result<MlpModel> {
        self.expect(ModelKind::Mlp)?;
        let model: MlpModel = join_params(&self.header.arch, &self.weights)?;
        model.check()?;
        Ok(model)
    }

    pub fn to_lstm(&self) -> Result<LstmModel> {
        self.expect(ModelKind::Lstm)?;
        let model: LstmModel = join_params(&self.header.arch, &self.weights)?;
        model.check()?;
        Ok(model)
    }

    pub fn to_svr(&self) -> Result<SvrModel> {
        self.expect(ModelKind::Svr)?;
        let mut arch = self.header.arch.clone();
        let obj = arch
            .as_object_mut()
            .ok_or_else(|| Error::Data("checkpoint arch is not an object".into()))?;
        let n_support = obj
            .remove("n_support")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Data("svr checkpoint lacks n_support".into()))? as usize;
        let dim = obj.get("dim").and_then(Value::as_u64).unwrap_or(0) as usize;
        if self.weights.len() != n_support * (dim + 1) {
            return Err(Error::dim(n_support * (dim + 1), self.weights.len(), "svr checkpoint weights"));
        }
        let (sv, coef) = self.weights.split_at(n_support * dim);
        let support: Vec<Vec<f64>> = if dim == 0 {
            vec![Vec::new(); n_support]
        } else {
            sv.chunks(dim).map(<[f64]>::to_vec).collect()
        };
        obj.insert("support".into(), serde_json::to_value(support)?);
        obj.insert("coef".into(), serde_json::to_value(coef)?);
        Ok(serde_json::from_value(arch)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::HeadKind;
    use crate::seed;
    use crate::svr::{train_svr, KernelSpec, SvrConfig};

    #[test]
    fn mlp_round_trip() {
        let model = MlpModel::new(5, &[7, 3], HeadKind::Softmax5, &mut seed::rng(1))
            .unwrap()
            .with_dropout(1, 0.25);
        let schedule = TrainSchedule::published_finetune();
        let ck = mlp_checkpoint(&model, Some(&schedule)).unwrap();
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.header.schedule.as_ref(), Some(&schedule));
        assert_eq!(back.to_mlp().unwrap(), model);
        assert!(back.to_lstm().is_err());
    }

    #[test]
    fn lstm_round_trip() {
        let model = LstmModel::new(3, 4, 1.0, &mut seed::rng(2)).unwrap();
        let ck = lstm_checkpoint(&model, None).unwrap();
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap().to_lstm().unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn svr_round_trip() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 6.0, (i as f64).sin()]).collect();
        let y: Vec<f64> = (0..12).map(|i| 1.0 + i as f64 / 3.0).collect();
        let model = train_svr(&x, &y, KernelSpec::default(), &SvrConfig::default()).unwrap();
        let back = Checkpoint::decode(&svr_checkpoint(&model).unwrap().encode().unwrap())
            .unwrap()
            .to_svr()
            .unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = LstmModel::new(2, 2, 1.0, &mut seed::rng(3)).unwrap();
        let bytes = lstm_checkpoint(&model, None).unwrap().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        // a weight count that disagrees with the architecture
        let mut ck = lstm_checkpoint(&model, None).unwrap();
        ck.weights.pop();
        assert!(ck.to_lstm().is_err());
    }
}
