//! Binary checkpoint archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor's values as little-endian `f64` in header order.
//! Tensors inside the header are replaced by `{rows, cols, offset}` records
//! pointing into the payload, so identical state always yields identical
//! bytes.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::information::FisherAnchor;
use crate::learner::Learner;
use crate::routing::EpsilonSchedule;
use crate::trainer::{Architecture, RunCondition};

pub const MAGIC: &[u8; 8] = b"DIBCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to evaluate or continue a sequential run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub condition: RunCondition,
    pub architecture: Architecture,
    pub dataset: String,
    /// Number of tasks completed.
    pub tasks_done: usize,
    pub learner: Learner,
    pub anchors: Vec<FisherAnchor>,
    pub schedule: EpsilonSchedule,
}

fn is_tensor(map: &Map<String, Value>) -> bool {
    map.len() == 3 && map.contains_key("rows") && map.contains_key("cols") && map.get("data").is_some_and(Value::is_array)
}

fn extract(value: &mut Value, payload: &mut Vec<f64>) -> Result<()> {
    match value {
        Value::Object(map) if is_tensor(map) => {
            let Some(Value::Array(data)) = map.remove("data") else {
                unreachable!("checked by is_tensor");
            };
            map.insert("offset".into(), Value::from(payload.len()));
            for v in data {
                payload.push(v.as_f64().ok_or_else(|| {
                    Error::Checkpoint("non-finite tensor value cannot be stored".into())
                })?);
            }
        }
        Value::Object(map) => {
            for v in map.values_mut() {
                extract(v, payload)?;
            }
        }
        Value::Array(items) => {
            for v in items {
                extract(v, payload)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn restore(value: &mut Value, payload: &[f64]) -> Result<()> {
    match value {
        Value::Object(map)
            if map.len() == 3 && map.contains_key("rows") && map.contains_key("cols") && map.contains_key("offset") =>
        {
            let dim = |k: &str| {
                map.get(k)
                    .and_then(Value::as_u64)
                    .map(|v| v as usize)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor record has bad '{k}'")))
            };
            let (rows, cols, offset) = (dim("rows")?, dim("cols")?, dim("offset")?);
            let end = offset
                .checked_add(rows * cols)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Checkpoint("tensor extends past end of payload".into()))?;
            map.remove("offset");
            map.insert(
                "data".into(),
                Value::Array(payload[offset..end].iter().map(|&v| Value::from(v)).collect()),
            );
        }
        Value::Object(map) => {
            for v in map.values_mut() {
                restore(v, payload)?;
            }
        }
        Value::Array(items) => {
            for v in items {
                restore(v, payload)?;
            }
        }
        _ => {}
    }
    Ok(())
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = serde_json::to_value(ckpt)?;
    let mut payload = Vec::new();
    extract(&mut header, &mut payload)?;
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u64::<LittleEndian>(header.len() as u64)?;
    out.extend_from_slice(&header);
    for v in payload {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
    }
    let version = cur.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = cur.read_u64::<LittleEndian>()? as usize;
    let start = cur.position() as usize;
    let header_end = start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("header extends past end of file".into()))?;
    let mut header: Value = serde_json::from_slice(&bytes[start..header_end])?;
    let body = &bytes[header_end..];
    if !body.len().is_multiple_of(8) {
        return Err(Error::Checkpoint("payload length is not a multiple of 8".into()));
    }
    let payload: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    restore(&mut header, &payload)?;
    Ok(serde_json::from_value(header)?)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(ckpt)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::learner::ModelKind;
    use crate::trainer::{run_continual, TrainSettings};

    fn arch() -> Architecture {
        Architecture {
            num_cells: 2,
            modules_per_cell: 3,
            module_width: 5,
            module_layers: 2,
            router_hidden: vec![4],
            memnet_hidden: vec![4],
            mlp_hidden: 6,
        }
    }

    fn checkpoint(kind: ModelKind) -> Checkpoint {
        let tasks = make_synthetic(2, 24, 4, 2, 0).unwrap();
        let cond = RunCondition {
            model_kind: kind,
            ewc: true,
            lambda_value: 10.0,
            epochs_per_task: 1,
            trials: 1,
            seed: 0,
        };
        let settings = TrainSettings {
            batch_size: 8,
            fisher_samples: 8,
            ..Default::default()
        };
        let out = run_continual(&cond, &tasks, &arch(), &settings).unwrap();
        Checkpoint {
            condition: cond,
            architecture: arch(),
            dataset: "synthetic".into(),
            tasks_done: 2,
            learner: out.learner,
            anchors: out.anchors,
            schedule: out.schedule,
        }
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        for kind in [ModelKind::Mlp, ModelKind::Mhmlp, ModelKind::Dib] {
            let ck = checkpoint(kind);
            let bytes = to_bytes(&ck).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&checkpoint(ModelKind::Mlp)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(from_bytes(&bytes[..5]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let ck = checkpoint(ModelKind::Dib);
        save(&ck, &p).unwrap();
        assert_eq!(load(&p).unwrap(), ck);
        assert!(matches!(load(&dir.path().join("none")), Err(Error::MissingFile(_))));
    }
}
