//! Checkpoint archive: magic + JSON header + raw little-endian f32 arrays.
//!
//! Training computes in f32 and the archive stores f32, so a save/load
//! round trip is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::{FinetuneEpoch, PretrainEpoch, TrainConfig};

const MAGIC: &[u8; 8] = b"MOEXTCP1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    phase: Phase,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    epoch: usize,
    #[serde(default)]
    pretrain_history: Vec<PretrainEpoch>,
    #[serde(default)]
    finetune_history: Vec<FinetuneEpoch>,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub phase: Phase,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub epoch: usize,
    pub pretrain_history: Vec<PretrainEpoch>,
    pub finetune_history: Vec<FinetuneEpoch>,
    pub params: BTreeMap<String, ArrayD<f32>>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let header = Header {
        version: VERSION,
        phase: ckpt.phase,
        model_cfg: ckpt.model_cfg.clone(),
        train_cfg: ckpt.train_cfg.clone(),
        epoch: ckpt.epoch,
        pretrain_history: ckpt.pretrain_history.clone(),
        finetune_history: ckpt.finetune_history.clone(),
        entries: ckpt
            .params
            .iter()
            .map(|(name, v)| Entry {
                name: name.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u64::<LittleEndian>(header_json.len() as u64)?;
    w.write_all(&header_json)?;
    for v in ckpt.params.values() {
        for &x in v.iter() {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, not a checkpoint archive"
        )));
    }
    let header_len = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("truncated header length".into()))? as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut params = BTreeMap::new();
    for entry in &header.entries {
        let count: usize = entry.shape.iter().product();
        let mut values = vec![0f32; count];
        for slot in values.iter_mut() {
            *slot = r
                .read_f32::<LittleEndian>()
                .map_err(|_| Error::Checkpoint(format!("truncated payload at {}", entry.name)))?;
        }
        let arr = ArrayD::from_shape_vec(entry.shape.clone(), values)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
        params.insert(entry.name.clone(), arr);
    }
    Ok(Checkpoint {
        phase: header.phase,
        model_cfg: header.model_cfg,
        train_cfg: header.train_cfg,
        epoch: header.epoch,
        pretrain_history: header.pretrain_history,
        finetune_history: header.finetune_history,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{export_params, PretrainModel};
    use crate::training::TrainConfig;

    fn make_checkpoint() -> Checkpoint {
        let cfg = ModelConfig::tiny(2);
        let mut model = PretrainModel::<f32>::new(&cfg, 3).unwrap();
        Checkpoint {
            phase: Phase::Pretrain,
            model_cfg: cfg,
            train_cfg: TrainConfig::default(),
            epoch: 7,
            pretrain_history: vec![],
            finetune_history: vec![],
            params: export_params(&mut model).into_iter().collect(),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = make_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 7);
        assert_eq!(back.phase, Phase::Pretrain);
        assert_eq!(back.params.len(), ckpt.params.len());
        for (name, v) in &ckpt.params {
            assert_eq!(&back.params[name], v, "{name}");
        }
    }

    #[test]
    fn truncated_file_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&make_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
