//! NIRC checkpoint files: magic, version, a JSON header, then named f32
//! tensors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamSet, Tensor2D};
use crate::textprep::EmbeddingTable;

const MAGIC: &[u8; 4] = b"NIRC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with the configuration and history that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            train: None,
            history: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TableMeta {
    language: String,
    subwords: bool,
    frozen: bool,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tables: Vec<TableMeta>,
    frozen: Vec<String>,
    train: Option<TrainConfig>,
    history: Vec<EpochRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor2D) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rows() as u32);
    put_u32(out, t.cols() as u32);
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ck.model;
    let header = Header {
        model: model.config().clone(),
        tables: model
            .tables()
            .map(|t| TableMeta {
                language: t.language().to_string(),
                subwords: t.uses_subwords(),
                frozen: t.frozen,
                tokens: t.tokens().to_vec(),
            })
            .collect(),
        frozen: model.params.iter().filter(|p| p.frozen).map(|p| p.name.clone()).collect(),
        train: ck.train.clone(),
        history: ck.history.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    let mut count = 0u32;
    let mut body = Vec::new();
    model.visit_params(&mut |name, t, _| {
        put_tensor(&mut body, name, t);
        count += 1;
    });
    put_u32(&mut out, count);
    out.extend_from_slice(&body);
    Ok(out)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile_in(dir, path)?;
    tmp.1.write_all(&bytes)?;
    tmp.1.sync_all()?;
    drop(tmp.1);
    fs::rename(&tmp.0, path)?;
    Ok(())
}

fn tempfile_in(dir: &Path, target: &Path) -> Result<(std::path::PathBuf, fs::File)> {
    let stem = target.file_name().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    for n in 0u32.. {
        let p = dir.join(format!(".{stem}.{}.{n}.tmp", std::process::id()));
        match fs::OpenOptions::new().write(true).create_new(true).open(&p) {
            Ok(f) => return Ok((p, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::load(what, "file truncated")),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    decode_inner(bytes, None)
}

fn decode_inner(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::load("magic", "not a NIRC checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::load("version", format!("unsupported version {version}")));
    }
    let hlen = r.u32("header")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::load("header", e.to_string()))?;
    let count = r.u32("tensor count")?;
    let mut tensors: BTreeMap<String, Tensor2D> = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u16("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::load("tensor name", "invalid UTF-8"))?
            .to_string();
        let rows = r.u32(&name)? as usize;
        let cols = r.u32(&name)? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::load(&name, "shape overflows"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::load(&name, "shape overflows"))?, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor2D::from_vec(rows, cols, data)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::load(name, "tensor appears twice"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::load("trailer", format!("{} unexpected bytes", bytes.len() - r.pos)));
    }

    let config = expected.cloned().unwrap_or(header.model);
    let mut tables = Vec::new();
    for meta in &header.tables {
        let [wn, bn, un] = EmbeddingTable::param_names(&meta.language);
        let mut take = |n: &str| tensors.remove(n).ok_or_else(|| Error::load(n, "missing tensor"));
        let (words, bank, unk) = (take(&wn)?, take(&bn)?, take(&un)?);
        if bank.cols() != config.encoder.w {
            return Err(Error::load(
                bn,
                format!("width {} for a model with w = {}", bank.cols(), config.encoder.w),
            ));
        }
        let mut t = EmbeddingTable::from_parts(&meta.language, meta.tokens.clone(), words, bank, unk, meta.subwords)
            .map_err(|e| Error::load(wn.clone(), e.to_string()))?;
        t.frozen = meta.frozen;
        tables.push(t);
    }
    let reference = Model::new(config.clone(), tables.clone(), 0)?;
    let mut model = Model::skeleton(config, tables)?;
    for p in reference.params.iter() {
        let t = tensors
            .remove(&p.name)
            .ok_or_else(|| Error::load(&p.name, "missing tensor"))?;
        if t.shape() != p.value.shape() {
            return Err(Error::load(
                &p.name,
                format!("stored shape {:?}, expected {:?}", t.shape(), p.value.shape()),
            ));
        }
        model.params.insert(p.name.clone(), t);
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::load(name, "tensor not used by the model"));
    }
    for name in &header.frozen {
        model.params.get_mut(name).map_err(|_| Error::load(name, "frozen parameter does not exist"))?.frozen = true;
    }
    Ok(Checkpoint {
        model,
        train: header.train,
        history: header.history,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_inner(&fs::read(path)?, None)
}

/// Loads into the architecture given by `config` instead of the stored
/// one; any tensor whose shape disagrees is reported by name.
pub fn load_checkpoint_as(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    decode_inner(&fs::read(path)?, Some(config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::fusion::FuseStrategy;
    use crate::model::ParamGroup;
    use crate::textprep::TableConfig;

    fn enc() -> EncoderConfig {
        EncoderConfig {
            w: 6,
            heads: 2,
            d_k: 3,
            d_v: 3,
            d_model: 6,
            d_hidden: 8,
            d: 5,
        }
    }

    fn model() -> Model {
        let mut t = EmbeddingTable::new(
            "de",
            6,
            &TableConfig {
                buckets: 16,
                subwords: true,
                seed: 3,
            },
        )
        .unwrap();
        t.extend_vocab(["wahl", "zürich"]).unwrap();
        let mut m = Model::new(ModelConfig::fused(FuseStrategy::Attention, enc(), 7), vec![t], 11).unwrap();
        m.set_frozen(ParamGroup::Encoders, true);
        m
    }

    fn values(m: &Model) -> Vec<(String, Vec<f32>, bool)> {
        let mut out = Vec::new();
        m.visit_params(&mut |n, t, f| out.push((n.to_string(), t.data().iter().map(|&x| x as f32).collect(), f)));
        out
    }

    #[test]
    fn round_trip_is_exact_in_f32_and_resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nirc");
        let ck = Checkpoint::new(model());
        save_checkpoint(&ck, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(values(&back.model), values(&ck.model));
        assert_eq!(back.model.config(), ck.model.config());
        assert_eq!(back.model.frozen_groups(), vec![ParamGroup::Encoders]);
        let q = dir.path().join("again.nirc");
        save_checkpoint(&back, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2, "temporary files left behind: {names:?}");
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nirc");
        save_checkpoint(&Checkpoint::new(model()), &p).unwrap();
        let other = ModelConfig::fused(FuseStrategy::Attention, EncoderConfig { d_hidden: 9, ..enc() }, 7);
        match load_checkpoint_as(&p, &other) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "enc.body.b1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let bytes = encode_checkpoint(&Checkpoint::new(model())).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Load { .. })));
        assert!(matches!(decode_checkpoint(b"PK\x03\x04rest"), Err(Error::Load { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_checkpoint(&v2), Err(Error::Load { field, .. }) if field == "version"));
    }
}
