//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! PROMPTREC-CHECKPOINT 1\n
//! <manifest: one line of JSON>\n
//! <payload: every parameter block as little-endian f64, manifest order>
//! ```
//!
//! The manifest echoes the training config, the vocabularies, the id maps and
//! the language model shape, then lists each block as
//! `{store, name, rows, cols, trainable}`. `checksum` is the hex SHA-256 of the
//! payload and is verified on load, so a load either reproduces every value
//! bit for bit or fails.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tensor};
use crate::corpus::{AspectVocabulary, Vocabulary};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LmConfig};
use crate::prompt::EmbeddingTables;
use crate::training::{Model, TrainConfig};

pub const MAGIC: &str = "PROMPTREC-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Store {
    Lm,
    Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub store: Store,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: TrainConfig,
    pub lm_config: LmConfig,
    pub vocab: Vocabulary,
    pub aspects: AspectVocabulary,
    pub tables: EmbeddingTables,
    pub blocks: Vec<Block>,
    pub payload_bytes: usize,
    pub checksum: String,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn push_store(store: Store, params: &ParamStore, blocks: &mut Vec<Block>, payload: &mut Vec<u8>) {
    for (name, p) in params.iter() {
        blocks.push(Block {
            store,
            name: name.to_string(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            trainable: p.trainable,
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn digest(payload: &[u8]) -> String {
    format!("{:x}", Sha256::digest(payload))
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut blocks = Vec::new();
    let mut payload = Vec::new();
    push_store(Store::Lm, &model.lm.params, &mut blocks, &mut payload);
    push_store(Store::Task, &model.params, &mut blocks, &mut payload);
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: model.config.clone(),
        lm_config: model.lm.config.clone(),
        vocab: model.vocab.clone(),
        aspects: model.aspects.clone(),
        tables: model.tables.clone(),
        blocks,
        payload_bytes: payload.len(),
        checksum: digest(&payload),
    };
    let mut out = format!("{MAGIC} {FORMAT_VERSION}\n").into_bytes();
    serde_json::to_writer(&mut out, &manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

fn split_line(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("truncated header"))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let (magic, rest) = split_line(bytes)?;
    let expected = format!("{MAGIC} {FORMAT_VERSION}");
    if magic != expected.as_bytes() {
        return Err(bad(format!(
            "bad magic line `{}`",
            String::from_utf8_lossy(&magic[..magic.len().min(64)])
        )));
    }
    let (json, payload) = split_line(rest)?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    Ok((manifest, payload))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (m, payload) = read_manifest(bytes)?;
    if payload.len() != m.payload_bytes {
        return Err(bad(format!(
            "payload is {} bytes, manifest says {}",
            payload.len(),
            m.payload_bytes
        )));
    }
    if digest(payload) != m.checksum {
        return Err(bad("checksum mismatch"));
    }
    m.config.validate()?;
    m.lm_config.validate()?;

    let mut lm = ParamStore::new();
    let mut task = ParamStore::new();
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for b in &m.blocks {
        let n = b.rows.checked_mul(b.cols).ok_or_else(|| bad("block size overflow"))?;
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(bad(format!("payload ends inside `{}`", b.name)));
        }
        let t = Tensor::new(b.rows, b.cols, data)?;
        match b.store {
            Store::Lm => lm.insert(b.name.clone(), t, b.trainable)?,
            Store::Task => task.insert(b.name.clone(), t, b.trainable)?,
        }
    }
    if values.next().is_some() {
        return Err(bad("payload longer than the listed blocks"));
    }
    Ok(Model {
        config: m.config,
        vocab: m.vocab,
        aspects: m.aspects,
        tables: m.tables,
        lm: LanguageModel {
            config: m.lm_config,
            params: lm,
        },
        params: task,
    })
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
