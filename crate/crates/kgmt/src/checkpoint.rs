//! Binary parameter checkpoints, vocabulary files and entity indexes.
//!
//! Parameter file layout (all integers little-endian):
//!
//! ```text
//! b"KGMTPARM"  u32 version  u32 kind_len  kind
//! u64 config_len  config (JSON)
//! u64 tensor_count
//! per tensor: u64 rows  u64 cols  rows*cols × f64
//! ```
//!
//! Index file layout:
//!
//! ```text
//! b"KGMTINDX"  u32 version  u64 dim  u64 count  u64 params_hash
//! u32 lang_len  lang
//! per entity: u32 id_len  id
//! count*dim × f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so save → load is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use kgmt_core::encoder::{EncoderConfig, EncoderParams};
use kgmt_core::kg::LanguageCode;
use kgmt_core::nn::Params;
use kgmt_core::retriever::{EntityIndex, Retriever};
use kgmt_core::tensor::Mat;
use kgmt_core::translator::{Seq2SeqConfig, Seq2SeqParams};
use kgmt_core::vocab::Vocabulary;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::io::{read_json, write_json, IoError};

const PARAMS_MAGIC: &[u8; 8] = b"KGMTPARM";
const INDEX_MAGIC: &[u8; 8] = b"KGMTINDX";
const VERSION: u32 = 1;

pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.json";
pub const INDEX_FILE: &str = "index.bin";

/// Parameter sets that can be rebuilt from their configuration.
pub trait Checkpoint: Params {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned;
    fn config(&self) -> &Self::Config;
    fn with_shape(config: Self::Config) -> Self;
}

impl Checkpoint for EncoderParams {
    const KIND: &'static str = "encoder";
    type Config = EncoderConfig;
    fn config(&self) -> &EncoderConfig {
        &self.config
    }
    fn with_shape(config: EncoderConfig) -> Self {
        EncoderParams::init(config, 0)
    }
}

impl Checkpoint for Seq2SeqParams {
    const KIND: &'static str = "seq2seq";
    type Config = Seq2SeqConfig;
    fn config(&self) -> &Seq2SeqConfig {
        &self.config
    }
    fn with_shape(config: Seq2SeqConfig) -> Self {
        Seq2SeqParams::init(config, 0)
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, v: &[f64]) {
    b.reserve(v.len() * 8);
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| IoError::format(self.path, "truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, IoError> {
        usize::try_from(self.u64()?).map_err(|_| IoError::format(self.path, "length overflows usize"))
    }

    fn string(&mut self, len: usize) -> Result<String, IoError> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| IoError::format(self.path, "invalid UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| IoError::format(self.path, "length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn magic(&mut self, m: &[u8; 8]) -> Result<(), IoError> {
        if self.take(8)? != m {
            return Err(IoError::format(self.path, "bad magic header"));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(IoError::format(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), IoError> {
        if self.pos != self.buf.len() {
            return Err(IoError::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

pub fn params_to_bytes<P: Checkpoint>(params: &P) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(PARAMS_MAGIC);
    put_u32(&mut b, VERSION);
    put_u32(&mut b, P::KIND.len() as u32);
    b.extend_from_slice(P::KIND.as_bytes());
    let config = serde_json::to_vec(params.config()).expect("configs serialize");
    put_u64(&mut b, config.len() as u64);
    b.extend_from_slice(&config);
    let tensors = params.tensors();
    put_u64(&mut b, tensors.len() as u64);
    for t in tensors {
        put_u64(&mut b, t.rows as u64);
        put_u64(&mut b, t.cols as u64);
        put_f64s(&mut b, &t.data);
    }
    b
}

pub fn params_from_bytes<P: Checkpoint>(buf: &[u8], path: &Path) -> Result<P, IoError> {
    let mut r = Reader { buf, pos: 0, path };
    r.magic(PARAMS_MAGIC)?;
    let kind_len = r.u32()? as usize;
    let kind = r.string(kind_len)?;
    if kind != P::KIND {
        return Err(IoError::format(path, format!("checkpoint holds {kind} parameters, expected {}", P::KIND)));
    }
    let config_len = r.len()?;
    let config: P::Config = serde_json::from_slice(r.take(config_len)?).map_err(|e| IoError::format(path, format!("config: {e}")))?;
    let mut params = P::with_shape(config);
    let count = r.len()?;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(IoError::format(path, format!("{count} tensors stored, configuration implies {}", tensors.len())));
    }
    for (i, t) in tensors.iter_mut().enumerate() {
        let (rows, cols) = (r.len()?, r.len()?);
        if (rows, cols) != (t.rows, t.cols) {
            return Err(IoError::format(path, format!("tensor {i} is {rows}x{cols}, expected {}x{}", t.rows, t.cols)));
        }
        t.data = r.f64s(rows * cols)?;
    }
    r.finish()?;
    if !params.all_finite() {
        return Err(IoError::format(path, "non-finite parameter values"));
    }
    Ok(params)
}

pub fn save_params<P: Checkpoint>(path: &Path, params: &P) -> Result<(), IoError> {
    fs::write(path, params_to_bytes(params)).map_err(|e| IoError::io(path, e))
}

pub fn load_params<P: Checkpoint>(path: &Path) -> Result<P, IoError> {
    let buf = fs::read(path).map_err(|e| IoError::io(path, e))?;
    params_from_bytes(&buf, path)
}

pub fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<(), IoError> {
    write_json(path, vocab.to_map())
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary, IoError> {
    let map: BTreeMap<String, u32> = read_json(path)?;
    Vocabulary::from_map(&map).map_err(|e| IoError::format(path, e.to_string()))
}

/// `params.bin` + `vocab.json` in `dir`.
pub fn save_retriever(dir: &Path, r: &Retriever) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    save_params(&dir.join(PARAMS_FILE), &r.params)?;
    save_vocab(&dir.join(VOCAB_FILE), &r.vocab)
}

pub fn load_retriever(dir: &Path) -> Result<Retriever, IoError> {
    let params: EncoderParams = load_params(&dir.join(PARAMS_FILE))?;
    let vocab = load_vocab(&dir.join(VOCAB_FILE))?;
    if vocab.len() != params.config.vocab_size {
        return Err(IoError::format(dir, "vocabulary size does not match the encoder"));
    }
    Ok(Retriever { params, vocab })
}

pub fn save_translator(dir: &Path, params: &Seq2SeqParams, vocab: &Vocabulary) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    save_params(&dir.join(PARAMS_FILE), params)?;
    save_vocab(&dir.join(VOCAB_FILE), vocab)
}

pub fn load_translator(dir: &Path) -> Result<(Seq2SeqParams, Vocabulary), IoError> {
    let params: Seq2SeqParams = load_params(&dir.join(PARAMS_FILE))?;
    let vocab = load_vocab(&dir.join(VOCAB_FILE))?;
    if vocab.len() != params.config.vocab_size {
        return Err(IoError::format(dir, "vocabulary size does not match the translator"));
    }
    Ok((params, vocab))
}

pub fn index_to_bytes(index: &EntityIndex) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(INDEX_MAGIC);
    put_u32(&mut b, VERSION);
    put_u64(&mut b, index.dim() as u64);
    put_u64(&mut b, index.len() as u64);
    put_u64(&mut b, index.params_hash);
    put_u32(&mut b, index.lang.as_str().len() as u32);
    b.extend_from_slice(index.lang.as_str().as_bytes());
    for id in &index.ids {
        put_u32(&mut b, id.len() as u32);
        b.extend_from_slice(id.as_bytes());
    }
    put_f64s(&mut b, &index.vectors.data);
    b
}

pub fn index_from_bytes(buf: &[u8], path: &Path) -> Result<EntityIndex, IoError> {
    let mut r = Reader { buf, pos: 0, path };
    r.magic(INDEX_MAGIC)?;
    let dim = r.len()?;
    let count = r.len()?;
    let params_hash = r.u64()?;
    let lang_len = r.u32()? as usize;
    let lang = LanguageCode::new(&r.string(lang_len)?).map_err(|e| IoError::format(path, e.to_string()))?;
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = r.u32()? as usize;
        ids.push(r.string(n)?);
    }
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(IoError::format(path, "entity ids are not strictly ascending"));
    }
    let data = r.f64s(count.checked_mul(dim).ok_or_else(|| IoError::format(path, "size overflow"))?)?;
    r.finish()?;
    Ok(EntityIndex { lang, params_hash, ids, vectors: Mat::from_vec(count, dim, data) })
}

pub fn save_index(path: &Path, index: &EntityIndex) -> Result<(), IoError> {
    fs::write(path, index_to_bytes(index)).map_err(|e| IoError::io(path, e))
}

pub fn load_index(path: &Path) -> Result<EntityIndex, IoError> {
    let buf = fs::read(path).map_err(|e| IoError::io(path, e))?;
    index_from_bytes(&buf, path)
}
