//! Binary checkpoint format.
//!
//! ```text
//! "DBCK"                      magic
//! u32                         format version (1)
//! u32, bytes                  metadata length, UTF-8 `key=value` lines
//! u32                         tensor count
//! repeated:
//!   u32, bytes                name length, name
//!   u32, u32                  rows, cols
//!   rows*cols f64             row-major values
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attention::AttentionConfig;
use crate::baselines::BaselineParams;
use crate::classifier::{Classifier, ModelKind};
use crate::error::{Error, FormatError, Result, Shape};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::DenseMatrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn metadata_for(classifier: &Classifier) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".to_owned(), classifier.kind().as_str().to_owned());
    meta.insert("d".to_owned(), classifier.d().to_string());
    match classifier {
        Classifier::Cmil(p) => {
            let a = p.attention_config();
            meta.insert("num_blocks".to_owned(), p.num_blocks().to_string());
            meta.insert("heads".to_owned(), a.heads.to_string());
            meta.insert("landmarks".to_owned(), a.landmarks.to_string());
            meta.insert("pinv_iters".to_owned(), a.pinv_iters.to_string());
            let hidden: Vec<String> = p.config().readout_hidden.iter().map(|h| h.to_string()).collect();
            meta.insert("readout_hidden".to_owned(), hidden.join(","));
        }
        Classifier::Baseline(b) => {
            meta.insert("eval_seed".to_owned(), b.eval_seed.to_string());
        }
    }
    meta
}

pub fn encode_checkpoint(classifier: &Classifier) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta: String = metadata_for(classifier)
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let tensors = classifier.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn meta_get<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str, FormatError> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| FormatError::Metadata(format!("missing key {key:?}")))
}

fn meta_num<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T, FormatError> {
    let raw = meta_get(meta, key)?;
    raw.parse()
        .map_err(|_| FormatError::Metadata(format!("{key}={raw:?} is not a number")))
}

fn skeleton(meta: &BTreeMap<String, String>) -> Result<Classifier> {
    let kind: ModelKind = meta_get(meta, "kind")?
        .parse()
        .map_err(|e: Error| FormatError::Metadata(e.to_string()))?;
    let d: usize = meta_num(meta, "d")?;
    match kind {
        ModelKind::Cmil => {
            let hidden_raw = meta_get(meta, "readout_hidden").unwrap_or("");
            let readout_hidden = hidden_raw
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| FormatError::Metadata(format!("bad readout width {s:?}")))
                })
                .collect::<Result<Vec<usize>, _>>()?;
            let config = ModelConfig {
                num_blocks: meta_num(meta, "num_blocks")?,
                attention: AttentionConfig {
                    heads: meta_num(meta, "heads")?,
                    landmarks: meta_num(meta, "landmarks")?,
                    pinv_iters: meta_num(meta, "pinv_iters")?,
                },
                readout_hidden,
                ..ModelConfig::new(d)
            };
            Ok(Classifier::Cmil(ModelParams::zeros(&config)?))
        }
        ModelKind::Baseline(b) => {
            let mut p = BaselineParams::init(b, d, 0.0, 0)?;
            p.eval_seed = meta_num(meta, "eval_seed")?;
            Ok(Classifier::Baseline(p))
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Classifier> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| FormatError::Metadata("not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::Metadata(format!("line without '=': {line:?}")))?;
        meta.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    let mut classifier = skeleton(&meta)?;

    let count = r.u32("tensor count")? as usize;
    let names: Vec<(String, Shape)> = classifier
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, Shape(t.rows(), t.cols())))
        .collect();
    let mut loaded: Vec<Option<DenseMatrix>> = vec![None; names.len()];
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| FormatError::Metadata("tensor name not UTF-8".into()))?;
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        let idx = names
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| FormatError::UnknownTensor(name.clone()))?;
        let expected = names[idx].1;
        if Shape(rows, cols) != expected {
            return Err(FormatError::TensorShape {
                name,
                found: Shape(rows, cols),
                expected,
            }
            .into());
        }
        let raw = r.take(rows * cols * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded[idx] = Some(DenseMatrix::new(rows, cols, data)?);
    }
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()).into());
    }
    for (slot, (target, (name, _))) in loaded
        .into_iter()
        .zip(classifier.tensors_mut().into_iter().zip(&names))
    {
        *target = slot.ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
    }
    Ok(classifier)
}

pub fn save_checkpoint(classifier: &Classifier, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(classifier)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Classifier> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
