//! Binary checkpoints: `OV2VSS1`, a little-endian `u32` header length, a JSON header,
//! then every parameter as little-endian `f32` in manifest order.
//!
//! Files are written to a temporary sibling and renamed into place, so a reader never
//! sees a partial checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clipio::ClassVocabulary;
use crate::config::Config;
use crate::error::{io_err, Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 7] = b"OV2VSS1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub iteration: usize,
    pub config: BTreeMap<String, String>,
    pub vocab: ClassVocabulary,
    /// Vocabulary indices presented during training, in order; the auxiliary head has
    /// one output per entry.
    pub presented: Vec<usize>,
    pub params: Vec<ParamShape>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(cfg: &Config, vocab: &ClassVocabulary, presented: &[usize], iteration: usize, store: &ParamStore<f32>) -> Self {
        let params = store
            .entries()
            .iter()
            .map(|e| ParamShape { name: e.name.clone(), rows: e.value.rows(), cols: e.value.cols() })
            .collect();
        Checkpoint {
            header: Header {
                version: VERSION,
                iteration,
                config: cfg.entries(),
                vocab: vocab.clone(),
                presented: presented.to_vec(),
                params,
            },
            store: store.clone(),
        }
    }

    pub fn config(&self) -> Result<Config> {
        Config::from_entries(&self.header.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 4 * self.store.total_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.store.entries() {
            for x in e.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing OV2VSS1 magic"));
        }
        let mut pos = MAGIC.len();
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        pos += 4;
        let header_bytes = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        pos += len;
        let mut store = ParamStore::new();
        for p in &header.params {
            let n = p.rows * p.cols;
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated parameter data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            store.insert(&p.name, Mat::from_vec(p.rows, p.cols, data));
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(Checkpoint { header, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Builds the network described by the header and fills in the stored values.
    pub fn build_model(&self) -> Result<(Model, ParamStore<f32>)> {
        let cfg = self.config()?;
        let mut store = ParamStore::new();
        let model = Model::new(&cfg, self.header.presented.len(), &mut store)?;
        copy_params(&self.store, &mut store, |_| true, true)?;
        Ok((model, store))
    }
}

/// Copies values from `src` into `dst` for every `dst` parameter accepted by `select`.
/// With `require_all`, a selected parameter missing from `src` is an error.
pub fn copy_params(
    src: &ParamStore<f32>,
    dst: &mut ParamStore<f32>,
    select: impl Fn(&str) -> bool,
    require_all: bool,
) -> Result<usize> {
    let mut copied = 0;
    for id in dst.ids().collect::<Vec<_>>() {
        let name = dst.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let Some(sid) = src.id(&name) else {
            if require_all {
                return Err(Error::Checkpoint(format!("parameter {name} missing from checkpoint")));
            }
            continue;
        };
        let (s, d) = (src.get(sid), dst.get(id));
        if s.shape() != d.shape() {
            return Err(Error::Checkpoint(format!("parameter {name}: checkpoint {:?}, model {:?}", s.shape(), d.shape())));
        }
        *dst.get_mut(id) = s.clone();
        copied += 1;
    }
    if require_all && src.len() != dst.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {} parameters, model {}", src.len(), dst.len())));
    }
    Ok(copied)
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}
