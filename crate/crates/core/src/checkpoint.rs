//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! "SDTM"            4 bytes magic
//! version           u32
//! meta_len          u32, then meta_len bytes of UTF-8 JSON
//!                   {"config": <machine config>, "vocab": [tokens by id]}
//! tensor_count      u32
//! per tensor:
//!   name_len        u32, then name_len bytes of UTF-8
//!   rank            u32 (always 2)
//!   dims            rank x u32
//!   trainable       u8 (0 or 1)
//!   data            product(dims) x f64, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::machine::{MachineConfig, Model};
use crate::symbol::Vocab;

pub const MAGIC: &[u8; 4] = b"SDTM";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: MachineConfig,
    vocab: Vec<String>,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let meta = serde_json::to_vec(&Meta {
        config: model.cfg.clone(),
        vocab: model.vocab.tokens().to_vec(),
    })
    .expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(p.rows as u32).to_le_bytes());
        out.extend_from_slice(&(p.cols as u32).to_le_bytes());
        out.push(p.trainable as u8);
        for x in &p.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta: Meta = serde_json::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let n = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad trainable flag {b}"))),
        };
        let data = r
            .take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(name, rows, cols, data, trainable);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let vocab = Vocab::from_tokens(meta.vocab.iter().skip(3));
    if vocab.tokens() != meta.vocab.as_slice() {
        return Err(Error::Checkpoint("vocabulary does not start with the special tokens".into()));
    }
    Model::from_parts(meta.config, vocab, store)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
