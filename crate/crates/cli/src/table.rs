//! Token embedding tables stored as JSON next to encoded trees.

use std::path::Path;

use serde::{Deserialize, Serialize};

use sdtm::{EmbeddingTable, Error, Result, Vocab};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableFile {
    pub dim: usize,
    pub tokens: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TableFile {
    pub fn new(vocab: &Vocab, table: &EmbeddingTable) -> Self {
        TableFile {
            dim: table.dim(),
            tokens: vocab.tokens().to_vec(),
            rows: table.data().chunks(table.dim().max(1)).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<(Vocab, EmbeddingTable)> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let f: TableFile = serde_json::from_str(&src).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        f.into_parts()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("table serializes");
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    fn into_parts(self) -> Result<(Vocab, EmbeddingTable)> {
        if self.tokens.len() != self.rows.len() {
            return Err(Error::Data(format!(
                "table has {} tokens but {} rows",
                self.tokens.len(),
                self.rows.len()
            )));
        }
        let vocab = Vocab::from_tokens(self.tokens.iter().skip(3));
        if vocab.tokens() != self.tokens.as_slice() {
            return Err(Error::Data("table must start with <NULL>, <NT>, <EOB> and list each token once".into()));
        }
        let mut data = Vec::with_capacity(self.rows.len() * self.dim);
        for r in &self.rows {
            if r.len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok((vocab, EmbeddingTable::from_rows(self.dim, data)?))
    }
}
