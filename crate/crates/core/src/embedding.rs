//! Token embeddings and conversion between [`SymbolTree`] and [`SparseTree`].
//!
//! Readout is nearest-embedding: a value `v` scores token `y` with
//! `v·E[y] - ½‖E[y]‖²`, which ranks tokens exactly as `-½‖v - E[y]‖²` does.
//! The `<NULL>` row is the zero vector, so an absent or faint node decodes
//! to `<NULL>` and is dropped.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sparse::SparseTree;
use crate::symbol::{SymbolTree, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    /// Row-major `vocab_size x dim`.
    data: Vec<f64>,
    pub frozen: bool,
}

impl EmbeddingTable {
    /// Random unit-norm rows, with the `<NULL>` row set to zero.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let mut data = Vec::with_capacity(vocab_size * dim);
        for row in 0..vocab_size {
            if row == Vocab::NULL.index() {
                data.extend(std::iter::repeat(0.0).take(dim));
                continue;
            }
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            data.extend(v.into_iter().map(|x| x / n));
        }
        EmbeddingTable {
            dim,
            data,
            frozen: true,
        }
    }

    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        Ok(EmbeddingTable {
            dim,
            data,
            frozen: true,
        })
    }

    /// Appends a fresh random unit row, used when a vocabulary is extended.
    pub fn push_random_row<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        self.data.extend(v.into_iter().map(|x| x / n));
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, id: TokenId) -> Result<&[f64]> {
        let k = id.index();
        if k >= self.vocab_size() {
            return Err(Error::UnknownTokenId(id.0));
        }
        Ok(&self.data[k * self.dim..(k + 1) * self.dim])
    }

    /// Per-token bias `-½‖E[y]‖²` of the readout.
    pub fn readout_bias(&self) -> Vec<f64> {
        self.data
            .chunks(self.dim)
            .map(|r| -0.5 * r.iter().map(|x| x * x).sum::<f64>())
            .collect()
    }

    pub fn readout_scores(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.dim)
            .map(|r| {
                let dot: f64 = r.iter().zip(v).map(|(a, b)| a * b).sum();
                dot - 0.5 * r.iter().map(|x| x * x).sum::<f64>()
            })
            .collect()
    }

    /// Highest-scoring token; ties go to the lower id.
    pub fn nearest(&self, v: &[f64]) -> TokenId {
        let scores = self.readout_scores(v);
        let mut best = 0;
        for (k, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = k;
            }
        }
        TokenId(best as u32)
    }
}

/// One entry per node at its Gorn address, valued by the label embedding.
pub fn from_symbol_tree(
    t: &SymbolTree<TokenId>,
    table: &EmbeddingTable,
    max_depth: u32,
) -> Result<SparseTree> {
    let nodes = t.indexed(max_depth)?;
    let mut indices = Vec::with_capacity(nodes.len());
    let mut values = Vec::with_capacity(nodes.len() * table.dim());
    for (i, label) in nodes {
        indices.push(i);
        values.extend_from_slice(table.row(*label)?);
    }
    Ok(SparseTree::from_sorted_parts(table.dim(), indices, values))
}

/// Decodes every entry to its nearest token, drops `null` entries and
/// rebuilds the tree. Returns `None` when every entry decodes to `null`.
pub fn to_symbol_tree(
    s: &SparseTree,
    table: &EmbeddingTable,
    null: TokenId,
) -> Result<Option<SymbolTree<TokenId>>> {
    let mut nodes = BTreeMap::new();
    for (i, v) in s.iter() {
        let tok = table.nearest(v);
        if tok != null {
            nodes.insert(i.get(), tok);
        }
    }
    SymbolTree::from_indexed(nodes)
}
