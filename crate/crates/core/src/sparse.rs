//! The sparse coordinate tree: a coalesced list of (address, value vector)
//! entries kept sorted by address.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::address::TreeIndex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTree {
    dim: usize,
    indices: Vec<TreeIndex>,
    /// Row-major `indices.len() x dim`.
    values: Vec<f64>,
}

impl SparseTree {
    pub fn empty(dim: usize) -> Self {
        SparseTree {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a tree from entries already sorted and unique.
    pub(crate) fn from_sorted_parts(dim: usize, indices: Vec<TreeIndex>, values: Vec<f64>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(indices.len() * dim, values.len());
        SparseTree {
            dim,
            indices,
            values,
        }
    }

    /// Sums entries sharing an address. Input order is irrelevant.
    pub fn coalesce<I, V>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (TreeIndex, V)>,
        V: AsRef<[f64]>,
    {
        let mut acc: BTreeMap<TreeIndex, Vec<f64>> = BTreeMap::new();
        for (i, v) in entries {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            let slot = acc.entry(i).or_insert_with(|| vec![0.0; dim]);
            for (s, x) in slot.iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut indices = Vec::with_capacity(acc.len());
        let mut values = Vec::with_capacity(acc.len() * dim);
        for (i, v) in acc {
            indices.push(i);
            values.extend_from_slice(&v);
        }
        Ok(SparseTree {
            dim,
            indices,
            values,
        })
    }

    /// Like [`SparseTree::coalesce`] but with raw integer addresses.
    pub fn from_raw<V: AsRef<[f64]>>(dim: usize, entries: Vec<(u64, V)>) -> Result<Self> {
        let checked = entries
            .into_iter()
            .map(|(i, v)| TreeIndex::new(i).map(|i| (i, v)))
            .collect::<Result<Vec<_>>>()?;
        Self::coalesce(dim, checked)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[TreeIndex] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn get(&self, i: TreeIndex) -> Option<&[f64]> {
        self.indices
            .binary_search(&i)
            .ok()
            .map(|k| self.row(k))
    }

    pub fn iter(&self) -> impl Iterator<Item = (TreeIndex, &[f64])> + '_ {
        self.indices
            .iter()
            .enumerate()
            .map(move |(k, &i)| (i, self.row(k)))
    }

    pub fn max_depth(&self) -> u32 {
        self.indices.last().map_or(0, |i| i.depth())
    }

    pub fn scale(&self, s: f64) -> SparseTree {
        SparseTree {
            dim: self.dim,
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Entrywise sum followed by coalescing.
    pub fn add(&self, other: &SparseTree) -> Result<SparseTree> {
        if self.dim != other.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        Self::coalesce(self.dim, self.iter().chain(other.iter()))
    }

    /// Drops entries whose value is exactly zero.
    pub fn drop_zeros(&self) -> SparseTree {
        Self::coalesce(
            self.dim,
            self.iter().filter(|(_, v)| v.iter().any(|x| *x != 0.0)),
        )
        .expect("same dim")
    }

    /// Binary encoding: `dim: u32`, `len: u64`, then per entry a `u64`
    /// address followed by `dim` little-endian `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len() * (8 + 8 * self.dim));
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, v) in self.iter() {
            out.extend_from_slice(&i.get().to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SparseTree> {
        let bad = || Error::Data("truncated sparse tree encoding".into());
        let dim = u32::from_le_bytes(bytes.get(0..4).ok_or_else(bad)?.try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(bytes.get(4..12).ok_or_else(bad)?.try_into().unwrap()) as usize;
        let stride = 8 + 8 * dim;
        if bytes.len() != 12 + n * stride {
            return Err(bad());
        }
        let mut entries = Vec::with_capacity(n);
        for k in 0..n {
            let base = 12 + k * stride;
            let i = u64::from_le_bytes(bytes[base..base + 8].try_into().unwrap());
            let v: Vec<f64> = (0..dim)
                .map(|j| {
                    let o = base + 8 + 8 * j;
                    f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
                })
                .collect();
            entries.push((TreeIndex::new(i)?, v));
        }
        SparseTree::coalesce(dim, entries)
    }

    pub fn to_record(&self) -> SparseTreeRecord {
        SparseTreeRecord {
            entries: self.iter().map(|(i, v)| (i.get(), v.to_vec())).collect(),
            dim: self.dim,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("serializable")
    }

    pub fn from_json(line: &str) -> Result<SparseTree> {
        let rec: SparseTreeRecord =
            serde_json::from_str(line).map_err(|e| Error::Data(e.to_string()))?;
        rec.into_tree()
    }
}

/// JSON-lines form: `{"entries": [[index, [floats]], ...], "dim": d}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SparseTreeRecord {
    pub entries: Vec<(u64, Vec<f64>)>,
    pub dim: usize,
}

impl SparseTreeRecord {
    pub fn into_tree(self) -> Result<SparseTree> {
        SparseTree::from_raw(self.dim, self.entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(t: &SparseTree) -> Vec<(u64, Vec<f64>)> {
        t.iter().map(|(i, v)| (i.get(), v.to_vec())).collect()
    }

    #[test]
    fn coalesce_sums_duplicates() {
        let t = SparseTree::from_raw(2, vec![(1, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]).unwrap();
        assert_eq!(raw(&t), vec![(1, vec![1.0, 1.0])]);

        let t = SparseTree::from_raw(1, vec![(2, vec![3.0]), (3, vec![4.0])]).unwrap();
        assert_eq!(raw(&t), vec![(2, vec![3.0]), (3, vec![4.0])]);
    }

    #[test]
    fn coalesce_group_by_oracle() {
        let input = vec![(5u64, vec![1.0]), (5, vec![-1.0]), (2, vec![2.0])];
        // Brute-force group-by: for each distinct index, sum matching rows.
        let mut keys: Vec<u64> = input.iter().map(|e| e.0).collect();
        keys.sort();
        keys.dedup();
        let expected: Vec<(u64, Vec<f64>)> = keys
            .iter()
            .map(|&k| {
                let s: f64 = input.iter().filter(|e| e.0 == k).map(|e| e.1[0]).sum();
                (k, vec![s])
            })
            .collect();
        assert_eq!(expected, vec![(2, vec![2.0]), (5, vec![0.0])]);
        let t = SparseTree::from_raw(1, input).unwrap();
        assert_eq!(raw(&t), expected);
    }

    #[test]
    fn zero_rows_are_kept_until_dropped() {
        let t = SparseTree::from_raw(1, vec![(5, vec![1.0]), (5, vec![-1.0])]).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t.drop_zeros().is_empty());
    }

    #[test]
    fn coalesce_rejects_dim_mismatch() {
        let r = SparseTree::from_raw(2, vec![(1, vec![1.0, 0.0]), (2, vec![0.0])]);
        assert_eq!(r, Err(Error::DimMismatch { expected: 2, got: 1 }));
        assert_eq!(
            SparseTree::from_raw(1, vec![(0, vec![1.0])]),
            Err(Error::InvalidAddress)
        );
    }

    #[test]
    fn json_and_bytes_round_trip() {
        let t = SparseTree::from_raw(2, vec![(3, vec![0.5, -1.0]), (1, vec![2.0, 0.25])]).unwrap();
        let line = t.to_json();
        assert_eq!(line, r#"{"entries":[[1,[2.0,0.25]],[3,[0.5,-1.0]]],"dim":2}"#);
        assert_eq!(SparseTree::from_json(&line).unwrap(), t);
        assert_eq!(SparseTree::from_bytes(&t.to_bytes()).unwrap(), t);
        assert_eq!(t.to_bytes().len(), 12 + 2 * (8 + 16));
    }
}
