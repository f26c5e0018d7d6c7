//! Sparse trees whose values live on a [`Graph`].
//!
//! Addresses are plain data; only the value rows carry gradients. Every
//! structural operation lowers to one weighted scatter, so coalescing sends
//! the same upstream gradient to every summand sharing an address.

use crate::address::{TreeIndex, MAX_ADDRESS_DEPTH};
use crate::autodiff::{Graph, ScatterSource, Var, Weight};
use crate::error::{Error, Result};
use crate::sparse::SparseTree;
use crate::tree_ops::topk_rows;

#[derive(Debug, Clone)]
pub struct DiffTree {
    dim: usize,
    indices: Vec<TreeIndex>,
    /// `indices.len() x dim`; `None` for the empty tree.
    values: Option<Var>,
}

/// One addressed contribution list feeding [`combine`].
struct Part {
    src: Var,
    weight: Weight,
    rows: Vec<(u32, u64)>,
}

fn combine(g: &mut Graph<'_>, dim: usize, parts: Vec<Part>) -> Result<DiffTree> {
    let mut all: Vec<u64> = parts
        .iter()
        .flat_map(|p| p.rows.iter().map(|r| r.1))
        .collect();
    all.sort_unstable();
    all.dedup();
    if all.is_empty() {
        return Ok(DiffTree::empty(dim));
    }
    let sources = parts
        .into_iter()
        .filter(|p| !p.rows.is_empty())
        .map(|p| ScatterSource {
            src: p.src,
            weight: p.weight,
            pairs: p
                .rows
                .iter()
                .map(|&(r, idx)| (r, all.binary_search(&idx).expect("present") as u32))
                .collect(),
        })
        .collect();
    let values = g.scatter(all.len(), dim, sources)?;
    let indices = all
        .into_iter()
        .map(|i| TreeIndex::new(i).expect("nonzero address"))
        .collect();
    Ok(DiffTree {
        dim,
        indices,
        values: Some(values),
    })
}

fn is_const_zero(w: &Weight) -> bool {
    matches!(w, Weight::Const(x) if *x == 0.0)
}

impl DiffTree {
    pub fn empty(dim: usize) -> Self {
        DiffTree {
            dim,
            indices: Vec::new(),
            values: None,
        }
    }

    /// Wraps an `n x dim` value matrix; `indices` must be sorted and unique.
    pub fn from_parts(g: &Graph<'_>, indices: Vec<TreeIndex>, values: Var) -> Result<Self> {
        let (r, c) = g.shape(values);
        if r != indices.len() {
            return Err(Error::DimMismatch {
                expected: indices.len(),
                got: r,
            });
        }
        if !indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Data("tree addresses must be sorted and unique".into()));
        }
        Ok(DiffTree {
            dim: c,
            indices,
            values: (r > 0).then_some(values),
        })
    }

    /// Non-differentiable copy of a plain tree.
    pub fn constant(g: &mut Graph<'_>, t: &SparseTree) -> Self {
        if t.is_empty() {
            return Self::empty(t.dim());
        }
        let v = g.constant(t.len(), t.dim(), t.values().to_vec());
        DiffTree {
            dim: t.dim(),
            indices: t.indices().to_vec(),
            values: Some(v),
        }
    }

    /// Differentiable leaf copy of a plain tree.
    pub fn input(g: &mut Graph<'_>, t: &SparseTree) -> Self {
        if t.is_empty() {
            return Self::empty(t.dim());
        }
        let v = g.input(t.len(), t.dim(), t.values().to_vec());
        DiffTree {
            dim: t.dim(),
            indices: t.indices().to_vec(),
            values: Some(v),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[TreeIndex] {
        &self.indices
    }

    pub fn values(&self) -> Option<Var> {
        self.values
    }

    /// Row of `values` holding address `i`.
    pub fn position(&self, i: TreeIndex) -> Option<usize> {
        self.indices.binary_search(&i).ok()
    }

    pub fn to_sparse(&self, g: &Graph<'_>) -> SparseTree {
        match self.values {
            None => SparseTree::empty(self.dim),
            Some(v) => SparseTree::from_sorted_parts(
                self.dim,
                self.indices.clone(),
                g.value(v).to_vec(),
            ),
        }
    }

    fn part(&self, weight: Weight, map: impl Fn(u64) -> Option<u64>) -> Option<Part> {
        let src = self.values?;
        let rows: Vec<(u32, u64)> = self
            .indices
            .iter()
            .enumerate()
            .filter_map(|(r, i)| map(i.get()).map(|t| (r as u32, t)))
            .collect();
        Some(Part { src, weight, rows })
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: self.dim,
            });
        }
        Ok(())
    }

    /// Rows kept in the given (ascending) order.
    pub fn gather(&self, g: &mut Graph<'_>, rows: &[usize]) -> Result<DiffTree> {
        let Some(v) = self.values else {
            return Ok(self.clone());
        };
        if rows.is_empty() {
            return Ok(Self::empty(self.dim));
        }
        let indices = rows.iter().map(|&r| self.indices[r]).collect();
        let values = g.gather_rows(v, rows)?;
        Ok(DiffTree {
            dim: self.dim,
            indices,
            values: Some(values),
        })
    }
}

/// `Σ_m w_m · T_m`, coalesced.
pub fn weighted_tree_sum(g: &mut Graph<'_>, weights: &[Weight], trees: &[&DiffTree]) -> Result<DiffTree> {
    if weights.len() != trees.len() {
        return Err(Error::DimMismatch {
            expected: trees.len(),
            got: weights.len(),
        });
    }
    let dim = trees.first().map_or(0, |t| t.dim);
    let mut parts = Vec::with_capacity(trees.len());
    for (w, t) in weights.iter().zip(trees) {
        t.check_dim(dim)?;
        if is_const_zero(w) {
            continue;
        }
        parts.extend(t.part(*w, Some));
    }
    combine(g, dim, parts)
}

/// Single-node tree holding a `1 x d` vector at the root.
pub fn root_insert(g: &mut Graph<'_>, s: Var) -> Result<DiffTree> {
    let (r, d) = g.shape(s);
    if r != 1 {
        return Err(Error::ShapeMismatch {
            op: "root_insert",
            lhs: (r, d),
            rhs: (1, d),
        });
    }
    DiffTree::from_parts(g, vec![TreeIndex::ROOT], s)
}

pub fn left(g: &mut Graph<'_>, t: &DiffTree) -> Result<DiffTree> {
    let parts = t
        .part(Weight::Const(1.0), |i| (i & 1 == 0).then_some(i >> 1))
        .into_iter()
        .collect();
    combine(g, t.dim, parts)
}

pub fn right(g: &mut Graph<'_>, t: &DiffTree) -> Result<DiffTree> {
    let parts = t
        .part(Weight::Const(1.0), |i| (i & 1 == 1 && i > 1).then_some(i >> 1))
        .into_iter()
        .collect();
    combine(g, t.dim, parts)
}

fn check_room(t: &DiffTree, max_depth: u32) -> Result<()> {
    let max_depth = max_depth.min(MAX_ADDRESS_DEPTH);
    match t.indices.last() {
        Some(i) if i.depth() >= max_depth => Err(Error::DepthOverflow {
            index: i.get(),
            max_depth,
        }),
        _ => Ok(()),
    }
}

pub fn cons(
    g: &mut Graph<'_>,
    l: &DiffTree,
    r: &DiffTree,
    root: Option<Var>,
    max_depth: u32,
) -> Result<DiffTree> {
    interpret(
        g,
        [Weight::Const(0.0), Weight::Const(0.0), Weight::Const(1.0)],
        [&DiffTree::empty(l.dim), &DiffTree::empty(l.dim), l, r],
        root,
        max_depth,
    )
}

/// `w_L left(T_L) + w_R right(T_R) + w_C (cons(T_CL, T_CR) + s at the root)`
/// as one scatter. Branches whose weight is the constant 0 are skipped;
/// weights drawn from the graph are never skipped.
pub fn interpret(
    g: &mut Graph<'_>,
    w: [Weight; 3],
    args: [&DiffTree; 4],
    root: Option<Var>,
    max_depth: u32,
) -> Result<DiffTree> {
    let dim = args[2].dim;
    for a in args {
        a.check_dim(dim)?;
    }
    let mut parts = Vec::new();
    if !is_const_zero(&w[0]) {
        parts.extend(args[0].part(w[0], |i| (i & 1 == 0).then_some(i >> 1)));
    }
    if !is_const_zero(&w[1]) {
        parts.extend(args[1].part(w[1], |i| (i & 1 == 1 && i > 1).then_some(i >> 1)));
    }
    if !is_const_zero(&w[2]) {
        check_room(args[2], max_depth)?;
        check_room(args[3], max_depth)?;
        parts.extend(args[2].part(w[2], |i| Some(i << 1)));
        parts.extend(args[3].part(w[2], |i| Some((i << 1) | 1)));
        if let Some(s) = root {
            let (r, d) = g.shape(s);
            if r != 1 || d != dim {
                return Err(Error::DimMismatch { expected: dim, got: d });
            }
            parts.push(Part {
                src: s,
                weight: w[2],
                rows: vec![(0, 1)],
            });
        }
    }
    combine(g, dim, parts)
}

/// Keeps the `k` rows of largest L2 norm; ties go to the smaller address.
pub fn prune_topk(g: &mut Graph<'_>, t: &DiffTree, k: usize) -> Result<DiffTree> {
    let Some(v) = t.values else {
        return Ok(t.clone());
    };
    if t.len() <= k {
        return Ok(t.clone());
    }
    let vals = g.value(v);
    let norms: Vec<f64> = vals
        .chunks(t.dim)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let keep = topk_rows(&norms, &t.indices, k);
    t.gather(g, &keep)
}

/// Removes nodes deeper than `max_depth`.
pub fn clip_depth(g: &mut Graph<'_>, t: &DiffTree, max_depth: u32) -> Result<DiffTree> {
    let cut = t.indices.partition_point(|i| i.depth() <= max_depth);
    if cut == t.len() {
        return Ok(t.clone());
    }
    let rows: Vec<usize> = (0..cut).collect();
    t.gather(g, &rows)
}
