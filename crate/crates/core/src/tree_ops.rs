//! `left`, `right` and `cons` as address arithmetic, the blended
//! interpreter step, and top-k pruning.

use crate::address::{TreeIndex, MAX_ADDRESS_DEPTH};
use crate::error::{Error, Result};
use crate::sparse::SparseTree;

/// Simplex weights over (left, right, cons).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpWeights {
    pub left: f64,
    pub right: f64,
    pub cons: f64,
}

impl OpWeights {
    pub const LEFT: OpWeights = OpWeights {
        left: 1.0,
        right: 0.0,
        cons: 0.0,
    };
    pub const RIGHT: OpWeights = OpWeights {
        left: 0.0,
        right: 1.0,
        cons: 0.0,
    };
    pub const CONS: OpWeights = OpWeights {
        left: 0.0,
        right: 0.0,
        cons: 1.0,
    };

    pub fn new(left: f64, right: f64, cons: f64) -> Result<Self> {
        let ok = [left, right, cons].iter().all(|w| *w >= 0.0 && w.is_finite())
            && (left + right + cons - 1.0).abs() <= 1e-6;
        if !ok {
            return Err(Error::Config(format!(
                "op weights ({left}, {right}, {cons}) are not on the simplex"
            )));
        }
        Ok(OpWeights { left, right, cons })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.left, self.right, self.cons]
    }
}

/// Tree arguments of one interpreter step.
#[derive(Debug, Clone)]
pub struct InterpreterArgs {
    pub t_left: SparseTree,
    pub t_right: SparseTree,
    pub t_cons_left: SparseTree,
    pub t_cons_right: SparseTree,
    pub root_filler: Vec<f64>,
}

impl InterpreterArgs {
    fn check(&self) -> Result<usize> {
        let d = self.root_filler.len();
        for t in [&self.t_left, &self.t_right, &self.t_cons_left, &self.t_cons_right] {
            if t.dim() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: t.dim(),
                });
            }
        }
        Ok(d)
    }

    /// `alpha * self + beta * other`, tree by tree.
    pub fn combine(&self, alpha: f64, other: &InterpreterArgs, beta: f64) -> Result<Self> {
        let mix = |a: &SparseTree, b: &SparseTree| a.scale(alpha).add(&b.scale(beta));
        Ok(InterpreterArgs {
            t_left: mix(&self.t_left, &other.t_left)?,
            t_right: mix(&self.t_right, &other.t_right)?,
            t_cons_left: mix(&self.t_cons_left, &other.t_cons_left)?,
            t_cons_right: mix(&self.t_cons_right, &other.t_cons_right)?,
            root_filler: self
                .root_filler
                .iter()
                .zip(&other.root_filler)
                .map(|(x, y)| alpha * x + beta * y)
                .collect(),
        })
    }
}

fn shifted(t: &SparseTree, keep: impl Fn(u64) -> bool) -> SparseTree {
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, v) in t.iter() {
        if keep(i.get()) {
            indices.push(TreeIndex::new(i.get() >> 1).expect("child address >= 2"));
            values.extend_from_slice(v);
        }
    }
    // Even (or odd) addresses map monotonically under `>> 1`, so order holds.
    SparseTree::from_sorted_parts(t.dim(), indices, values)
}

/// Left subtree: even addresses shifted right by one bit.
pub fn op_left(t: &SparseTree) -> SparseTree {
    shifted(t, |i| i & 1 == 0)
}

/// Right subtree: odd addresses other than the root, shifted right.
pub fn op_right(t: &SparseTree) -> SparseTree {
    shifted(t, |i| i & 1 == 1 && i > 1)
}

fn push_child(i: TreeIndex, bit: u64, max_depth: u32) -> Result<TreeIndex> {
    let max_depth = max_depth.min(MAX_ADDRESS_DEPTH);
    if i.depth() >= max_depth {
        return Err(Error::DepthOverflow {
            index: i.get(),
            max_depth,
        });
    }
    Ok(TreeIndex::new((i.get() << 1) | bit).expect("nonzero"))
}

/// New tree with `l` and `r` as subtrees and an optional root value.
pub fn op_cons(
    l: &SparseTree,
    r: &SparseTree,
    root: Option<&[f64]>,
    max_depth: u32,
) -> Result<SparseTree> {
    let d = l.dim();
    if r.dim() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: r.dim(),
        });
    }
    if let Some(s) = root {
        if s.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: s.len(),
            });
        }
    }
    let mut entries: Vec<(TreeIndex, &[f64])> = Vec::with_capacity(l.len() + r.len() + 1);
    if let Some(s) = root {
        entries.push((TreeIndex::ROOT, s));
    }
    for (i, v) in l.iter() {
        entries.push((push_child(i, 0, max_depth)?, v));
    }
    for (i, v) in r.iter() {
        entries.push((push_child(i, 1, max_depth)?, v));
    }
    SparseTree::coalesce(d, entries)
}

/// One blended interpreter step:
/// `w_L left(T_L) + w_R right(T_R) + w_C (cons(T_CL, T_CR) + s at the root)`.
pub fn interpret(w: OpWeights, args: &InterpreterArgs, max_depth: u32) -> Result<SparseTree> {
    let d = args.check()?;
    let mut parts: Vec<SparseTree> = Vec::with_capacity(3);
    if w.left != 0.0 {
        parts.push(op_left(&args.t_left).scale(w.left));
    }
    if w.right != 0.0 {
        parts.push(op_right(&args.t_right).scale(w.right));
    }
    if w.cons != 0.0 {
        let c = op_cons(
            &args.t_cons_left,
            &args.t_cons_right,
            Some(&args.root_filler),
            max_depth,
        )?;
        parts.push(c.scale(w.cons));
    }
    SparseTree::coalesce(d, parts.iter().flat_map(|p| p.iter()))
}

/// Row order for top-k selection: larger norm first, then smaller address.
pub(crate) fn topk_rows(norms: &[f64], indices: &[TreeIndex], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| {
        norms[b]
            .partial_cmp(&norms[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(indices[a].cmp(&indices[b]))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Keeps the `k` entries with the largest L2 norm.
pub fn prune_topk(t: &SparseTree, k: usize) -> SparseTree {
    if t.len() <= k {
        return t.clone();
    }
    let norms: Vec<f64> = (0..t.len())
        .map(|r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let keep = topk_rows(&norms, t.indices(), k);
    let mut indices = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k * t.dim());
    for r in keep {
        indices.push(t.indices()[r]);
        values.extend_from_slice(t.row(r));
    }
    SparseTree::from_sorted_parts(t.dim(), indices, values)
}
