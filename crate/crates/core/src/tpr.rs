//! Dense tensor product representation with one-hot roles.
//!
//! This is a reference fixture for checking the sparse tree operations: a
//! tree is a `d_f x d_r` matrix whose column `i` holds the filler bound to
//! address `i`, and `left`, `right` and `cons` are explicit role-space
//! matrices applied by multiplication.

use nalgebra::{DMatrix, DVector};

use crate::address::TreeIndex;
use crate::error::{Error, Result};
use crate::sparse::SparseTree;
use crate::tree_ops::{InterpreterArgs, OpWeights};

/// Largest depth supported by the dense oracle.
pub const MAX_ORACLE_DEPTH: u32 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTpr {
    max_depth: u32,
    matrix: DMatrix<f64>,
}

fn role_dim(max_depth: u32) -> usize {
    1usize << (max_depth + 1)
}

impl DenseTpr {
    pub fn zeros(filler_dim: usize, max_depth: u32) -> Result<Self> {
        if max_depth > MAX_ORACLE_DEPTH {
            return Err(Error::Config(format!(
                "dense oracle depth {max_depth} exceeds {MAX_ORACLE_DEPTH}"
            )));
        }
        Ok(DenseTpr {
            max_depth,
            matrix: DMatrix::zeros(filler_dim, role_dim(max_depth)),
        })
    }

    pub fn filler_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn role_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Number of stored scalars, independent of how many nodes are filled.
    pub fn storage_len(&self) -> usize {
        self.matrix.len()
    }

    /// Sums `f ⊗ r_i` over the entries, with `r_i` the one-hot role `i`.
    pub fn bind_all<'a, I>(filler_dim: usize, max_depth: u32, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (TreeIndex, &'a [f64])>,
    {
        let mut t = Self::zeros(filler_dim, max_depth)?;
        let size = t.role_dim();
        for (i, f) in entries {
            if f.len() != filler_dim {
                return Err(Error::DimMismatch {
                    expected: filler_dim,
                    got: f.len(),
                });
            }
            let col = i.get() as usize;
            if i.get() >= size as u64 {
                return Err(Error::RoleOutOfRange {
                    index: i.get(),
                    size,
                });
            }
            let role = DVector::from_fn(size, |r, _| if r == col { 1.0 } else { 0.0 });
            let filler = DVector::from_column_slice(f);
            t.matrix += filler * role.transpose();
        }
        Ok(t)
    }

    pub fn from_sparse(s: &SparseTree, max_depth: u32) -> Result<Self> {
        Self::bind_all(s.dim(), max_depth, s.iter())
    }

    /// Filler at address `i`: `T r_i⁺`, where the dual of a one-hot role is itself.
    pub fn unbind(&self, i: TreeIndex) -> Result<Vec<f64>> {
        let size = self.role_dim();
        if i.get() >= size as u64 {
            return Err(Error::RoleOutOfRange {
                index: i.get(),
                size,
            });
        }
        let dual = DVector::from_fn(size, |r, _| if r as u64 == i.get() { 1.0 } else { 0.0 });
        Ok((&self.matrix * dual).iter().copied().collect())
    }

    /// Every nonzero column as a sparse tree.
    pub fn to_sparse(&self) -> SparseTree {
        let d = self.filler_dim();
        let entries = (1..self.role_dim())
            .filter(|&c| self.matrix.column(c).iter().any(|x| *x != 0.0))
            .map(|c| {
                (
                    TreeIndex::new(c as u64).expect("column >= 1"),
                    self.matrix.column(c).iter().copied().collect::<Vec<_>>(),
                )
            });
        SparseTree::coalesce(d, entries).expect("consistent dim")
    }

    fn with_matrix(&self, matrix: DMatrix<f64>) -> Self {
        DenseTpr {
            max_depth: self.max_depth,
            matrix,
        }
    }

    fn check_same(&self, other: &DenseTpr) -> Result<()> {
        if self.matrix.shape() != other.matrix.shape() {
            return Err(Error::ShapeMismatch {
                op: "dense tpr",
                lhs: self.matrix.shape(),
                rhs: other.matrix.shape(),
            });
        }
        Ok(())
    }
}

/// Role map sending column `2i` to column `i`.
pub fn left_role_map(max_depth: u32) -> DMatrix<f64> {
    let n = role_dim(max_depth);
    DMatrix::from_fn(n, n, |r, c| if c >= 1 && r == 2 * c { 1.0 } else { 0.0 })
}

/// Role map sending column `2i + 1` to column `i`, for `i >= 1`.
pub fn right_role_map(max_depth: u32) -> DMatrix<f64> {
    let n = role_dim(max_depth);
    DMatrix::from_fn(n, n, |r, c| if c >= 1 && r == 2 * c + 1 { 1.0 } else { 0.0 })
}

/// Role map sending column `i` to column `2i + bit`.
pub fn cons_role_map(max_depth: u32, bit: usize) -> DMatrix<f64> {
    let n = role_dim(max_depth);
    DMatrix::from_fn(n, n, |r, c| if r >= 1 && c == 2 * r + bit { 1.0 } else { 0.0 })
}

pub fn dense_left(t: &DenseTpr) -> DenseTpr {
    t.with_matrix(&t.matrix * left_role_map(t.max_depth))
}

pub fn dense_right(t: &DenseTpr) -> DenseTpr {
    t.with_matrix(&t.matrix * right_role_map(t.max_depth))
}

fn check_cons_room(t: &DenseTpr) -> Result<()> {
    let half = t.role_dim() / 2;
    for c in half..t.role_dim() {
        if t.matrix.column(c).iter().any(|x| *x != 0.0) {
            return Err(Error::DepthOverflow {
                index: c as u64,
                max_depth: t.max_depth,
            });
        }
    }
    Ok(())
}

pub fn dense_cons(l: &DenseTpr, r: &DenseTpr, root: Option<&[f64]>) -> Result<DenseTpr> {
    l.check_same(r)?;
    check_cons_room(l)?;
    check_cons_room(r)?;
    let mut m = &l.matrix * cons_role_map(l.max_depth, 0) + &r.matrix * cons_role_map(l.max_depth, 1);
    if let Some(s) = root {
        if s.len() != l.filler_dim() {
            return Err(Error::DimMismatch {
                expected: l.filler_dim(),
                got: s.len(),
            });
        }
        let e1 = DVector::from_fn(l.role_dim(), |i, _| if i == 1 { 1.0 } else { 0.0 });
        m += DVector::from_column_slice(s) * e1.transpose();
    }
    Ok(l.with_matrix(m))
}

/// Dense evaluation of the blended interpreter step.
pub fn dense_interpret(w: OpWeights, args: &InterpreterArgs, max_depth: u32) -> Result<DenseTpr> {
    let dense = |s: &SparseTree| DenseTpr::from_sparse(s, max_depth);
    let c = dense_cons(
        &dense(&args.t_cons_left)?,
        &dense(&args.t_cons_right)?,
        Some(&args.root_filler),
    )?;
    let l = dense_left(&dense(&args.t_left)?);
    let r = dense_right(&dense(&args.t_right)?);
    Ok(l.with_matrix(l.matrix.scale(w.left) + r.matrix.scale(w.right) + c.matrix.scale(w.cons)))
}

/// Largest absolute entry difference between two dense trees.
pub fn max_abs_diff(a: &DenseTpr, b: &DenseTpr) -> f64 {
    a.matrix
        .iter()
        .zip(b.matrix.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
