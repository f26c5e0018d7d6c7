//! Integer Gorn addressing.
//!
//! A node address is an integer whose bits, read from the least significant
//! end, spell the path from the root: `0` is a left branch and `1` a right
//! branch. The most significant set bit is a marker and is not a branch, so
//! the root is `1`, its left child `2` (`10b`) and its right child `3`
//! (`11b`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default maximum tree depth.
pub const DEFAULT_MAX_DEPTH: u32 = 16;

/// Deepest address representable in a `u64`.
pub const MAX_ADDRESS_DEPTH: u32 = 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TreeIndex(u64);

impl TreeIndex {
    pub const ROOT: TreeIndex = TreeIndex(1);

    pub fn new(value: u64) -> Result<Self> {
        if value == 0 {
            return Err(Error::InvalidAddress);
        }
        Ok(TreeIndex(value))
    }

    /// Builds an index and checks it against a depth bound.
    pub fn with_max_depth(value: u64, max_depth: u32) -> Result<Self> {
        let idx = Self::new(value)?;
        if idx.depth() > max_depth {
            return Err(Error::DepthOverflow {
                index: value,
                max_depth,
            });
        }
        Ok(idx)
    }

    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }

    /// Number of branches between the root and this node.
    #[inline]
    pub fn depth(self) -> u32 {
        63 - self.0.leading_zeros()
    }

    #[inline]
    pub fn bit_length(self) -> u32 {
        64 - self.0.leading_zeros()
    }

    pub fn parent(self) -> Option<TreeIndex> {
        (self.0 > 1).then(|| TreeIndex(parent_raw(self.0)))
    }

    pub fn left_child(self) -> Option<TreeIndex> {
        (self.depth() < MAX_ADDRESS_DEPTH).then(|| TreeIndex(child_raw(self.0, Branch::Left)))
    }

    pub fn right_child(self) -> Option<TreeIndex> {
        (self.depth() < MAX_ADDRESS_DEPTH).then(|| TreeIndex(child_raw(self.0, Branch::Right)))
    }

    pub fn path(self) -> Path {
        decode_address(self)
    }
}

impl fmt::Display for TreeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl TryFrom<u64> for TreeIndex {
    type Error = Error;

    fn try_from(value: u64) -> Result<Self> {
        TreeIndex::new(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Left,
    Right,
}

impl Branch {
    #[inline]
    fn bit(self) -> u64 {
        match self {
            Branch::Left => 0,
            Branch::Right => 1,
        }
    }
}

/// Root-to-node sequence of branches.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Path(pub Vec<Branch>);

impl Path {
    pub fn root() -> Self {
        Path(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn steps(&self) -> &[Branch] {
        &self.0
    }

    pub fn child(&self, b: Branch) -> Path {
        let mut steps = self.0.clone();
        steps.push(b);
        Path(steps)
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(match b {
                Branch::Left => "L",
                Branch::Right => "R",
            })?;
        }
        f.write_str("]")
    }
}

/// Extends a raw address by one branch. The new branch sits just below the
/// marker bit. The caller keeps the depth under [`MAX_ADDRESS_DEPTH`].
#[inline]
pub fn child_raw(v: u64, b: Branch) -> u64 {
    let d = 63 - v.leading_zeros();
    (v ^ (1 << d)) | (b.bit() << d) | (1 << (d + 1))
}

/// Drops the deepest branch of a raw address greater than 1.
#[inline]
pub fn parent_raw(v: u64) -> u64 {
    let d = 63 - v.leading_zeros();
    (v & ((1 << (d - 1)) - 1)) | (1 << (d - 1))
}

/// Reads the branch path out of an address, least significant bit first.
pub fn decode_address(i: TreeIndex) -> Path {
    let mut v = i.get();
    let mut steps = Vec::with_capacity(i.depth() as usize);
    while v > 1 {
        steps.push(if v & 1 == 0 {
            Branch::Left
        } else {
            Branch::Right
        });
        v >>= 1;
    }
    Path(steps)
}

/// Decodes a raw integer, rejecting 0.
pub fn decode_raw(i: u64) -> Result<Path> {
    TreeIndex::new(i).map(decode_address)
}

/// Inverse of [`decode_address`]: the last branch of the path ends up
/// next to the marker bit.
pub fn encode_address(path: &[Branch], max_depth: u32) -> Result<TreeIndex> {
    let max_depth = max_depth.min(MAX_ADDRESS_DEPTH);
    if path.len() > max_depth as usize {
        return Err(Error::PathTooDeep {
            len: path.len(),
            max_depth,
        });
    }
    let v = path.iter().rev().fold(1u64, |acc, b| (acc << 1) | b.bit());
    Ok(TreeIndex(v))
}
