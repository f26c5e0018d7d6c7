//! Sparse coordinate trees and the sparse differentiable tree machine.
//!
//! Binary trees are stored as sorted lists of (Gorn address, value vector)
//! entries. `left`, `right` and `cons` reduce to bit shifts on addresses,
//! which makes them cheap and differentiable with respect to the values.
//! On top of that sits a transformer agent that learns to compose these
//! operations into tree-to-tree, sequence-to-tree and sequence-to-sequence
//! transductions.

pub mod address;
pub mod agent;
pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod difftree;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod machine;
pub mod sparse;
pub mod symbol;
pub mod tpr;
pub mod train;
pub mod tree_ops;

pub use address::{decode_address, encode_address, Branch, Path, TreeIndex};
pub use embedding::{from_symbol_tree, to_symbol_tree, EmbeddingTable};
pub use error::{Error, Result};
pub use sparse::SparseTree;
pub use symbol::{RoseTree, SymbolTree, TokenId, Vocab};
pub use tree_ops::{interpret, op_cons, op_left, op_right, prune_topk, InterpreterArgs, OpWeights};
