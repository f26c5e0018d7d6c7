//! Randomized agreement checks between the sparse operations and their
//! references: the dense one-hot TPR and the pointer-tree operations.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{from_symbol_tree, EmbeddingTable};
use crate::error::{Error, Result};
use crate::sparse::SparseTree;
use crate::symbol::{SymbolTree, TokenId};
use crate::tpr::{dense_cons, dense_interpret, dense_left, dense_right, max_abs_diff, DenseTpr, MAX_ORACLE_DEPTH};
use crate::tree_ops::{interpret, op_cons, op_left, op_right, InterpreterArgs, OpWeights};

/// Random tree with up to `max_nodes` entries at addresses of depth at most
/// `max_depth` (not necessarily connected) and values in `[-1, 1)`.
pub fn random_sparse_tree<R: Rng + ?Sized>(rng: &mut R, max_depth: u32, dim: usize, max_nodes: usize) -> SparseTree {
    let slots = (1usize << (max_depth + 1)) - 1;
    let n = rng.gen_range(0..=max_nodes.min(slots));
    let entries = sample(rng, slots, n)
        .into_iter()
        .map(|k| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (k as u64 + 1, v)
        })
        .collect();
    SparseTree::from_raw(dim, entries).expect("valid addresses")
}

/// Random connected tree of depth at most `max_depth` over the non-special
/// labels `3..vocab_size`.
pub fn random_symbol_tree<R: Rng + ?Sized>(rng: &mut R, max_depth: u32, vocab_size: usize) -> SymbolTree<TokenId> {
    let label = TokenId(rng.gen_range(3..vocab_size.max(4)) as u32);
    if max_depth == 0 {
        return SymbolTree::leaf(label);
    }
    let left = rng.gen_bool(0.6).then(|| random_symbol_tree(rng, max_depth - 1, vocab_size));
    let right = rng.gen_bool(0.6).then(|| random_symbol_tree(rng, max_depth - 1, vocab_size));
    SymbolTree::node(label, left, right)
}

/// Point uniform on the probability simplex.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R) -> OpWeights {
    let e: Vec<f64> = (0..3).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    OpWeights {
        left: e[0] / s,
        right: e[1] / s,
        cons: e[2] / s,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub op: &'static str,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TprReport {
    pub depth: u32,
    pub dim: usize,
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub deviations: Vec<Deviation>,
}

impl TprReport {
    pub fn passed(&self) -> bool {
        self.deviations.iter().all(|d| d.max_abs <= self.tolerance)
    }
}

impl fmt::Display for TprReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "tpr check: depth={} dim={} trials={} seed={} tolerance={:e}",
            self.depth, self.dim, self.trials, self.seed, self.tolerance
        )?;
        writeln!(f, "{:<10} {:>12} status", "op", "max_abs_dev")?;
        for d in &self.deviations {
            let status = if d.max_abs <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{:<10} {:>12.3e} {}", d.op, d.max_abs, status)?;
        }
        write!(f, "result: {}", if self.passed() { "pass" } else { "fail" })
    }
}

/// Compares sparse `left`, `right`, `cons` and the interpreter against the
/// dense TPR on `trials` random instances.
pub fn tpr_check(depth: u32, dim: usize, trials: usize, seed: u64, tolerance: f64) -> Result<TprReport> {
    if depth == 0 || depth > MAX_ORACLE_DEPTH {
        return Err(Error::Config(format!("depth must be in 1..={MAX_ORACLE_DEPTH}")));
    }
    if dim == 0 {
        return Err(Error::Config("dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dev = [0.0f64; 4];
    let dense = |s: &SparseTree| DenseTpr::from_sparse(s, depth);
    let max_nodes = 64;
    for _ in 0..trials {
        let t = random_sparse_tree(&mut rng, depth, dim, max_nodes);
        dev[0] = dev[0].max(max_abs_diff(&dense_left(&dense(&t)?), &dense(&op_left(&t))?));
        dev[1] = dev[1].max(max_abs_diff(&dense_right(&dense(&t)?), &dense(&op_right(&t))?));

        let l = random_sparse_tree(&mut rng, depth - 1, dim, max_nodes);
        let r = random_sparse_tree(&mut rng, depth - 1, dim, max_nodes);
        let root: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sparse = op_cons(&l, &r, Some(&root), depth)?;
        dev[2] = dev[2].max(max_abs_diff(&dense_cons(&dense(&l)?, &dense(&r)?, Some(&root))?, &dense(&sparse)?));

        let w = random_simplex(&mut rng);
        let args = InterpreterArgs {
            t_left: random_sparse_tree(&mut rng, depth, dim, max_nodes),
            t_right: random_sparse_tree(&mut rng, depth, dim, max_nodes),
            t_cons_left: l,
            t_cons_right: r,
            root_filler: root,
        };
        let sparse = interpret(w, &args, depth)?;
        dev[3] = dev[3].max(max_abs_diff(&dense_interpret(w, &args, depth)?, &dense(&sparse)?));
    }
    let ops = ["left", "right", "cons", "interpret"];
    Ok(TprReport {
        depth,
        dim,
        trials,
        seed,
        tolerance,
        deviations: ops
            .iter()
            .zip(dev)
            .map(|(&op, max_abs)| Deviation { op, max_abs })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpsReport {
    pub trees: usize,
    pub depth: u32,
    pub dim: usize,
    pub seed: u64,
    /// Mismatch counts for left, right and cons.
    pub mismatches: [usize; 3],
}

impl OpsReport {
    pub fn passed(&self) -> bool {
        self.mismatches.iter().all(|&m| m == 0)
    }
}

impl fmt::Display for OpsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "ops check: trees={} depth={} dim={} seed={}",
            self.trees, self.depth, self.dim, self.seed
        )?;
        for (op, m) in ["left", "right", "cons"].iter().zip(self.mismatches) {
            writeln!(f, "{op:<6} mismatches={m}")?;
        }
        write!(f, "result: {}", if self.passed() { "pass" } else { "fail" })
    }
}

/// Checks the sparse operations against subtree extraction and node
/// construction on pointer trees, requiring bit-identical results.
pub fn ops_check(trees: usize, depth: u32, dim: usize, seed: u64) -> Result<OpsReport> {
    if depth == 0 {
        return Err(Error::Config("depth must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_size = 16;
    let table = EmbeddingTable::random(vocab_size, dim, &mut rng);
    let enc = |t: Option<&SymbolTree<TokenId>>| -> Result<SparseTree> {
        match t {
            Some(t) => from_symbol_tree(t, &table, depth),
            None => Ok(SparseTree::empty(dim)),
        }
    };
    let mut mismatches = [0usize; 3];
    for _ in 0..trees {
        let t = random_symbol_tree(&mut rng, depth, vocab_size);
        let s = enc(Some(&t))?;
        mismatches[0] += (op_left(&s) != enc(t.left.as_deref())?) as usize;
        mismatches[1] += (op_right(&s) != enc(t.right.as_deref())?) as usize;

        let a = random_symbol_tree(&mut rng, depth - 1, vocab_size);
        let b = random_symbol_tree(&mut rng, depth - 1, vocab_size);
        let label = TokenId(rng.gen_range(3..vocab_size) as u32);
        let joined = SymbolTree::binary(label, a.clone(), b.clone());
        let root = table.row(label)?;
        let built = op_cons(&enc(Some(&a))?, &enc(Some(&b))?, Some(root), depth)?;
        mismatches[2] += (built != enc(Some(&joined))?) as usize;
    }
    Ok(OpsReport {
        trees,
        depth,
        dim,
        seed,
        mismatches,
    })
}
