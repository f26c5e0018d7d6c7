//! The execution loop: memory, the per-layer agent → interpreter cycle, the
//! task adapters, the loss and decoding.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::address::{TreeIndex, MAX_ADDRESS_DEPTH};
use crate::agent::{sample_random_positions, sinusoidal_encoding, Agent, AgentConfig};
use crate::autodiff::{Graph, ParamId, ParamStore, ScatterSource, Var, Weight};
use crate::difftree::{self, DiffTree};
use crate::embedding::{to_symbol_tree, EmbeddingTable};
use crate::error::{Error, Result};
use crate::sparse::SparseTree;
use crate::symbol::{SymbolTree, TokenId, Vocab};

pub const EMBEDDING_PARAM: &str = "embedding";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Tree2tree,
    Seq2tree,
    Seq2seqLaud,
    Seq2seqParse,
}

impl Mode {
    pub fn sequence_input(self) -> bool {
        self != Mode::Tree2tree
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Tree2tree => "tree2tree",
            Mode::Seq2tree => "seq2tree",
            Mode::Seq2seqLaud => "seq2seq-laud",
            Mode::Seq2seqParse => "seq2seq-parse",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree2tree" => Ok(Mode::Tree2tree),
            "seq2tree" => Ok(Mode::Seq2tree),
            "seq2seq-laud" => Ok(Mode::Seq2seqLaud),
            "seq2seq-parse" => Ok(Mode::Seq2seqParse),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MachineConfig {
    pub mode: Mode,
    /// Embedding width.
    pub dim: usize,
    /// Defaults to twice the deepest target for sequence input and four
    /// times for tree input.
    pub num_layers: Option<usize>,
    pub max_depth: u32,
    pub prune_k: usize,
    pub cons_only: bool,
    pub noise_std: f64,
    /// Range of random positions; defaults to twice the longest input.
    pub max_int: Option<usize>,
    /// Multiplier on readout scores.
    pub logit_scale: f64,
    /// Weight `β` of the `-½β‖E[y]‖²` readout term.
    pub readout_bias: f64,
    pub freeze_embeddings: bool,
    pub model_dim: usize,
    pub num_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub ff_dim: usize,
    /// Defaults to `max_depth + 1`.
    pub bit_width: Option<usize>,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            mode: Mode::Tree2tree,
            dim: 128,
            num_layers: None,
            max_depth: 16,
            prune_k: 1024,
            cons_only: false,
            noise_std: 1.0,
            max_int: None,
            logit_scale: 1.0,
            readout_bias: 1.0,
            freeze_embeddings: true,
            model_dim: 256,
            num_heads: 8,
            key_dim: 32,
            value_dim: 32,
            ff_dim: 512,
            bit_width: None,
        }
    }
}

impl MachineConfig {
    /// Fills defaults that depend on the data and forces `cons_only` for
    /// sequence input.
    pub fn resolve(&mut self, examples: &[Example]) {
        if self.mode.sequence_input() {
            self.cons_only = true;
        }
        if self.bit_width.is_none() {
            self.bit_width = Some(self.max_depth as usize + 1);
        }
        if self.num_layers.is_none() {
            let levels = examples.iter().map(|e| e.target.depth() + 1).max().unwrap_or(0) as usize;
            let factor = if self.mode.sequence_input() { 2 } else { 4 };
            self.num_layers = Some((factor * levels).max(1));
        }
        if self.max_int.is_none() {
            let longest = examples
                .iter()
                .map(|e| match &e.input {
                    Input::Seq(s) => s.len(),
                    Input::Tree(_) => 0,
                })
                .max()
                .unwrap_or(0);
            self.max_int = Some((2 * longest).max(1));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_depth == 0 || self.max_depth > MAX_ADDRESS_DEPTH {
            return bad(format!("max_depth must be in 1..={MAX_ADDRESS_DEPTH}"));
        }
        if self.prune_k == 0 {
            return bad("prune_k must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be a non-negative number".into());
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad("logit_scale must be positive".into());
        }
        if !self.readout_bias.is_finite() {
            return bad("readout_bias must be finite".into());
        }
        if self.mode.sequence_input() && !self.cons_only {
            return bad(format!("mode {} requires cons_only", self.mode.name()));
        }
        let b = self.bit_width();
        if b < self.max_depth as usize + 1 {
            return bad(format!(
                "bit_width {b} cannot address depth {}; need at least {}",
                self.max_depth,
                self.max_depth + 1
            ));
        }
        self.agent_config().validate()
    }

    pub fn layers(&self) -> usize {
        self.num_layers.unwrap_or(1)
    }

    pub fn bit_width(&self) -> usize {
        self.bit_width.unwrap_or(self.max_depth as usize + 1)
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            dim: self.dim,
            bit_width: self.bit_width(),
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            key_dim: self.key_dim,
            value_dim: self.value_dim,
            ff_dim: self.ff_dim,
            num_layers: self.layers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input<L = TokenId> {
    Tree(SymbolTree<L>),
    Seq(Vec<L>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Input,
    pub target: SymbolTree<TokenId>,
}

/// Trees produced so far and their agent encodings, kept in step.
#[derive(Debug, Clone)]
pub struct Memory {
    pub trees: Vec<DiffTree>,
    pub encodings: Vec<Var>,
    pub initial: usize,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn last(&self) -> Option<&DiffTree> {
        self.trees.last()
    }
}

/// Per-layer operation weights observed during a run.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub op_weights: Vec<[f64; 3]>,
}

/// Adds independent `N(0, std²)` noise to every value.
pub fn add_lexical_noise<R: Rng + ?Sized>(t: &SparseTree, std: f64, rng: &mut R) -> Result<SparseTree> {
    if std == 0.0 {
        return Ok(t.clone());
    }
    let noise = noise_values(t.len() * t.dim(), std, rng)?;
    let entries = t
        .iter()
        .enumerate()
        .map(|(k, (i, v))| {
            let row: Vec<f64> = v
                .iter()
                .zip(&noise[k * t.dim()..(k + 1) * t.dim()])
                .map(|(a, b)| a + b)
                .collect();
            (i.get(), row)
        })
        .collect();
    SparseTree::from_raw(t.dim(), entries)
}

fn noise_values<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Result<Vec<f64>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Randomness consumed by one forward pass.
pub enum Randomness<'a> {
    /// Training: fresh positions and lexical noise.
    Train(&'a mut dyn RngCore),
    /// Evaluation: positions from a fixed seed, no noise.
    Eval(u64),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: MachineConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub agent: Agent,
    pub embedding: ParamId,
}

impl Model {
    /// Fresh model with unit-norm embeddings and initialized agent.
    pub fn new(cfg: MachineConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = EmbeddingTable::random(vocab.len(), cfg.dim, &mut rng);
        let mut store = ParamStore::new();
        let embedding = store.add(
            EMBEDDING_PARAM.to_string(),
            vocab.len(),
            cfg.dim,
            table.data().to_vec(),
            !cfg.freeze_embeddings,
        );
        let agent = Agent::new(&cfg.agent_config(), &mut store, &mut rng)?;
        Ok(Model {
            cfg,
            vocab,
            store,
            agent,
            embedding,
        })
    }

    /// Rebuilds a model around loaded parameters.
    pub fn from_parts(cfg: MachineConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let embedding = store
            .id(EMBEDDING_PARAM)
            .ok_or_else(|| Error::Checkpoint("missing embedding table".into()))?;
        let e = store.get(embedding);
        if e.rows != vocab.len() || e.cols != cfg.dim {
            return Err(Error::Checkpoint(format!(
                "embedding is {}x{}, expected {}x{}",
                e.rows,
                e.cols,
                vocab.len(),
                cfg.dim
            )));
        }
        let agent = Agent::bind(&cfg.agent_config(), &store)?;
        Ok(Model {
            cfg,
            vocab,
            store,
            agent,
            embedding,
        })
    }

    pub fn embedding_table(&self) -> EmbeddingTable {
        let p = self.store.get(self.embedding);
        let mut t = EmbeddingTable::from_rows(p.cols, p.data.clone()).expect("embedding shape");
        t.frozen = !p.trainable;
        t
    }

    /// Adds `token` with a fresh random embedding; returns its id.
    pub fn extend_vocab<R: Rng + ?Sized>(&mut self, token: &str, rng: &mut R) -> TokenId {
        if let Ok(id) = self.vocab.id(token) {
            return id;
        }
        let id = self.vocab.insert(token);
        let mut t = self.embedding_table();
        t.push_random_row(rng);
        let p = self.store.get_mut(self.embedding);
        p.rows += 1;
        p.data = t.data().to_vec();
        id
    }

    pub fn trainable_params(&self) -> usize {
        self.store.trainable_count()
    }

    /// Initial memory for an input. Sequence inputs also return their
    /// length so positions can be attached.
    fn initial_trees(&self, g: &mut Graph<'_>, input: &Input, noise: Option<(&mut dyn RngCore, f64)>) -> Result<(Vec<DiffTree>, usize)> {
        let d = self.cfg.dim;
        let e = g.param(self.embedding);
        let (ids, indices, n_tokens): (Vec<usize>, Vec<Vec<TreeIndex>>, usize) = match input {
            Input::Tree(t) => {
                let nodes = t.indexed(self.cfg.max_depth)?;
                let ids = nodes.iter().map(|(_, l)| l.index()).collect();
                let idx = nodes.iter().map(|(i, _)| *i).collect();
                (ids, vec![idx], 0)
            }
            Input::Seq(s) => {
                if s.is_empty() {
                    return Err(Error::EmptyMemory);
                }
                let ids = s.iter().map(|t| t.index()).collect();
                (ids, vec![vec![TreeIndex::ROOT]; s.len()], s.len())
            }
        };
        if let Some(&bad) = ids.iter().find(|&&k| k >= self.vocab.len()) {
            return Err(Error::UnknownTokenId(bad as u32));
        }
        let mut values = g.gather_rows(e, &ids)?;
        if let Some((rng, std)) = noise {
            if std > 0.0 {
                let n = noise_values(ids.len() * d, std, rng)?;
                let n = g.constant(ids.len(), d, n);
                values = g.add(values, n)?;
            }
        }
        let mut trees = Vec::with_capacity(indices.len() + 2);
        let mut row = 0;
        for idx in indices {
            let k = idx.len();
            let v = if k == ids.len() { values } else { g.slice_rows(values, row, k) };
            trees.push(DiffTree::from_parts(g, idx, v)?);
            row += k;
        }
        if self.cfg.mode == Mode::Seq2seqLaud {
            let eob = g.gather_rows(e, &[Vocab::EOB.index()])?;
            trees.push(DiffTree::from_parts(g, vec![TreeIndex::ROOT], eob)?);
            trees.push(DiffTree::empty(d));
        }
        Ok((trees, n_tokens))
    }

    /// Encodes `trees` and adds sinusoidal terms at `positions` to the
    /// first `positions.len()` encodings.
    pub fn memory_from_trees(&self, g: &mut Graph<'_>, trees: Vec<DiffTree>, positions: &[usize]) -> Result<Memory> {
        if trees.is_empty() {
            return Err(Error::EmptyMemory);
        }
        if positions.len() > trees.len() {
            return Err(Error::DimMismatch {
                expected: trees.len(),
                got: positions.len(),
            });
        }
        let mut encodings = Vec::with_capacity(trees.len() + self.cfg.layers());
        for (k, t) in trees.iter().enumerate() {
            let mut enc = self.agent.pma_encode(g, t)?;
            if let Some(&p) = positions.get(k) {
                let pe = g.constant(1, self.cfg.model_dim, sinusoidal_encoding(p, self.cfg.model_dim));
                enc = g.add(enc, pe)?;
            }
            encodings.push(enc);
        }
        Ok(Memory {
            initial: trees.len(),
            trees,
            encodings,
        })
    }

    pub fn init_memory(&self, g: &mut Graph<'_>, input: &Input, randomness: Randomness<'_>) -> Result<Memory> {
        let max_int = self.cfg.max_int.unwrap_or(1);
        match randomness {
            Randomness::Train(rng) => {
                let (trees, n) = self.initial_trees(g, input, Some((&mut *rng, self.cfg.noise_std)))?;
                let pos = if n > 0 { sample_random_positions(n, max_int, rng)? } else { Vec::new() };
                self.memory_from_trees(g, trees, &pos)
            }
            Randomness::Eval(seed) => {
                let (trees, n) = self.initial_trees(g, input, None)?;
                let pos = if n > 0 {
                    sample_random_positions(n, max_int, &mut ChaCha8Rng::seed_from_u64(seed))?
                } else {
                    Vec::new()
                };
                self.memory_from_trees(g, trees, &pos)
            }
        }
    }

    /// Runs every layer, appending one tree per layer; returns the last slot.
    pub fn run(&self, g: &mut Graph<'_>, mem: &mut Memory) -> Result<(DiffTree, Trace)> {
        let cfg = &self.cfg;
        let mut trace = Trace::default();
        for layer in 0..cfg.layers() {
            let out = self.agent.step(g, layer, &mem.encodings)?;
            let m = mem.trees.len();
            let refs: Vec<&DiffTree> = mem.trees.iter().collect();
            let mut args: Vec<DiffTree> = Vec::with_capacity(4);
            for c in 0..4 {
                if cfg.cons_only && c < 2 {
                    args.push(DiffTree::empty(cfg.dim));
                    continue;
                }
                let w: Vec<Weight> = (0..m).map(|k| Weight::Elem(out.arg_dists, k * 4 + c)).collect();
                args.push(difftree::weighted_tree_sum(g, &w, &refs)?);
            }
            // Children of a new root move one level down.
            for a in &mut args[2..] {
                *a = difftree::clip_depth(g, a, cfg.max_depth - 1)?;
            }
            let w = if cfg.cons_only {
                trace.op_weights.push([0.0, 0.0, 1.0]);
                [Weight::Const(0.0), Weight::Const(0.0), Weight::Const(1.0)]
            } else {
                let v = g.value(out.op_weights);
                trace.op_weights.push([v[0], v[1], v[2]]);
                [
                    Weight::Elem(out.op_weights, 0),
                    Weight::Elem(out.op_weights, 1),
                    Weight::Elem(out.op_weights, 2),
                ]
            };
            let root = if cfg.mode == Mode::Seq2seqLaud {
                let e = g.param(self.embedding);
                g.gather_rows(e, &[Vocab::NT.index()])?
            } else {
                out.root
            };
            let t = difftree::interpret(g, w, [&args[0], &args[1], &args[2], &args[3]], Some(root), cfg.max_depth)?;
            let t = difftree::prune_topk(g, &t, cfg.prune_k)?;
            let enc = self.agent.pma_encode(g, &t)?;
            mem.trees.push(t);
            mem.encodings.push(enc);
        }
        let last = mem.last().ok_or(Error::EmptyMemory)?.clone();
        Ok((last, trace))
    }

    /// Readout scores `s·(P·Eᵀ - ½β‖E‖²)` for the rows of `p`.
    fn logits(&self, g: &mut Graph<'_>, p: Var) -> Result<Var> {
        let e = g.param(self.embedding);
        let scores = g.matmul_bt(p, e)?;
        let sq = g.mul(e, e)?;
        let ones = g.constant(1, self.cfg.dim, vec![1.0; self.cfg.dim]);
        let norms = g.matmul_bt(ones, sq)?;
        let bias = g.scale(norms, -0.5 * self.cfg.readout_bias);
        let logits = g.add_row(scores, bias)?;
        Ok(g.scale(logits, self.cfg.logit_scale))
    }

    /// Mean cross-entropy over the union of target and predicted addresses;
    /// addresses missing from the target are labelled `<NULL>`.
    pub fn loss(&self, g: &mut Graph<'_>, pred: &DiffTree, target: &SymbolTree<TokenId>) -> Result<Var> {
        let d = self.cfg.dim;
        if pred.dim() != d {
            return Err(Error::DimMismatch { expected: d, got: pred.dim() });
        }
        let labels: BTreeMap<TreeIndex, TokenId> = target
            .indexed(self.cfg.max_depth)?
            .into_iter()
            .map(|(i, l)| (i, *l))
            .collect();
        let mut union: Vec<TreeIndex> = labels.keys().copied().chain(pred.indices().iter().copied()).collect();
        union.sort_unstable();
        union.dedup();
        let rows = match pred.values() {
            Some(v) => {
                let pairs = pred
                    .indices()
                    .iter()
                    .enumerate()
                    .map(|(r, i)| (r as u32, union.binary_search(i).expect("in union") as u32))
                    .collect();
                g.scatter(
                    union.len(),
                    d,
                    vec![ScatterSource {
                        src: v,
                        weight: Weight::Const(1.0),
                        pairs,
                    }],
                )?
            }
            None => g.constant(union.len(), d, vec![0.0; union.len() * d]),
        };
        let logits = self.logits(g, rows)?;
        let targets: Vec<usize> = union
            .iter()
            .map(|i| labels.get(i).copied().unwrap_or(Vocab::NULL).index())
            .collect();
        g.cross_entropy(logits, &targets)
    }

    /// Memory, run and loss for one example.
    pub fn forward(&self, g: &mut Graph<'_>, ex: &Example, randomness: Randomness<'_>) -> Result<(DiffTree, Var)> {
        let mut mem = self.init_memory(g, &ex.input, randomness)?;
        let (out, _) = self.run(g, &mut mem)?;
        let loss = self.loss(g, &out, &ex.target)?;
        Ok((out, loss))
    }

    /// Output tree for an input under evaluation randomness.
    pub fn predict(&self, input: &Input, eval_seed: u64) -> Result<SparseTree> {
        let mut g = Graph::new(&self.store);
        let mut mem = self.init_memory(&mut g, input, Randomness::Eval(eval_seed))?;
        let (out, _) = self.run(&mut g, &mut mem)?;
        Ok(out.to_sparse(&g))
    }

    /// Nearest-token decoding under the configured readout; `<NULL>` nodes
    /// are dropped.
    pub fn decode(&self, pred: &SparseTree) -> Result<Option<SymbolTree<TokenId>>> {
        if self.cfg.readout_bias == 1.0 {
            return to_symbol_tree(pred, &self.embedding_table(), Vocab::NULL);
        }
        let table = self.embedding_table();
        let bias = table.readout_bias();
        let mut nodes = BTreeMap::new();
        for (i, v) in pred.iter() {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (k, r) in table.data().chunks(table.dim()).enumerate() {
                let dot: f64 = r.iter().zip(v).map(|(a, b)| a * b).sum();
                let s = dot + self.cfg.readout_bias * bias[k];
                if s > best_s {
                    best = k;
                    best_s = s;
                }
            }
            if best != Vocab::NULL.index() {
                nodes.insert(i.get(), TokenId(best as u32));
            }
        }
        SymbolTree::from_indexed(nodes)
    }

    pub fn exact_match(&self, pred: &SparseTree, target: &SymbolTree<TokenId>) -> bool {
        matches!(self.decode(pred), Ok(Some(t)) if &t == target)
    }
}
