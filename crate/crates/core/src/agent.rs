//! The transformer agent.
//!
//! Each tree written to memory is pooled into one `model_dim` token with
//! pooling by multi-head attention (PMA): a learned query attends over the
//! tree's nodes, where every node contributes its value concatenated with a
//! ±1 branch encoding of its address. Each machine layer owns one pre-norm
//! encoder layer and three linear heads that emit the operation weights, the
//! root filler and four distributions over memory slots.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::address::TreeIndex;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::difftree::DiffTree;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Embedding width of tree values.
    pub dim: usize,
    /// Width of the binary position vector.
    pub bit_width: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub ff_dim: usize,
    pub num_layers: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            dim: 128,
            bit_width: 17,
            model_dim: 256,
            num_heads: 8,
            key_dim: 32,
            value_dim: 32,
            ff_dim: 512,
            num_layers: 14,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("bit_width", self.bit_width),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
            ("ff_dim", self.ff_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.bit_width > 64 {
            return Err(Error::Config("bit_width must be at most 64".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// ±1 branch encoding of an address, most significant bit first: zeros above
/// the marker, `+1` for the marker, then `-1` for left and `+1` for right.
pub fn binary_position_vector(i: TreeIndex, width: usize) -> Result<Vec<f64>> {
    let bits = i.bit_length() as usize;
    if bits > width {
        return Err(Error::BitWidth {
            index: i.get(),
            width,
        });
    }
    let v = i.get();
    let mut out = vec![0.0; width];
    for k in 0..bits {
        let bit = (v >> k) & 1;
        out[width - 1 - k] = if k == bits - 1 || bit == 1 { 1.0 } else { -1.0 };
    }
    Ok(out)
}

/// `n` distinct increasing integers drawn uniformly from `[0, max_int)`.
pub fn sample_random_positions<R: Rng + ?Sized>(n: usize, max_int: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n > max_int {
        return Err(Error::TooManyPositions { n, max_int });
    }
    let mut pos = sample(rng, max_int, n).into_vec();
    pos.sort_unstable();
    Ok(pos)
}

/// Interleaved sin/cos encoding with base 10 000.
pub fn sinusoidal_encoding(position: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|k| {
            let pair = (k / 2) as f64;
            let angle = position as f64 / 10_000f64.powf(2.0 * pair / width as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PmaParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub query: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ff: FeedForward,
    pub empty: ParamId,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameters exclusive to one machine layer.
#[derive(Debug, Clone)]
pub struct AgentLayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ff: FeedForward,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub op_w: ParamId,
    pub op_b: ParamId,
    pub root_w: ParamId,
    pub root_b: ParamId,
    pub arg_w: ParamId,
    pub arg_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub pma: PmaParams,
    pub op_token: ParamId,
    pub root_token: ParamId,
    pub layers: Vec<AgentLayerParams>,
}

/// Registers parameters on creation, or looks them up by name when binding
/// to a loaded store.
enum Builder<'a, R: Rng + ?Sized> {
    Init(&'a mut ParamStore, &'a mut R),
    Bind(&'a ParamStore),
}

#[derive(Clone, Copy)]
enum Init {
    Glorot,
    Zeros,
    Ones,
    Normal(f64),
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn get(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        match self {
            Builder::Init(store, rng) => {
                let n = rows * cols;
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Glorot => {
                        let a = (6.0 / (rows + cols) as f64).sqrt();
                        let u = Uniform::new_inclusive(-a, a);
                        (0..n).map(|_| u.sample(&mut **rng)).collect()
                    }
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("valid std");
                        (0..n).map(|_| d.sample(&mut **rng)).collect()
                    }
                };
                Ok(store.add(name, rows, cols, data, true))
            }
            Builder::Bind(store) => {
                let id = store
                    .id(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
                let p = store.get(id);
                if (p.rows, p.cols) != (rows, cols) {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {}x{}, expected {rows}x{cols}",
                        p.rows, p.cols
                    )));
                }
                Ok(id)
            }
        }
    }

    fn ff(&mut self, prefix: &str, model: usize, hidden: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            ln_g: self.get(format!("{prefix}.ff_ln_g"), 1, model, Init::Ones)?,
            ln_b: self.get(format!("{prefix}.ff_ln_b"), 1, model, Init::Zeros)?,
            w1: self.get(format!("{prefix}.ff_w1"), model, hidden, Init::Glorot)?,
            b1: self.get(format!("{prefix}.ff_b1"), 1, hidden, Init::Zeros)?,
            w2: self.get(format!("{prefix}.ff_w2"), hidden, model, Init::Glorot)?,
            b2: self.get(format!("{prefix}.ff_b2"), 1, model, Init::Zeros)?,
        })
    }

    fn agent(&mut self, cfg: &AgentConfig) -> Result<Agent> {
        cfg.validate()?;
        let m = cfg.model_dim;
        let (h, dk, dv) = (cfg.num_heads, cfg.key_dim, cfg.value_dim);
        let pma = PmaParams {
            w_in: self.get("pma.w_in".into(), cfg.dim + cfg.bit_width, m, Init::Glorot)?,
            b_in: self.get("pma.b_in".into(), 1, m, Init::Zeros)?,
            ln_g: self.get("pma.ln_g".into(), 1, m, Init::Ones)?,
            ln_b: self.get("pma.ln_b".into(), 1, m, Init::Zeros)?,
            w_k: self.get("pma.w_k".into(), m, h * dk, Init::Glorot)?,
            w_v: self.get("pma.w_v".into(), m, h * dv, Init::Glorot)?,
            query: self.get("pma.query".into(), h, dk, Init::Normal(1.0 / (dk as f64).sqrt()))?,
            w_o: self.get("pma.w_o".into(), h * dv, m, Init::Glorot)?,
            b_o: self.get("pma.b_o".into(), 1, m, Init::Zeros)?,
            ff: self.ff("pma", m, cfg.ff_dim)?,
            empty: self.get("pma.empty".into(), 1, m, Init::Normal(0.5))?,
        };
        let op_token = self.get("agent.op_token".into(), 1, m, Init::Normal(1.0))?;
        let root_token = self.get("agent.root_token".into(), 1, m, Init::Normal(1.0))?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = format!("layer{l}");
            layers.push(AgentLayerParams {
                ln1_g: self.get(format!("{p}.ln1_g"), 1, m, Init::Ones)?,
                ln1_b: self.get(format!("{p}.ln1_b"), 1, m, Init::Zeros)?,
                w_qkv: self.get(format!("{p}.w_qkv"), m, 3 * m, Init::Glorot)?,
                b_qkv: self.get(format!("{p}.b_qkv"), 1, 3 * m, Init::Zeros)?,
                w_o: self.get(format!("{p}.w_o"), m, m, Init::Glorot)?,
                b_o: self.get(format!("{p}.b_o"), 1, m, Init::Zeros)?,
                ff: self.ff(&p, m, cfg.ff_dim)?,
                lnf_g: self.get(format!("{p}.lnf_g"), 1, m, Init::Ones)?,
                lnf_b: self.get(format!("{p}.lnf_b"), 1, m, Init::Zeros)?,
                op_w: self.get(format!("{p}.op_w"), m, 3, Init::Glorot)?,
                op_b: self.get(format!("{p}.op_b"), 1, 3, Init::Zeros)?,
                root_w: self.get(format!("{p}.root_w"), m, cfg.dim, Init::Glorot)?,
                root_b: self.get(format!("{p}.root_b"), 1, cfg.dim, Init::Zeros)?,
                arg_w: self.get(format!("{p}.arg_w"), m, 4, Init::Glorot)?,
                arg_b: self.get(format!("{p}.arg_b"), 1, 4, Init::Zeros)?,
            });
        }
        Ok(Agent {
            cfg: cfg.clone(),
            pma,
            op_token,
            root_token,
            layers,
        })
    }
}

/// Agent outputs for one layer.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `1 x 3` softmax over (left, right, cons).
    pub op_weights: Var,
    /// `1 x dim` root filler.
    pub root: Var,
    /// `M x 4` column-wise softmax over memory slots for
    /// (left, right, cons-left, cons-right).
    pub arg_dists: Var,
}

impl Agent {
    /// Registers freshly initialized parameters in `store`.
    pub fn new<R: Rng + ?Sized>(cfg: &AgentConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        Builder::Init(store, rng).agent(cfg)
    }

    /// Looks up the parameters of an agent previously registered in `store`.
    pub fn bind(cfg: &AgentConfig, store: &ParamStore) -> Result<Self> {
        Builder::<rand::rngs::ThreadRng>::Bind(store).agent(cfg)
    }

    fn linear(&self, g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (g.param(w), g.param(b));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn feed_forward(&self, g: &mut Graph<'_>, x: Var, ff: &FeedForward) -> Result<Var> {
        let (lg, lb) = (g.param(ff.ln_g), g.param(ff.ln_b));
        let n = g.layer_norm(x, lg, lb)?;
        let h = self.linear(g, n, ff.w1, ff.b1)?;
        let h = g.relu(h);
        let y = self.linear(g, h, ff.w2, ff.b2)?;
        g.add(x, y)
    }

    /// Multi-head attention; `q`, `k` are split into `key`-wide heads and
    /// `v` into `value`-wide heads.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<'_>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key: usize,
        value: usize,
    ) -> Result<Var> {
        let scale = 1.0 / (key as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * key, key);
            let kh = g.slice_cols(k, h * key, key);
            let vh = g.slice_cols(v, h * value, value);
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        g.concat_cols(&outs)
    }

    /// Fixed-width encoding of a tree; the empty tree maps to a learned vector.
    pub fn pma_encode(&self, g: &mut Graph<'_>, tree: &DiffTree) -> Result<Var> {
        let cfg = &self.cfg;
        if tree.dim() != cfg.dim {
            return Err(Error::DimMismatch {
                expected: cfg.dim,
                got: tree.dim(),
            });
        }
        match tree.values() {
            Some(values) => self.pma_pool(g, tree.indices(), values),
            None => Ok(g.param(self.pma.empty)),
        }
    }

    /// Pools `(address, value row)` pairs given in any order.
    pub fn pma_pool(&self, g: &mut Graph<'_>, indices: &[TreeIndex], values: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let (rows, cols) = g.shape(values);
        if rows != indices.len() || cols != cfg.dim {
            return Err(Error::DimMismatch {
                expected: indices.len() * cfg.dim,
                got: rows * cols,
            });
        }
        if indices.is_empty() {
            return Ok(g.param(self.pma.empty));
        }
        let mut bits = Vec::with_capacity(indices.len() * cfg.bit_width);
        for &i in indices {
            bits.extend(binary_position_vector(i, cfg.bit_width)?);
        }
        let b = g.constant(indices.len(), cfg.bit_width, bits);
        let x = g.concat_cols(&[values, b])?;
        let x = self.linear(g, x, self.pma.w_in, self.pma.b_in)?;
        let (lg, lb) = (g.param(self.pma.ln_g), g.param(self.pma.ln_b));
        let xn = g.layer_norm(x, lg, lb)?;
        let wk = g.param(self.pma.w_k);
        let wv = g.param(self.pma.w_v);
        let k = g.matmul(xn, wk)?;
        let v = g.matmul(xn, wv)?;
        let (h, dk, dv) = (cfg.num_heads, cfg.key_dim, cfg.value_dim);
        // The query is a learned (heads x key_dim) matrix: reshape to one row.
        let q = g.param(self.pma.query);
        let q_rows: Vec<Var> = (0..h).map(|r| g.slice_rows(q, r, 1)).collect();
        let q = if h == 1 { q_rows[0] } else { g.concat_cols(&q_rows)? };
        let z = self.attention(g, q, k, v, h, dk, dv)?;
        let z = self.linear(g, z, self.pma.w_o, self.pma.b_o)?;
        self.feed_forward(g, z, &self.pma.ff)
    }

    /// Runs layer `layer` over `[<OP>; <ROOT>; memory tokens]`.
    pub fn step(&self, g: &mut Graph<'_>, layer: usize, memory_tokens: &[Var]) -> Result<StepOutput> {
        if memory_tokens.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let p = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("agent has no layer {layer}")))?;
        let m = self.cfg.model_dim;
        let mut rows = Vec::with_capacity(memory_tokens.len() + 2);
        rows.push(g.param(self.op_token));
        rows.push(g.param(self.root_token));
        rows.extend_from_slice(memory_tokens);
        let x = g.concat_rows(&rows)?;

        let (g1, b1) = (g.param(p.ln1_g), g.param(p.ln1_b));
        let a = g.layer_norm(x, g1, b1)?;
        let qkv = self.linear(g, a, p.w_qkv, p.b_qkv)?;
        let q = g.slice_cols(qkv, 0, m);
        let k = g.slice_cols(qkv, m, m);
        let v = g.slice_cols(qkv, 2 * m, m);
        let hd = self.cfg.head_dim();
        let att = self.attention(g, q, k, v, self.cfg.num_heads, hd, hd)?;
        let att = self.linear(g, att, p.w_o, p.b_o)?;
        let h = g.add(x, att)?;
        let y = self.feed_forward(g, h, &p.ff)?;
        let (gf, bf) = (g.param(p.lnf_g), g.param(p.lnf_b));
        let y = g.layer_norm(y, gf, bf)?;

        let op_in = g.slice_rows(y, 0, 1);
        let op_logits = self.linear(g, op_in, p.op_w, p.op_b)?;
        let op_weights = g.softmax_rows(op_logits);
        let root_in = g.slice_rows(y, 1, 1);
        let root = self.linear(g, root_in, p.root_w, p.root_b)?;
        let mem = g.slice_rows(y, 2, memory_tokens.len());
        let scores = self.linear(g, mem, p.arg_w, p.arg_b)?;
        let arg_dists = g.softmax_cols(scores);
        Ok(StepOutput {
            op_weights,
            root,
            arg_dists,
        })
    }
}

/// Parameter count of pooling a tree by one linear map over its flattened
/// dense representation, which grows with the number of addressable nodes.
pub fn dense_pooling_param_count(dim: usize, max_depth: u32, model_dim: usize) -> usize {
    dim * (1usize << (max_depth + 1)) * model_dim + model_dim
}
