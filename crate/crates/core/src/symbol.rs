//! Token vocabularies, explicit binary trees and the s-expression format.
//!
//! S-expressions follow the usual head-first convention: `(a b c)` is a node
//! `a` with left child `b` and right child `c`, `(a (b))` has a left child
//! only, and a bare atom is a leaf. A node with only a right child is written
//! with an empty list in the left slot: `(a () c)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::address::{child_raw, parent_raw, Branch, Path, TreeIndex, MAX_ADDRESS_DEPTH};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub const NULL_TOKEN: &str = "<NULL>";
pub const NT_TOKEN: &str = "<NT>";
pub const EOB_TOKEN: &str = "<EOB>";

/// Bidirectional token table. Ids 0..3 are always `<NULL>`, `<NT>`, `<EOB>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub const NULL: TokenId = TokenId(0);
    pub const NT: TokenId = TokenId(1);
    pub const EOB: TokenId = TokenId(2);

    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in [NULL_TOKEN, NT_TOKEN, EOB_TOKEN] {
            v.insert(t);
        }
        v
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::new();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
    }

    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = TokenId(self.tokens.len() as u32);
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id.index())
            .map(String::as_str)
            .ok_or(Error::UnknownTokenId(id.0))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_seq<S: AsRef<str>>(&self, toks: &[S]) -> Result<Vec<TokenId>> {
        toks.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_tree(&self, t: &SymbolTree<String>) -> Result<SymbolTree<TokenId>> {
        t.try_map(&mut |s| self.id(s))
    }

    pub fn decode_tree(&self, t: &SymbolTree<TokenId>) -> Result<SymbolTree<String>> {
        t.try_map(&mut |id| self.token(*id).map(str::to_string))
    }
}

/// Binary tree with labels on every node.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymbolTree<L = TokenId> {
    pub label: L,
    pub left: Option<Box<SymbolTree<L>>>,
    pub right: Option<Box<SymbolTree<L>>>,
}

impl<L> SymbolTree<L> {
    pub fn leaf(label: L) -> Self {
        SymbolTree {
            label,
            left: None,
            right: None,
        }
    }

    pub fn node(label: L, left: Option<SymbolTree<L>>, right: Option<SymbolTree<L>>) -> Self {
        SymbolTree {
            label,
            left: left.map(Box::new),
            right: right.map(Box::new),
        }
    }

    pub fn binary(label: L, left: SymbolTree<L>, right: SymbolTree<L>) -> Self {
        Self::node(label, Some(left), Some(right))
    }

    pub fn unary(label: L, left: SymbolTree<L>) -> Self {
        Self::node(label, Some(left), None)
    }

    pub fn is_leaf(&self) -> bool {
        self.left.is_none() && self.right.is_none()
    }

    /// Longest root-to-leaf branch count.
    pub fn depth(&self) -> u32 {
        let l = self.left.as_ref().map_or(0, |c| c.depth() + 1);
        let r = self.right.as_ref().map_or(0, |c| c.depth() + 1);
        l.max(r)
    }

    pub fn node_count(&self) -> usize {
        1 + self.left.as_ref().map_or(0, |c| c.node_count())
            + self.right.as_ref().map_or(0, |c| c.node_count())
    }

    pub fn child(&self, b: Branch) -> Option<&SymbolTree<L>> {
        match b {
            Branch::Left => self.left.as_deref(),
            Branch::Right => self.right.as_deref(),
        }
    }

    pub fn subtree(&self, path: &Path) -> Option<&SymbolTree<L>> {
        path.steps()
            .iter()
            .try_fold(self, |node, &b| node.child(b))
    }

    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> SymbolTree<M> {
        SymbolTree {
            label: f(&self.label),
            left: self.left.as_ref().map(|c| Box::new(c.map(f))),
            right: self.right.as_ref().map(|c| Box::new(c.map(f))),
        }
    }

    pub fn try_map<M, E>(
        &self,
        f: &mut impl FnMut(&L) -> std::result::Result<M, E>,
    ) -> std::result::Result<SymbolTree<M>, E> {
        let label = f(&self.label)?;
        let left = match &self.left {
            Some(c) => Some(Box::new(c.try_map(f)?)),
            None => None,
        };
        let right = match &self.right {
            Some(c) => Some(Box::new(c.try_map(f)?)),
            None => None,
        };
        Ok(SymbolTree { label, left, right })
    }

    /// Labels in pre-order.
    pub fn labels(&self) -> Vec<&L> {
        let mut out = Vec::new();
        self.visit(&mut |_, l| out.push(l), 1);
        out
    }

    /// Left-to-right leaf labels.
    pub fn frontier(&self) -> Vec<&L> {
        let mut out = Vec::new();
        self.collect_frontier(&mut out);
        out
    }

    fn collect_frontier<'a>(&'a self, out: &mut Vec<&'a L>) {
        if self.is_leaf() {
            out.push(&self.label);
            return;
        }
        if let Some(l) = &self.left {
            l.collect_frontier(out);
        }
        if let Some(r) = &self.right {
            r.collect_frontier(out);
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(u64, &'a L), index: u64) {
        f(index, &self.label);
        if let Some(l) = &self.left {
            l.visit(f, child_raw(index, Branch::Left));
        }
        if let Some(r) = &self.right {
            r.visit(f, child_raw(index, Branch::Right));
        }
    }

    /// Every node paired with its Gorn address, sorted by address.
    pub fn indexed(&self, max_depth: u32) -> Result<Vec<(TreeIndex, &L)>> {
        let max_depth = max_depth.min(MAX_ADDRESS_DEPTH);
        if self.depth() > max_depth {
            return Err(Error::PathTooDeep {
                len: self.depth() as usize,
                max_depth,
            });
        }
        let mut out = Vec::with_capacity(self.node_count());
        self.visit(&mut |i, l| out.push((TreeIndex::new(i).expect("nonzero"), l)), 1);
        out.sort_by_key(|(i, _)| *i);
        Ok(out)
    }

    /// Rebuilds a tree from addressed labels. Every non-root address needs its
    /// parent; otherwise the offending addresses are reported.
    pub fn from_indexed(nodes: BTreeMap<u64, L>) -> Result<Option<SymbolTree<L>>> {
        let orphans: Vec<u64> = nodes
            .keys()
            .copied()
            .filter(|&i| i == 0 || (i > 1 && !nodes.contains_key(&parent_raw(i))))
            .collect();
        if !orphans.is_empty() {
            return Err(Error::MalformedTree { orphans });
        }
        let mut nodes = nodes;
        Ok(Self::build_at(&mut nodes, 1))
    }

    fn build_at(nodes: &mut BTreeMap<u64, L>, index: u64) -> Option<SymbolTree<L>> {
        let label = nodes.remove(&index)?;
        let (left, right) = if index.leading_zeros() == 0 {
            (None, None)
        } else {
            (
                Self::build_at(nodes, child_raw(index, Branch::Left)),
                Self::build_at(nodes, child_raw(index, Branch::Right)),
            )
        };
        Some(SymbolTree::node(label, left, right))
    }
}

impl SymbolTree<String> {
    pub fn parse(src: &str) -> Result<Self> {
        Sexp::parse(src)?.to_symbol_tree()
    }
}

impl<L: fmt::Display> fmt::Display for SymbolTree<L> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_leaf() {
            return write!(f, "{}", self.label);
        }
        write!(f, "({}", self.label)?;
        match &self.left {
            Some(l) => write!(f, " {l}")?,
            None => f.write_str(" ()")?,
        }
        if let Some(r) = &self.right {
            write!(f, " {r}")?;
        }
        f.write_str(")")
    }
}

/// Arbitrary-arity labelled tree, as read from corpora before binarization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoseTree {
    pub label: String,
    pub children: Vec<RoseTree>,
}

impl RoseTree {
    pub fn leaf(label: impl Into<String>) -> Self {
        RoseTree {
            label: label.into(),
            children: Vec::new(),
        }
    }

    pub fn new(label: impl Into<String>, children: Vec<RoseTree>) -> Self {
        RoseTree {
            label: label.into(),
            children,
        }
    }

    pub fn parse(src: &str) -> Result<Self> {
        Sexp::parse(src)?.to_rose_tree()
    }

    pub fn frontier(&self) -> Vec<&str> {
        if self.children.is_empty() {
            return vec![self.label.as_str()];
        }
        self.children.iter().flat_map(|c| c.frontier()).collect()
    }
}

impl fmt::Display for RoseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.children.is_empty() {
            return f.write_str(&self.label);
        }
        write!(f, "({}", self.label)?;
        for c in &self.children {
            write!(f, " {c}")?;
        }
        f.write_str(")")
    }
}

/// Raw s-expression with source positions.
#[derive(Debug, Clone, PartialEq)]
pub enum Sexp {
    Atom {
        text: String,
        line: usize,
        column: usize,
    },
    List {
        items: Vec<Sexp>,
        line: usize,
        column: usize,
    },
}

impl Sexp {
    pub fn parse(src: &str) -> Result<Sexp> {
        let mut p = SexpParser::new(src);
        p.skip_ws();
        let e = p.expr()?;
        p.skip_ws();
        if let Some(_) = p.peek() {
            return Err(p.error("trailing input after expression"));
        }
        Ok(e)
    }

    fn position(&self) -> (usize, usize) {
        match self {
            Sexp::Atom { line, column, .. } | Sexp::List { line, column, .. } => (*line, *column),
        }
    }

    fn err(&self, message: &str) -> Error {
        let (line, column) = self.position();
        Error::Parse {
            line,
            column,
            message: message.to_string(),
        }
    }

    fn head(items: &[Sexp], whole: &Sexp) -> Result<String> {
        match items.first() {
            Some(Sexp::Atom { text, .. }) => Ok(text.clone()),
            Some(other) => Err(other.err("node label must be an atom")),
            None => Err(whole.err("empty list is not a tree")),
        }
    }

    pub fn to_rose_tree(&self) -> Result<RoseTree> {
        match self {
            Sexp::Atom { text, .. } => Ok(RoseTree::leaf(text.clone())),
            Sexp::List { items, .. } => {
                let label = Self::head(items, self)?;
                let children = items[1..]
                    .iter()
                    .map(Sexp::to_rose_tree)
                    .collect::<Result<Vec<_>>>()?;
                Ok(RoseTree::new(label, children))
            }
        }
    }

    fn is_empty_list(&self) -> bool {
        matches!(self, Sexp::List { items, .. } if items.is_empty())
    }

    pub fn to_symbol_tree(&self) -> Result<SymbolTree<String>> {
        match self {
            Sexp::Atom { text, .. } => Ok(SymbolTree::leaf(text.clone())),
            Sexp::List { items, .. } => {
                let label = Self::head(items, self)?;
                let kids = &items[1..];
                if kids.len() > 2 {
                    return Err(kids[2].err("binary tree node has more than two children"));
                }
                let left = match kids.first() {
                    Some(k) if k.is_empty_list() => {
                        if kids.len() < 2 {
                            return Err(k.err("empty left slot needs a right child"));
                        }
                        None
                    }
                    Some(k) => Some(k.to_symbol_tree()?),
                    None => None,
                };
                let right = match kids.get(1) {
                    Some(k) if k.is_empty_list() => {
                        return Err(k.err("empty list is only allowed in the left slot"))
                    }
                    Some(k) => Some(k.to_symbol_tree()?),
                    None => None,
                };
                Ok(SymbolTree::node(label, left, right))
            }
        }
    }
}

struct SexpParser<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    column: usize,
}

impl<'a> SexpParser<'a> {
    fn new(src: &'a str) -> Self {
        SexpParser {
            chars: src.chars().peekable(),
            line: 1,
            column: 1,
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn error(&self, message: &str) -> Error {
        Error::Parse {
            line: self.line,
            column: self.column,
            message: message.to_string(),
        }
    }

    fn expr(&mut self) -> Result<Sexp> {
        let (line, column) = (self.line, self.column);
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(')') => Err(self.error("unexpected `)`")),
            Some('(') => {
                self.bump();
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        None => return Err(self.error("unclosed `(`")),
                        Some(')') => {
                            self.bump();
                            break;
                        }
                        _ => items.push(self.expr()?),
                    }
                }
                Ok(Sexp::List {
                    items,
                    line,
                    column,
                })
            }
            Some(_) => {
                let mut text = String::new();
                while let Some(c) = self.peek() {
                    if c.is_whitespace() || c == '(' || c == ')' {
                        break;
                    }
                    text.push(c);
                    self.bump();
                }
                Ok(Sexp::Atom { text, line, column })
            }
        }
    }
}
