//! Corpora: CNF binarization, LAUD sequence embedding, SCAN, 0-shot lexical
//! splits, toy transduction tasks and dataset JSON lines.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::{Example, Input, Mode};
use crate::symbol::{RoseTree, Sexp, SymbolTree, Vocab, EOB_TOKEN, NT_TOKEN};

/// Binary tree with surplus children grouped right-branching under `<NT>`
/// nodes; a single child becomes the left child.
pub fn binarize_cnf(t: &RoseTree) -> SymbolTree<String> {
    fn group(kids: &[RoseTree]) -> SymbolTree<String> {
        if kids.len() == 1 {
            return binarize_cnf(&kids[0]);
        }
        SymbolTree::binary(NT_TOKEN.to_string(), binarize_cnf(&kids[0]), group(&kids[1..]))
    }
    match t.children.as_slice() {
        [] => SymbolTree::leaf(t.label.clone()),
        [only] => SymbolTree::unary(t.label.clone(), binarize_cnf(only)),
        [first, rest @ ..] => SymbolTree::binary(t.label.clone(), binarize_cnf(first), group(rest)),
    }
}

/// Depth of the LAUD tree for a sequence of `len` tokens.
pub fn laud_depth(len: usize) -> u32 {
    if len <= 1 {
        return 1;
    }
    (len + 1).next_power_of_two().trailing_zeros()
}

/// Embeds a sequence as left-aligned leaves at uniform depth under `nt`
/// nodes, followed by one `eob` leaf. A single token becomes the left child
/// of an `nt` root.
pub fn laud_embed<L: Clone>(tokens: &[L], nt: &L, eob: &L) -> Result<SymbolTree<L>> {
    match tokens {
        [] => Err(Error::Data("cannot embed an empty sequence".into())),
        [x] => Ok(SymbolTree::unary(nt.clone(), SymbolTree::leaf(x.clone()))),
        _ => {
            let mut leaves: Vec<L> = tokens.to_vec();
            leaves.push(eob.clone());
            let depth = laud_depth(tokens.len());
            Ok(laud_build(&leaves, 0, depth, nt).expect("nonempty"))
        }
    }
}

fn laud_build<L: Clone>(leaves: &[L], lo: usize, remaining: u32, nt: &L) -> Option<SymbolTree<L>> {
    if lo >= leaves.len() {
        return None;
    }
    if remaining == 0 {
        return Some(SymbolTree::leaf(leaves[lo].clone()));
    }
    let half = 1usize << (remaining - 1);
    let left = laud_build(leaves, lo, remaining - 1, nt);
    let right = laud_build(leaves, lo + half, remaining - 1, nt);
    Some(SymbolTree::node(nt.clone(), left, right))
}

/// Leaves of a LAUD tree in order, without the end-of-branch marker.
pub fn laud_read_back<L: Clone + PartialEq>(t: &SymbolTree<L>, eob: &L) -> Vec<L> {
    t.frontier().into_iter().filter(|l| *l != eob).cloned().collect()
}

/// Parses an s-expression as a binary tree, binarizing nodes with more than
/// two children.
pub fn parse_binary_tree(src: &str) -> Result<SymbolTree<String>> {
    let sexp = Sexp::parse(src)?;
    match sexp.to_symbol_tree() {
        Ok(t) => Ok(t),
        Err(first) => match sexp.to_rose_tree() {
            Ok(r) => Ok(binarize_cnf(&r)),
            Err(_) => Err(first),
        },
    }
}

/// One input/output pair of token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqPair {
    pub input: Vec<String>,
    pub output: Vec<String>,
}

/// Parses `IN: <tokens> OUT: <tokens>` lines; blank lines are skipped.
pub fn parse_scan(src: &str) -> Result<Vec<SeqPair>> {
    let mut out = Vec::new();
    for (k, line) in src.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: &str| Error::Parse {
            line: k + 1,
            column: 1,
            message: message.to_string(),
        };
        let rest = line.strip_prefix("IN:").ok_or_else(|| bad("line must start with \"IN:\""))?;
        let (input, output) = rest.split_once("OUT:").ok_or_else(|| bad("missing \"OUT:\""))?;
        let input: Vec<String> = input.split_whitespace().map(str::to_string).collect();
        let output: Vec<String> = output.split_whitespace().map(str::to_string).collect();
        if input.is_empty() || output.is_empty() {
            return Err(bad("empty input or output"));
        }
        out.push(SeqPair { input, output });
    }
    Ok(out)
}

pub fn read_scan_file(path: &Path) -> Result<Vec<SeqPair>> {
    let src = std::fs::read_to_string(path)?;
    let pairs = parse_scan(&src)?;
    if pairs.is_empty() {
        log::warn!("{} contains no samples", path.display());
    }
    Ok(pairs)
}

pub fn write_scan(pairs: &[SeqPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("IN: {} OUT: {}\n", p.input.join(" "), p.output.join(" ")))
        .collect()
}

/// Every command of the SCAN grammar with its action sequence, in a fixed
/// order: single clauses first, then `and` and `after` conjunctions.
pub fn scan_grammar() -> Vec<SeqPair> {
    let prims = [("walk", "I_WALK"), ("look", "I_LOOK"), ("run", "I_RUN"), ("jump", "I_JUMP")];
    let mut verbs: Vec<(Vec<&str>, Vec<&str>)> = prims.iter().map(|&(c, a)| (vec![c], vec![a])).collect();
    for (dir, turn) in [("left", "I_TURN_LEFT"), ("right", "I_TURN_RIGHT")] {
        for &(c, a) in &prims {
            verbs.push((vec![c, dir], vec![turn, a]));
        }
        verbs.push((vec!["turn", dir], vec![turn]));
        for &(c, a) in &prims {
            verbs.push((vec![c, "opposite", dir], vec![turn, turn, a]));
        }
        verbs.push((vec!["turn", "opposite", dir], vec![turn, turn]));
        for &(c, a) in &prims {
            verbs.push((vec![c, "around", dir], [turn, a].repeat(4)));
        }
        verbs.push((vec!["turn", "around", dir], vec![turn; 4]));
    }
    let mut clauses: Vec<(Vec<&str>, Vec<&str>)> = Vec::new();
    for (c, a) in &verbs {
        clauses.push((c.clone(), a.clone()));
        clauses.push(([c.as_slice(), &["twice"]].concat(), a.repeat(2)));
        clauses.push(([c.as_slice(), &["thrice"]].concat(), a.repeat(3)));
    }
    let own = |c: &[&str], a: &[&str]| SeqPair {
        input: c.iter().map(|s| s.to_string()).collect(),
        output: a.iter().map(|s| s.to_string()).collect(),
    };
    let mut out: Vec<SeqPair> = clauses.iter().map(|(c, a)| own(c, a)).collect();
    for (c1, a1) in &clauses {
        for (c2, a2) in &clauses {
            out.push(own(&[c1.as_slice(), &["and"], c2].concat(), &[a1.as_slice(), a2].concat()));
            out.push(own(&[c1.as_slice(), &["after"], c2].concat(), &[a2.as_slice(), a1].concat()));
        }
    }
    out
}

/// Maps SCAN actions onto the input words, so input and output share one
/// vocabulary.
pub fn share_scan_vocab(actions: &[String]) -> Vec<String> {
    actions
        .iter()
        .map(|a| {
            match a.as_str() {
                "I_WALK" => "walk",
                "I_LOOK" => "look",
                "I_RUN" => "run",
                "I_JUMP" => "jump",
                "I_TURN_LEFT" => "left",
                "I_TURN_RIGHT" => "right",
                other => other,
            }
            .to_string()
        })
        .collect()
}

/// The random "simple" split: a shuffled `train_fraction` of all commands
/// for training and the rest for testing.
pub fn scan_simple_split<R: Rng + ?Sized>(train_fraction: f64, rng: &mut R) -> (Vec<SeqPair>, Vec<SeqPair>) {
    let mut all = scan_grammar();
    all.shuffle(rng);
    let cut = ((all.len() as f64) * train_fraction).round() as usize;
    let test = all.split_off(cut.min(all.len()));
    (all, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Tree,
    Seq,
}

/// One dataset line. `kind` describes the input; the output is read as an
/// s-expression except for LAUD runs, where it is a token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    #[serde(rename = "in")]
    pub input: String,
    #[serde(rename = "out")]
    pub output: String,
    pub kind: Kind,
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_records_file(path: &Path) -> Result<Vec<Record>> {
    let f = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(f))
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(())
}

impl Record {
    pub fn tree(input: &SymbolTree<String>, output: &SymbolTree<String>) -> Self {
        Record {
            input: input.to_string(),
            output: output.to_string(),
            kind: Kind::Tree,
        }
    }

    pub fn seq(pair: &SeqPair) -> Self {
        Record {
            input: pair.input.join(" "),
            output: pair.output.join(" "),
            kind: Kind::Seq,
        }
    }

    /// Tokens of the record on `side`, used for vocabulary building and
    /// substitution.
    fn tokens(text: &str) -> Vec<String> {
        text.split(|c: char| c.is_whitespace() || c == '(' || c == ')')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn input_tokens(&self) -> Vec<String> {
        Self::tokens(&self.input)
    }

    pub fn output_tokens(&self) -> Vec<String> {
        Self::tokens(&self.output)
    }

    /// String-level input and target tree for `mode`.
    pub fn parse(&self, mode: Mode) -> Result<(Input<String>, SymbolTree<String>)> {
        let input = match (mode.sequence_input(), self.kind) {
            (false, Kind::Tree) => Input::Tree(parse_binary_tree(&self.input)?),
            (true, Kind::Seq) => Input::Seq(Self::tokens(&self.input)),
            (seq, kind) => {
                return Err(Error::Data(format!(
                    "record kind {kind:?} does not fit {} input",
                    if seq { "sequence" } else { "tree" }
                )))
            }
        };
        let target = if mode == Mode::Seq2seqLaud {
            laud_embed(&Self::tokens(&self.output), &NT_TOKEN.to_string(), &EOB_TOKEN.to_string())?
        } else {
            parse_binary_tree(&self.output)?
        };
        Ok((input, target))
    }
}

/// Which part of a sample a substitution touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Input,
    Output,
    Both,
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" | "in" => Ok(Side::Input),
            "output" | "out" => Ok(Side::Output),
            "both" => Ok(Side::Both),
            _ => Err(Error::Config(format!("unknown side {s:?}"))),
        }
    }
}

fn substitute(text: &str, old: &str, new: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !word.is_empty() {
            out.push_str(if word == old { new } else { word });
            word.clear();
        }
    };
    for c in text.chars() {
        if c.is_whitespace() || c == '(' || c == ')' {
            flush(&mut word, &mut out);
            out.push(c);
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Test records with every `old` token on `side` replaced by `new`.
/// Fails if `new` already occurs in `train`.
pub fn make_zeroshot_split(train: &[Record], test: &[Record], old: &str, new: &str, side: Side) -> Result<Vec<Record>> {
    if train
        .iter()
        .any(|r| r.input_tokens().iter().chain(&r.output_tokens()).any(|t| t == new))
    {
        return Err(Error::Data(format!("token {new:?} occurs in the training data")));
    }
    Ok(test
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if side != Side::Output {
                r.input = substitute(&r.input, old, new);
            }
            if side != Side::Input {
                r.output = substitute(&r.output, old, new);
            }
            r
        })
        .collect())
}

/// Vocabulary holding the specials and every token in `records`.
pub fn build_vocab<'a>(records: impl IntoIterator<Item = &'a Record>, mode: Mode) -> Vocab {
    let mut v = Vocab::new();
    for r in records {
        for t in r.input_tokens() {
            v.insert(&t);
        }
        for t in r.output_tokens() {
            v.insert(&t);
        }
    }
    if mode != Mode::Seq2seqLaud {
        v.insert(NT_TOKEN);
    }
    v
}

/// Encodes records into examples; unknown tokens are an error.
pub fn encode_records(records: &[Record], mode: Mode, vocab: &Vocab) -> Result<Vec<Example>> {
    records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let (input, target) = r.parse(mode).map_err(|e| Error::Data(format!("record {}: {e}", k + 1)))?;
            let input = match input {
                Input::Tree(t) => Input::Tree(vocab.encode_tree(&t)?),
                Input::Seq(s) => Input::Seq(vocab.encode_seq(&s)?),
            };
            Ok(Example {
                input,
                target: vocab.encode_tree(&target)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    Identity,
    SwapChildren,
    Mirror,
}

impl ToyTask {
    pub fn apply<L: Clone>(self, t: &SymbolTree<L>) -> SymbolTree<L> {
        match self {
            ToyTask::Identity => t.clone(),
            ToyTask::SwapChildren => SymbolTree::node(t.label.clone(), t.right.as_deref().cloned(), t.left.as_deref().cloned()),
            ToyTask::Mirror => mirror(t),
        }
    }
}

fn mirror<L: Clone>(t: &SymbolTree<L>) -> SymbolTree<L> {
    SymbolTree::node(
        t.label.clone(),
        t.right.as_deref().map(mirror),
        t.left.as_deref().map(mirror),
    )
}

impl fmt::Display for ToyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyTask::Identity => "identity",
            ToyTask::SwapChildren => "swap_children",
            ToyTask::Mirror => "mirror",
        })
    }
}

impl std::str::FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ToyTask::Identity),
            "swap_children" => Ok(ToyTask::SwapChildren),
            "mirror" => Ok(ToyTask::Mirror),
            _ => Err(Error::Config(format!("unknown toy task {s:?}"))),
        }
    }
}

pub const TOY_MAX_DEPTH: u32 = 5;

/// Labels of the toy vocabulary: about a quarter for internal nodes
/// (`n0`, `n1`, ...) and the rest for leaves (`l0`, `l1`, ...).
pub fn toy_labels(vocab_size: usize) -> (Vec<String>, Vec<String>) {
    let internal = (vocab_size / 4).max(1);
    let leaves = vocab_size.saturating_sub(internal).max(1);
    (
        (0..internal).map(|k| format!("n{k}")).collect(),
        (0..leaves).map(|k| format!("l{k}")).collect(),
    )
}

/// Random full binary tree with an internal root and depth in `1..=depth`.
pub fn random_toy_tree<R: Rng + ?Sized>(internal: &[String], leaves: &[String], depth: u32, rng: &mut R) -> SymbolTree<String> {
    fn grow<R: Rng + ?Sized>(i: &[String], l: &[String], level: u32, target: u32, rng: &mut R) -> SymbolTree<String> {
        let leaf = level == target || (level > 0 && rng.gen_bool(0.35));
        if leaf {
            return SymbolTree::leaf(l.choose(rng).expect("leaf labels").clone());
        }
        let label = i.choose(rng).expect("internal labels").clone();
        SymbolTree::binary(label, grow(i, l, level + 1, target, rng), grow(i, l, level + 1, target, rng))
    }
    let target = rng.gen_range(1..=depth.max(1));
    grow(internal, leaves, 0, target, rng)
}

/// `n` random toy samples as `(input, target)` pairs.
pub fn gen_toy_transduction<R: Rng + ?Sized>(
    task: ToyTask,
    vocab_size: usize,
    depth: u32,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(SymbolTree<String>, SymbolTree<String>)>> {
    if depth == 0 || depth > TOY_MAX_DEPTH {
        return Err(Error::Config(format!("toy depth must be in 1..={TOY_MAX_DEPTH}")));
    }
    if vocab_size < 2 {
        return Err(Error::Config("toy vocabulary needs at least two tokens".into()));
    }
    let (internal, leaves) = toy_labels(vocab_size);
    Ok((0..n)
        .map(|_| {
            let t = random_toy_tree(&internal, &leaves, depth, rng);
            let y = task.apply(&t);
            (t, y)
        })
        .collect())
}

/// Toy samples whose input contains the leaf token `held_out` at least once.
pub fn gen_toy_with_token<R: Rng + ?Sized>(
    task: ToyTask,
    vocab_size: usize,
    depth: u32,
    n: usize,
    held_out: &str,
    rng: &mut R,
) -> Result<Vec<(SymbolTree<String>, SymbolTree<String>)>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let batch = gen_toy_transduction(task, vocab_size, depth, n, rng)?;
        out.extend(
            batch
                .into_iter()
                .filter(|(x, _)| x.labels().iter().any(|l| l.as_str() == held_out)),
        );
    }
    out.truncate(n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn st(s: &str) -> SymbolTree<String> {
        SymbolTree::parse(s).unwrap()
    }

    #[test]
    fn cnf_examples() {
        assert_eq!(binarize_cnf(&RoseTree::parse("(a b c)").unwrap()), st("(a b c)"));
        assert_eq!(
            binarize_cnf(&RoseTree::parse("(a b c d)").unwrap()),
            st("(a b (<NT> c d))")
        );
        let unary = binarize_cnf(&RoseTree::parse("(a b)").unwrap());
        assert_eq!(unary.left.as_deref(), Some(&st("b")));
        assert!(unary.right.is_none());
    }

    #[test]
    fn laud_examples() {
        let nt = "<NT>".to_string();
        let eob = "<EOB>".to_string();
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let one = laud_embed(&s(&["x"]), &nt, &eob).unwrap();
        assert_eq!(one.to_string(), "(<NT> x)");
        let three = laud_embed(&s(&["a", "b", "c"]), &nt, &eob).unwrap();
        assert_eq!(three, st("(<NT> (<NT> a b) (<NT> c <EOB>))"));
        assert_eq!(laud_read_back(&three, &eob), s(&["a", "b", "c"]));
        assert!(laud_embed::<String>(&[], &nt, &eob).is_err());
    }

    #[test]
    fn laud_depths() {
        assert_eq!(laud_depth(1), 1);
        assert_eq!(laud_depth(2), 2);
        assert_eq!(laud_depth(3), 2);
        assert_eq!(laud_depth(4), 3);
        assert_eq!(laud_depth(7), 3);
        assert_eq!(laud_depth(8), 4);
    }

    #[test]
    fn scan_lines() {
        let p = parse_scan("IN: jump OUT: JUMP\n").unwrap();
        assert_eq!(p[0].input, vec!["jump"]);
        assert_eq!(p[0].output, vec!["JUMP"]);
        assert!(parse_scan("").unwrap().is_empty());
        match parse_scan("IN: jump OUT: JUMP\nIN: walk WALK\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scan_grammar_size_and_samples() {
        let g = scan_grammar();
        assert_eq!(g.len(), 20910);
        let find = |c: &str| g.iter().find(|p| p.input.join(" ") == c).unwrap().output.join(" ");
        assert_eq!(find("jump"), "I_JUMP");
        assert_eq!(find("turn left twice"), "I_TURN_LEFT I_TURN_LEFT");
        assert_eq!(find("walk opposite right"), "I_TURN_RIGHT I_TURN_RIGHT I_WALK");
        assert_eq!(find("run after look left"), "I_TURN_LEFT I_LOOK I_RUN");
        assert_eq!(find("jump around left").split(' ').count(), 8);
    }

    #[test]
    fn zeroshot_replaces_only_test() {
        let train = vec![Record::tree(&st("(a x b)"), &st("(a b x)"))];
        let test = vec![
            Record::tree(&st("(a x (a x x))"), &st("(a (a x x) x)")),
            Record::tree(&st("(a b b)"), &st("(a b b)")),
        ];
        let out = make_zeroshot_split(&train, &test, "x", "z", Side::Both).unwrap();
        assert_eq!(out[0].input, "(a z (a z z))");
        assert_eq!(out[0].output.matches('z').count(), 3);
        assert_eq!(out[1], test[1]);
        assert!(make_zeroshot_split(&train, &test, "x", "b", Side::Both).is_err());
    }

    #[test]
    fn toy_tasks() {
        assert_eq!(ToyTask::SwapChildren.apply(&st("(a b c)")), st("(a c b)"));
        assert_eq!(ToyTask::Mirror.apply(&st("(a (b c d) e)")), st("(a e (b d c))"));
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = gen_toy_transduction(ToyTask::Identity, 12, 4, 50, &mut r1).unwrap();
        let b = gen_toy_transduction(ToyTask::Identity, 12, 4, 50, &mut r2).unwrap();
        assert_eq!(a, b);
        for (x, y) in &a {
            assert_eq!(x, y);
            assert!(x.depth() >= 1 && x.depth() <= 4);
        }
        assert!(gen_toy_transduction(ToyTask::Identity, 12, 6, 1, &mut r1).is_err());
    }

    #[test]
    fn records_round_trip_and_encode() {
        let recs = vec![Record::seq(&SeqPair {
            input: vec!["jump".into(), "twice".into()],
            output: vec!["jump".into(), "jump".into()],
        })];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "{\"in\":\"jump twice\",\"out\":\"jump jump\",\"kind\":\"seq\"}\n");
        assert_eq!(read_records(&buf[..]).unwrap(), recs);
        let vocab = build_vocab(&recs, Mode::Seq2seqLaud);
        let ex = encode_records(&recs, Mode::Seq2seqLaud, &vocab).unwrap();
        assert_eq!(ex[0].target.depth(), 2);
        assert!(encode_records(&recs, Mode::Tree2tree, &vocab).is_err());
    }
}
