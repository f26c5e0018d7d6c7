use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdtm::address::{decode_raw, Branch};
use sdtm::agent::{Agent, AgentConfig};
use sdtm::autodiff::{Graph, ParamStore};
use sdtm::data::{binarize_cnf, laud_embed, laud_read_back, make_zeroshot_split, Record, Side};
use sdtm::machine::{Input, MachineConfig, Mode, Model, Randomness};
use sdtm::tpr::{dense_cons, dense_interpret, dense_left, dense_right, max_abs_diff, DenseTpr};
use sdtm::{
    decode_address, encode_address, from_symbol_tree, interpret, op_cons, op_left, op_right, prune_topk,
    to_symbol_tree, EmbeddingTable, Error, InterpreterArgs, OpWeights, RoseTree, SparseTree, SymbolTree, TokenId,
    TreeIndex, Vocab,
};

const LABELS: u32 = 12;

fn symbol_tree(max_depth: u32) -> impl Strategy<Value = SymbolTree> {
    let leaf = (3..LABELS).prop_map(|l| SymbolTree::leaf(TokenId(l)));
    leaf.prop_recursive(max_depth, 256, 2, |inner| {
        prop_oneof![
            (3..LABELS, inner.clone()).prop_map(|(l, a)| SymbolTree::unary(TokenId(l), a)),
            (3..LABELS, inner.clone(), inner).prop_map(|(l, a, b)| SymbolTree::binary(TokenId(l), a, b)),
        ]
    })
}

fn sparse_tree(max_depth: u32, dim: usize, max_nodes: usize) -> impl Strategy<Value = SparseTree> {
    let slots = 1u64 << (max_depth + 1);
    prop::collection::vec((1..slots, prop::collection::vec(-4.0..4.0f64, dim)), 0..max_nodes)
        .prop_map(move |e| SparseTree::from_raw(dim, e).unwrap())
}

/// Values drawn from a handful of integers so that equal norms are common.
fn tied_tree(max_depth: u32, dim: usize) -> impl Strategy<Value = SparseTree> {
    let slots = 1u64 << (max_depth + 1);
    prop::collection::vec((1..slots, prop::collection::vec(-2i8..=2, dim)), 0..60).prop_map(move |e| {
        let e: Vec<(u64, Vec<f64>)> = e.into_iter().map(|(i, v)| (i, v.into_iter().map(f64::from).collect())).collect();
        SparseTree::from_raw(dim, e).unwrap()
    })
}

fn table(dim: usize, seed: u64) -> EmbeddingTable {
    EmbeddingTable::random(LABELS as usize, dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Address of a node from its root-to-node path: the first branch is the
/// least significant bit, the marker sits above the last one.
fn address_of(path: &[bool]) -> u64 {
    let mut v = 1u64 << path.len();
    for (k, &right) in path.iter().enumerate() {
        if right {
            v |= 1 << k;
        }
    }
    v
}

/// Encodes a pointer tree by walking it and computing addresses directly.
fn encode_oracle(t: Option<&SymbolTree>, e: &EmbeddingTable) -> SparseTree {
    fn walk(t: &SymbolTree, path: &mut Vec<bool>, e: &EmbeddingTable, out: &mut Vec<(u64, Vec<f64>)>) {
        out.push((address_of(path), e.row(t.label).unwrap().to_vec()));
        for (right, c) in [(false, &t.left), (true, &t.right)] {
            if let Some(c) = c {
                path.push(right);
                walk(c, path, e, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    if let Some(t) = t {
        walk(t, &mut Vec::new(), e, &mut out);
    }
    SparseTree::from_raw(e.dim(), out).unwrap()
}

fn as_map(t: &SparseTree) -> BTreeMap<u64, Vec<f64>> {
    t.iter().map(|(i, v)| (i.get(), v.to_vec())).collect()
}

fn max_gap(a: &SparseTree, b: &SparseTree) -> f64 {
    let (ma, mb) = (as_map(a), as_map(b));
    let zero = vec![0.0; a.dim()];
    ma.keys()
        .chain(mb.keys())
        .map(|k| {
            let x = ma.get(k).unwrap_or(&zero);
            let y = mb.get(k).unwrap_or(&zero);
            x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn address_round_trip(i in 1u64..u64::MAX) {
        let idx = TreeIndex::new(i).unwrap();
        let p = decode_address(idx);
        prop_assert_eq!(encode_address(p.steps(), 63).unwrap(), idx);
    }

    #[test]
    fn path_round_trip(bits in prop::collection::vec(any::<bool>(), 0..=63)) {
        let path: Vec<Branch> = bits.iter().map(|&r| if r { Branch::Right } else { Branch::Left }).collect();
        let i = encode_address(&path, 63).unwrap();
        prop_assert_eq!(i.get(), address_of(&bits));
        let back = decode_raw(i.get()).unwrap();
        prop_assert_eq!(back.steps(), path.as_slice());
    }

    #[test]
    fn coalesce_is_idempotent_and_sorted(t in sparse_tree(6, 3, 40)) {
        let again = SparseTree::coalesce(3, t.iter().map(|(i, v)| (i, v.to_vec()))).unwrap();
        prop_assert_eq!(&again, &t);
        prop_assert!(t.indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn coalesce_ignores_entry_order(
        entries in prop::collection::vec((1u64..16, prop::collection::vec(-3i8..=3, 2)), 0..30)
            .prop_flat_map(|e| Just(e.clone()).prop_shuffle().prop_map(move |s| (e.clone(), s)))
    ) {
        // Small integers keep the sums exact in any order.
        let conv = |e: &[(u64, Vec<i8>)]| -> Vec<(u64, Vec<f64>)> {
            e.iter().map(|(i, v)| (*i, v.iter().map(|&x| f64::from(x)).collect())).collect()
        };
        let a = SparseTree::from_raw(2, conv(&entries.0)).unwrap();
        let b = SparseTree::from_raw(2, conv(&entries.1)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn serialized_size_is_linear(t in sparse_tree(8, 5, 100)) {
        prop_assert_eq!(t.to_bytes().len(), 12 + t.len() * (5 + 1) * 8);
        prop_assert_eq!(SparseTree::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn symbol_tree_round_trip(t in symbol_tree(8), seed in any::<u64>()) {
        let e = table(6, seed);
        let s = from_symbol_tree(&t, &e, 16).unwrap();
        prop_assert_eq!(&s, &encode_oracle(Some(&t), &e));
        prop_assert_eq!(to_symbol_tree(&s, &e, Vocab::NULL).unwrap(), Some(t));
    }

    #[test]
    fn ops_match_pointer_trees(t in symbol_tree(6), a in symbol_tree(5), b in symbol_tree(5), label in 3..LABELS) {
        let e = table(4, 9);
        let enc = |t: &SymbolTree| from_symbol_tree(t, &e, 10).unwrap();
        let s = enc(&t);
        prop_assert_eq!(op_left(&s), encode_oracle(t.left.as_deref(), &e));
        prop_assert_eq!(op_right(&s), encode_oracle(t.right.as_deref(), &e));
        let joined = SymbolTree::binary(TokenId(label), a.clone(), b.clone());
        let built = op_cons(&enc(&a), &enc(&b), Some(e.row(TokenId(label)).unwrap()), 10).unwrap();
        prop_assert_eq!(built, encode_oracle(Some(&joined), &e));
    }

    #[test]
    fn cons_is_inverted_by_left_and_right(l in sparse_tree(5, 3, 30), r in sparse_tree(5, 3, 30), s in prop::collection::vec(-1.0..1.0f64, 3)) {
        let c = op_cons(&l, &r, Some(&s), 6).unwrap();
        prop_assert_eq!(op_left(&c), l);
        prop_assert_eq!(op_right(&c), r);
    }

    #[test]
    fn cons_depth_overflow_is_an_error(l in sparse_tree(4, 2, 20)) {
        prop_assume!(l.max_depth() == 4 && !l.is_empty());
        let r = SparseTree::empty(2);
        let err = op_cons(&l, &r, None, 4).unwrap_err();
        prop_assert!(
            matches!(err, Error::DepthOverflow { .. }),
            "unexpected error {:?}",
            err
        );
    }

    #[test]
    fn one_hot_weights_reproduce_single_ops(
        a in sparse_tree(4, 3, 20), b in sparse_tree(4, 3, 20),
        c in sparse_tree(4, 3, 20), d in sparse_tree(4, 3, 20),
        s in prop::collection::vec(-1.0..1.0f64, 3),
    ) {
        let args = InterpreterArgs { t_left: a.clone(), t_right: b.clone(), t_cons_left: c.clone(), t_cons_right: d.clone(), root_filler: s.clone() };
        prop_assert_eq!(interpret(OpWeights::LEFT, &args, 6).unwrap(), op_left(&a));
        prop_assert_eq!(interpret(OpWeights::RIGHT, &args, 6).unwrap(), op_right(&b));
        prop_assert_eq!(interpret(OpWeights::CONS, &args, 6).unwrap(), op_cons(&c, &d, Some(&s), 6).unwrap());
    }

    #[test]
    fn interpret_is_linear(
        seed in any::<u64>(),
        alpha in -2.0..2.0f64, beta in -2.0..2.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut args = || {
            use sdtm::checks::random_sparse_tree as t;
            use rand::Rng;
            InterpreterArgs {
                t_left: t(&mut rng, 4, 3, 20),
                t_right: t(&mut rng, 4, 3, 20),
                t_cons_left: t(&mut rng, 4, 3, 20),
                t_cons_right: t(&mut rng, 4, 3, 20),
                root_filler: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            }
        };
        let (a1, a2) = (args(), args());
        let w = sdtm::checks::random_simplex(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let lhs = interpret(w, &a1.combine(alpha, &a2, beta).unwrap(), 6).unwrap();
        let rhs = interpret(w, &a1, 6).unwrap().scale(alpha).add(&interpret(w, &a2, 6).unwrap().scale(beta)).unwrap();
        prop_assert!(max_gap(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn prune_keeps_the_top_k_norms(t in tied_tree(6, 2), k in 0usize..70) {
        let p = prune_topk(&t, k);
        let mut ranked: Vec<(f64, u64)> = t.iter().map(|(i, v)| (v.iter().map(|x| x * x).sum::<f64>(), i.get())).collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut keep: Vec<u64> = ranked.iter().take(k).map(|r| r.1).collect();
        keep.sort_unstable();
        let got: Vec<u64> = p.indices().iter().map(|i| i.get()).collect();
        prop_assert_eq!(got, keep);
        prop_assert!(p.len() <= k);
        for (i, v) in p.iter() {
            prop_assert_eq!(Some(v), t.get(i));
        }
    }

    #[test]
    fn dense_oracle_agrees(t in sparse_tree(5, 4, 40), l in sparse_tree(4, 4, 20), r in sparse_tree(4, 4, 20), seed in any::<u64>()) {
        let dense = |s: &SparseTree| DenseTpr::from_sparse(s, 5).unwrap();
        prop_assert!(max_abs_diff(&dense_left(&dense(&t)), &dense(&op_left(&t))) <= 1e-12);
        prop_assert!(max_abs_diff(&dense_right(&dense(&t)), &dense(&op_right(&t))) <= 1e-12);
        let s = [0.3, -0.2, 0.9, 0.1];
        let c = op_cons(&l, &r, Some(&s), 5).unwrap();
        prop_assert!(max_abs_diff(&dense_cons(&dense(&l), &dense(&r), Some(&s)).unwrap(), &dense(&c)) <= 1e-12);
        let w = sdtm::checks::random_simplex(&mut ChaCha8Rng::seed_from_u64(seed));
        let args = InterpreterArgs { t_left: t.clone(), t_right: t.clone(), t_cons_left: l, t_cons_right: r, root_filler: s.to_vec() };
        let sparse = interpret(w, &args, 5).unwrap();
        prop_assert!(max_abs_diff(&dense_interpret(w, &args, 5).unwrap(), &dense(&sparse)) <= 1e-12);
        // Dense storage does not depend on how many nodes are filled.
        prop_assert_eq!(dense(&t).storage_len(), 4 * (1 << 6));
    }

    #[test]
    fn binarize_is_binary_and_keeps_the_frontier(t in rose_tree()) {
        let b = binarize_cnf(&t);
        fn binary(t: &SymbolTree<String>) -> bool {
            (t.left.is_some() || t.right.is_none())
                && t.left.as_deref().map_or(true, binary)
                && t.right.as_deref().map_or(true, binary)
        }
        prop_assert!(binary(&b));
        let f: Vec<&str> = b.frontier().into_iter().map(String::as_str).collect();
        prop_assert_eq!(f, t.frontier());
    }

    #[test]
    fn laud_leaves_are_uniform_and_left_aligned(toks in prop::collection::vec("[a-e]", 1..70)) {
        let nt = "<NT>".to_string();
        let eob = "<EOB>".to_string();
        let t = laud_embed(&toks, &nt, &eob).unwrap();
        prop_assert_eq!(laud_read_back(&t, &eob), toks.clone());
        let nodes = t.indexed(16).unwrap();
        let leaves: Vec<(TreeIndex, &String)> = nodes.iter().filter(|(_, l)| **l != nt).map(|(i, l)| (*i, *l)).collect();
        let depth = leaves[0].0.depth();
        prop_assert!(leaves.iter().all(|(i, _)| i.depth() == depth));
        if toks.len() > 1 {
            prop_assert_eq!(leaves.len(), toks.len() + 1);
            // Left-to-right order of the deepest level: paths read as binary numbers.
            let mut pos: Vec<u64> = leaves
                .iter()
                .map(|(i, _)| i.path().steps().iter().fold(0, |acc, b| 2 * acc + (*b == Branch::Right) as u64))
                .collect();
            pos.sort_unstable();
            prop_assert_eq!(pos, (0..leaves.len() as u64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zeroshot_leaves_training_data_alone(n in 1usize..6) {
        let train: Vec<Record> = (0..n).map(|k| Record {
            input: format!("x y{k}"),
            output: format!("(f x y{k})"),
            kind: sdtm::data::Kind::Seq,
        }).collect();
        let before = train.clone();
        let test = train.clone();
        let out = make_zeroshot_split(&train, &test, "x", "z", Side::Both).unwrap();
        prop_assert_eq!(&train, &before);
        prop_assert!(out.iter().all(|r| !r.input_tokens().contains(&"x".to_string())));
    }
}

fn rose_tree() -> impl Strategy<Value = RoseTree> {
    let leaf = "[a-z]".prop_map(RoseTree::leaf);
    leaf.prop_recursive(4, 64, 5, |inner| {
        ("[a-z]", prop::collection::vec(inner, 1..5)).prop_map(|(l, c)| RoseTree::new(l, c))
    })
}

#[test]
fn every_small_tree_is_built_by_cons() {
    fn build(t: &SymbolTree, e: &EmbeddingTable) -> SparseTree {
        let sub = |c: &Option<Box<SymbolTree>>| c.as_deref().map_or_else(|| SparseTree::empty(e.dim()), |c| build(c, e));
        op_cons(&sub(&t.left), &sub(&t.right), Some(e.row(t.label).unwrap()), 5).unwrap()
    }
    let e = table(3, 5);
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    for _ in 0..500 {
        let t = symbol_tree(5).new_tree(&mut runner).unwrap().current();
        assert_eq!(build(&t, &e), from_symbol_tree(&t, &e, 5).unwrap());
    }
}

fn small_model(mode: Mode, seed: u64) -> Model {
    let vocab = Vocab::from_tokens((3..LABELS).map(|k| format!("t{k}")));
    let cfg = MachineConfig {
        mode,
        dim: 8,
        num_layers: Some(3),
        max_depth: 5,
        prune_k: 6,
        noise_std: 0.0,
        cons_only: mode.sequence_input(),
        max_int: Some(12),
        model_dim: 16,
        num_heads: 2,
        key_dim: 8,
        value_dim: 8,
        ff_dim: 16,
        ..MachineConfig::default()
    };
    Model::new(cfg, vocab, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn machine_run_invariants(t in symbol_tree(3), seed in 0u64..4) {
        let model = small_model(Mode::Tree2tree, seed);
        let mut g = Graph::new(&model.store);
        let input = Input::Tree(t);
        let mut mem = model.init_memory(&mut g, &input, Randomness::Eval(0)).unwrap();
        let initial = mem.len();
        let (out, trace) = model.run(&mut g, &mut mem).unwrap();
        prop_assert_eq!(mem.len(), initial + 3);
        prop_assert_eq!(trace.op_weights.len(), 3);
        for t in &mem.trees[initial..] {
            prop_assert!(t.len() <= 6);
        }
        prop_assert!(out.len() <= 6);
    }

    #[test]
    fn sequence_runs_only_cons(toks in prop::collection::vec(3u32..LABELS, 1..6), seed in 0u64..4) {
        let model = small_model(Mode::Seq2tree, seed);
        prop_assert!(model.cfg.cons_only);
        let mut g = Graph::new(&model.store);
        let input = Input::Seq(toks.into_iter().map(TokenId).collect());
        let mut mem = model.init_memory(&mut g, &input, Randomness::Eval(3)).unwrap();
        let (_, trace) = model.run(&mut g, &mut mem).unwrap();
        for w in trace.op_weights {
            prop_assert_eq!(w, [0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn forward_and_gradients_are_deterministic(t in symbol_tree(3), target in symbol_tree(3)) {
        let model = small_model(Mode::Tree2tree, 1);
        let ex = sdtm::machine::Example { input: Input::Tree(t), target };
        let once = || {
            let mut g = Graph::new(&model.store);
            let (_, loss) = model.forward(&mut g, &ex, Randomness::Eval(0)).unwrap();
            let value = g.scalar(loss);
            let grads = g.backward(loss).unwrap();
            let mut acc: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
            grads.accumulate_params(&model.store, &mut acc);
            (value, acc)
        };
        let (l1, g1) = once();
        let (l2, g2) = once();
        prop_assert!(l1 >= 0.0);
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        let bits = |g: &Vec<Vec<f64>>| g.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&g1), bits(&g2));
    }

    #[test]
    fn arg_distributions_normalize_and_permute(seed in any::<u64>(), m in 2usize..6) {
        let cfg = AgentConfig { dim: 4, bit_width: 5, model_dim: 8, num_heads: 2, key_dim: 4, value_dim: 4, ff_dim: 8, num_layers: 1 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = Agent::new(&cfg, &mut store, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..m).map(|k| (0..8).map(|j| ((seed % 97) as f64 * 0.01 + (k * 8 + j) as f64 * 0.37).sin()).collect()).collect();
        let dists = |order: &[usize]| {
            let mut g = Graph::new(&store);
            let toks: Vec<_> = order.iter().map(|&k| g.constant(1, 8, rows[k].clone())).collect();
            let out = agent.step(&mut g, 0, &toks).unwrap();
            g.value(out.arg_dists).to_vec()
        };
        let ident: Vec<usize> = (0..m).collect();
        let base = dists(&ident);
        for col in 0..4 {
            let s: f64 = (0..m).map(|r| base[r * 4 + col]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        let rev: Vec<usize> = (0..m).rev().collect();
        let perm = dists(&rev);
        for (r, &k) in rev.iter().enumerate() {
            for col in 0..4 {
                prop_assert!((perm[r * 4 + col] - base[k * 4 + col]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn softmax_columns_ignore_constant_shifts() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let data: Vec<f64> = (0..12).map(|k| (k as f64 * 0.7).cos()).collect();
    let shifted: Vec<f64> = data.iter().enumerate().map(|(k, x)| x + [3.0, -5.0, 0.5, 100.0][k % 4]).collect();
    let a = g.constant(3, 4, data);
    let b = g.constant(3, 4, shifted);
    let sa = g.softmax_cols(a);
    let sb = g.softmax_cols(b);
    for (x, y) in g.value(sa).iter().zip(g.value(sb)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn second_backward_is_rejected() {
    let model = small_model(Mode::Tree2tree, 0);
    let t = SymbolTree::binary(TokenId(3), SymbolTree::leaf(TokenId(4)), SymbolTree::leaf(TokenId(5)));
    let ex = sdtm::machine::Example { input: Input::Tree(t.clone()), target: t };
    let mut g = Graph::new(&model.store);
    let (_, loss) = model.forward(&mut g, &ex, Randomness::Eval(0)).unwrap();
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(Error::TapeConsumed)));
}

#[test]
fn pooling_parameters_do_not_depend_on_depth() {
    let vocab = Vocab::from_tokens(["a", "b"]);
    let count = |max_depth: u32| {
        let cfg = MachineConfig { dim: 8, max_depth, bit_width: Some(17), num_layers: Some(2), model_dim: 16, num_heads: 2, key_dim: 8, value_dim: 8, ff_dim: 16, ..MachineConfig::default() };
        Model::new(cfg, vocab.clone(), 0).unwrap().trainable_params()
    };
    assert_eq!(count(8), count(16));
}
