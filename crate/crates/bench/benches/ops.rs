use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdtm::checks::{random_simplex, random_sparse_tree};
use sdtm::{interpret, op_cons, op_left, op_right, prune_topk, InterpreterArgs, SparseTree};

const DIM: usize = 64;
const DEPTH: u32 = 12;

fn tree(rng: &mut ChaCha8Rng, nodes: usize) -> SparseTree {
    loop {
        let t = random_sparse_tree(rng, DEPTH, DIM, nodes);
        if t.len() * 2 >= nodes {
            return t;
        }
    }
}

fn structural(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("structural");
    for nodes in [16, 256, 2048] {
        let a = tree(&mut rng, nodes);
        let b = tree(&mut rng, nodes);
        let root = vec![0.5; DIM];
        g.bench_with_input(BenchmarkId::new("left", nodes), &a, |bch, t| bch.iter(|| op_left(black_box(t))));
        g.bench_with_input(BenchmarkId::new("right", nodes), &a, |bch, t| bch.iter(|| op_right(black_box(t))));
        g.bench_with_input(BenchmarkId::new("cons", nodes), &(a, b), |bch, (l, r)| {
            bch.iter(|| op_cons(black_box(l), black_box(r), Some(&root), DEPTH + 1).unwrap())
        });
    }
    g.finish();
}

fn interpreter(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("interpret");
    for nodes in [16, 256, 2048] {
        let args = InterpreterArgs {
            t_left: tree(&mut rng, nodes),
            t_right: tree(&mut rng, nodes),
            t_cons_left: tree(&mut rng, nodes),
            t_cons_right: tree(&mut rng, nodes),
            root_filler: vec![0.1; DIM],
        };
        let w = random_simplex(&mut rng);
        g.bench_with_input(BenchmarkId::new("blend", nodes), &args, |bch, a| {
            bch.iter(|| interpret(w, black_box(a), DEPTH + 1).unwrap())
        });
        let out = interpret(w, &args, DEPTH + 1).unwrap();
        g.bench_with_input(BenchmarkId::new("prune_256", nodes), &out, |bch, t| {
            bch.iter(|| prune_topk(black_box(t), 256))
        });
    }
    g.finish();
}

fn serialization(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = tree(&mut rng, 1024);
    let bytes = t.to_bytes();
    c.bench_function("to_bytes_1024", |b| b.iter(|| black_box(&t).to_bytes()));
    c.bench_function("from_bytes_1024", |b| b.iter(|| SparseTree::from_bytes(black_box(&bytes)).unwrap()));
}

criterion_group!(benches, structural, interpreter, serialization);
criterion_main!(benches);
