//! `sdtm` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod table;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdtm::checks::{ops_check, tpr_check};
use sdtm::config::RunConfig;
use sdtm::data::{
    binarize_cnf, gen_toy_transduction, gen_toy_with_token, laud_embed, laud_read_back, make_zeroshot_split,
    parse_binary_tree, read_records_file, read_scan_file, scan_grammar, scan_simple_split, share_scan_vocab,
    write_records, Record, SeqPair, Side, ToyTask,
};
use sdtm::experiment;
use sdtm::machine::{Input, Mode, Model};
use sdtm::symbol::{EOB_TOKEN, NT_TOKEN};
use sdtm::train::evaluate;
use sdtm::{
    checkpoint, from_symbol_tree, op_cons, op_left, op_right, to_symbol_tree, EmbeddingTable, Error, Result,
    RoseTree, SparseTree, SymbolTree, Vocab,
};

use table::TableFile;

/// Environment variable that overrides the default output directory.
const OUT_DIR_ENV: &str = "SDTM_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Parser)]
#[command(name = "sdtm", version, about = "Sparse coordinate trees and the sparse differentiable tree machine")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert between s-expressions and sparse tree JSON lines.
    #[command(subcommand)]
    Tree(TreeCmd),
    /// Apply structural operations to sparse trees.
    #[command(subcommand)]
    Ops(OpsCmd),
    /// Compare the sparse operations with a dense tensor product oracle.
    #[command(subcommand)]
    Tpr(TprCmd),
    /// Dataset preparation.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train one model from a config file.
    Train(RunArgs),
    /// Train one model per configured seed and report the best.
    Sweep(RunArgs),
    /// Exact match of a checkpoint on dataset files.
    Eval(EvalArgs),
    /// Decode the output of a checkpoint for single inputs.
    Predict(PredictArgs),
}

#[derive(Subcommand)]
enum TreeCmd {
    /// s-expressions (one per line) to sparse tree JSON lines.
    Encode {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Embedding table; created from the input tokens if missing.
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = sdtm::address::DEFAULT_MAX_DEPTH)]
        max_depth: u32,
    },
    /// Sparse tree JSON lines back to s-expressions.
    Decode {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        table: PathBuf,
    },
    /// Index table with branch paths for each tree.
    Show {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Label nodes with their nearest token.
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OpName {
    Left,
    Right,
    Cons,
}

#[derive(Subcommand)]
enum OpsCmd {
    /// Apply one operation to each tree (cons pairs line k of both inputs).
    Apply {
        #[arg(long, value_enum)]
        op: OpName,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "in2")]
        input2: Option<PathBuf>,
        /// Root token for cons, looked up in --table.
        #[arg(long)]
        root: Option<String>,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = sdtm::address::DEFAULT_MAX_DEPTH)]
        max_depth: u32,
    },
    /// Compare the sparse operations with pointer-tree subtree extraction.
    Check {
        #[arg(long, default_value_t = 10_000)]
        trees: usize,
        #[arg(long, default_value_t = 10)]
        depth: u32,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum TprCmd {
    Check {
        #[arg(long, default_value_t = 5)]
        depth: u32,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-12)]
        tolerance: f64,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Binarize s-expressions (one per line) in Chomsky normal form.
    Binarize {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed token sequences (one per line) as LAUD trees.
    Laud {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace a token in a test split with a token unseen in training.
    Zeroshot {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        old: String,
        #[arg(long)]
        new: String,
        #[arg(long, default_value = "both")]
        side: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random tree transduction samples.
    GenToy {
        #[arg(long, default_value = "swap_children")]
        task: String,
        #[arg(long, default_value_t = 12)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        depth: u32,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only keep samples whose input contains this token.
        #[arg(long)]
        with_token: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SCAN samples as dataset records, from an `IN: ... OUT: ...` file or the grammar.
    Scan {
        #[arg(long = "in", conflicts_with = "generate")]
        input: Option<PathBuf>,
        #[arg(long)]
        generate: bool,
        /// Map action tokens onto the command words.
        #[arg(long)]
        share_vocab: bool,
        /// Fraction kept in --out; the rest goes to --test-out.
        #[arg(long, requires = "test_out")]
        train_fraction: Option<f64>,
        #[arg(long)]
        test_out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: $SDTM_OUT_DIR, then `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset files, optionally as NAME=PATH.
    #[arg(long = "data", required = true)]
    data: Vec<String>,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    /// Give unseen tokens fresh random embeddings.
    #[arg(long)]
    extend_vocab: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One input; otherwise one input per line of --in (or stdin).
    #[arg(long, conflicts_with = "file")]
    input: Option<String>,
    #[arg(long = "in")]
    file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Tree(c) => tree(c).map(|_| 0),
        Command::Ops(c) => ops(c),
        Command::Tpr(TprCmd::Check {
            depth,
            dim,
            trials,
            seed,
            tolerance,
        }) => {
            let report = tpr_check(depth, dim, trials, seed, tolerance)?;
            println!("{report}");
            Ok(if report.passed() { 0 } else { 3 })
        }
        Command::Data(c) => data(c).map(|_| 0),
        Command::Train(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let out = out_dir(a.out);
            let s = experiment::run(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
            Ok(0)
        }
        Command::Sweep(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let out = out_dir(a.out);
            let s = experiment::sweep(&cfg, &out)?;
            for (split, b) in &s.best {
                println!("{split}: best exact_match={:.4} (seed {})", b.exact_match, b.seed);
            }
            Ok(0)
        }
        Command::Eval(a) => eval(a).map(|_| 0),
        Command::Predict(a) => predict(a).map(|_| 0),
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn read_input(path: Option<&Path>) -> Result<String> {
    let mut s = String::new();
    match path {
        Some(p) => {
            File::open(p)
                .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?
                .read_to_string(&mut s)?;
        }
        None => {
            io::stdin().read_to_string(&mut s)?;
        }
    }
    Ok(s)
}

fn nonempty_lines(src: &str) -> impl Iterator<Item = (usize, &str)> {
    src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(k, l)| (k + 1, l))
}

/// Prefixes parse and data errors with their line number.
fn at_line<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { column, message, .. } => Error::Parse { line, column, message },
        Error::Config(m) => Error::Config(m),
        other => Error::Data(format!("line {line}: {other}")),
    })
}

fn writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_sparse(path: &Path) -> Result<Vec<SparseTree>> {
    let f = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(at_line(k + 1, SparseTree::from_json(&line))?);
    }
    Ok(out)
}

fn tree(cmd: TreeCmd) -> Result<()> {
    match cmd {
        TreeCmd::Encode {
            input,
            table,
            dim,
            seed,
            max_depth,
        } => {
            let src = read_input(input.as_deref())?;
            let mut trees = Vec::new();
            for (k, line) in nonempty_lines(&src) {
                trees.push(at_line(k, parse_binary_tree(line))?);
            }
            let (vocab, emb) = if table.exists() {
                TableFile::load(&table)?
            } else {
                let vocab = Vocab::from_tokens(trees.iter().flat_map(|t| t.labels()));
                let emb = EmbeddingTable::random(vocab.len(), dim, &mut ChaCha8Rng::seed_from_u64(seed));
                TableFile::new(&vocab, &emb).save(&table)?;
                (vocab, emb)
            };
            let mut w = writer(None)?;
            for t in &trees {
                let ids = vocab.encode_tree(t)?;
                writeln!(w, "{}", from_symbol_tree(&ids, &emb, max_depth)?.to_json())?;
            }
            w.flush()?;
        }
        TreeCmd::Decode { input, table } => {
            let (vocab, emb) = TableFile::load(&table)?;
            let src = read_input(input.as_deref())?;
            let mut w = writer(None)?;
            for (k, line) in nonempty_lines(&src) {
                let t = at_line(k, SparseTree::from_json(line))?;
                match at_line(k, to_symbol_tree(&t, &emb, Vocab::NULL))? {
                    Some(t) => writeln!(w, "{}", vocab.decode_tree(&t)?)?,
                    None => writeln!(w)?,
                }
            }
            w.flush()?;
        }
        TreeCmd::Show { input, table } => {
            let table = table.map(|p| TableFile::load(&p)).transpose()?;
            let src = read_input(input.as_deref())?;
            let mut w = writer(None)?;
            for (n, (k, line)) in nonempty_lines(&src).enumerate() {
                let t = at_line(k, SparseTree::from_json(line))?;
                if n > 0 {
                    writeln!(w)?;
                }
                writeln!(w, "tree {} ({} entries, dim {})", n + 1, t.len(), t.dim())?;
                writeln!(w, "{:>8}  {:<24} {}", "index", "path", if table.is_some() { "token" } else { "norm" })?;
                for (i, v) in t.iter() {
                    let last = match &table {
                        Some((vocab, emb)) => vocab.token(emb.nearest(v))?.to_string(),
                        None => format!("{:.6}", v.iter().map(|x| x * x).sum::<f64>().sqrt()),
                    };
                    writeln!(w, "{:>8}  {:<24} {}", i, i.path().to_string(), last)?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn ops(cmd: OpsCmd) -> Result<u8> {
    match cmd {
        OpsCmd::Apply {
            op,
            input,
            input2,
            root,
            table,
            max_depth,
        } => {
            let first = read_sparse(&input)?;
            let mut w = writer(None)?;
            match op {
                OpName::Left | OpName::Right => {
                    if input2.is_some() || root.is_some() {
                        return Err(Error::Config("--in2 and --root only apply to cons".into()));
                    }
                    for t in &first {
                        let r = if matches!(op, OpName::Left) { op_left(t) } else { op_right(t) };
                        writeln!(w, "{}", r.to_json())?;
                    }
                }
                OpName::Cons => {
                    let second = match &input2 {
                        Some(p) => read_sparse(p)?,
                        None => return Err(Error::Config("cons needs --in2".into())),
                    };
                    if first.len() != second.len() {
                        return Err(Error::Data(format!(
                            "--in has {} trees but --in2 has {}",
                            first.len(),
                            second.len()
                        )));
                    }
                    let root_vec = match (&root, &table) {
                        (Some(tok), Some(p)) => {
                            let (vocab, emb) = TableFile::load(p)?;
                            Some(emb.row(vocab.id(tok)?)?.to_vec())
                        }
                        (Some(_), None) => return Err(Error::Config("--root needs --table".into())),
                        (None, _) => None,
                    };
                    for (l, r) in first.iter().zip(&second) {
                        let t = op_cons(l, r, root_vec.as_deref(), max_depth)?;
                        writeln!(w, "{}", t.to_json())?;
                    }
                }
            }
            w.flush()?;
            Ok(0)
        }
        OpsCmd::Check { trees, depth, dim, seed } => {
            let report = ops_check(trees, depth, dim, seed)?;
            println!("{report}");
            Ok(if report.passed() { 0 } else { 3 })
        }
    }
}

fn data(cmd: DataCmd) -> Result<()> {
    match cmd {
        DataCmd::Binarize { input, out } => {
            let src = read_input(input.as_deref())?;
            let mut w = writer(out.as_deref())?;
            for (k, line) in nonempty_lines(&src) {
                let t = at_line(k, RoseTree::parse(line))?;
                writeln!(w, "{}", binarize_cnf(&t))?;
            }
            w.flush()?;
        }
        DataCmd::Laud { input, out } => {
            let src = read_input(input.as_deref())?;
            let mut w = writer(out.as_deref())?;
            let (nt, eob) = (NT_TOKEN.to_string(), EOB_TOKEN.to_string());
            for (k, line) in nonempty_lines(&src) {
                let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
                writeln!(w, "{}", at_line(k, laud_embed(&toks, &nt, &eob))?)?;
            }
            w.flush()?;
        }
        DataCmd::Zeroshot {
            train,
            test,
            old,
            new,
            side,
            out,
        } => {
            let side: Side = side.parse()?;
            let train = read_records_file(&train)?;
            let test = read_records_file(&test)?;
            let split = make_zeroshot_split(&train, &test, &old, &new, side)?;
            let mut w = writer(out.as_deref())?;
            write_records(&mut w, &split)?;
            w.flush()?;
        }
        DataCmd::GenToy {
            task,
            vocab,
            depth,
            n,
            seed,
            with_token,
            out,
        } => {
            let task: ToyTask = task.parse()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = match &with_token {
                Some(tok) => gen_toy_with_token(task, vocab, depth, n, tok, &mut rng)?,
                None => gen_toy_transduction(task, vocab, depth, n, &mut rng)?,
            };
            let recs: Vec<Record> = samples.iter().map(|(x, y)| Record::tree(x, y)).collect();
            let mut w = writer(out.as_deref())?;
            write_records(&mut w, &recs)?;
            w.flush()?;
        }
        DataCmd::Scan {
            input,
            generate,
            share_vocab,
            train_fraction,
            test_out,
            limit,
            seed,
            out,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut main, mut rest): (Vec<SeqPair>, Vec<SeqPair>) = match (&input, generate) {
                (Some(p), false) => (read_scan_file(p)?, Vec::new()),
                (None, true) => match train_fraction {
                    Some(f) => scan_simple_split(f, &mut rng),
                    None => (scan_grammar(), Vec::new()),
                },
                _ => return Err(Error::Config("give either --in or --generate".into())),
            };
            if input.is_some() {
                if let Some(f) = train_fraction {
                    use rand::seq::SliceRandom;
                    if !(0.0..=1.0).contains(&f) {
                        return Err(Error::Config("--train-fraction must be in [0, 1]".into()));
                    }
                    main.shuffle(&mut rng);
                    let cut = ((main.len() as f64) * f).round() as usize;
                    rest = main.split_off(cut);
                }
            }
            if let Some(n) = limit {
                main.truncate(n);
            }
            let to_records = |pairs: &[SeqPair]| -> Vec<Record> {
                pairs
                    .iter()
                    .map(|p| {
                        let mut p = p.clone();
                        if share_vocab {
                            p.output = share_scan_vocab(&p.output);
                        }
                        Record::seq(&p)
                    })
                    .collect()
            };
            let mut w = writer(out.as_deref())?;
            write_records(&mut w, &to_records(&main))?;
            w.flush()?;
            if let Some(p) = test_out {
                let mut w = writer(Some(&p))?;
                write_records(&mut w, &to_records(&rest))?;
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut model = checkpoint::load(&a.checkpoint)?;
    for spec in &a.data {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let n = p.file_stem().map_or_else(|| spec.clone(), |s| s.to_string_lossy().into_owned());
                (n, p)
            }
        };
        let recs = read_records_file(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let examples = experiment::prepare_split(&mut model, &recs, a.extend_vocab, a.eval_seed)?;
        let r = evaluate(&model, &examples, a.eval_seed)?;
        println!(
            "{name}: samples={} exact_match={:.4} loss={:.6}",
            examples.len(),
            r.exact_match,
            r.loss
        );
    }
    Ok(())
}

fn parse_input(model: &Model, text: &str) -> Result<Input> {
    if model.cfg.mode.sequence_input() {
        let toks: Vec<&str> = text.split_whitespace().collect();
        Ok(Input::Seq(model.vocab.encode_seq(&toks)?))
    } else {
        Ok(Input::Tree(model.vocab.encode_tree(&parse_binary_tree(text)?)?))
    }
}

fn render(model: &Model, out: Option<SymbolTree>) -> Result<String> {
    let Some(t) = out else {
        return Ok(String::new());
    };
    let t = model.vocab.decode_tree(&t)?;
    Ok(if model.cfg.mode == Mode::Seq2seqLaud {
        laud_read_back(&t, &EOB_TOKEN.to_string())
            .into_iter()
            .filter(|s| s != NT_TOKEN)
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        t.to_string()
    })
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let inputs: Vec<(usize, String)> = match a.input {
        Some(s) => vec![(1, s)],
        None => nonempty_lines(&read_input(a.file.as_deref())?)
            .map(|(k, l)| (k, l.to_string()))
            .collect(),
    };
    let mut w = writer(None)?;
    for (k, text) in inputs {
        let input = at_line(k, parse_input(&model, &text))?;
        let pred = model.predict(&input, a.eval_seed)?;
        writeln!(w, "{}", at_line(k, model.decode(&pred).and_then(|t| render(&model, t)))?)?;
    }
    w.flush()?;
    Ok(())
}
