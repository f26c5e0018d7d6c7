use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sdtm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sdtm"));
    c.env_remove("SDTM_OUT_DIR");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    sdtm().args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn golden(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(p).unwrap()
}

/// Path of an address, from the least significant bit up to the marker.
fn path_of(mut i: u64) -> String {
    let mut steps = Vec::new();
    while i > 1 {
        steps.push(if i % 2 == 0 { "L" } else { "R" });
        i /= 2;
    }
    format!("[{}]", steps.join(","))
}

#[test]
fn tpr_check_default_report_matches_golden() {
    let dir = TempDir::new().unwrap();
    let o = run(&["tpr", "check"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), golden("tpr_check_default.txt"));
}

#[test]
fn tpr_check_fails_with_exit_three_when_tolerance_is_exceeded() {
    let dir = TempDir::new().unwrap();
    let o = run(&["tpr", "check", "--trials", "5", "--tolerance=-1"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("result: fail"));
}

#[test]
fn ops_check_passes() {
    let dir = TempDir::new().unwrap();
    let o = run(&["ops", "check", "--trees", "300"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).ends_with("result: pass\n"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(&["tpr", "check", "--bogus"], dir.path())), 1);
    assert_eq!(code(&run(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&run(&[], dir.path())), 1);
    assert_eq!(code(&run(&["--help"], dir.path())), 0);
}

#[test]
fn tree_encode_decode_round_trip() {
    let dir = TempDir::new().unwrap();
    let corpus = "(a b c)\n(a (b d e) c)\nx\n(s (np the dog) (vp barks))\n(p (q r))\n";
    write(dir.path(), "trees.txt", corpus);
    let o = run(
        &["tree", "encode", "--in", "trees.txt", "--table", "tab.json", "--dim", "6"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    write(dir.path(), "trees.jsonl", &stdout(&o));
    let first: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    let idx: Vec<u64> = first["entries"].as_array().unwrap().iter().map(|e| e[0].as_u64().unwrap()).collect();
    assert_eq!(idx, vec![1, 2, 3]);
    assert_eq!(first["dim"], 6);

    let o = run(&["tree", "decode", "--in", "trees.jsonl", "--table", "tab.json"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), corpus);
}

#[test]
fn tree_show_lists_paths() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "t.jsonl",
        "{\"entries\": [[1, [1.0]], [2, [2.0]], [5, [3.0]]], \"dim\": 1}\n",
    );
    let o = run(&["tree", "show", "--in", "t.jsonl"], dir.path());
    assert_eq!(code(&o), 0);
    let rows: Vec<Vec<String>> = stdout(&o)
        .lines()
        .skip(2)
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for (row, i) in rows.iter().zip([1u64, 2, 5]) {
        assert_eq!(row[0], i.to_string());
        assert_eq!(row[1], path_of(i));
    }
    assert_eq!(rows[2][1], "[R,L]");
}

#[test]
fn ops_apply_matches_subtrees() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "a.txt", "(a (b d e) c)\n(f g (h i j))\n");
    write(dir.path(), "b.txt", "(k l m)\nn\n");
    let enc = |src: &str, out: &str| {
        let o = run(&["tree", "encode", "--in", src, "--table", "tab.json"], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        write(dir.path(), out, &stdout(&o));
    };
    write(dir.path(), "all.txt", "(a (b d e) c)\n(f g (h i j))\n(k l m)\nn\n");
    enc("all.txt", "all.jsonl");
    enc("a.txt", "a.jsonl");
    enc("b.txt", "b.jsonl");

    let apply = |args: &[&str]| {
        let o = run(args, dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        write(dir.path(), "r.jsonl", &stdout(&o));
        stdout(&run(&["tree", "decode", "--in", "r.jsonl", "--table", "tab.json"], dir.path()))
    };
    assert_eq!(apply(&["ops", "apply", "--op", "left", "--in", "a.jsonl"]), "(b d e)\ng\n");
    assert_eq!(apply(&["ops", "apply", "--op", "right", "--in", "a.jsonl"]), "c\n(h i j)\n");
    let o = run(
        &["ops", "apply", "--op", "cons", "--in", "a.jsonl", "--in2", "b.jsonl", "--root", "zz", "--table", "tab.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert_eq!(
        apply(&[
            "ops", "apply", "--op", "cons", "--in", "a.jsonl", "--in2", "b.jsonl", "--root", "n", "--table", "tab.json"
        ]),
        "(n (a (b d e) c) (k l m))\n(n (f g (h i j)) n)\n"
    );
}

#[test]
fn ops_apply_argument_errors() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "t.jsonl", "{\"entries\": [[1, [1.0]]], \"dim\": 1}\n");
    write(dir.path(), "two.jsonl", "{\"entries\": [[1, [1.0]]], \"dim\": 1}\n{\"entries\": [], \"dim\": 1}\n");
    write(dir.path(), "bad.jsonl", "{\"entries\": [[0, [1.0]]], \"dim\": 1}\n");
    let p = dir.path();
    assert_eq!(code(&run(&["ops", "apply", "--op", "cons", "--in", "t.jsonl"], p)), 1);
    assert_eq!(code(&run(&["ops", "apply", "--op", "left", "--in", "t.jsonl", "--in2", "t.jsonl"], p)), 1);
    assert_eq!(code(&run(&["ops", "apply", "--op", "cons", "--in", "t.jsonl", "--in2", "two.jsonl"], p)), 2);
    assert_eq!(code(&run(&["ops", "apply", "--op", "left", "--in", "bad.jsonl"], p)), 2);
    assert_eq!(code(&run(&["ops", "apply", "--op", "left", "--in", "missing.jsonl"], p)), 2);
}

#[test]
fn data_binarize_and_laud() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "rose.txt", "(a b c d)\n(a b)\n(a b c)\n");
    let o = run(&["data", "binarize", "--in", "rose.txt"], dir.path());
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "(a b (<NT> c d))");
    assert_eq!(lines[2], "(a b c)");

    write(dir.path(), "seq.txt", "a b c\nx\n");
    let o = run(&["data", "laud", "--in", "seq.txt"], dir.path());
    assert_eq!(code(&o), 0);
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines[0], "(<NT> (<NT> a b) (<NT> c <EOB>))");
    assert_eq!(lines[1], "(<NT> x)");

    write(dir.path(), "broken.txt", "(a b\n");
    let o = run(&["data", "binarize", "--in", "broken.txt"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn data_zeroshot_replaces_every_occurrence() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "train.jsonl", "{\"in\": \"x y\", \"out\": \"(f x y)\", \"kind\": \"seq\"}\n");
    write(
        dir.path(),
        "test.jsonl",
        "{\"in\": \"x x y x\", \"out\": \"(f x y)\", \"kind\": \"seq\"}\n{\"in\": \"y\", \"out\": \"y\", \"kind\": \"seq\"}\n",
    );
    let o = run(
        &["data", "zeroshot", "--train", "train.jsonl", "--test", "test.jsonl", "--old", "x", "--new", "z"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let recs: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs[0]["in"], "z z y z");
    assert_eq!(recs[0]["out"], "(f z y)");
    assert_eq!(recs[1]["in"], "y");

    let o = run(
        &["data", "zeroshot", "--train", "train.jsonl", "--test", "test.jsonl", "--old", "x", "--new", "y"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn data_gen_toy_and_scan() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let a = stdout(&run(&["data", "gen-toy", "--n", "20", "--seed", "4"], p));
    let b = stdout(&run(&["data", "gen-toy", "--n", "20", "--seed", "4"], p));
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 20);
    let o = run(&["data", "gen-toy", "--n", "10", "--with-token", "l3"], p);
    assert!(stdout(&o).lines().all(|l| l.contains("l3")));
    assert_eq!(code(&run(&["data", "gen-toy", "--task", "nope"], p)), 1);

    write(p, "scan.txt", "IN: jump twice OUT: I_JUMP I_JUMP\nIN: walk OUT: I_WALK\n");
    let o = run(&["data", "scan", "--in", "scan.txt", "--share-vocab"], p);
    assert_eq!(code(&o), 0);
    let first: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(first["in"], "jump twice");
    assert_eq!(first["out"], "jump jump");
    assert_eq!(first["kind"], "seq");

    write(p, "bad_scan.txt", "IN: jump OUT: I_JUMP\nIN: walk I_WALK\n");
    let o = run(&["data", "scan", "--in", "bad_scan.txt"], p);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains('2'));

    let o = run(
        &["data", "scan", "--generate", "--train-fraction", "0.8", "--test-out", "test.jsonl", "--out", "train.jsonl"],
        p,
    );
    assert_eq!(code(&o), 0);
    let n_train = std::fs::read_to_string(p.join("train.jsonl")).unwrap().lines().count();
    let n_test = std::fs::read_to_string(p.join("test.jsonl")).unwrap().lines().count();
    assert_eq!(n_train + n_test, 20910);
}

const TOY_CONFIG: &str = r#"
[model]
mode = "tree2tree"
dim = 16
num_layers = 3
max_depth = 4
prune_k = 32
noise_std = 0.0
logit_scale = 10.0
model_dim = 32
num_heads = 4
key_dim = 8
value_dim = 8
ff_dim = 64

[train]
seed = 0
steps = 300
batch_size = 16
lr = 3e-3
warmup_steps = 50
grad_clip = 1.0
log_every = 50
eval_every = 100

[data]
train = "train.jsonl"

[data.eval]
iid = "test.jsonl"
"#;

fn toy_data(dir: &Path) {
    for (name, n, seed) in [("train.jsonl", "400", "1"), ("test.jsonl", "100", "2")] {
        let o = run(
            &["data", "gen-toy", "--task", "identity", "--depth", "3", "--n", n, "--seed", seed, "--out", name],
            dir,
        );
        assert_eq!(code(&o), 0);
    }
}

#[test]
fn train_eval_predict_on_identity() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    toy_data(p);
    write(p, "run.toml", TOY_CONFIG);
    let o = run(&["train", "--config", "run.toml", "--out", "out"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "metrics.jsonl", "model.sdtm", "summary.json"] {
        assert!(p.join("out").join(f).exists(), "{f} missing");
    }
    // The echoed config is complete and loads again.
    let echoed = std::fs::read_to_string(p.join("out/config.toml")).unwrap();
    assert!(echoed.contains("bit_width"));
    assert!(echoed.contains("readout_bias"));
    let metrics = std::fs::read_to_string(p.join("out/metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["exact_match", "loss", "split", "step"]);
    }

    let o = run(&["eval", "--checkpoint", "out/model.sdtm", "--data", "iid=test.jsonl"], p);
    assert_eq!(code(&o), 0);
    let line = stdout(&o);
    let em: f64 = line.split("exact_match=").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!(em >= 0.99, "{line}");

    let input = "(n1 l3 (n2 l4 l5))";
    let a = run(&["predict", "--checkpoint", "out/model.sdtm", "--input", input], p);
    let b = run(&["predict", "--checkpoint", "out/model.sdtm", "--input", input], p);
    assert_eq!(code(&a), 0);
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a).trim(), input);

    let o = run(&["predict", "--checkpoint", "out/model.sdtm", "--input", "(n1 unseen l5)"], p);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_rejects_bad_configs() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    toy_data(p);
    write(p, "unknown.toml", &format!("{TOY_CONFIG}\nfoo = 1\n"));
    assert_eq!(code(&run(&["train", "--config", "unknown.toml", "--out", "o"], p)), 1);
    write(p, "nodata.toml", &TOY_CONFIG.replace("train = \"train.jsonl\"", "train = \"nope.jsonl\""));
    assert_eq!(code(&run(&["train", "--config", "nodata.toml", "--out", "o"], p)), 2);
    assert_eq!(code(&run(&["train", "--config", "missing.toml"], p)), 1);
}

#[test]
fn output_directory_override_from_environment() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    toy_data(p);
    write(p, "run.toml", &TOY_CONFIG.replace("steps = 300", "steps = 5"));
    let o = sdtm()
        .args(["train", "--config", "run.toml"])
        .env("SDTM_OUT_DIR", "from-env")
        .current_dir(p)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(p.join("from-env/model.sdtm").exists());
}

#[test]
fn sweep_writes_one_run_per_seed_and_best() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    toy_data(p);
    write(p, "run.toml", &TOY_CONFIG.replace("steps = 300", "steps = 20"));
    let o = run(&["sweep", "--config", "run.toml", "--out", "sw"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut best = f64::NEG_INFINITY;
    for seed in 0..5 {
        let d = p.join(format!("sw/seed-{seed}"));
        assert!(d.join("metrics.jsonl").exists());
        let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("summary.json")).unwrap()).unwrap();
        best = best.max(s["splits"]["iid"]["exact_match"].as_f64().unwrap());
    }
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("sw/summary.json")).unwrap()).unwrap();
    assert_eq!(s["best"]["iid"]["exact_match"].as_f64().unwrap(), best);
    assert_eq!(s["runs"].as_array().unwrap().len(), 5);
}
