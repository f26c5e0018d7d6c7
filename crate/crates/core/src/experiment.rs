//! File-backed training runs and multi-seed sweeps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{build_vocab, encode_records, read_records_file, Record};
use crate::error::{Error, Result};
use crate::machine::{Example, Model};
use crate::train::{self, EvalResult, MetricRecord};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.sdtm";
pub const SUMMARY_FILE: &str = "summary.json";

fn read_split(path: &Path) -> Result<Vec<Record>> {
    read_records_file(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => Error::Data(format!("{}: {other}", path.display())),
    })
}

/// Adds tokens of `records` missing from the model's vocabulary, each with a
/// fresh random embedding.
pub fn extend_vocab_for(model: &mut Model, records: &[Record], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e_57e4d);
    for r in records {
        for t in r.input_tokens().into_iter().chain(r.output_tokens()) {
            model.extend_vocab(&t, &mut rng);
        }
    }
}

/// Encodes records for `model`, optionally extending its vocabulary.
pub fn prepare_split(model: &mut Model, records: &[Record], extend: bool, seed: u64) -> Result<Vec<Example>> {
    if extend {
        extend_vocab_for(model, records, seed);
    }
    encode_records(records, model.cfg.mode, &model.vocab).map_err(|e| match e {
        Error::Data(m) => Error::Data(m),
        other => Error::Data(other.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub loss: f64,
    pub exact_match: f64,
}

impl From<&EvalResult> for SplitScore {
    fn from(r: &EvalResult) -> Self {
        SplitScore {
            loss: r.loss,
            exact_match: r.exact_match,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub stopped_early: bool,
    pub trainable_params: usize,
    pub splits: BTreeMap<String, SplitScore>,
}

/// Trains one model as configured, writing the resolved config, metrics,
/// checkpoint and summary into `out_dir`.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let train_records = read_split(train_path)?;
    if train_records.is_empty() {
        return Err(Error::Data(format!("{} has no samples", train_path.display())));
    }
    let mut eval_records = Vec::new();
    for (name, path) in &cfg.data.eval {
        eval_records.push((name.clone(), read_split(path)?));
    }

    let mut resolved = cfg.clone();
    let vocab = build_vocab(&train_records, cfg.model.mode);
    let train_examples = encode_records(&train_records, cfg.model.mode, &vocab)?;
    resolved.model.resolve(&train_examples);
    resolved.model.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(CONFIG_FILE), resolved.to_toml())?;

    let mut model = Model::new(resolved.model.clone(), vocab, cfg.train.seed)?;
    let mut evals = Vec::new();
    for (name, recs) in &eval_records {
        evals.push((name.clone(), prepare_split(&mut model, recs, cfg.data.extend_vocab, cfg.train.seed)?));
    }
    let eval_refs: Vec<(&str, &[Example])> = evals.iter().map(|(n, e)| (n.as_str(), e.as_slice())).collect();

    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    let outcome = train::train(&mut model, &train_examples, &eval_refs, &resolved.train, &mut |r: &MetricRecord| {
        writeln!(metrics, "{}", serde_json::to_string(r).expect("metric serializes"))?;
        Ok(())
    })?;
    metrics.flush()?;
    checkpoint::save(&model, &out_dir.join(CHECKPOINT_FILE))?;

    let summary = RunSummary {
        seed: cfg.train.seed,
        steps: outcome.steps,
        stopped_early: outcome.stopped_early,
        trainable_params: model.trainable_params(),
        splits: outcome.final_eval.iter().map(|(n, r)| (n.clone(), r.into())).collect(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(out_dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestScore {
    pub seed: u64,
    pub exact_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<RunSummary>,
    /// Best exact match per split over seeds.
    pub best: BTreeMap<String, BestScore>,
}

/// One run per configured seed in `out_dir/seed-<n>`, plus a summary with
/// the best seed per split.
pub fn sweep(cfg: &RunConfig, out_dir: &Path) -> Result<SweepSummary> {
    if cfg.sweep.seeds.is_empty() {
        return Err(Error::Config("sweep.seeds is empty".into()));
    }
    let mut runs = Vec::new();
    for &seed in &cfg.sweep.seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        runs.push(run(&c, &out_dir.join(format!("seed-{seed}")))?);
    }
    let mut best: BTreeMap<String, BestScore> = BTreeMap::new();
    for r in &runs {
        for (name, s) in &r.splits {
            let better = best.get(name).map_or(true, |b| s.exact_match > b.exact_match);
            if better {
                best.insert(
                    name.clone(),
                    BestScore {
                        seed: r.seed,
                        exact_match: s.exact_match,
                    },
                );
            }
        }
    }
    let summary = SweepSummary { runs, best };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(out_dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(summary)
}
