//! Adam, the training loop and evaluation.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::machine::{Example, Model, Randomness};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    pub eval_every: usize,
    /// Seed for positions drawn during evaluation.
    pub eval_seed: u64,
    /// Split watched for early stopping; defaults to the first eval split.
    pub stop_split: Option<String>,
    /// Stop once the watched split reaches this exact match.
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 10_000,
            batch_size: 64,
            lr: 1e-4,
            warmup_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            log_every: 50,
            eval_every: 500,
            eval_seed: 0,
            stop_split: None,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must be in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.log_every == 0 || self.eval_every == 0 {
            return Err(Error::Config("log_every and eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with linear warmup.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        Adam {
            lr: cfg.lr,
            warmup_steps: cfg.warmup_steps,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((self.t as f64) / self.warmup_steps as f64).min(1.0)
    }

    /// Applies one update to every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let lr = self.current_lr();
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            if m.len() != p.data.len() {
                m.resize(p.data.len(), 0.0);
                v.resize(p.data.len(), 0.0);
            }
            for j in 0..p.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub split: String,
    pub exact_match: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub exact_match: f64,
}

/// Loss and exact match under evaluation randomness.
pub fn evaluate(model: &Model, examples: &[Example], eval_seed: u64) -> Result<EvalResult> {
    if examples.is_empty() {
        return Ok(EvalResult {
            loss: 0.0,
            exact_match: 0.0,
        });
    }
    let per: Vec<Result<(f64, bool)>> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(&model.store);
            let (out, loss) = model.forward(&mut g, ex, Randomness::Eval(eval_seed))?;
            Ok((g.scalar(loss), model.exact_match(&out.to_sparse(&g), &ex.target)))
        })
        .collect();
    let mut loss = 0.0;
    let mut hits = 0usize;
    for r in per {
        let (l, ok) = r?;
        loss += l;
        hits += ok as usize;
    }
    let n = examples.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        exact_match: hits as f64 / n,
    })
}

/// Mean loss, summed gradients and exact-match count for one batch.
pub struct BatchResult {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub hits: usize,
}

/// Runs each example on its own tape and reduces in example order.
pub fn batch_gradients(model: &Model, batch: &[&Example], seeds: &[u64]) -> Result<BatchResult> {
    let per: Vec<Result<(f64, bool, Vec<Vec<f64>>)>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(ex, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new(&model.store);
            let (out, loss) = model.forward(&mut g, ex, Randomness::Train(&mut rng))?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss is {value}")));
            }
            let hit = model.exact_match(&out.to_sparse(&g), &ex.target);
            let grads = g.backward(loss)?;
            let mut acc: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
            grads.accumulate_params(&model.store, &mut acc);
            Ok((value, hit, acc))
        })
        .collect();
    let mut total: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
    let mut loss = 0.0;
    let mut hits = 0;
    for r in per {
        let (l, h, g) = r?;
        loss += l;
        hits += h as usize;
        for (t, s) in total.iter_mut().zip(&g) {
            t.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for t in &mut total {
        t.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(BatchResult {
        loss: loss * scale,
        grads: total,
        hits,
    })
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub stopped_early: bool,
    /// Last evaluation of every split.
    pub final_eval: Vec<(String, EvalResult)>,
}

/// Trains `model` on `train`, evaluating `evals` every `eval_every` steps
/// and once at the end. Every metrics line goes to `sink`.
pub fn train(
    model: &mut Model,
    train: &[Example],
    evals: &[(&str, &[Example])],
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let stop_split = cfg
        .stop_split
        .clone()
        .or_else(|| evals.first().map(|e| e.0.to_string()));
    if let Some(s) = &stop_split {
        if cfg.stop_at.is_some() && !evals.iter().any(|e| e.0 == s) {
            return Err(Error::Config(format!("stop_split {s:?} is not an evaluation split")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut opt = Adam::new(cfg, &model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut window_loss = 0.0;
    let mut window_hits = 0usize;
    let mut window_n = 0usize;

    let run_evals = |model: &Model, step: usize, sink: &mut dyn FnMut(&MetricRecord) -> Result<()>| -> Result<(Vec<(String, EvalResult)>, bool)> {
        let mut out = Vec::with_capacity(evals.len());
        let mut stop = false;
        for (name, ex) in evals {
            let r = evaluate(model, ex, cfg.eval_seed)?;
            sink(&MetricRecord {
                step,
                loss: r.loss,
                split: name.to_string(),
                exact_match: r.exact_match,
            })?;
            if let (Some(target), Some(s)) = (cfg.stop_at, &stop_split) {
                if s == name && r.exact_match >= target {
                    stop = true;
                }
            }
            out.push((name.to_string(), r));
        }
        Ok((out, stop))
    };

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.next_u64()).collect();
        let mut r = batch_gradients(model, &batch, &seeds)?;
        if let Some(c) = cfg.grad_clip {
            clip(&mut r.grads, c);
        }
        if r.grads.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
        }
        opt.step(&mut model.store, &r.grads);
        window_loss += r.loss * batch.len() as f64;
        window_hits += r.hits;
        window_n += batch.len();
        if step % cfg.log_every == 0 || step == cfg.steps {
            sink(&MetricRecord {
                step,
                loss: window_loss / window_n as f64,
                split: "train".into(),
                exact_match: window_hits as f64 / window_n as f64,
            })?;
            window_loss = 0.0;
            window_hits = 0;
            window_n = 0;
        }
        if step % cfg.eval_every == 0 && step != cfg.steps {
            let (res, stop) = run_evals(model, step, sink)?;
            if stop {
                return Ok(TrainOutcome {
                    steps: step,
                    stopped_early: true,
                    final_eval: res,
                });
            }
        }
    }
    let (res, _) = run_evals(model, cfg.steps, sink)?;
    Ok(TrainOutcome {
        steps: cfg.steps,
        stopped_early: false,
        final_eval: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{Input, MachineConfig, Mode};
    use crate::symbol::{SymbolTree, Vocab};

    fn tiny() -> (Model, Vec<Example>) {
        let vocab = Vocab::from_tokens(["a", "b", "c"]);
        let cfg = MachineConfig {
            mode: Mode::Tree2tree,
            dim: 8,
            num_layers: Some(2),
            max_depth: 4,
            prune_k: 32,
            noise_std: 0.0,
            model_dim: 8,
            num_heads: 2,
            key_dim: 4,
            value_dim: 4,
            ff_dim: 8,
            ..MachineConfig::default()
        };
        let m = Model::new(cfg, vocab, 11).unwrap();
        let t = m.vocab.encode_tree(&SymbolTree::parse("(a b c)").unwrap()).unwrap();
        let y = m.vocab.encode_tree(&SymbolTree::parse("(a c b)").unwrap()).unwrap();
        (m, vec![Example { input: Input::Tree(t), target: y }])
    }

    #[test]
    fn one_small_step_descends() {
        let (mut m, ex) = tiny();
        let before = evaluate(&m, &ex, 0).unwrap().loss;
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 1,
            lr: 1e-3,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        train(&mut m, &ex, &[], &cfg, &mut |_| Ok(())).unwrap();
        let after = evaluate(&m, &ex, 0).unwrap().loss;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn fixed_seed_gives_identical_logs() {
        let run = || {
            let (mut m, ex) = tiny();
            let cfg = TrainConfig {
                steps: 4,
                batch_size: 2,
                lr: 1e-3,
                warmup_steps: 2,
                log_every: 1,
                eval_every: 2,
                ..TrainConfig::default()
            };
            let mut log = Vec::new();
            let evals: [(&str, &[Example]); 1] = [("iid", &ex)];
            train(&mut m, &ex, &evals, &cfg, &mut |r| {
                log.push(serde_json::to_string(r).unwrap());
                Ok(())
            })
            .unwrap();
            log
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a[0].starts_with("{\"step\":1,\"loss\":"));
    }

    #[test]
    fn warmup_is_linear() {
        let (m, _) = tiny();
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(&cfg, &m.store);
        let mut store = m.store.clone();
        let zero: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        opt.step(&mut store, &zero);
        assert_eq!(opt.current_lr(), 0.25);
        for _ in 0..5 {
            opt.step(&mut store, &zero);
        }
        assert_eq!(opt.current_lr(), 1.0);
    }
}
