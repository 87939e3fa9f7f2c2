//! Loss, Adam, the epoch loop and multi-run aggregation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{Axis, DatasetSplit};
use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::features::{FeatureCache, UserBatches};
use crate::heads::{
    classifier_forward, head_backward, head_forward, init_head, ClassifierTask, HeadConfig, HeadParams, Mode,
    TrainedTask,
};
use crate::linalg::{log_sum_exp, softmax};

/// Cross-entropy of `logits` against class `label`, with its gradient
/// `softmax(logits) − onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 || label >= logits.len() {
        return Err(Error::Shape(format!(
            "label {label} for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let loss = (log_sum_exp(logits) - logits[label]).max(0.0);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments shaped like `shapes` (tensor lengths).
    pub fn new(shapes: &[usize], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_head(params: &HeadParams, lr: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        AdamState::new(&shapes, lr)
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update of every tensor in `params` from the matching `grads`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} parameter and {} gradient tensors for {} moment tensors",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape("tensor length differs from its moments".into()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_head(&mut self, params: &mut HeadParams, grads: &HeadParams) -> Result<()> {
        let g = grads.tensors();
        self.step(&mut params.tensors_mut(), &g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    /// Users per optimizer step.
    pub minibatch: usize,
    pub seed: u64,
    pub task: TrainedTask,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub lr: f64,
    pub n_runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 100,
            minibatch: 32,
            seed: 0,
            task: TrainedTask::Dims,
            patience: 10,
            lr: 1e-3,
            n_runs: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.minibatch == 0 || self.n_runs == 0 {
            return Err(Error::Config("epochs, minibatch and n_runs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    /// Cumulative cache counters at the end of the epoch.
    pub recomputes: u64,
    pub hits_exact: u64,
    pub hits_similar: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Parameters from the epoch with the best validation macro-F1.
    pub params: HeadParams,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub history: Vec<EpochRecord>,
    pub seconds: f64,
}

/// Loss and summed gradients of one user under `task`.
fn user_loss(
    params: &HeadParams,
    sequence: &[Embedding],
    label: crate::dataset::MbtiLabel,
    task: TrainedTask,
    dropout_seed: u64,
) -> Result<(f64, HeadParams)> {
    let (h, trace) = head_forward(params, sequence, Mode::Train { dropout_seed })?;
    let trace = trace.expect("train mode records a trace");
    let targets: Vec<(ClassifierTask, usize)> = match task {
        TrainedTask::Dims => Axis::ALL
            .iter()
            .map(|&a| (ClassifierTask::Dim(a), label.pole(a)))
            .collect(),
        TrainedTask::Type16 => vec![(ClassifierTask::Type16, label.type_index())],
    };
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(targets.len());
    for (ct, y) in targets {
        let (l, g) = cross_entropy(&classifier_forward(params, &h, ct)?, y)?;
        loss += l;
        upstream.push((ct, g));
    }
    Ok((loss, head_backward(params, &trace, &upstream)?))
}

fn check_users(users: &[UserBatches], part: &'static str) -> Result<()> {
    if users.is_empty() {
        return Err(Error::Empty(part));
    }
    if users.iter().any(|u| u.batches.is_empty()) {
        return Err(Error::Empty("user batch list"));
    }
    Ok(())
}

/// Fetches every user's embeddings through the cache and scores the head.
pub fn evaluate_users(
    params: &HeadParams,
    users: &[UserBatches],
    task: TrainedTask,
    cache: &mut FeatureCache<'_>,
) -> Result<MetricsReport> {
    check_users(users, "evaluation set")?;
    let mut data = Vec::with_capacity(users.len());
    for u in users {
        data.push((u.label, cache.fetch_user(u)?));
    }
    evaluate(params, &data, task)
}

/// Trains one head from scratch.
///
/// Each epoch shuffles the training users with the run seed, takes an Adam
/// step per minibatch on the mean loss, then scores the validation users.
/// Training stops after `patience` consecutive epochs without a strict
/// improvement in validation macro-F1 (Avg for the dims task). Every
/// embedding request goes through `cache`.
pub fn train_one_run(
    split: &DatasetSplit<UserBatches>,
    head: &HeadConfig,
    run: &RunConfig,
    cache: &mut FeatureCache<'_>,
) -> Result<RunOutcome> {
    run.validate()?;
    check_users(&split.train, "training set")?;
    check_users(&split.validation, "validation set")?;
    if head.input_dim != cache.dim() {
        return Err(Error::DimensionMismatch {
            expected: head.input_dim,
            actual: cache.dim(),
        });
    }
    let started = Instant::now();
    let mut params = init_head(head)?;
    let mut adam = AdamState::for_head(&params, run.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY);
    let mut stale = 0usize;
    let mut history = Vec::new();

    for epoch in 1..=run.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(run.minibatch) {
            let mut grads = params.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let user = &split.train[i];
                let seq = cache.fetch_user(user)?;
                let (loss, g) = user_loss(&params, &seq, user.label, run.task, rng.gen())?;
                loss_sum += loss;
                for (acc, gi) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += scale * b);
                }
            }
            adam.step_head(&mut params, &grads)?;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("head parameters after epoch {epoch}")));
        }
        let val = evaluate_users(&params, &split.validation, run.task, cache)?.headline_f1();
        let stats = cache.stats();
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / split.train.len() as f64,
            val_macro_f1: val,
            recomputes: stats.recomputes,
            hits_exact: stats.hits_exact,
            hits_similar: stats.hits_similar,
        });
        log::debug!("epoch {epoch}: loss {:.5} val F1 {val:.4}", loss_sum / split.train.len() as f64);
        if val > best.2 {
            best = (params.clone(), epoch, val);
            stale = 0;
        } else {
            stale += 1;
            if stale > run.patience {
                break;
            }
        }
    }
    Ok(RunOutcome {
        params: best.0,
        best_epoch: best.1,
        best_val_f1: best.2,
        history,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Mean and population standard deviation per metric name.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

pub fn aggregate(runs: &[Vec<(String, f64)>]) -> Aggregate {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (k, v) in run {
            values.entry(k.clone()).or_default().push(*v);
        }
    }
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for (k, vs) in values {
        let n = vs.len() as f64;
        let m = vs.iter().sum::<f64>() / n;
        let var = vs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.insert(k.clone(), m);
        std.insert(k, var.sqrt());
    }
    Aggregate { mean, std }
}

#[derive(Clone, Debug)]
pub struct MultiRunSummary {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunOutcome>,
    /// Test-set report of each run's selected checkpoint.
    pub reports: Vec<MetricsReport>,
    pub aggregate: Aggregate,
}

/// Repeats [`train_one_run`] `n_runs` times. Run `k` uses `seed + k` for both
/// the head initialisation and the run RNG; the split is shared.
pub fn multi_run(
    split: &DatasetSplit<UserBatches>,
    head: &HeadConfig,
    run: &RunConfig,
    cache: &mut FeatureCache<'_>,
) -> Result<MultiRunSummary> {
    run.validate()?;
    check_users(&split.test, "test set")?;
    let mut seeds = Vec::with_capacity(run.n_runs);
    let mut runs = Vec::with_capacity(run.n_runs);
    let mut reports = Vec::with_capacity(run.n_runs);
    for k in 0..run.n_runs as u64 {
        let seed = run.seed.wrapping_add(k);
        let head_k = HeadConfig {
            seed: head.seed.wrapping_add(k),
            ..head.clone()
        };
        let run_k = RunConfig { seed, ..run.clone() };
        let outcome = train_one_run(split, &head_k, &run_k, cache)?;
        reports.push(evaluate_users(&outcome.params, &split.test, run.task, cache)?);
        seeds.push(seed);
        runs.push(outcome);
    }
    let flat: Vec<Vec<(String, f64)>> = reports.iter().map(MetricsReport::flatten).collect();
    Ok(MultiRunSummary {
        seeds,
        runs,
        reports,
        aggregate: aggregate(&flat),
    })
}

/// Writes `epoch,train_loss,val_macro_f1,recomputes,hits_exact,hits_similar`.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "epoch,train_loss,val_macro_f1,recomputes,hits_exact,hits_similar").map_err(io)?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_macro_f1, r.recomputes, r.hits_exact, r.hits_similar
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}
