//! Multi-positive contrastive training.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::corpus::{QuerySet, Qrels, Run};
use crate::error::{Error, Result};
use crate::features::{build_query_features, FeatureOptions, QueryInput, SimTensor, Sources};
use crate::metrics::{evaluate, Metric, MetricReport};
use crate::model::{rerank, HybRank, ModelConfig};
use crate::tensor::{Gradients, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    /// Add the decay term to the gradient before the moment estimates
    /// instead of shrinking the weights directly.
    pub coupled_weight_decay: bool,
    pub epochs: usize,
    pub batch_queries: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_ratio: 0.1,
            clip_norm: 2.0,
            weight_decay: 1e-6,
            coupled_weight_decay: false,
            epochs: 100,
            batch_queries: 32,
            tau: 0.07,
            seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidArgument(format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.epochs == 0 || self.batch_queries == 0 {
            return Err(Error::InvalidArgument("epochs and batch_queries must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field by name. Returns `false` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "warmup_ratio" => self.warmup_ratio = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "coupled_weight_decay" => self.coupled_weight_decay = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_queries" => self.batch_queries = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl ModelConfig {
    /// Sets one field by name. Returns `false` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "dim" => self.dim = parse_value(key, value)?,
            "inner" => self.inner = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "layers_inter" => self.layers_inter = parse_value(key, value)?,
            "layers_aggr" => self.layers_aggr = parse_value(key, value)?,
            "max_rank" => self.max_rank = parse_value(key, value)?,
            "use_interaction" => self.use_interaction = parse_value(key, value)?,
            "use_query_row" => self.use_query_row = parse_value(key, value)?,
            "use_positions" => self.use_positions = parse_value(key, value)?,
            "separate_cls" => self.separate_cls = parse_value(key, value)?,
            "pre_norm" => self.pre_norm = parse_value(key, value)?,
            "activation" => {
                self.activation = match value.trim() {
                    "gelu" => crate::tensor::Activation::Gelu,
                    "relu" => crate::tensor::Activation::Relu,
                    other => return Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Flat `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Reads a config file holding training and model keys.
pub fn load_config(path: &Path, train: &mut TrainConfig, model: &mut ModelConfig) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (k, v) in parse_key_values(&text, path)? {
        if !train.set(&k, &v)? && !model.set(&k, &v)? {
            return Err(Error::InvalidArgument(format!("{}: unknown key `{k}`", path.display())));
        }
    }
    Ok(())
}

fn check_positives(n: usize, positives: &[usize]) -> Result<()> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("contrastive loss needs at least one positive".into()));
    }
    if let Some(&p) = positives.iter().find(|&&p| p >= n) {
        return Err(Error::InvalidArgument(format!("positive index {p} out of range for {n} scores")));
    }
    Ok(())
}

fn log_softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s / tau));
    let lse = max + scores.iter().map(|&s| (s / tau - max).exp()).sum::<f64>().ln();
    scores.iter().map(|&s| s / tau - lse).collect()
}

/// `-(1/|P|) Σ_{i∈P} log softmax(s/τ)_i`.
pub fn contrastive_loss(scores: &[f64], positives: &[usize], tau: f64) -> Result<f64> {
    check_positives(scores.len(), positives)?;
    let ls = log_softmax(scores, tau);
    Ok(-positives.iter().map(|&i| ls[i]).sum::<f64>() / positives.len() as f64)
}

/// Loss and its gradient with respect to the scores.
pub fn contrastive_loss_grad(scores: &[f64], positives: &[usize], tau: f64) -> Result<(f64, Vec<f64>)> {
    check_positives(scores.len(), positives)?;
    let ls = log_softmax(scores, tau);
    let share = 1.0 / positives.len() as f64;
    let loss = -positives.iter().map(|&i| ls[i]).sum::<f64>() * share;
    let mut grad: Vec<f64> = ls.iter().map(|&l| l.exp() / tau).collect();
    for &i in positives {
        grad[i] -= share / tau;
    }
    Ok((loss, grad))
}

/// Linear warmup over `warmup_ratio * total` steps, then cosine decay to 0.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warmup = cfg.warmup_ratio * total;
    if step < warmup {
        return cfg.lr * step / warmup;
    }
    let progress = (step - warmup) / (total - warmup);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `g` so its global norm is at most `max_norm`. Returns the norm
/// before clipping and the factor applied.
pub fn clip_global_norm(g: &mut Gradients, max_norm: f64) -> (f64, f64) {
    let norm = g.global_norm();
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale < 1.0 {
        g.scale(scale);
    }
    (norm, scale)
}

/// Adam with weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl AdamW {
    pub fn new(params: &Params) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params, grads: &Gradients, lr: f64, weight_decay: f64, coupled: bool) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let (ps, gs) = (p.as_slice_memory_order_mut().unwrap(), g.as_slice_memory_order().unwrap());
            let ms = m.as_slice_memory_order_mut().unwrap();
            let vs = v.as_slice_memory_order_mut().unwrap();
            for i in 0..ps.len() {
                let mut gi = gs[i];
                if coupled {
                    gi += weight_decay * ps[i];
                } else {
                    ps[i] -= lr * weight_decay * ps[i];
                }
                ms[i] = b1 * ms[i] + (1.0 - b1) * gi;
                vs[i] = b2 * vs[i] + (1.0 - b2) * gi * gi;
                ps[i] -= lr * (ms[i] / c1) / ((vs[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// A candidate list with its similarity features, rows aligned with `passages`.
#[derive(Debug, Clone)]
pub struct QueryFeatures {
    pub qid: String,
    pub passages: Vec<String>,
    pub features: SimTensor,
}

impl QueryFeatures {
    pub fn new(qid: impl Into<String>, passages: Vec<String>, features: SimTensor) -> Result<Self> {
        let qid = qid.into();
        if features.passages() != passages.len() {
            return Err(Error::Shape(format!(
                "query {qid}: {} feature rows for {} passages",
                features.passages(),
                passages.len()
            )));
        }
        Ok(QueryFeatures { qid, passages, features })
    }
}

/// Builds features for every query of `run` (or only `qids`), in query order.
pub fn featurize_run(
    run: &Run,
    queries: &QuerySet,
    sources: Sources<'_>,
    opts: &FeatureOptions,
    qids: Option<&[String]>,
) -> Result<Vec<QueryFeatures>> {
    let selected: Vec<String> = match qids {
        Some(q) => q.to_vec(),
        None => run.queries().map(str::to_string).collect(),
    };
    selected
        .par_iter()
        .map(|qid| {
            let passages = run.doc_ids(qid).ok_or_else(|| Error::UnknownId(qid.clone()))?;
            let text = queries.get(qid).ok_or_else(|| Error::UnknownId(qid.clone()))?;
            let (_, features) = build_query_features(QueryInput { id: qid, text }, &passages, sources, opts)?;
            QueryFeatures::new(qid.clone(), passages, features)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Example {
    pub query: QueryFeatures,
    /// List positions of the relevant passages.
    pub positives: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub total: usize,
    pub kept: usize,
    pub no_judgments: usize,
    pub no_positive_in_list: usize,
}

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} of {} queries usable ({} without judgments, {} without a positive in the list)",
            self.kept, self.total, self.no_judgments, self.no_positive_in_list
        )
    }
}

fn positives_in(qid: &str, passages: &[String], qrels: &Qrels) -> Vec<usize> {
    passages
        .iter()
        .enumerate()
        .filter(|(_, d)| qrels.is_positive(qid, d))
        .map(|(i, _)| i)
        .collect()
}

/// Queries whose candidate list holds at least one positive.
pub fn filter_training_queries(run: &Run, qrels: &Qrels) -> (Vec<String>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for (qid, list) in run.iter() {
        report.total += 1;
        if !qrels.contains_query(qid) {
            report.no_judgments += 1;
        } else if list.iter().any(|e| qrels.is_positive(qid, &e.doc_id)) {
            kept.push(qid.to_string());
        } else {
            report.no_positive_in_list += 1;
        }
    }
    report.kept = kept.len();
    (kept, report)
}

/// Attaches positives to each list and drops lists without any.
pub fn label_examples(items: Vec<QueryFeatures>, qrels: &Qrels) -> (Vec<Example>, FilterReport) {
    let mut report = FilterReport::default();
    let mut out = Vec::new();
    for query in items {
        report.total += 1;
        if !qrels.contains_query(&query.qid) {
            report.no_judgments += 1;
            continue;
        }
        let positives = positives_in(&query.qid, &query.passages, qrels);
        if positives.is_empty() {
            report.no_positive_in_list += 1;
        } else {
            out.push(Example { query, positives });
        }
    }
    report.kept = out.len();
    (out, report)
}

/// Mean loss over `batch` and the gradient of that mean. Per-query work may
/// run in parallel; gradients are summed in batch order.
pub fn batch_gradient(model: &HybRank, batch: &[&Example], tau: f64) -> Result<(f64, Gradients)> {
    let parts: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|ex| {
            let cache = model.forward(&ex.query.features)?;
            let (loss, dscores) = contrastive_loss_grad(&cache.scores, &ex.positives, tau)?;
            let mut g = Gradients::zeros_like(&model.params().values);
            model.backward(&cache, &dscores, &mut g)?;
            Ok((loss, g))
        })
        .collect();
    let mut total = Gradients::zeros_like(&model.params().values);
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Scores every list and sorts it; ties keep the input order.
pub fn rerank_all(model: &HybRank, items: &[QueryFeatures]) -> Result<Run> {
    let lists: Vec<Result<_>> = items
        .par_iter()
        .map(|q| {
            let scores = model.score_all(&q.features)?;
            rerank(&q.passages, &scores)
        })
        .collect();
    let mut run = Run::new();
    for (q, list) in items.iter().zip(lists) {
        run.insert(q.qid.clone(), list?)?;
    }
    Ok(run)
}

pub const DEV_METRIC: Metric = Metric::Mrr(10);

pub fn evaluate_model(model: &HybRank, items: &[QueryFeatures], qrels: &Qrels, metrics: &[Metric]) -> Result<MetricReport> {
    Ok(evaluate(&rerank_all(model, items)?, qrels, metrics))
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `epoch-{n}.ckpt` after every epoch and `best.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// One JSON object per line.
    pub log_path: Option<PathBuf>,
    pub dev: Option<(&'a [QueryFeatures], &'a Qrels)>,
}

#[derive(Debug, Clone)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev: Option<MetricReport>,
}

pub struct TrainOutcome {
    pub model: HybRank,
    /// Highest dev MRR@10, earliest epoch on ties.
    pub best: Option<(usize, f64, HybRank)>,
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainOutcome {
    /// The best-on-dev model when there was a dev set, else the final one.
    pub fn selected(&self) -> &HybRank {
        self.best.as_ref().map_or(&self.model, |(_, _, m)| m)
    }
}

struct Log(Option<BufWriter<File>>);

impl Log {
    fn open(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Log(None)),
            Some(p) => Ok(Log(Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)))),
        }
    }

    fn write(&mut self, value: serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{value}").and_then(|_| w.flush()).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, examples: &[Example], opts: &TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no usable training queries".into()));
    }
    let mut model = HybRank::new(model_cfg.clone(), cfg.seed)?;
    train_model(&mut model, cfg, examples, opts)
}

/// Continues from an existing model; `train` starts from a seeded init.
pub fn train_model(model: &mut HybRank, cfg: &TrainConfig, examples: &[Example], opts: &TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no usable training queries".into()));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Log::open(opts.log_path.as_deref())?;
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_queries);
    let total = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamW::new(&model.params().values);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    let mut step_losses = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, HybRank)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_queries) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, mut grads) = batch_gradient(model, &batch, cfg.tau)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let (norm, _) = clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = lr_at(step + 1, total, cfg);
            adam.step(
                &mut model.params_mut().values,
                &grads,
                lr,
                cfg.weight_decay,
                cfg.coupled_weight_decay,
            );
            step += 1;
            epoch_loss += loss;
            step_losses.push(loss);
            log.write(json!({"step": step, "epoch": epoch, "lr": lr, "loss": loss, "grad_norm": norm}))?;
        }
        let mean_loss = epoch_loss / steps_per_epoch as f64;
        let dev = match opts.dev {
            Some((items, qrels)) => Some(evaluate_model(model, items, qrels, &[DEV_METRIC, Metric::Recall(1)])?),
            None => None,
        };
        let mut record = json!({"epoch": epoch, "step": step, "mean_loss": mean_loss});
        if let Some(report) = &dev {
            record["dev"] = report.to_json();
            let score = report.get(DEV_METRIC).unwrap_or(0.0);
            if best.as_ref().is_none_or(|(_, b, _)| score > *b) {
                best = Some((epoch, score, model.clone()));
                if let Some(dir) = &opts.checkpoint_dir {
                    model.save(&dir.join("best.ckpt"))?;
                }
            }
        }
        log.write(record)?;
        log::info!("epoch {epoch}: mean loss {mean_loss:.6}");
        if let Some(dir) = &opts.checkpoint_dir {
            model.save(&dir.join(format!("epoch-{epoch}.ckpt")))?;
        }
        epochs.push(EpochSummary { epoch, mean_loss, dev });
    }
    Ok(TrainOutcome {
        model: model.clone(),
        best,
        step_losses,
        epochs,
    })
}
