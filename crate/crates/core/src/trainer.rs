//! Configuration, negative sampling, the loss terms and the chronological
//! training loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cig::CigMode;
use crate::eval::{self, TrialSet};
use crate::event_store::{Corpus, Posting, Split};
use crate::intervals::{diff_user_intervals, fit_log_gaussian, threshold_seconds, GaussianFit, IntervalSample};
use crate::model::{BatchPlan, DynamicState, LossWeights, Model, ModelConfig, StaticContext};
use crate::numeric::{adam_step, Adam, Graph};
use crate::static_encoder::{AggScheme, ContentFeatures, FeatureFile};
use crate::Error;

/// Learning rates searched by `--tune`.
pub const LR_GRID: [f64; 5] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("every community is already observed for this video")]
    NoNegative,
    #[error("target {target} out of range for {len} classes")]
    TargetOutOfRange { target: usize, len: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("training event at {train} is later than validation event at {validation}")]
    Leakage { train: i64, validation: i64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub c: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub layers: usize,
    pub dim: usize,
    pub epochs: usize,
    pub seed: u64,
    pub agg: AggScheme,
    pub cig_mode: CigMode,
    pub neighbors: usize,
    pub max_seq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            alpha: 0.1,
            c: 3.0,
            lambda1: 1.0,
            lambda2: 1e-3,
            layers: 4,
            dim: 64,
            epochs: 20,
            seed: 0,
            agg: AggScheme::Mul,
            cig_mode: CigMode::Influence,
            neighbors: 10,
            max_seq: 50,
        }
    }
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Config(msg.into())
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value.parse().map_err(|_| bad(format!("{key}: cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let v = value.trim();
        match key.trim() {
            "lr" => self.lr = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "c" => self.c = num(key, v)?,
            "lambda1" => self.lambda1 = num(key, v)?,
            "lambda2" => self.lambda2 = num(key, v)?,
            "layers" | "L" => self.layers = num(key, v)?,
            "dim" => self.dim = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "agg" => self.agg = v.parse().map_err(|_| bad(format!("agg: unknown scheme `{v}`")))?,
            "cig_mode" | "mode" => self.cig_mode = v.parse().map_err(|_| bad(format!("cig_mode: unknown mode `{v}`")))?,
            "neighbors" => self.neighbors = num(key, v)?,
            "max_seq" => self.max_seq = num(key, v)?,
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "c = {}", self.c);
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "agg = {}", self.agg);
        let _ = writeln!(s, "cig_mode = {}", self.cig_mode);
        let _ = writeln!(s, "neighbors = {}", self.neighbors);
        let _ = writeln!(s, "max_seq = {}", self.max_seq);
        s
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(bad("lr must be positive"));
        }
        if self.batch_size == 0 || self.dim == 0 || self.layers == 0 || self.neighbors == 0 || self.max_seq == 0 {
            return Err(bad("batch_size, dim, layers, neighbors and max_seq must be positive"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(bad("alpha must lie in [0, 1)"));
        }
        if !(self.c >= 0.0) || !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(bad("c, lambda1 and lambda2 must be non-negative"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            agg: self.agg,
            alpha: self.alpha,
            layers: self.layers,
            neighbors: self.neighbors,
            max_seq: self.max_seq,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }
}

/// Uniform draw from the communities not in `observed` (sorted, distinct).
pub fn sample_negative(observed: &[usize], num_communities: usize, rng: &mut impl Rng) -> Result<usize, TrainError> {
    let free = num_communities.saturating_sub(observed.len());
    if free == 0 {
        return Err(TrainError::NoNegative);
    }
    let mut k = rng.random_range(0..free);
    for &o in observed {
        if o <= k {
            k += 1;
        } else {
            break;
        }
    }
    Ok(k)
}

/// `−ln σ(pos − neg)`, computed as `softplus(neg − pos)`.
pub fn bpr_loss(pos: f64, neg: f64) -> f64 {
    let x = neg - pos;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `−ln probs[target]`.
pub fn ce_loss(probs: &[f64], target: usize) -> Result<f64, TrainError> {
    probs
        .get(target)
        .map(|p| -p.ln())
        .ok_or(TrainError::TargetOutOfRange {
            target,
            len: probs.len(),
        })
}

/// `bpr + λ1 Σ ce + λ2 ‖Θ‖²`.
pub fn total_loss(bpr: f64, ce: &[f64], squared_norm: f64, weights: LossWeights) -> f64 {
    bpr + weights.lambda1 * ce.iter().sum::<f64>() + weights.lambda2 * squared_norm
}

/// Threshold from the different-user intervals of the training postings.
pub fn fit_threshold(ctx_train_seq: &[Vec<Posting>], c: f64) -> Result<(GaussianFit, f64), Error> {
    let mut pooled = IntervalSample::linear(Vec::new());
    for seq in ctx_train_seq {
        pooled.extend(&diff_user_intervals(seq));
    }
    let fit = fit_log_gaussian(&pooled)?;
    Ok((fit, threshold_seconds(&fit, c)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg5: f64,
    pub val_mrr: f64,
    pub wall_ms: u128,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_ndcg5,wall_ms\n");
    for e in log {
        let _ = writeln!(s, "{},{:.9},{:.6},{}", e.epoch, e.train_loss, e.val_ndcg5, e.wall_ms);
    }
    s
}

/// Model plus the data-derived context it was trained against.
pub struct Trained {
    pub config: TrainConfig,
    pub fit: GaussianFit,
    pub ctx: StaticContext,
    pub model: Model,
    pub state: DynamicState,
    pub log: Vec<EpochLog>,
}

impl Trained {
    pub fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "fit": self.fit,
            "threshold_seconds": self.ctx.threshold,
            "num_videos": self.ctx.num_videos,
            "num_communities": self.ctx.num_communities,
            "epochs_trained": self.log.len(),
        })
    }
}

/// Threshold fit, context and freshly initialized model.
pub fn prepare(corpus: &Corpus, split: &Split, cfg: &TrainConfig, features: Option<&FeatureFile>) -> Result<Trained, Error> {
    cfg.validate()?;
    let train_seq: Vec<Vec<Posting>> = (0..corpus.num_videos())
        .map(|v| corpus.sequence_where(v, |e| split.is_train(e)))
        .collect();
    let (fit, threshold) = fit_threshold(&train_seq, cfg.c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0_47E7);
    let content = ContentFeatures::build(corpus, cfg.dim, features, &mut rng);
    let mcfg = cfg.model_config();
    let model = Model::new(&mcfg, corpus.num_communities(), &content, cfg.seed)?;
    let ctx = StaticContext::build(corpus, split, threshold, cfg.cig_mode, &mcfg, content, cfg.seed)?;
    let state = DynamicState::new(ctx.num_nodes(), cfg.dim);
    Ok(Trained {
        config: cfg.clone(),
        fit,
        ctx,
        model,
        state,
        log: Vec::new(),
    })
}

fn check_leakage(corpus: &Corpus, split: &Split) -> Result<(), TrainError> {
    let last_train = split.train_events().iter().map(|&e| corpus.posting(e).timestamp).max();
    let first_val = split
        .validation_events()
        .iter()
        .chain(split.test_events())
        .map(|&e| corpus.posting(e).timestamp)
        .min();
    match (last_train, first_val) {
        (Some(t), Some(v)) if t > v => Err(TrainError::Leakage { train: t, validation: v }),
        _ => Ok(()),
    }
}

/// One pass over the training events with parameter updates. Returns the
/// mean batch loss.
pub fn train_epoch(
    t: &mut Trained,
    corpus: &Corpus,
    split: &Split,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, Error> {
    let cfg = &t.config;
    let adam = Adam::with_lr(cfg.lr);
    let events: Vec<Posting> = split.train_events().iter().map(|&e| corpus.posting(e)).collect();
    t.state.reset();
    let mut total = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in events.chunks(cfg.batch_size).enumerate() {
        let negatives = chunk
            .iter()
            .map(|p| sample_negative(&t.ctx.train_observed[p.video], t.ctx.num_communities, rng).ok())
            .collect();
        let plan = BatchPlan {
            events: chunk.to_vec(),
            negatives,
        };
        let mut g = Graph::new();
        let lv = t
            .model
            .params
            .batch_loss(&mut g, &t.model.store, &t.ctx, &t.state, &plan, cfg.weights())
            .map_err(|e| TrainError::NonFinite {
                epoch,
                batch: b,
                detail: e.to_string(),
            })?;
        let loss = g.value(lv.total).item();
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: b,
                detail: format!("loss = {loss}"),
            }
            .into());
        }
        let grads = g.backward(lv.total)?;
        grads.accumulate_into(&mut t.model.store);
        adam_step(&mut t.model.store, &adam)?;
        let rows = lv.update.rows.map(|r| g.value(r).clone()).unwrap_or_else(|| crate::numeric::Tensor::zeros(&[0, cfg.dim]));
        t.model.params.commit(&t.ctx, &mut t.state, &lv.update, &rows, chunk)?;
        total += loss;
        batches += 1;
    }
    t.model.params.flush(&t.model.store, &t.ctx, &mut t.state)?;
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Trains for `cfg.epochs` epochs; memory is reset at the start of each
/// epoch. After every epoch the validation events are ranked once.
pub fn train(corpus: &Corpus, split: &Split, cfg: &TrainConfig, features: Option<&FeatureFile>) -> Result<Trained, Error> {
    check_leakage(corpus, split)?;
    let mut t = prepare(corpus, split, cfg, features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let loss = train_epoch(&mut t, corpus, split, epoch, &mut rng)?;
        let (ndcg5, mrr) = validation_metrics(&t, corpus, split)?;
        t.log.push(EpochLog {
            epoch,
            train_loss: loss,
            val_ndcg5: ndcg5,
            val_mrr: mrr,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok(t)
}

/// NDCG@5 and MRR over validation events, continuing from the post-epoch
/// memory. The memory is restored afterwards.
pub fn validation_metrics(t: &Trained, corpus: &Corpus, split: &Split) -> Result<(f64, f64), Error> {
    let mut state = t.state.clone();
    let events: Vec<Posting> = split.validation_events().iter().map(|&e| corpus.posting(e)).collect();
    let set = TrialSet::new(&[t.config.seed], eval::DEFAULT_NEGATIVES);
    let results = eval::run_trials(&t.model, &t.ctx, &mut state, &events, t.config.batch_size, &set)?;
    let ranks: Vec<usize> = results.iter().map(|r| r.ranks[0]).collect();
    if ranks.is_empty() {
        return Ok((0.0, 0.0));
    }
    let ndcg = ranks.iter().map(|&r| eval::ndcg_at_k(r, 5)).sum::<f64>() / ranks.len() as f64;
    Ok((ndcg, eval::mrr(&ranks)?))
}

/// Trains once per grid learning rate and keeps the run with the best
/// final validation MRR (first wins on ties).
pub fn tune(
    corpus: &Corpus,
    split: &Split,
    cfg: &TrainConfig,
    features: Option<&FeatureFile>,
) -> Result<(Trained, Vec<(f64, f64)>), Error> {
    let mut best: Option<Trained> = None;
    let mut scores = Vec::new();
    for lr in LR_GRID {
        let mut c = cfg.clone();
        c.lr = lr;
        let t = train(corpus, split, &c, features)?;
        let mrr = t.log.last().map_or(0.0, |e| e.val_mrr);
        scores.push((lr, mrr));
        if best.as_ref().is_none_or(|b| mrr > b.log.last().map_or(0.0, |e| e.val_mrr)) {
            best = Some(t);
        }
    }
    Ok((best.expect("grid is non-empty"), scores))
}
