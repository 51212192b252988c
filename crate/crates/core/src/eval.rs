//! Sampled-candidate ranking evaluation: each held-out posting is ranked
//! against up to 100 communities the video never reached, with pessimistic
//! tie-breaking, and summarized per warm/cold × popular/non-popular slice.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::event_store::{Corpus, Posting, Split};
use crate::model::{DynamicState, Model, StaticContext};
use crate::Error;

pub const DEFAULT_NEGATIVES: usize = 100;
pub const DEFAULT_KS: [usize; 2] = [5, 10];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no ranks to average")]
    Empty,
    #[error("rank must be at least 1")]
    ZeroRank,
}

/// `1 + #(neg > pos) + #(neg == pos)`.
pub fn rank_candidates(pos: f64, negs: &[f64]) -> usize {
    1 + negs.iter().filter(|&&s| s >= pos).count()
}

/// `1 / log2(rank + 1)` inside the top `k`, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn reciprocal_rank(rank: usize) -> Result<f64, EvalError> {
    if rank == 0 {
        return Err(EvalError::ZeroRank);
    }
    Ok(1.0 / rank as f64)
}

pub fn mrr(ranks: &[usize]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for &r in ranks {
        total += reciprocal_rank(r)?;
    }
    Ok(total / ranks.len() as f64)
}

/// Expected `(Recall@k, NDCG@k, MRR)` of a scorer that ranks the positive
/// uniformly among `n` candidates.
pub fn random_expectation(n: usize, k: usize) -> (f64, f64, f64) {
    let n_f = n as f64;
    let top = k.min(n);
    let ndcg = (1..=top).map(|r| ndcg_at_k(r, k)).sum::<f64>() / n_f;
    let mrr = (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n_f;
    (top as f64 / n_f, ndcg, mrr)
}

/// Seeds for the negative sets and how many negatives each trial gets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub seeds: Vec<u64>,
    pub negatives: usize,
}

impl TrialSet {
    pub fn new(seeds: &[u64], negatives: usize) -> Self {
        Self {
            seeds: seeds.to_vec(),
            negatives,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub posting: Posting,
    /// One rank per seed.
    pub ranks: Vec<usize>,
    /// Candidates per seed (negatives + 1).
    pub candidates: usize,
}

/// Result of [`run_trials`], including events that could not be ranked.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialOutcome {
    pub results: Vec<TrialResult>,
    pub skipped_events: usize,
    pub skipped_videos: usize,
}

impl std::ops::Deref for TrialOutcome {
    type Target = [TrialResult];

    fn deref(&self) -> &[TrialResult] {
        &self.results
    }
}

/// Ranks every event of `events` (time-ordered) batch by batch: scores use
/// memory from before the batch, then the batch is written into memory.
/// Events of videos without training postings are skipped and counted.
pub fn run_trials(
    model: &Model,
    ctx: &StaticContext,
    state: &mut DynamicState,
    events: &[Posting],
    batch_size: usize,
    set: &TrialSet,
) -> Result<TrialOutcome, Error> {
    let mut rngs: Vec<ChaCha8Rng> = set.seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut out = TrialOutcome::default();
    let mut skipped_videos = std::collections::BTreeSet::new();
    for chunk in events.chunks(batch_size.max(1)) {
        let mut trials = Vec::new();
        let mut per_seed: Vec<Vec<Vec<usize>>> = Vec::new();
        for p in chunk {
            let pool: Vec<usize> = {
                let obs = &ctx.all_observed[p.video];
                (0..ctx.num_communities).filter(|c| obs.binary_search(c).is_err()).collect()
            };
            if ctx.train_seq[p.video].is_empty() || pool.is_empty() {
                out.skipped_events += 1;
                if ctx.train_seq[p.video].is_empty() {
                    skipped_videos.insert(p.video);
                }
                continue;
            }
            let negs: Vec<Vec<usize>> = rngs
                .iter_mut()
                .map(|rng| {
                    if pool.len() <= set.negatives {
                        pool.clone()
                    } else {
                        rand::seq::index::sample(rng, pool.len(), set.negatives)
                            .into_iter()
                            .map(|i| pool[i])
                            .collect()
                    }
                })
                .collect();
            let mut cands: Vec<usize> = negs.iter().flatten().copied().collect();
            cands.sort_unstable();
            cands.dedup();
            cands.insert(0, p.community);
            trials.push((*p, cands));
            per_seed.push(negs);
        }
        let (scores, rows, update) = model.params.score_candidates(&model.store, ctx, state, &trials)?;
        for (((p, cands), s), negs) in trials.iter().zip(&scores).zip(&per_seed) {
            let pos = s[0];
            let lookup = |c: usize| s[1 + cands[1..].binary_search(&c).expect("candidate scored")];
            let ranks = negs
                .iter()
                .map(|ns| rank_candidates(pos, &ns.iter().map(|&c| lookup(c)).collect::<Vec<_>>()))
                .collect();
            out.results.push(TrialResult {
                posting: *p,
                ranks,
                candidates: negs[0].len() + 1,
            });
        }
        model.params.commit(ctx, state, &update, &rows, chunk)?;
    }
    out.skipped_videos = skipped_videos.len();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation across `xs`.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub trials: usize,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub negatives: usize,
    pub slices: BTreeMap<String, SliceReport>,
    pub skipped_events: usize,
    pub skipped_videos: usize,
    pub mean_candidates: f64,
    /// Expected metrics of a uniformly random scorer on the same trials.
    pub random_baseline: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn metric(&self, slice: &str, name: &str) -> Option<f64> {
        self.slices.get(slice)?.metrics.get(name).map(|m| m.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("slice,metric,mean,std\n");
        for (slice, r) in &self.slices {
            for (m, v) in &r.metrics {
                let _ = writeln!(s, "{slice},{m},{:.6},{:.6}", v.mean, v.std);
            }
        }
        s
    }
}

fn metric_names(ks: &[usize]) -> Vec<String> {
    let mut names: Vec<String> = ks.iter().flat_map(|k| [format!("ndcg@{k}"), format!("recall@{k}")]).collect();
    names.push("mrr".into());
    names
}

fn metric_value(name: &str, rank: usize) -> f64 {
    if name == "mrr" {
        return 1.0 / rank as f64;
    }
    let (kind, k) = name.split_once('@').expect("metric@k");
    let k: usize = k.parse().expect("numeric k");
    match kind {
        "ndcg" => ndcg_at_k(rank, k),
        _ => recall_at_k(rank, k),
    }
}

/// Top quarter of communities by training posting count (ties by index).
pub fn popular_communities(train_counts: &[usize]) -> Vec<bool> {
    let n = train_counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]).then(a.cmp(&b)));
    let mut popular = vec![false; n];
    for &c in order.iter().take(n.div_ceil(4)) {
        popular[c] = train_counts[c] > 0;
    }
    popular
}

/// Aggregates trial ranks into per-slice means (over trials) and
/// mean ± std (over seeds).
pub fn summarize(ctx: &StaticContext, outcome: &TrialOutcome, seeds: &[u64], ks: &[usize], negatives: usize) -> EvalReport {
    let popular = popular_communities(&ctx.train_counts);
    let names = metric_names(ks);
    let mut buckets: BTreeMap<String, Vec<&TrialResult>> = BTreeMap::new();
    for key in ["all", "warm", "cold", "popular", "nonpopular", "warm/popular", "warm/nonpopular", "cold/popular", "cold/nonpopular"] {
        buckets.insert(key.into(), Vec::new());
    }
    for r in outcome.iter() {
        let warmth = if ctx.train_seq[r.posting.video].len() >= 2 { "warm" } else { "cold" };
        let pop = if popular[r.posting.community] { "popular" } else { "nonpopular" };
        for key in ["all".to_string(), warmth.into(), pop.into(), format!("{warmth}/{pop}")] {
            buckets.get_mut(&key).expect("known slice").push(r);
        }
    }
    let slices = buckets
        .into_iter()
        .map(|(key, rs)| {
            let mut metrics = BTreeMap::new();
            if !rs.is_empty() {
                for name in &names {
                    let per_seed: Vec<f64> = (0..seeds.len())
                        .map(|s| rs.iter().map(|r| metric_value(name, r.ranks[s])).sum::<f64>() / rs.len() as f64)
                        .collect();
                    metrics.insert(name.clone(), MeanStd::of(&per_seed));
                }
            }
            (key, SliceReport { trials: rs.len(), metrics })
        })
        .collect();
    let n = outcome.len().max(1) as f64;
    let mut random_baseline = BTreeMap::new();
    for name in &names {
        let v = outcome
            .iter()
            .map(|r| {
                let c = r.candidates;
                if name == "mrr" {
                    random_expectation(c, 1).2
                } else {
                    let (kind, k) = name.split_once('@').expect("metric@k");
                    let (rec, ndcg, _) = random_expectation(c, k.parse().expect("numeric k"));
                    if kind == "ndcg" {
                        ndcg
                    } else {
                        rec
                    }
                }
            })
            .sum::<f64>()
            / n;
        random_baseline.insert(name.clone(), v);
    }
    EvalReport {
        seeds: seeds.to_vec(),
        ks: ks.to_vec(),
        negatives,
        slices,
        skipped_events: outcome.skipped_events,
        skipped_videos: outcome.skipped_videos,
        mean_candidates: outcome.iter().map(|r| r.candidates as f64).sum::<f64>() / n,
        random_baseline,
    }
}

/// Replays training and validation events into a fresh memory (no
/// parameter updates), then ranks every test event.
pub fn evaluate(
    model: &Model,
    ctx: &StaticContext,
    corpus: &Corpus,
    split: &Split,
    seeds: &[u64],
    ks: &[usize],
    batch_size: usize,
) -> Result<EvalReport, Error> {
    let mut state = DynamicState::new(ctx.num_nodes(), model.params.config.dim);
    let history: Vec<Posting> = split.order()[..split.validation.end].iter().map(|&e| corpus.posting(e)).collect();
    for chunk in history.chunks(batch_size.max(1)) {
        let (_, rows, update) = model.params.score_candidates(&model.store, ctx, &state, &[])?;
        model.params.commit(ctx, &mut state, &update, &rows, chunk)?;
    }
    let test: Vec<Posting> = split.test_events().iter().map(|&e| corpus.posting(e)).collect();
    let set = TrialSet::new(seeds, DEFAULT_NEGATIVES);
    let outcome = run_trials(model, ctx, &mut state, &test, batch_size, &set)?;
    Ok(summarize(ctx, &outcome, seeds, ks, DEFAULT_NEGATIVES))
}
