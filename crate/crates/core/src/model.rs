//! The full model: static community/content encoders feeding a temporal
//! memory network, plus the batch-level forward passes used for training,
//! replay and ranking.
//!
//! Node numbering in the dynamic graph: videos `0..V`, then communities
//! `V..V+S`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cig::{build_cig, merge_weights, Cig, CigError, CigMode};
use crate::dynamic::{AttentionLayer, Gru, MemoryBank, Messages, NeighborIndex, Scorer, TimeEncoder};
use crate::event_store::{Corpus, Posting, Split};
use crate::nn::{xavier, Linear};
use crate::numeric::{Checkpoint, Csr, Graph, NumericError, ParamId, ParamStore, Tensor, Var};
use crate::static_encoder::{aggregate_rows, appnp_operator, AggScheme, ContentFeatures, SessionAttention, StaticError};

type Result<T> = std::result::Result<T, NumericError>;

/// Architecture and propagation settings that fix the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub agg: AggScheme,
    /// APPNP teleport probability.
    pub alpha: f64,
    /// APPNP layers.
    pub layers: usize,
    /// Temporal neighbours per node.
    pub neighbors: usize,
    /// Session sequences keep the most recent this many postings.
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            agg: AggScheme::Mul,
            alpha: 0.1,
            layers: 4,
            neighbors: 10,
            max_seq: 50,
        }
    }
}

/// Handles to every parameter group.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub communities: ParamId,
    pub channels: ParamId,
    pub concat_proj: Option<Linear>,
    pub time: TimeEncoder,
    pub messages: Messages,
    pub gru: Gru,
    pub embed1: AttentionLayer,
    pub embed2: AttentionLayer,
    pub scorer: Scorer,
    pub attention: SessionAttention,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub params: ModelParams,
    pub store: ParamStore,
}

impl Model {
    /// Xavier-initialized model. Construction order is fixed so a seed
    /// determines every value.
    pub fn new(config: &ModelConfig, num_communities: usize, content: &ContentFeatures, seed: u64) -> Result<Self> {
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let communities = store.add("communities", xavier(&mut rng, num_communities, d))?;
        let channels = store.add("channels", content.channel_init.clone())?;
        let concat_proj = match config.agg {
            AggScheme::Concat => Some(Linear::new(&mut store, &mut rng, "content.proj", 2 * d, d)?),
            _ => None,
        };
        let time = TimeEncoder::new(&mut store, d)?;
        let messages = Messages::new(&mut store, &mut rng, d)?;
        let gru = Gru::new(&mut store, &mut rng, d, d)?;
        let embed1 = AttentionLayer::new(&mut store, &mut rng, "embed1", d)?;
        let embed2 = AttentionLayer::new(&mut store, &mut rng, "embed2", d)?;
        let scorer = Scorer::new(&mut store, &mut rng, d)?;
        let attention = SessionAttention::new(&mut store, &mut rng, d)?;
        Ok(Self {
            params: ModelParams {
                config: config.clone(),
                communities,
                channels,
                concat_proj,
                time,
                messages,
                gru,
                embed1,
                embed2,
                scorer,
                attention,
            },
            store,
        })
    }

    pub fn to_checkpoint(&self, bank: Option<&MemoryBank>, meta: serde_json::Value) -> Checkpoint {
        let mut tensors = self.store.entries();
        if let Some(b) = bank {
            tensors.push(("state.memory".into(), b.as_tensor()));
            let times = b.last_update.iter().map(|&t| t as f64).collect();
            tensors.push(("state.last_update".into(), Tensor::vector(times)));
        }
        Checkpoint { meta, tensors }
    }

    /// Copies parameter values from a checkpoint into a freshly built model
    /// of the same layout; returns the memory bank when one was saved.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<Option<MemoryBank>> {
        let params: Vec<(String, Tensor)> = ck.tensors.iter().filter(|(n, _)| !n.starts_with("state.")).cloned().collect();
        self.store.load_entries(&params)?;
        let bank = match (ck.get("state.memory"), ck.get("state.last_update")) {
            (Some(m), Some(t)) => Some(MemoryBank {
                dim: m.last_dim(),
                memory: m.data().to_vec(),
                last_update: t.data().iter().map(|&x| x as i64).collect(),
            }),
            _ => None,
        };
        Ok(bank)
    }
}

/// Everything derived from the corpus and the training split that stays
/// fixed while parameters change.
#[derive(Clone, Debug)]
pub struct StaticContext {
    pub num_videos: usize,
    pub num_communities: usize,
    pub threshold: f64,
    pub mode: CigMode,
    pub content: ContentFeatures,
    /// Influence graph per video over its training postings.
    pub cigs: Vec<Option<Cig>>,
    /// Training postings per video in time order.
    pub train_seq: Vec<Vec<Posting>>,
    /// Position of each training event within its video's `train_seq`.
    pub train_pos: Vec<usize>,
    /// Community of each APPNP slot (one slot per CIG node).
    pub slot_community: Vec<usize>,
    /// First slot of each video's CIG.
    pub slot_offset: Vec<usize>,
    /// Block-diagonal APPNP operator over all slots.
    pub propagation: Arc<Csr>,
    /// Communities that appear in no CIG.
    pub absent: Vec<usize>,
    /// Sorted communities each video touches in training.
    pub train_observed: Vec<Vec<usize>>,
    /// Sorted communities each video touches anywhere in the corpus.
    pub all_observed: Vec<Vec<usize>>,
    /// Training postings per community.
    pub train_counts: Vec<usize>,
}

fn video_seed(seed: u64, v: usize) -> u64 {
    seed ^ (v as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, thiserror::Error)]
pub enum ContextError {
    #[error(transparent)]
    Cig(#[from] CigError),
    #[error(transparent)]
    Static(#[from] StaticError),
}

impl StaticContext {
    /// Builds per-video graphs from training postings only.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        corpus: &Corpus,
        split: &Split,
        threshold: f64,
        mode: CigMode,
        config: &ModelConfig,
        content: ContentFeatures,
        seed: u64,
    ) -> std::result::Result<Self, ContextError> {
        let nv = corpus.num_videos();
        let ns = corpus.num_communities();
        let train_seq: Vec<Vec<Posting>> = (0..nv).map(|v| corpus.sequence_where(v, |e| split.is_train(e))).collect();
        let mut train_pos = vec![usize::MAX; corpus.len()];
        for seq in &train_seq {
            for (i, p) in seq.iter().enumerate() {
                train_pos[p.event] = i;
            }
        }
        let built: Vec<std::result::Result<Option<(Cig, Tensor)>, ContextError>> = train_seq
            .par_iter()
            .enumerate()
            .map(|(v, seq)| {
                if seq.is_empty() {
                    return Ok(None);
                }
                let cig = merge_weights(build_cig(corpus.videos().name(v), seq, threshold, mode, video_seed(seed, v))?);
                let p = appnp_operator(&cig.adjacency(), config.alpha, config.layers)?;
                Ok(Some((cig, p)))
            })
            .collect();
        let mut cigs = Vec::with_capacity(nv);
        let mut slot_community = Vec::new();
        let mut slot_offset = Vec::with_capacity(nv);
        let mut triplets = Vec::new();
        let mut present = vec![false; ns];
        for item in built {
            slot_offset.push(slot_community.len());
            match item? {
                Some((cig, p)) => {
                    let base = slot_community.len();
                    let n = cig.num_nodes();
                    for i in 0..n {
                        for j in 0..n {
                            let w = p.at(i, j);
                            if w != 0.0 {
                                triplets.push((base + i, base + j, w));
                            }
                        }
                    }
                    for &c in cig.nodes() {
                        present[c] = true;
                        slot_community.push(c);
                    }
                    cigs.push(Some(cig));
                }
                None => cigs.push(None),
            }
        }
        let r = slot_community.len();
        let observed = |keep: &dyn Fn(usize) -> bool| -> Vec<Vec<usize>> {
            (0..nv)
                .map(|v| {
                    let mut c: Vec<usize> = corpus
                        .sequence_events(v)
                        .iter()
                        .filter(|&&e| keep(e))
                        .map(|&e| corpus.posting(e).community)
                        .collect();
                    c.sort_unstable();
                    c.dedup();
                    c
                })
                .collect()
        };
        let mut train_counts = vec![0; ns];
        for &e in split.train_events() {
            train_counts[corpus.posting(e).community] += 1;
        }
        Ok(Self {
            num_videos: nv,
            num_communities: ns,
            threshold,
            mode,
            content,
            cigs,
            train_observed: observed(&|e| split.is_train(e)),
            all_observed: observed(&|_| true),
            train_seq,
            train_pos,
            slot_offset,
            propagation: Arc::new(Csr::from_triplets(r, r, triplets)),
            absent: (0..ns).filter(|&c| !present[c]).collect(),
            slot_community,
            train_counts,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_videos + self.num_communities
    }

    pub fn community_node(&self, c: usize) -> usize {
        self.num_videos + c
    }

    /// APPNP slot of community `c` in video `v`'s graph.
    pub fn slot(&self, v: usize, c: usize) -> Option<usize> {
        let cig = self.cigs[v].as_ref()?;
        Some(self.slot_offset[v] + cig.local_index(c)?)
    }
}

/// Temporal state carried across batches.
#[derive(Clone, Debug)]
pub struct DynamicState {
    pub bank: MemoryBank,
    pub neighbors: NeighborIndex,
    pub seen: Vec<bool>,
    /// Events whose memory update has not been applied yet.
    pub pending: Vec<Posting>,
}

impl DynamicState {
    pub fn new(nodes: usize, dim: usize) -> Self {
        Self {
            bank: MemoryBank::new(nodes, dim),
            neighbors: NeighborIndex::new(nodes),
            seen: vec![false; nodes],
            pending: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.bank.reset();
        self.neighbors.clear();
        self.seen.fill(false);
        self.pending.clear();
    }
}

/// Rows produced by applying pending events, written back by
/// [`ModelParams::commit`].
#[derive(Clone, Debug, Default)]
pub struct MemoryUpdate {
    pub nodes: Vec<usize>,
    pub times: Vec<i64>,
    /// `[nodes, d]` var holding the new rows, if any.
    pub rows: Option<Var>,
}

/// Per-batch static features on the tape.
pub struct Features {
    /// Raw features of every dynamic-graph node, `[V+S, d]`.
    pub x_all: Var,
    /// APPNP output per slot, `[R, d]`.
    pub appnp: Option<Var>,
    pub table: Var,
}

/// One supervised batch with pre-drawn negatives (`None` when the video
/// touched every community).
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub events: Vec<Posting>,
    pub negatives: Vec<Option<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

pub struct LossVars {
    pub total: Var,
    pub bpr: Option<Var>,
    pub ce: Option<Var>,
    pub reg: Var,
    pub update: MemoryUpdate,
}

impl ModelParams {
    /// `ṽ` for every video and community raw features (mean APPNP output
    /// over the graphs containing the community, else its table row).
    pub fn features(&self, g: &mut Graph, store: &ParamStore, ctx: &StaticContext) -> Result<Features> {
        let table = g.param(store, self.communities)?;
        let vids = g.constant(ctx.content.video_vecs.clone())?;
        let chan = g.param(store, self.channels)?;
        let chan = g.gather_rows(chan, &ctx.content.channel_of)?;
        let videos = aggregate_rows(g, store, vids, chan, self.config.agg, self.concat_proj.as_ref())?;
        let appnp = if ctx.slot_community.is_empty() {
            None
        } else {
            let s0 = g.gather_rows(table, &ctx.slot_community)?;
            Some(g.spmm(ctx.propagation.clone(), s0)?)
        };
        let comm = match appnp {
            Some(a) if ctx.absent.is_empty() => g.segment_mean(a, &ctx.slot_community, ctx.num_communities)?,
            Some(a) => {
                let rest = g.gather_rows(table, &ctx.absent)?;
                let rows = g.vstack(&[a, rest])?;
                let seg: Vec<usize> = ctx.slot_community.iter().chain(&ctx.absent).copied().collect();
                g.segment_mean(rows, &seg, ctx.num_communities)?
            }
            None => table,
        };
        let x_all = g.vstack(&[videos, comm])?;
        Ok(Features { x_all, appnp, table })
    }

    /// Applies `state.pending` to a copy of the memory: mean-pooled edge
    /// (and first-sight node) messages, then one GRU step per touched node.
    pub fn apply_pending(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &StaticContext,
        state: &DynamicState,
        x_all: Var,
    ) -> Result<(Var, MemoryUpdate)> {
        let h_old = g.constant(state.bank.as_tensor())?;
        if state.pending.is_empty() {
            return Ok((h_old, MemoryUpdate::default()));
        }
        let mut own = Vec::new();
        let mut other = Vec::new();
        let mut dts = Vec::new();
        let mut last_time: BTreeMap<usize, i64> = BTreeMap::new();
        for p in &state.pending {
            let (a, b) = (p.video, ctx.community_node(p.community));
            for (x, y) in [(a, b), (b, a)] {
                own.push(x);
                other.push(y);
                dts.push((p.timestamp - state.bank.last_update[x]) as f64);
                let e = last_time.entry(x).or_insert(p.timestamp);
                *e = (*e).max(p.timestamp);
            }
        }
        let touched: Vec<usize> = last_time.keys().copied().collect();
        let compact = |n: usize| touched.binary_search(&n).expect("touched node");
        let mut seg: Vec<usize> = own.iter().map(|&n| compact(n)).collect();

        let ho = g.gather_rows(h_old, &own)?;
        let hx = g.gather_rows(h_old, &other)?;
        let xo = g.gather_rows(x_all, &own)?;
        let xx = g.gather_rows(x_all, &other)?;
        let phi = self.time.encode(g, store, &dts)?;
        let mut msgs = self.messages.edge_message(g, store, (ho, xo), (hx, xx), phi)?;

        // First sight of a node adds a node-addition message.
        let fresh: Vec<usize> = touched.iter().copied().filter(|&n| !state.seen[n]).collect();
        if !fresh.is_empty() {
            let first: Vec<f64> = fresh
                .iter()
                .map(|&n| {
                    let t = state
                        .pending
                        .iter()
                        .filter(|p| p.video == n || ctx.community_node(p.community) == n)
                        .map(|p| p.timestamp)
                        .min()
                        .expect("fresh node has an event");
                    (t - state.bank.last_update[n]) as f64
                })
                .collect();
            let hf = g.gather_rows(h_old, &fresh)?;
            let xf = g.gather_rows(x_all, &fresh)?;
            let pf = self.time.encode(g, store, &first)?;
            let nm = self.messages.node_message(g, store, hf, xf, pf)?;
            msgs = g.vstack(&[msgs, nm])?;
            seg.extend(fresh.iter().map(|&n| compact(n)));
        }
        let mean = g.segment_mean(msgs, &seg, touched.len())?;
        let h_prev = g.gather_rows(h_old, &touched)?;
        let h_new = self.gru.forward(g, store, mean, h_prev)?;
        let h_all = g.scatter_rows(h_old, &touched, h_new)?;
        let times = touched.iter().map(|n| last_time[n]).collect();
        Ok((
            h_all,
            MemoryUpdate {
                nodes: touched,
                times,
                rows: Some(h_new),
            },
        ))
    }

    /// Two-layer temporal embeddings of `(node, time)` targets. The inner
    /// layer is evaluated once per distinct node at `t_ref`.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &DynamicState,
        z0: Var,
        targets: &[(usize, i64)],
        t_ref: i64,
    ) -> Result<Var> {
        let k = self.config.neighbors;
        let mut inner: Vec<usize> = Vec::new();
        for &(n, _) in targets {
            inner.push(n);
            inner.extend(state.neighbors.recent(n, k).iter().map(|&(m, _)| m));
        }
        inner.sort_unstable();
        inner.dedup();
        let hoods1 = inner
            .iter()
            .map(|&n| {
                state
                    .neighbors
                    .recent(n, k)
                    .iter()
                    .map(|&(m, t)| (m, (t_ref - t) as f64))
                    .collect()
            })
            .collect();
        let (e1, _) = self.embed1.forward(g, store, &self.time, z0, &inner, &hoods1)?;
        let pos = |n: usize| inner.binary_search(&n).expect("inner node");
        let rows: Vec<usize> = targets.iter().map(|&(n, _)| pos(n)).collect();
        let hoods2 = targets
            .iter()
            .map(|&(n, t)| {
                state
                    .neighbors
                    .recent(n, k)
                    .iter()
                    .map(|&(m, te)| (pos(m), (t - te) as f64))
                    .collect()
            })
            .collect();
        let (e2, _) = self.embed2.forward(g, store, &self.time, e1, &rows, &hoods2)?;
        Ok(e2)
    }

    /// Eq. 16 on one batch: summed BPR over (positive, negative) pairs, summed
    /// session CE over events with a training prefix, and the squared-L2 penalty.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &StaticContext,
        state: &DynamicState,
        plan: &BatchPlan,
        weights: LossWeights,
    ) -> Result<LossVars> {
        let f = self.features(g, store, ctx)?;
        let (h, update) = self.apply_pending(g, store, ctx, state, f.x_all)?;
        let z0 = g.add(h, f.x_all)?;
        let t_ref = plan.events.first().map_or(0, |p| p.timestamp);

        let pairs: Vec<(&Posting, usize)> = plan
            .events
            .iter()
            .zip(&plan.negatives)
            .filter_map(|(p, n)| n.map(|n| (p, n)))
            .collect();
        let bpr = if pairs.is_empty() {
            None
        } else {
            let mut targets: Vec<(usize, i64)> = pairs.iter().map(|(p, _)| (p.video, p.timestamp)).collect();
            targets.extend(pairs.iter().map(|(p, _)| (ctx.community_node(p.community), p.timestamp)));
            targets.extend(pairs.iter().map(|&(p, n)| (ctx.community_node(n), p.timestamp)));
            let e = self.embed(g, store, state, z0, &targets, t_ref)?;
            let b = pairs.len();
            let v = g.gather_rows(e, &(0..b).collect::<Vec<_>>())?;
            let cp = g.gather_rows(e, &(b..2 * b).collect::<Vec<_>>())?;
            let cn = g.gather_rows(e, &(2 * b..3 * b).collect::<Vec<_>>())?;
            let sp = self.scorer.forward(g, store, v, cp)?;
            let sn = self.scorer.forward(g, store, v, cn)?;
            let diff = g.sub(sp, sn)?;
            let ls = g.log_sigmoid(diff)?;
            let m = g.sum(ls)?;
            Some(g.scale(m, -1.0)?)
        };

        let ce = match f.appnp {
            Some(appnp) => self.session_ce(g, store, ctx, plan, appnp, f.table)?,
            None => None,
        };

        let mut reg_terms = Vec::new();
        for id in store.ids().collect::<Vec<_>>() {
            let p = g.param(store, id)?;
            let n = g.l2_norm_sq(p)?;
            reg_terms.push(g.reshape(n, &[1])?);
        }
        let reg = g.concat(&reg_terms)?;
        let reg = g.sum(reg)?;

        let mut total = g.scale(reg, weights.lambda2)?;
        if let Some(b) = bpr {
            total = g.add(total, b)?;
        }
        if let Some(c) = ce {
            let c = g.scale(c, weights.lambda1)?;
            total = g.add(total, c)?;
        }
        Ok(LossVars {
            total,
            bpr,
            ce,
            reg,
            update,
        })
    }

    /// Summed cross-entropy of the next community given each event's
    /// training prefix within its video.
    fn session_ce(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &StaticContext,
        plan: &BatchPlan,
        appnp: Var,
        table: Var,
    ) -> Result<Option<Var>> {
        let mut items = Vec::new();
        let mut seg = Vec::new();
        let mut last = Vec::new();
        let mut targets = Vec::new();
        for p in &plan.events {
            let pos = ctx.train_pos[p.event];
            if pos == usize::MAX || pos == 0 {
                continue;
            }
            let seq = &ctx.train_seq[p.video];
            let start = pos.saturating_sub(self.config.max_seq);
            let s = targets.len();
            for q in &seq[start..pos] {
                seg.push(s);
                items.push(ctx.slot(p.video, q.community).expect("training community has a slot"));
            }
            last.push(items.len() - 1);
            targets.push(p.community);
        }
        if targets.is_empty() {
            return Ok(None);
        }
        let rows = g.gather_rows(appnp, &items)?;
        let r = self.attention.forward(g, store, rows, &seg, &last)?;
        let logits = g.matmul_t(r.z, table)?;
        let lp = g.log_softmax(logits)?;
        let picked = g.pick(lp, &targets)?;
        let m = g.sum(picked)?;
        Ok(Some(g.scale(m, -1.0)?))
    }

    /// Scores each event's candidate communities against its video, using
    /// memory after applying `state.pending`.
    pub fn score_candidates(
        &self,
        store: &ParamStore,
        ctx: &StaticContext,
        state: &DynamicState,
        trials: &[(Posting, Vec<usize>)],
    ) -> Result<(Vec<Vec<f64>>, Tensor, MemoryUpdate)> {
        let mut g = Graph::no_grad();
        let f = self.features(&mut g, store, ctx)?;
        let (h, update) = self.apply_pending(&mut g, store, ctx, state, f.x_all)?;
        let rows = update.rows.map(|r| g.value(r).clone()).unwrap_or_else(|| Tensor::zeros(&[0, self.config.dim]));
        if trials.is_empty() {
            return Ok((Vec::new(), rows, update));
        }
        let z0 = g.add(h, f.x_all)?;
        let t_ref = trials[0].0.timestamp;
        let mut targets = Vec::new();
        let mut video_rows = Vec::new();
        let mut comm_rows = Vec::new();
        for (p, cands) in trials {
            let vrow = targets.len();
            targets.push((p.video, p.timestamp));
            for &c in cands {
                video_rows.push(vrow);
                comm_rows.push(targets.len());
                targets.push((ctx.community_node(c), p.timestamp));
            }
        }
        let e = self.embed(&mut g, store, state, z0, &targets, t_ref)?;
        let v = g.gather_rows(e, &video_rows)?;
        let c = g.gather_rows(e, &comm_rows)?;
        let s = self.scorer.forward(&mut g, store, v, c)?;
        let flat = g.value(s).data();
        let mut out = Vec::with_capacity(trials.len());
        let mut k = 0;
        for (_, cands) in trials {
            out.push(flat[k..k + cands.len()].to_vec());
            k += cands.len();
        }
        Ok((out, rows, update))
    }

    /// Writes applied memory rows back and queues `batch` as the next
    /// pending events.
    pub fn commit(
        &self,
        ctx: &StaticContext,
        state: &mut DynamicState,
        update: &MemoryUpdate,
        rows: &Tensor,
        batch: &[Posting],
    ) -> std::result::Result<(), crate::dynamic::OrderError> {
        if !update.nodes.is_empty() {
            state.bank.write(&update.nodes, rows, &update.times)?;
            for &n in &update.nodes {
                state.seen[n] = true;
            }
        }
        for p in batch {
            state.neighbors.insert(p.video, ctx.community_node(p.community), p.timestamp);
        }
        state.pending = batch.to_vec();
        Ok(())
    }

    /// Applies whatever is pending without scoring anything.
    pub fn flush(
        &self,
        store: &ParamStore,
        ctx: &StaticContext,
        state: &mut DynamicState,
    ) -> std::result::Result<(), crate::Error> {
        let (_, rows, update) = self.score_candidates(store, ctx, state, &[])?;
        self.commit(ctx, state, &update, &rows, &[])?;
        Ok(())
    }
}
