//! Content aggregation, APPNP propagation over community influence graphs and
//! the session readout that feeds the next-community softmax.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::cig::Cig;
use crate::event_store::Corpus;
use crate::nn::{xavier, Linear};
use crate::numeric::{Graph, NumericError, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum StaticError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("APPNP needs at least one layer")]
    NoLayers,
    #[error("teleport probability must lie in [0, 1), got {0}")]
    Alpha(f64),
    #[error("empty session sequence")]
    EmptySequence,
    #[error("unknown aggregation scheme `{0}`")]
    UnknownScheme(String),
    #[error("feature file line {line}: {msg}")]
    FeatureFile { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggScheme {
    Concat,
    Add,
    Mul,
}

impl std::str::FromStr for AggScheme {
    type Err = StaticError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(Self::Concat),
            "add" => Ok(Self::Add),
            "mul" => Ok(Self::Mul),
            other => Err(StaticError::UnknownScheme(other.to_string())),
        }
    }
}

impl std::fmt::Display for AggScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Add => "add",
            Self::Mul => "mul",
        })
    }
}

/// `Aggr(v, c)` on plain vectors. `concat` returns the `2D` vector before
/// the learned projection.
pub fn aggregate_content(video: &[f64], channel: &[f64], scheme: AggScheme) -> Result<Vec<f64>, StaticError> {
    if video.len() != channel.len() {
        return Err(StaticError::Dimension(video.len(), channel.len()));
    }
    Ok(match scheme {
        AggScheme::Concat => video.iter().chain(channel).copied().collect(),
        AggScheme::Add => video.iter().zip(channel).map(|(a, b)| a + b).collect(),
        AggScheme::Mul => video.iter().zip(channel).map(|(a, b)| a * b).collect(),
    })
}

/// Row-wise aggregation on the tape. `proj` is required for `concat`.
pub fn aggregate_rows(
    g: &mut Graph,
    store: &ParamStore,
    video: Var,
    channel: Var,
    scheme: AggScheme,
    proj: Option<&Linear>,
) -> Result<Var, NumericError> {
    match scheme {
        AggScheme::Add => g.add(video, channel),
        AggScheme::Mul => g.mul(video, channel),
        AggScheme::Concat => {
            let joined = g.concat(&[video, channel])?;
            proj.expect("concat scheme needs a projection").forward(g, store, joined)
        }
    }
}

/// Deterministic unit vector seeded by SHA-256 of `id`.
pub fn hashed_unit_vector(id: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(id.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

#[derive(Deserialize)]
struct FeatureRecord {
    id: String,
    vector: Vec<f64>,
    #[serde(default)]
    kind: Option<String>,
}

/// Vectors read from a feature file, split by kind. Records without a
/// `kind` are offered to videos first, then channels.
#[derive(Clone, Debug, Default)]
pub struct FeatureFile {
    pub videos: HashMap<String, Vec<f64>>,
    pub channels: HashMap<String, Vec<f64>>,
    pub untyped: HashMap<String, Vec<f64>>,
}

impl FeatureFile {
    pub fn read<R: BufRead>(reader: R, dim: usize) -> Result<Self, StaticError> {
        let mut out = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| StaticError::FeatureFile { line: i + 1, msg };
            let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if rec.vector.len() != dim {
                return Err(bad(format!("expected {dim} values, got {}", rec.vector.len())));
            }
            if rec.vector.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite value".into()));
            }
            let map = match rec.kind.as_deref() {
                Some("video") => &mut out.videos,
                Some("channel") => &mut out.channels,
                None => &mut out.untyped,
                Some(k) => return Err(bad(format!("unknown kind `{k}`"))),
            };
            map.insert(rec.id, rec.vector);
        }
        Ok(out)
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self, StaticError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?), dim)
    }

    fn video(&self, id: &str) -> Option<&Vec<f64>> {
        self.videos.get(id).or_else(|| self.untyped.get(id))
    }

    fn channel(&self, id: &str) -> Option<&Vec<f64>> {
        self.channels.get(id).or_else(|| self.untyped.get(id))
    }
}

/// Fixed video vectors `v_i` plus the video → channel-row map `ρ`.
///
/// Channel rows are learnable; row `num_channel_rows() − 1` stands in for
/// videos without a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeatures {
    pub dim: usize,
    pub video_vecs: Tensor,
    pub channel_of: Vec<usize>,
    /// Initial channel table, `[channels + 1, dim]`.
    pub channel_init: Tensor,
}

impl ContentFeatures {
    /// Hashed video vectors unless a feature file provides them; channel rows
    /// from the file or Xavier.
    pub fn build(corpus: &Corpus, dim: usize, file: Option<&FeatureFile>, rng: &mut impl rand::Rng) -> Self {
        let nv = corpus.num_videos();
        let mut video_vecs = Vec::with_capacity(nv * dim);
        for v in 0..nv {
            let id = corpus.videos().name(v);
            match file.and_then(|f| f.video(id)) {
                Some(x) => video_vecs.extend_from_slice(x),
                None => video_vecs.extend(hashed_unit_vector(id, dim)),
            }
        }
        let nc = corpus.channels().len();
        let mut channel_init = xavier(rng, nc + 1, dim);
        if let Some(f) = file {
            for c in 0..nc {
                if let Some(x) = f.channel(corpus.channels().name(c)) {
                    channel_init.row_mut(c).copy_from_slice(x);
                }
            }
        }
        let channel_of = (0..nv).map(|v| corpus.channel_of(v).unwrap_or(nc)).collect();
        Self {
            dim,
            video_vecs: Tensor::new(vec![nv, dim], video_vecs).expect("video table shape"),
            channel_of,
            channel_init,
        }
    }

    pub fn num_channel_rows(&self) -> usize {
        self.channel_init.shape()[0]
    }
}

/// `D̂^{-1/2} (A + Aᵀ + I) D̂^{-1/2}`.
pub fn normalized_adjacency(adj: &Tensor) -> Tensor {
    let n = adj.shape()[0];
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            a.data_mut()[i * n + j] = adj.at(i, j) + adj.at(j, i) + if i == j { 1.0 } else { 0.0 };
        }
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            a.data_mut()[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    a
}

/// The linear map `P` with `S^(L) = P S^(0)` for
/// `S^(l) = (1−α) N S^(l−1) + α S^(0)`.
pub fn appnp_operator(adj: &Tensor, alpha: f64, layers: usize) -> Result<Tensor, StaticError> {
    if layers < 1 {
        return Err(StaticError::NoLayers);
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(StaticError::Alpha(alpha));
    }
    let n = adj.shape()[0];
    let norm = normalized_adjacency(adj);
    let mut p = Tensor::identity(n);
    for _ in 0..layers {
        let mut next = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for k in 0..n {
                let a = (1.0 - alpha) * norm.at(i, k);
                if a != 0.0 {
                    for j in 0..n {
                        next.data_mut()[i * n + j] += a * p.at(k, j);
                    }
                }
            }
            next.data_mut()[i * n + i] += alpha;
        }
        p = next;
    }
    Ok(p)
}

/// APPNP outputs for the nodes of `cig`, in node order. `table` holds one
/// row per community.
pub fn appnp_propagate(cig: &Cig, table: &Tensor, alpha: f64, layers: usize) -> Result<Tensor, StaticError> {
    let p = appnp_operator(&cig.adjacency(), alpha, layers)?;
    let d = table.last_dim();
    let n = cig.num_nodes();
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for (k, &c) in cig.nodes().iter().enumerate() {
            let w = p.at(i, k);
            for j in 0..d {
                out.data_mut()[i * d + j] += w * table.at(c, j);
            }
        }
    }
    Ok(out)
}

/// Soft attention over a session sequence and the `2d → d` prediction head.
#[derive(Clone, Copy, Debug)]
pub struct SessionAttention {
    pub w1: ParamId,
    /// `W_g` with the shared attention bias.
    pub gate_last: Linear,
    /// `W_h`, bias-free.
    pub gate_item: ParamId,
    pub head: Linear,
}

/// Per-segment outputs of [`SessionAttention::forward`].
pub struct SessionReadout {
    pub context: Var,
    pub beta: Var,
    pub z: Var,
}

impl SessionAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, d: usize) -> Result<Self, NumericError> {
        let w1 = store.add("attn.w1", Tensor::vector(xavier(rng, d, 1).into_data()))?;
        let gate_last = Linear::new(store, rng, "attn.gate_last", d, d)?;
        let gate_item = store.add("attn.gate_item.w", xavier(rng, d, d))?;
        let head = Linear::new(store, rng, "attn.head", 2 * d, d)?;
        Ok(Self {
            w1,
            gate_last,
            gate_item,
            head,
        })
    }

    /// Batched readout. `items` stacks every sequence's node embeddings,
    /// `seg[k]` names the sequence of row `k` and `last[s]` the row holding
    /// sequence `s`'s most recent node.
    ///
    /// `β_k = w1 · σ(W_g s_last + W_h s_k + b)`, unnormalized;
    /// `context = Σ β_k s_k`; `z = head([s_last ‖ context])`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        items: Var,
        seg: &[usize],
        last: &[usize],
    ) -> Result<SessionReadout, NumericError> {
        let n = last.len();
        let s_last = g.gather_rows(items, last)?;
        let gl = self.gate_last.forward(g, store, s_last)?;
        let gl = g.gather_rows(gl, seg)?;
        let wh = g.param(store, self.gate_item)?;
        let gi = g.matmul(items, wh)?;
        let pre = g.add(gl, gi)?;
        let act = g.sigmoid(pre)?;
        let w1 = g.param(store, self.w1)?;
        let d = g.shape(w1)[0];
        let w1 = g.reshape(w1, &[d, 1])?;
        let beta = g.matmul(act, w1)?;
        let beta = g.reshape(beta, &[seg.len()])?;
        let context = g.segment_weighted_sum(beta, items, seg, n)?;
        let joined = g.concat(&[s_last, context])?;
        let z = self.head.forward(g, store, joined)?;
        Ok(SessionReadout { context, beta, z })
    }
}

/// Scores `z · s_jᵀ` against every row of the global table.
pub fn next_community_logits(g: &mut Graph, z: Var, table: Var) -> Result<Var, NumericError> {
    g.matmul_t(z, table)
}

/// Single-sequence convenience: probability vector over all communities.
pub fn next_community_distribution(
    attn: &SessionAttention,
    store: &ParamStore,
    nodes: &Tensor,
    table: &Tensor,
) -> Result<Vec<f64>, StaticError> {
    let n = nodes.shape()[0];
    if n == 0 {
        return Err(StaticError::EmptySequence);
    }
    let mut g = Graph::no_grad();
    let items = g.constant(nodes.clone())?;
    let r = attn.forward(&mut g, store, items, &vec![0; n], &[n - 1])?;
    let t = g.constant(table.clone())?;
    let logits = next_community_logits(&mut g, r.z, t)?;
    let p = g.softmax(logits)?;
    Ok(g.value(p).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cig::{build_cig, merge_weights, CigMode};
    use crate::event_store::Posting;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn aggregation_identities() {
        let v = [0.3, -1.2, 2.0];
        assert_eq!(aggregate_content(&v, &[1.0; 3], AggScheme::Mul).unwrap(), v.to_vec());
        assert_eq!(aggregate_content(&v, &[0.0; 3], AggScheme::Add).unwrap(), v.to_vec());
        assert_eq!(
            aggregate_content(&[1.0, 2.0], &[3.0, 4.0], AggScheme::Concat).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert!(aggregate_content(&[1.0], &[1.0, 2.0], AggScheme::Add).is_err());
    }

    #[test]
    fn hashed_vectors_are_stable_units() {
        let a = hashed_unit_vector("v1", 16);
        assert_eq!(a, hashed_unit_vector("v1", 16));
        assert_ne!(a, hashed_unit_vector("v2", 16));
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_file_checks_dimension() {
        let ok = "{\"id\":\"v\",\"vector\":[1,2]}\n{\"id\":\"c\",\"vector\":[0,1],\"kind\":\"channel\"}\n";
        let f = FeatureFile::read(ok.as_bytes(), 2).unwrap();
        assert_eq!(f.video("v"), Some(&vec![1.0, 2.0]));
        assert_eq!(f.channel("c"), Some(&vec![0.0, 1.0]));
        let bad = "{\"id\":\"v\",\"vector\":[1,2,3]}\n";
        assert!(matches!(
            FeatureFile::read(bad.as_bytes(), 2),
            Err(StaticError::FeatureFile { line: 1, .. })
        ));
    }

    fn path_cig() -> Cig {
        // 0 -> 1 twice, 1 -> 2 once, all cross-session.
        let rows = [(0, 0, 0), (1, 1, 1000), (2, 0, 2000), (3, 1, 3000), (4, 2, 4000)];
        let seq: Vec<Posting> = rows
            .iter()
            .enumerate()
            .map(|(i, &(user, community, timestamp))| Posting {
                event: i,
                video: 0,
                community,
                user,
                timestamp,
            })
            .collect();
        merge_weights(build_cig("v", &seq, 100.0, CigMode::Influence, 0).unwrap())
    }

    #[test]
    fn appnp_matches_dense_oracle() {
        let cig = path_cig();
        let table = xavier(&mut rng(), 3, 4);
        let got = appnp_propagate(&cig, &table, 0.1, 4).unwrap();
        // Oracle: explicit iteration with a separately built normalization.
        let a = cig.adjacency();
        let n = 3;
        let mut ahat = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                ahat[i][j] = a.at(i, j) + a.at(j, i) + f64::from(i == j);
            }
        }
        let deg: Vec<f64> = ahat.iter().map(|r| r.iter().sum()).collect();
        let s0: Vec<Vec<f64>> = cig.nodes().iter().map(|&c| table.row(c).to_vec()).collect();
        let mut s = s0.clone();
        for _ in 0..4 {
            let mut next = vec![vec![0.0; 4]; n];
            for i in 0..n {
                for j in 0..4 {
                    let prop: f64 = (0..n).map(|k| ahat[i][k] / (deg[i] * deg[k]).sqrt() * s[k][j]).sum();
                    next[i][j] = 0.9 * prop + 0.1 * s0[i][j];
                }
            }
            s = next;
        }
        for i in 0..n {
            for j in 0..4 {
                assert!((got.at(i, j) - s[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn appnp_limits() {
        let cig = path_cig();
        let table = xavier(&mut rng(), 3, 4);
        let near = appnp_propagate(&cig, &table, 0.999, 8).unwrap();
        for (i, &c) in cig.nodes().iter().enumerate() {
            for j in 0..4 {
                assert!((near.at(i, j) - table.at(c, j)).abs() < 1e-2);
            }
        }
        let lone = merge_weights(
            build_cig(
                "v",
                &[Posting {
                    event: 0,
                    video: 0,
                    community: 2,
                    user: 0,
                    timestamp: 0,
                }],
                10.0,
                CigMode::Influence,
                0,
            )
            .unwrap(),
        );
        for (alpha, l) in [(0.0, 1), (0.1, 4), (0.5, 9)] {
            let out = appnp_propagate(&lone, &table, alpha, l).unwrap();
            assert_eq!(out.row(0), table.row(2));
        }
        assert!(matches!(appnp_propagate(&cig, &table, 0.1, 0), Err(StaticError::NoLayers)));
        assert!(matches!(appnp_propagate(&cig, &table, 1.0, 2), Err(StaticError::Alpha(_))));
    }

    #[test]
    fn appnp_is_permutation_equivariant() {
        // Same graph with communities relabelled in reverse.
        let cig = path_cig();
        let table = xavier(&mut rng(), 3, 4);
        let out = appnp_propagate(&cig, &table, 0.2, 5).unwrap();
        let perm = [2usize, 1, 0];
        let adj = cig.adjacency();
        let mut padj = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                padj.data_mut()[perm[i] * 3 + perm[j]] = adj.at(i, j);
            }
        }
        let p = appnp_operator(&padj, 0.2, 5).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let v: f64 = (0..3)
                    .map(|k| {
                        let orig = perm.iter().position(|&x| x == k).unwrap();
                        p.at(perm[i], k) * table.at(cig.nodes()[orig], j)
                    })
                    .sum();
                assert!((v - out.at(i, j)).abs() < 1e-12);
            }
        }
    }

    fn attention(d: usize) -> (ParamStore, SessionAttention) {
        let mut store = ParamStore::new();
        let a = SessionAttention::new(&mut store, &mut rng(), d).unwrap();
        (store, a)
    }

    fn readout(store: &ParamStore, a: &SessionAttention, nodes: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let n = nodes.shape()[0];
        let mut g = Graph::no_grad();
        let items = g.constant(nodes.clone()).unwrap();
        let r = a.forward(&mut g, store, items, &vec![0; n], &[n - 1]).unwrap();
        (g.value(r.context).data().to_vec(), g.value(r.beta).data().to_vec())
    }

    #[test]
    fn attention_cases() {
        let (mut store, a) = attention(3);
        let one = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let (ctx, beta) = readout(&store, &a, &one);
        for j in 0..3 {
            assert!((ctx[j] - beta[0] * one.at(0, j)).abs() < 1e-15);
        }
        let twin = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap();
        let (_, beta) = readout(&store, &a, &twin);
        assert_eq!(beta[0], beta[1]);
        store.value_mut(a.w1).data_mut().fill(0.0);
        let (ctx, _) = readout(&store, &a, &twin);
        assert!(ctx.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_matches_scalar_formula() {
        let (store, a) = attention(2);
        let nodes = Tensor::matrix(3, 2, vec![1.0, 0.0, -0.5, 2.0, 0.3, 0.3]).unwrap();
        let (ctx, beta) = readout(&store, &a, &nodes);
        let wg = store.value(a.gate_last.w);
        let bg = store.value(a.gate_last.b).data();
        let wh = store.value(a.gate_item);
        let w1 = store.value(a.w1).data();
        let last = nodes.row(2);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut want_ctx = [0.0; 2];
        for i in 0..3 {
            let s = nodes.row(i);
            let b: f64 = (0..2)
                .map(|j| {
                    let pre = bg[j] + (0..2).map(|k| last[k] * wg.at(k, j) + s[k] * wh.at(k, j)).sum::<f64>();
                    w1[j] * sig(pre)
                })
                .sum();
            assert!((beta[i] - b).abs() < 1e-14);
            for j in 0..2 {
                want_ctx[j] += b * s[j];
            }
        }
        assert!((ctx[0] - want_ctx[0]).abs() < 1e-14 && (ctx[1] - want_ctx[1]).abs() < 1e-14);
    }

    #[test]
    fn distribution_laws() {
        let (store, a) = attention(4);
        let nodes = xavier(&mut ChaCha8Rng::seed_from_u64(9), 3, 4);
        let same = Tensor::filled(&[5, 4], 0.7);
        let p = next_community_distribution(&a, &store, &nodes, &same).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let table = xavier(&mut ChaCha8Rng::seed_from_u64(10), 6, 4);
        let p = next_community_distribution(&a, &store, &nodes, &table).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
        assert!(matches!(
            next_community_distribution(&a, &store, &Tensor::zeros(&[0, 4]), &table),
            Err(StaticError::EmptySequence)
        ));
    }

    #[test]
    fn softmax_head_by_hand() {
        // Hand-set z against a 4-row table: z = (1, 2), rows give scores 1, 2, 0, −1.
        let mut g = Graph::no_grad();
        let z = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let t = g
            .constant(Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0]).unwrap())
            .unwrap();
        let l = next_community_logits(&mut g, z, t).unwrap();
        let p = g.softmax(l).unwrap();
        let e = [1f64.exp(), 2f64.exp(), 1.0, (-1f64).exp()];
        let total: f64 = e.iter().sum();
        for (got, want) in g.value(p).data().iter().zip(e.iter().map(|x| x / total)) {
            assert!((got - want).abs() < 1e-15);
        }
    }
}
