//! Continuous-time dynamic graph pieces: time encoding, per-node memory with
//! message passing and GRU updates, temporal attention readout and the
//! video–community scorer.

use serde::{Deserialize, Serialize};

use crate::nn::{outer, xavier, Linear};
use crate::numeric::{Graph, NumericError, ParamId, ParamStore, Tensor, Var};

type Result<T> = std::result::Result<T, NumericError>;

/// `φ(t) = cos(t·w2 + b1)`.
#[derive(Clone, Copy, Debug)]
pub struct TimeEncoder {
    pub w2: ParamId,
    pub b1: ParamId,
}

impl TimeEncoder {
    /// Frequencies spread geometrically over `1 … 10⁻⁹` per second so both
    /// seconds and months register; phases start at zero.
    pub fn new(store: &mut ParamStore, d: usize) -> Result<Self> {
        let span = (d.max(2) - 1) as f64;
        let w2 = (0..d).map(|k| 10f64.powf(-9.0 * k as f64 / span)).collect();
        Ok(Self {
            w2: store.add("time.w2", Tensor::vector(w2))?,
            b1: store.add("time.b1", Tensor::zeros(&[d]))?,
        })
    }

    /// Rows `φ(Δt_k)` for every entry of `dt`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, dt: &[f64]) -> Result<Var> {
        let x = outer(g, store, dt, self.w2)?;
        let b = g.param(store, self.b1)?;
        let x = g.add_row(x, b)?;
        g.cos(x)
    }
}

/// Plain `cos(t·w2 + b1)`.
pub fn time_encode(t: f64, w2: &[f64], b1: &[f64]) -> Vec<f64> {
    w2.iter().zip(b1).map(|(w, b)| (t * w + b).cos()).collect()
}

/// Message functions: `tanh(Linear(·))` over the concatenated inputs.
#[derive(Clone, Copy, Debug)]
pub struct Messages {
    /// `[h_i ‖ x_i ‖ φ(t − t′_i)] → m`.
    pub node: Linear,
    /// `[h_i ‖ h_j ‖ x_i ‖ x_j ‖ φ(t − t′_i)] → m`.
    pub edge: Linear,
}

impl Messages {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, d: usize) -> Result<Self> {
        Ok(Self {
            node: Linear::new(store, rng, "msg.node", 3 * d, d)?,
            edge: Linear::new(store, rng, "msg.edge", 5 * d, d)?,
        })
    }

    pub fn node_message(&self, g: &mut Graph, store: &ParamStore, h: Var, x: Var, phi: Var) -> Result<Var> {
        let joined = g.concat(&[h, x, phi])?;
        let y = self.node.forward(g, store, joined)?;
        g.tanh(y)
    }

    /// Message for the endpoint whose state comes first; call again with the
    /// roles swapped for the other endpoint.
    pub fn edge_message(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        own: (Var, Var),
        other: (Var, Var),
        phi: Var,
    ) -> Result<Var> {
        let joined = g.concat(&[own.0, other.0, own.1, other.1, phi])?;
        let y = self.edge.forward(g, store, joined)?;
        g.tanh(y)
    }
}

/// Gated recurrent unit built from primitives.
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub wz: Linear,
    pub wr: Linear,
    pub wn: Linear,
    pub uz: ParamId,
    pub ur: ParamId,
    pub un: ParamId,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, m: usize, d: usize) -> Result<Self> {
        Ok(Self {
            wz: Linear::new(store, rng, "gru.wz", m, d)?,
            wr: Linear::new(store, rng, "gru.wr", m, d)?,
            wn: Linear::new(store, rng, "gru.wn", m, d)?,
            uz: store.add("gru.uz", xavier(rng, d, d))?,
            ur: store.add("gru.ur", xavier(rng, d, d))?,
            un: store.add("gru.un", xavier(rng, d, d))?,
        })
    }

    /// `z = σ(W_z m + U_z h)`, `r = σ(W_r m + U_r h)`,
    /// `n = tanh(W_n m + r ⊙ U_n h)`, `h′ = (1 − z) ⊙ n + z ⊙ h`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, m: Var, h: Var) -> Result<Var> {
        let gate = |g: &mut Graph, lin: &Linear, u: ParamId| -> Result<Var> {
            let a = lin.forward(g, store, m)?;
            let u = g.param(store, u)?;
            let b = g.matmul(h, u)?;
            let s = g.add(a, b)?;
            g.sigmoid(s)
        };
        let z = gate(g, &self.wz, self.uz)?;
        let r = gate(g, &self.wr, self.ur)?;
        let a = self.wn.forward(g, store, m)?;
        let un = g.param(store, self.un)?;
        let uh = g.matmul(h, un)?;
        let ruh = g.mul(r, uh)?;
        let pre = g.add(a, ruh)?;
        let n = g.tanh(pre)?;
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}

/// Per-node memory `h_i` and last-update time `t′_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub dim: usize,
    pub memory: Vec<f64>,
    pub last_update: Vec<i64>,
}

impl MemoryBank {
    pub fn new(nodes: usize, dim: usize) -> Self {
        Self {
            dim,
            memory: vec![0.0; nodes * dim],
            last_update: vec![0; nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.last_update.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.memory[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_nodes(), self.dim], self.memory.clone()).expect("memory shape")
    }

    pub fn reset(&mut self) {
        self.memory.fill(0.0);
        self.last_update.fill(0);
    }

    /// Writes new rows for `nodes` at time `t` per node. Times must not move
    /// backwards.
    pub fn write(&mut self, nodes: &[usize], rows: &Tensor, times: &[i64]) -> std::result::Result<(), OrderError> {
        for (k, &i) in nodes.iter().enumerate() {
            if times[k] < self.last_update[i] {
                return Err(OrderError {
                    node: i,
                    last: self.last_update[i],
                    time: times[k],
                });
            }
            self.memory[i * self.dim..(i + 1) * self.dim].copy_from_slice(rows.row(k));
            self.last_update[i] = times[k];
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("event at {time} for node {node} precedes its last update at {last}")]
pub struct OrderError {
    pub node: usize,
    pub last: i64,
    pub time: i64,
}

/// Recent temporal neighbours of every node, oldest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborIndex {
    lists: Vec<Vec<(usize, i64)>>,
}

impl NeighborIndex {
    pub fn new(nodes: usize) -> Self {
        Self {
            lists: vec![Vec::new(); nodes],
        }
    }

    pub fn insert(&mut self, a: usize, b: usize, t: i64) {
        self.lists[a].push((b, t));
        self.lists[b].push((a, t));
    }

    /// Up to `k` most recent neighbours.
    pub fn recent(&self, node: usize, k: usize) -> &[(usize, i64)] {
        let l = &self.lists[node];
        &l[l.len().saturating_sub(k)..]
    }

    pub fn clear(&mut self) {
        self.lists.iter_mut().for_each(Vec::clear);
    }
}

/// One temporal attention layer (single head) with a two-layer merge.
#[derive(Clone, Copy, Debug)]
pub struct AttentionLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub merge1: Linear,
    pub merge2: Linear,
}

/// Neighbourhood of each target: `(row into the source table, Δt)`.
pub type Neighborhoods = Vec<Vec<(usize, f64)>>;

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            wq: store.add(format!("{name}.wq"), xavier(rng, 2 * d, d))?,
            wk: store.add(format!("{name}.wk"), xavier(rng, 2 * d, d))?,
            wv: store.add(format!("{name}.wv"), xavier(rng, 2 * d, d))?,
            merge1: Linear::new(store, rng, &format!("{name}.merge1"), 2 * d, d)?,
            merge2: Linear::new(store, rng, &format!("{name}.merge2"), d, d)?,
        })
    }

    /// Embeds each target row of `source` from its own state and its
    /// neighbours' states, keyed by `φ(Δt)`. Returns the embeddings and the
    /// attention weights (flattened in neighbourhood order).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        time: &TimeEncoder,
        source: Var,
        targets: &[usize],
        hoods: &Neighborhoods,
    ) -> Result<(Var, Option<Var>)> {
        let n = targets.len();
        let d = g.shape(source)[1];
        let own = g.gather_rows(source, targets)?;
        let phi0 = time.encode(g, store, &vec![0.0; n])?;
        let q_in = g.concat(&[own, phi0])?;
        let wq = g.param(store, self.wq)?;
        let q = g.matmul(q_in, wq)?;
        let mut rows = Vec::new();
        let mut dts = Vec::new();
        let mut seg = Vec::new();
        for (i, hood) in hoods.iter().enumerate() {
            for &(r, dt) in hood {
                rows.push(r);
                dts.push(dt);
                seg.push(i);
            }
        }
        let (agg, alpha) = if rows.is_empty() {
            (g.constant(Tensor::zeros(&[n, d]))?, None)
        } else {
            let nb = g.gather_rows(source, &rows)?;
            let phi = time.encode(g, store, &dts)?;
            let kv_in = g.concat(&[nb, phi])?;
            let wk = g.param(store, self.wk)?;
            let wv = g.param(store, self.wv)?;
            let k = g.matmul(kv_in, wk)?;
            let v = g.matmul(kv_in, wv)?;
            let qe = g.gather_rows(q, &seg)?;
            let s = g.row_dot(qe, k)?;
            let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
            let a = g.segment_softmax(s, &seg, n)?;
            (g.segment_weighted_sum(a, v, &seg, n)?, Some(a))
        };
        let joined = g.concat(&[agg, own])?;
        let hidden = self.merge1.forward(g, store, joined)?;
        let hidden = g.relu(hidden)?;
        Ok((self.merge2.forward(g, store, hidden)?, alpha))
    }
}

/// `ŷ = outer(v ⊙ inner(s))`.
#[derive(Clone, Copy, Debug)]
pub struct Scorer {
    pub inner: Linear,
    pub outer: Linear,
}

impl Scorer {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, d: usize) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, rng, "score.inner", d, d)?,
            outer: Linear::new(store, rng, "score.outer", d, 1)?,
        })
    }

    /// Scores row pairs; returns a vector with one entry per row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, video: Var, community: Var) -> Result<Var> {
        let c = self.inner.forward(g, store, community)?;
        let p = g.mul(video, c)?;
        let s = self.outer.forward(g, store, p)?;
        let n = g.shape(s)[0];
        g.reshape(s, &[n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn time_encoding_cases() {
        assert_eq!(time_encode(123.0, &[0.0; 3], &[0.0; 3]), vec![1.0; 3]);
        let b = [0.3, -2.0];
        assert_eq!(time_encode(0.0, &[5.0, 7.0], &b), vec![b[0].cos(), b[1].cos()]);
        let mut store = ParamStore::new();
        let te = TimeEncoder::new(&mut store, 6).unwrap();
        let mut g = Graph::no_grad();
        let v = te.encode(&mut g, &store, &[0.0, 1e3, 1e9]).unwrap();
        assert!(g.value(v).data().iter().all(|x| (-1.0..=1.0).contains(x)));
        let w2 = store.value(te.w2).data().to_vec();
        let want = time_encode(1e3, &w2, &[0.0; 6]);
        assert_eq!(g.value(v).row(1), &want[..]);
    }

    #[test]
    fn zero_parameters_give_zero_messages_and_memory() {
        let d = 4;
        let mut store = ParamStore::new();
        let msgs = Messages::new(&mut store, &mut rng(), d).unwrap();
        let gru = Gru::new(&mut store, &mut rng(), d, d).unwrap();
        zero_all(&mut store);
        let mut g = Graph::no_grad();
        let h = g.constant(Tensor::zeros(&[1, d])).unwrap();
        let x = g.constant(Tensor::filled(&[1, d], 0.4)).unwrap();
        let phi = g.constant(Tensor::filled(&[1, d], 1.0)).unwrap();
        let m = msgs.node_message(&mut g, &store, h, x, phi).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
        let e = msgs.edge_message(&mut g, &store, (h, x), (h, x), phi).unwrap();
        assert_eq!(g.value(e).shape(), &[1, d]);
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
        let h2 = gru.forward(&mut g, &store, m, h).unwrap();
        assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
        // Zero parameters with a non-zero state halve it: z = 0.5, n = 0.
        let h = g.constant(Tensor::filled(&[1, d], 0.8)).unwrap();
        let h3 = gru.forward(&mut g, &store, m, h).unwrap();
        assert!(g.value(h3).data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn node_message_matches_scalar_oracle() {
        let d = 2;
        let mut store = ParamStore::new();
        let msgs = Messages::new(&mut store, &mut rng(), d).unwrap();
        let input = [0.1, -0.2, 0.5, 0.7, 1.0, 0.3];
        let mut g = Graph::no_grad();
        let h = g.constant(Tensor::matrix(1, 2, input[..2].to_vec()).unwrap()).unwrap();
        let x = g.constant(Tensor::matrix(1, 2, input[2..4].to_vec()).unwrap()).unwrap();
        let phi = g.constant(Tensor::matrix(1, 2, input[4..].to_vec()).unwrap()).unwrap();
        let m = msgs.node_message(&mut g, &store, h, x, phi).unwrap();
        let want: Vec<f64> = msgs.node.apply(&store, &input).into_iter().map(f64::tanh).collect();
        for (a, b) in g.value(m).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn edge_message_symmetry() {
        let d = 3;
        let mut store = ParamStore::new();
        let msgs = Messages::new(&mut store, &mut rng(), d).unwrap();
        let mut g = Graph::no_grad();
        let h = g.constant(Tensor::filled(&[1, d], 0.2)).unwrap();
        let x = g.constant(Tensor::filled(&[1, d], -0.6)).unwrap();
        let phi = g.constant(Tensor::filled(&[1, d], 0.9)).unwrap();
        let a = msgs.edge_message(&mut g, &store, (h, x), (h, x), phi).unwrap();
        let b = msgs.edge_message(&mut g, &store, (h, x), (h, x), phi).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn memory_rejects_time_travel() {
        let mut bank = MemoryBank::new(2, 2);
        let rows = Tensor::filled(&[1, 2], 1.0);
        bank.write(&[1], &rows, &[10]).unwrap();
        assert_eq!(bank.row(1), &[1.0, 1.0]);
        assert_eq!(bank.row(0), &[0.0, 0.0]);
        assert!(bank.write(&[1], &rows, &[5]).is_err());
    }

    #[test]
    fn neighbor_index_keeps_recent() {
        let mut nb = NeighborIndex::new(3);
        for t in 0..5 {
            nb.insert(0, 1 + (t as usize % 2), t);
        }
        assert_eq!(nb.recent(0, 2), &[(2, 3), (1, 4)]);
        assert_eq!(nb.recent(2, 10).len(), 2);
    }

    fn layer(d: usize) -> (ParamStore, TimeEncoder, AttentionLayer) {
        let mut store = ParamStore::new();
        let mut r = rng();
        let te = TimeEncoder::new(&mut store, d).unwrap();
        store.value_mut(te.b1).data_mut().copy_from_slice(&xavier(&mut r, 1, d).into_data());
        let l = AttentionLayer::new(&mut store, &mut r, "l", d).unwrap();
        (store, te, l)
    }

    #[test]
    fn single_neighbor_gets_full_weight() {
        let d = 3;
        let (store, te, l) = layer(d);
        let mut g = Graph::no_grad();
        let src = g.constant(xavier(&mut rng(), 2, d)).unwrap();
        let (_, a) = l.forward(&mut g, &store, &te, src, &[0], &vec![vec![(1, 5.0)]]).unwrap();
        assert_eq!(g.value(a.unwrap()).data(), &[1.0]);
    }

    #[test]
    fn isolated_node_depends_only_on_itself() {
        let d = 3;
        let (store, te, l) = layer(d);
        let base = xavier(&mut rng(), 3, d);
        let mut other = base.clone();
        other.row_mut(1).fill(9.0);
        other.row_mut(2).fill(-4.0);
        let run = |t: &Tensor| {
            let mut g = Graph::no_grad();
            let src = g.constant(t.clone()).unwrap();
            let (e, _) = l.forward(&mut g, &store, &te, src, &[0], &vec![vec![]]).unwrap();
            g.value(e).clone()
        };
        assert_eq!(run(&base), run(&other));
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let d = 3;
        let (store, te, l) = layer(d);
        let src_t = xavier(&mut ChaCha8Rng::seed_from_u64(3), 4, d);
        let hood = vec![(1, 10.0), (2, 250.0), (3, 4000.0)];
        let mut g = Graph::no_grad();
        let src = g.constant(src_t.clone()).unwrap();
        let (e, a) = l.forward(&mut g, &store, &te, src, &[0], &vec![hood.clone()]).unwrap();
        let got_alpha = g.value(a.unwrap()).data().to_vec();
        let got = g.value(e).data().to_vec();

        let w2 = store.value(te.w2).data();
        let b1 = store.value(te.b1).data();
        let mat = |id: ParamId, x: &[f64]| -> Vec<f64> {
            let w = store.value(id);
            (0..d).map(|j| (0..2 * d).map(|i| x[i] * w.at(i, j)).sum()).collect()
        };
        let cat = |a: &[f64], b: &[f64]| a.iter().chain(b).copied().collect::<Vec<f64>>();
        let q = mat(l.wq, &cat(src_t.row(0), &time_encode(0.0, w2, b1)));
        let mut scores = Vec::new();
        let mut vals = Vec::new();
        for &(r, dt) in &hood {
            let kv = cat(src_t.row(r), &time_encode(dt, w2, b1));
            let k = mat(l.wk, &kv);
            scores.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt());
            vals.push(mat(l.wv, &kv));
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = ex.iter().sum();
        let alpha: Vec<f64> = ex.iter().map(|e| e / total).collect();
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let agg: Vec<f64> = (0..d).map(|j| (0..3).map(|k| alpha[k] * vals[k][j]).sum()).collect();
        let hidden: Vec<f64> = l.merge1.apply(&store, &cat(&agg, src_t.row(0))).into_iter().map(|x| x.max(0.0)).collect();
        let want = l.merge2.apply(&store, &hidden);
        for (x, y) in got_alpha.iter().zip(&alpha) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn identity_scorer(d: usize) -> (ParamStore, Scorer) {
        let mut store = ParamStore::new();
        let s = Scorer::new(&mut store, &mut rng(), d).unwrap();
        store.set_value(s.inner.w, Tensor::identity(d)).unwrap();
        store.set_value(s.outer.w, Tensor::filled(&[d, 1], 1.0)).unwrap();
        (store, s)
    }

    fn score(store: &ParamStore, s: &Scorer, v: Vec<f64>, c: Vec<f64>) -> f64 {
        let d = v.len();
        let mut g = Graph::no_grad();
        let v = g.constant(Tensor::matrix(1, d, v).unwrap()).unwrap();
        let c = g.constant(Tensor::matrix(1, d, c).unwrap()).unwrap();
        let y = s.forward(&mut g, store, v, c).unwrap();
        g.value(y).item()
    }

    #[test]
    fn scorer_cases() {
        let (store, s) = identity_scorer(3);
        assert_eq!(score(&store, &s, vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]), 0.0);
        assert!((score(&store, &s, vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 2.0]) - 4.5).abs() < 1e-15);
        let mut store = ParamStore::new();
        let s = Scorer::new(&mut store, &mut rng(), 4).unwrap();
        assert!(score(&store, &s, vec![3.0, -1.0, 0.2, 8.0], vec![1.0, 1.0, -5.0, 0.0]).is_finite());
    }
}
