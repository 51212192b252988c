//! Synthetic posting corpora with a planted community DAG. Each video walks
//! the DAG in waves separated by long gaps, so the influence rules can be
//! checked against a known answer.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::event_store::{Corpus, PostingInstance};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("planted graph has no edges but hops were requested")]
    EmptyDag,
}

fn bad(msg: impl Into<String>) -> SynthError {
    SynthError::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_communities: usize,
    pub n_users: usize,
    pub n_videos: usize,
    /// Explicit planted edges by community name; overrides `dag_density`.
    pub edges: Option<Vec<(String, String)>>,
    /// Probability of each forward pair in a random topological order.
    pub dag_density: f64,
    pub min_hops: usize,
    pub max_hops: usize,
    /// Max communities reached in one wave (1 = a simple path).
    pub max_branch: usize,
    pub session_gap_logmean: f64,
    pub session_gap_logstd: f64,
    pub cross_session_gap_logmean: f64,
    pub cross_session_gap_logstd: f64,
    /// Chance that a hop posting gets an extra share by another user in the
    /// same session.
    pub concurrent_share_prob: f64,
    /// Chance that a hop user also posts the video in an off-path community
    /// within the same session.
    pub same_user_pair_prob: f64,
    pub n_channels: usize,
    /// Video start times are uniform over this many seconds.
    pub start_window: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_communities: 12,
            n_users: 2000,
            n_videos: 200,
            edges: None,
            dag_density: 0.2,
            min_hops: 2,
            max_hops: 5,
            max_branch: 1,
            session_gap_logmean: 1.5,
            session_gap_logstd: 0.4,
            cross_session_gap_logmean: 4.5,
            cross_session_gap_logstd: 0.3,
            concurrent_share_prob: 0.0,
            same_user_pair_prob: 0.0,
            n_channels: 4,
            start_window: 30 * 86_400,
            seed: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, SynthError> {
    v.parse().map_err(|_| bad(format!("{key}: cannot parse {v:?}")))
}

impl SynthConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SynthError> {
        let v = value.trim();
        match key.trim() {
            "n_communities" => self.n_communities = num(key, v)?,
            "n_users" => self.n_users = num(key, v)?,
            "n_videos" => self.n_videos = num(key, v)?,
            "dag_density" => self.dag_density = num(key, v)?,
            "edges" | "planted_edges" => {
                let mut edges = Vec::new();
                for pair in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    let (a, b) = pair
                        .split_once('>')
                        .ok_or_else(|| bad(format!("edge {pair:?}: expected src>dst")))?;
                    edges.push((a.trim().to_string(), b.trim().to_string()));
                }
                self.edges = Some(edges);
            }
            "min_hops" => self.min_hops = num(key, v)?,
            "max_hops" => self.max_hops = num(key, v)?,
            "max_branch" => self.max_branch = num(key, v)?,
            "session_gap_logmean" => self.session_gap_logmean = num(key, v)?,
            "session_gap_logstd" => self.session_gap_logstd = num(key, v)?,
            "cross_session_gap_logmean" => self.cross_session_gap_logmean = num(key, v)?,
            "cross_session_gap_logstd" => self.cross_session_gap_logstd = num(key, v)?,
            "concurrent_share_prob" => self.concurrent_share_prob = num(key, v)?,
            "same_user_pair_prob" => self.same_user_pair_prob = num(key, v)?,
            "n_channels" => self.n_channels = num(key, v)?,
            "start_window" => self.start_window = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
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

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.cross_session_gap_logmean - self.session_gap_logmean < 2.0 {
            return Err(bad("cross-session gaps must sit at least 2 log10 units above session gaps"));
        }
        if self.session_gap_logstd < 0.0 || self.cross_session_gap_logstd < 0.0 {
            return Err(bad("gap log-stds must be non-negative"));
        }
        for (name, p) in [
            ("concurrent_share_prob", self.concurrent_share_prob),
            ("same_user_pair_prob", self.same_user_pair_prob),
            ("dag_density", self.dag_density),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad(format!("{name} must be in [0, 1]")));
            }
        }
        if self.min_hops > self.max_hops {
            return Err(bad("min_hops exceeds max_hops"));
        }
        if self.max_branch == 0 {
            return Err(bad("max_branch must be at least 1"));
        }
        if self.start_window < 0 {
            return Err(bad("start_window must be non-negative"));
        }
        let per_video = (self.max_hops * self.max_branch + 1) * 2;
        if self.n_videos > 0 && self.n_users < per_video {
            return Err(bad(format!("n_users must be at least {per_video} to keep users fresh within a video")));
        }
        Ok(())
    }
}

/// What each video was built to express.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub video_id: String,
    /// Wave-to-wave edges, all in the planted graph.
    pub edges: Vec<(String, String)>,
    /// Edges caused by same-user off-path pairs (not in the planted graph).
    pub pair_edges: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub communities: Vec<String>,
    pub dag: Vec<(String, String)>,
    pub videos: Vec<VideoTruth>,
}

impl PlantedTruth {
    /// Every edge a correct influence build should produce for a video.
    pub fn expected(&self, video: usize) -> BTreeSet<(String, String)> {
        let v = &self.videos[video];
        v.edges.iter().chain(&v.pair_edges).cloned().collect()
    }
}

struct Dag {
    names: Vec<String>,
    succ: Vec<Vec<usize>>,
}

impl Dag {
    fn build(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Self, SynthError> {
        match &cfg.edges {
            Some(edges) => {
                let mut names: Vec<String> = edges
                    .iter()
                    .flat_map(|(a, b)| [a.clone(), b.clone()])
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let mut k = 0;
                while names.len() < cfg.n_communities {
                    let name = format!("s{k:02}");
                    if !names.contains(&name) {
                        names.push(name);
                    }
                    k += 1;
                }
                let mut succ = vec![Vec::new(); names.len()];
                let idx = |n: &str| names.iter().position(|x| x == n).expect("named");
                for (a, b) in edges {
                    if a == b {
                        return Err(bad(format!("self-loop {a}>{b}")));
                    }
                    succ[idx(a)].push(idx(b));
                }
                for s in &mut succ {
                    s.sort_unstable();
                    s.dedup();
                }
                let dag = Self { names, succ };
                if dag.has_cycle() {
                    return Err(bad("planted edges contain a cycle"));
                }
                Ok(dag)
            }
            None => {
                let n = cfg.n_communities;
                let names = (0..n).map(|i| format!("s{i:02}")).collect();
                let mut order: Vec<usize> = (0..n).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
                let mut succ = vec![Vec::new(); n];
                for i in 0..n {
                    for j in i + 1..n {
                        if rng.random::<f64>() < cfg.dag_density {
                            succ[order[i]].push(order[j]);
                        }
                    }
                }
                for s in &mut succ {
                    s.sort_unstable();
                }
                Ok(Self { names, succ })
            }
        }
    }

    fn has_cycle(&self) -> bool {
        // Kahn's algorithm.
        let n = self.succ.len();
        let mut indeg = vec![0usize; n];
        for s in &self.succ {
            for &d in s {
                indeg[d] += 1;
            }
        }
        let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(u) = stack.pop() {
            seen += 1;
            for &d in &self.succ[u] {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    stack.push(d);
                }
            }
        }
        seen < n
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.succ
            .iter()
            .enumerate()
            .flat_map(|(a, s)| s.iter().map(move |&b| (a, b)))
            .collect()
    }
}

fn lognormal_gap(rng: &mut ChaCha8Rng, logmean: f64, logstd: f64) -> i64 {
    let x = Normal::new(logmean, logstd).expect("validated std").sample(rng);
    (10f64.powf(x).round() as i64).max(1)
}

struct VideoDraw {
    events: Vec<PostingInstance>,
    truth: VideoTruth,
}

fn draw_video(cfg: &SynthConfig, dag: &Dag, sources: &[usize], v: usize) -> VideoDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(v as u64 + 1);
    let video_id = format!("v{v:05}");
    let name = |c: usize| dag.names[c].clone();

    // Waves of communities along the planted graph.
    let hops = rng.random_range(cfg.min_hops..=cfg.max_hops);
    let mut waves: Vec<Vec<usize>> = vec![vec![*sources.choose(&mut rng).expect("non-empty sources")]];
    while waves.len() <= hops {
        let frontier = waves.last().expect("seeded");
        let common: Vec<usize> = dag.succ[frontier[0]]
            .iter()
            .copied()
            .filter(|c| frontier.iter().all(|f| dag.succ[*f].contains(c)))
            .collect();
        if common.is_empty() {
            break;
        }
        let k = rng.random_range(1..=cfg.max_branch.min(common.len()));
        let mut next: Vec<usize> = rand::seq::index::sample(&mut rng, common.len(), k)
            .into_iter()
            .map(|i| common[i])
            .collect();
        next.sort_unstable();
        waves.push(next);
    }
    let on_path: BTreeSet<usize> = waves.iter().flatten().copied().collect();
    let off_path: Vec<usize> = (0..dag.names.len()).filter(|c| !on_path.contains(c)).collect();

    let users = rand::seq::index::sample(&mut rng, cfg.n_users, cfg.n_users.min((cfg.max_hops * cfg.max_branch + 1) * 2));
    let mut next_user = users.into_iter();
    let mut fresh = || format!("u{:05}", next_user.next().expect("enough users"));

    let channel = (cfg.n_channels > 0).then(|| format!("ch{}", waves[0][0] % cfg.n_channels));
    let mut t = if cfg.start_window > 0 {
        rng.random_range(0..=cfg.start_window)
    } else {
        0
    };
    let mut events = Vec::new();
    let mut edges = BTreeSet::new();
    let mut pair_edges = BTreeSet::new();
    // Communities of the previous session, with the user behind each.
    let mut prev: Vec<(usize, String)> = Vec::new();
    for (w, wave) in waves.iter().enumerate() {
        if w > 0 {
            t += lognormal_gap(&mut rng, cfg.cross_session_gap_logmean, cfg.cross_session_gap_logstd);
        }
        let mut order = wave.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut session: Vec<(usize, String)> = Vec::new();
        for (i, &c) in order.iter().enumerate() {
            if i > 0 {
                t += lognormal_gap(&mut rng, cfg.session_gap_logmean, cfg.session_gap_logstd);
            }
            let user = fresh();
            events.push(PostingInstance::new(&video_id, &name(c), &user, t));
            session.push((c, user.clone()));
            if rng.random::<f64>() < cfg.concurrent_share_prob {
                t += lognormal_gap(&mut rng, cfg.session_gap_logmean, cfg.session_gap_logstd);
                let other = fresh();
                events.push(PostingInstance::new(&video_id, &name(c), &other, t));
                session.push((c, other));
            }
            if !off_path.is_empty() && rng.random::<f64>() < cfg.same_user_pair_prob {
                let x = *off_path.choose(&mut rng).expect("non-empty");
                t += lognormal_gap(&mut rng, cfg.session_gap_logmean, cfg.session_gap_logstd);
                events.push(PostingInstance::new(&video_id, &name(x), &user, t));
                pair_edges.insert((name(c), name(x)));
                pair_edges.insert((name(x), name(c)));
                session.push((x, user));
            }
        }
        for (pc, pu) in &prev {
            for (c, u) in &session {
                if pu != u && pc != c {
                    let e = (name(*pc), name(*c));
                    if dag.succ[*pc].contains(c) {
                        edges.insert(e);
                    } else {
                        pair_edges.insert(e);
                    }
                }
            }
        }
        prev = session;
    }
    if let Some(ch) = channel {
        for e in &mut events {
            e.channel_id = Some(ch.clone());
        }
    }
    pair_edges.retain(|e| !edges.contains(e));
    VideoDraw {
        events,
        truth: VideoTruth {
            video_id,
            edges: edges.into_iter().collect(),
            pair_edges: pair_edges.into_iter().collect(),
        },
    }
}

/// Draws a corpus and the graph it was drawn from. Pure in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<(Corpus, PlantedTruth), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dag = Dag::build(cfg, &mut rng)?;
    let dag_edges = dag.edges();
    if dag_edges.is_empty() && cfg.max_hops > 0 && cfg.n_videos > 0 {
        return Err(SynthError::EmptyDag);
    }
    let sources: Vec<usize> = (0..dag.names.len()).filter(|&c| !dag.succ[c].is_empty()).collect();
    let draws: Vec<VideoDraw> = if cfg.n_videos == 0 {
        Vec::new()
    } else {
        (0..cfg.n_videos).into_par_iter().map(|v| draw_video(cfg, &dag, &sources, v)).collect()
    };
    let mut events = Vec::new();
    let mut videos = Vec::with_capacity(draws.len());
    for d in draws {
        events.extend(d.events);
        videos.push(d.truth);
    }
    events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.video_id.cmp(&b.video_id)));
    let corpus = Corpus::from_events(events).map_err(|e| bad(e.to_string()))?;
    let truth = PlantedTruth {
        dag: dag_edges.iter().map(|&(a, b)| (dag.names[a].clone(), dag.names[b].clone())).collect(),
        communities: dag.names,
        videos,
    };
    Ok((corpus, truth))
}

/// Directed-edge overlap counts, summable across videos.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub hits: usize,
    pub built: usize,
    pub truth: usize,
}

impl EdgeCounts {
    pub fn of(built: &BTreeSet<(String, String)>, truth: &BTreeSet<(String, String)>) -> Self {
        Self {
            hits: built.intersection(truth).count(),
            built: built.len(),
            truth: truth.len(),
        }
    }

    pub fn add(&mut self, other: EdgeCounts) {
        self.hits += other.hits;
        self.built += other.built;
        self.truth += other.truth;
    }

    /// Empty built set counts as fully precise.
    pub fn precision(&self) -> f64 {
        if self.built == 0 {
            1.0
        } else {
            self.hits as f64 / self.built as f64
        }
    }

    /// Empty truth set counts as fully recalled.
    pub fn recall(&self) -> f64 {
        if self.truth == 0 {
            1.0
        } else {
            self.hits as f64 / self.truth as f64
        }
    }
}

/// `(precision, recall)` of a built edge set against the planted one,
/// ignoring weights.
pub fn recovery_score(built: &BTreeSet<(String, String)>, truth: &BTreeSet<(String, String)>) -> (f64, f64) {
    let c = EdgeCounts::of(built, truth);
    (c.precision(), c.recall())
}

/// Planted truth as pretty JSON.
pub fn truth_json(truth: &PlantedTruth) -> String {
    let mut s = serde_json::to_string_pretty(truth).expect("plain data");
    let _ = writeln!(s);
    s
}
