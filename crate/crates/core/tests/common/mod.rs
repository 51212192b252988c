#![allow(dead_code)]

use pathcast::event_store::{chronological_split, Corpus, PostingInstance, Split, DEFAULT_SPLIT};
use pathcast::synth::{generate, SynthConfig};
use pathcast::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 5 videos, 8 communities, 4 users, 30 events. Gaps mix seconds and
/// minutes so the fitted threshold yields several sessions per video. The
/// time scale stays small so central differences through the cosine time
/// encoding stay well conditioned (phase shift Δt·h ≪ 1).
pub fn fixture() -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut events = Vec::new();
    for v in 0..5 {
        let mut t = 30 * v as i64;
        for _ in 0..6 {
            t += if rng.random::<f64>() < 0.3 {
                rng.random_range(1..4)
            } else {
                rng.random_range(20..120)
            };
            let mut e = PostingInstance::new(
                &format!("v{v}"),
                &format!("s{}", rng.random_range(0..8)),
                &format!("u{}", rng.random_range(0..4)),
                t,
            );
            e.channel_id = Some(format!("ch{}", v % 2));
            events.push(e);
        }
    }
    // Make sure all 8 communities and 4 users exist.
    for (i, e) in events.iter_mut().take(8).enumerate() {
        e.community_id = format!("s{i}");
    }
    for (i, e) in events.iter_mut().skip(8).take(4).enumerate() {
        e.user_id = format!("u{i}");
    }
    Corpus::from_events(events).unwrap()
}

pub fn split(corpus: &Corpus) -> Split {
    chronological_split(corpus, DEFAULT_SPLIT).unwrap()
}

pub fn fixture_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        batch_size: 7,
        epochs: 2,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

/// Planted-DAG corpus for learning experiments. Hops are about a day apart
/// and videos start within ten days, so most held-out postings belong to
/// videos with training history and their previous hop usually falls in an
/// earlier batch.
pub fn learning_corpus(seed: u64, videos: usize, communities: usize) -> Corpus {
    let cfg = SynthConfig {
        n_videos: videos,
        n_communities: communities,
        dag_density: 0.12,
        min_hops: 2,
        max_hops: 5,
        cross_session_gap_logmean: 5.0,
        start_window: 10 * 86_400,
        seed,
        ..SynthConfig::default()
    };
    generate(&cfg).unwrap().0
}
