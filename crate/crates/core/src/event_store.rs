//! Posting-event logs: ingestion, dense indexing, per-video sequences and the
//! chronological train/validation/test split.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: empty field `{field}`")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: negative timestamp {value}")]
    NegativeTimestamp { line: usize, value: i64 },
    #[error("unknown video `{0}`")]
    UnknownVideo(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("unknown input format `{0}`")]
    UnknownFormat(String),
    #[error("{0}")]
    Invalid(String),
}

/// One share event: a video posted in a community by a user at a time.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PostingInstance {
    pub video_id: String,
    pub community_id: String,
    pub user_id: String,
    /// Seconds since the epoch.
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_id: Option<String>,
}

impl PostingInstance {
    pub fn new(video: &str, community: &str, user: &str, timestamp: i64) -> Self {
        Self {
            video_id: video.to_string(),
            community_id: community.to_string(),
            user_id: user.to_string(),
            timestamp,
            title: None,
            channel_id: None,
        }
    }

    fn validate(&self, line: usize) -> Result<(), DataError> {
        for (field, value) in [
            ("video_id", &self.video_id),
            ("community_id", &self.community_id),
            ("user_id", &self.user_id),
        ] {
            if value.trim().is_empty() {
                return Err(DataError::EmptyField { line, field });
            }
        }
        if self.timestamp < 0 {
            return Err(DataError::NegativeTimestamp {
                line,
                value: self.timestamp,
            });
        }
        Ok(())
    }
}

/// Bijection between string ids and dense indices `0..n`, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Dense view of one event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Posting {
    pub event: usize,
    pub video: usize,
    pub community: usize,
    pub user: usize,
    pub timestamp: i64,
}

/// Chronologically sorted postings of one video.
pub type PostingSequence = Vec<Posting>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    /// Guesses from the file extension; anything but `.csv` is JSON lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Jsonl,
        }
    }
}

impl std::str::FromStr for InputFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" | "json" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

/// Immutable, indexed collection of posting events.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    events: Vec<PostingInstance>,
    postings: Vec<Posting>,
    videos: Interner,
    communities: Interner,
    users: Interner,
    channels: Interner,
    video_channel: Vec<Option<usize>>,
    sequences: Vec<Vec<usize>>,
}

impl Corpus {
    /// Builds a corpus, dropping exact duplicate 4-tuples (first wins).
    pub fn from_events(events: Vec<PostingInstance>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(events.len());
        for (i, e) in events.into_iter().enumerate() {
            e.validate(i + 1)?;
            let key = (
                e.video_id.clone(),
                e.community_id.clone(),
                e.user_id.clone(),
                e.timestamp,
            );
            if seen.insert(key) {
                kept.push(e);
            }
        }
        Ok(Self::index(kept))
    }

    fn index(events: Vec<PostingInstance>) -> Self {
        let mut videos = Interner::default();
        let mut communities = Interner::default();
        let mut users = Interner::default();
        let mut channels = Interner::default();
        let mut video_channel: Vec<Option<usize>> = Vec::new();
        let mut postings = Vec::with_capacity(events.len());
        for (i, e) in events.iter().enumerate() {
            let video = videos.intern(&e.video_id);
            if video == video_channel.len() {
                video_channel.push(None);
            }
            if video_channel[video].is_none() {
                if let Some(ch) = e.channel_id.as_deref().filter(|c| !c.is_empty()) {
                    video_channel[video] = Some(channels.intern(ch));
                }
            }
            postings.push(Posting {
                event: i,
                video,
                community: communities.intern(&e.community_id),
                user: users.intern(&e.user_id),
                timestamp: e.timestamp,
            });
        }
        let mut sequences = vec![Vec::new(); videos.len()];
        for p in &postings {
            sequences[p.video].push(p.event);
        }
        for seq in &mut sequences {
            // Stable: ties keep input order.
            seq.sort_by_key(|&e| postings[e].timestamp);
        }
        Self {
            events,
            postings,
            videos,
            communities,
            users,
            channels,
            video_channel,
            sequences,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[PostingInstance] {
        &self.events
    }

    pub fn event(&self, i: usize) -> &PostingInstance {
        &self.events[i]
    }

    pub fn posting(&self, i: usize) -> Posting {
        self.postings[i]
    }

    pub fn postings(&self) -> &[Posting] {
        &self.postings
    }

    pub fn videos(&self) -> &Interner {
        &self.videos
    }

    pub fn communities(&self) -> &Interner {
        &self.communities
    }

    pub fn users(&self) -> &Interner {
        &self.users
    }

    pub fn channels(&self) -> &Interner {
        &self.channels
    }

    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }

    pub fn num_communities(&self) -> usize {
        self.communities.len()
    }

    /// Channel index of a video, if any event carried one.
    pub fn channel_of(&self, video: usize) -> Option<usize> {
        self.video_channel[video]
    }

    /// Event indices of a video, sorted by time.
    pub fn sequence_events(&self, video: usize) -> &[usize] {
        &self.sequences[video]
    }

    /// Full sorted posting sequence of a dense video index.
    pub fn sequence(&self, video: usize) -> PostingSequence {
        self.sequences[video].iter().map(|&e| self.postings[e]).collect()
    }

    /// Sorted postings of a video that satisfy `keep`.
    pub fn sequence_where(&self, video: usize, keep: impl Fn(usize) -> bool) -> PostingSequence {
        self.sequences[video]
            .iter()
            .filter(|&&e| keep(e))
            .map(|&e| self.postings[e])
            .collect()
    }

    /// Keeps only videos posted in at least `k` distinct communities.
    pub fn filter_min_communities(&self, k: usize) -> Self {
        let keep: Vec<bool> = self
            .sequences
            .iter()
            .map(|seq| {
                seq.iter()
                    .map(|&e| self.postings[e].community)
                    .collect::<HashSet<_>>()
                    .len()
                    >= k
            })
            .collect();
        let events = self
            .events
            .iter()
            .zip(&self.postings)
            .filter(|(_, p)| keep[p.video])
            .map(|(e, _)| e.clone())
            .collect();
        Self::index(events)
    }

    /// Writes events as JSON lines in stored order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// The posting sequence of `video_id`, optionally restricted to events
/// strictly before `until`.
pub fn posting_sequence(corpus: &Corpus, video_id: &str, until: Option<i64>) -> Result<PostingSequence, DataError> {
    let v = corpus
        .videos
        .get(video_id)
        .ok_or_else(|| DataError::UnknownVideo(video_id.to_string()))?;
    let mut seq = corpus.sequence(v);
    if let Some(t) = until {
        seq.retain(|p| p.timestamp < t);
    }
    Ok(seq)
}

/// Reads a JSON-lines or CSV event file.
pub fn ingest_events(path: &Path, format: InputFormat) -> Result<Corpus, DataError> {
    let file = File::open(path)?;
    match format {
        InputFormat::Jsonl => read_jsonl(BufReader::new(file)),
        InputFormat::Csv => read_csv(file),
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Corpus, DataError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let e: PostingInstance = serde_json::from_str(&line).map_err(|err| DataError::Malformed {
            line: lineno,
            message: err.to_string(),
        })?;
        e.validate(lineno)?;
        events.push(e);
    }
    Corpus::from_events(events)
}

#[derive(Deserialize)]
struct CsvRow {
    video_id: String,
    community_id: String,
    user_id: String,
    timestamp: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    channel_id: Option<String>,
}

pub fn read_csv<R: io::Read>(reader: R) -> Result<Corpus, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut events = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        // Header is line 1.
        let lineno = i + 2;
        let row = row.map_err(|err| DataError::Malformed {
            line: lineno,
            message: err.to_string(),
        })?;
        let ts = row.timestamp.trim();
        if ts.is_empty() {
            return Err(DataError::EmptyField {
                line: lineno,
                field: "timestamp",
            });
        }
        let timestamp: i64 = ts.parse().map_err(|_| DataError::Malformed {
            line: lineno,
            message: format!("timestamp `{ts}` is not an integer"),
        })?;
        let e = PostingInstance {
            video_id: row.video_id,
            community_id: row.community_id,
            user_id: row.user_id,
            timestamp,
            title: row.title.filter(|s| !s.is_empty()),
            channel_id: row.channel_id.filter(|s| !s.is_empty()),
        };
        e.validate(lineno)?;
        events.push(e);
    }
    Corpus::from_events(events)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

/// Chronological partition of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// Event indices sorted by `(timestamp, input order)`.
    order: Vec<usize>,
    roles: Vec<SplitRole>,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
    /// First validation and first test timestamps (`i64::MAX` when empty).
    pub boundary_times: [i64; 2],
}

impl Split {
    pub fn train_events(&self) -> &[usize] {
        &self.order[self.train.clone()]
    }

    pub fn validation_events(&self) -> &[usize] {
        &self.order[self.validation.clone()]
    }

    pub fn test_events(&self) -> &[usize] {
        &self.order[self.test.clone()]
    }

    /// All events in chronological order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn role(&self, event: usize) -> SplitRole {
        self.roles[event]
    }

    pub fn is_train(&self, event: usize) -> bool {
        self.roles[event] == SplitRole::Train
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.15, 0.15];

/// Sorts events by time (stable) and cuts at `⌊r₀n⌋` and `⌊(r₀+r₁)n⌋`.
pub fn chronological_split(corpus: &Corpus, ratios: [f64; 3]) -> Result<Split, DataError> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(ratios));
    }
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&e| corpus.postings[e].timestamp);
    let cut = |frac: f64| ((frac * n as f64 + 1e-9).floor() as usize).min(n);
    let a = cut(ratios[0]);
    let b = cut(ratios[0] + ratios[1]).max(a);
    let mut roles = vec![SplitRole::Train; n];
    for (pos, &e) in order.iter().enumerate() {
        roles[e] = if pos < a {
            SplitRole::Train
        } else if pos < b {
            SplitRole::Validation
        } else {
            SplitRole::Test
        };
    }
    let ts = |pos: usize| order.get(pos).map_or(i64::MAX, |&e| corpus.postings[e].timestamp);
    Ok(Split {
        boundary_times: [ts(a), ts(b)],
        train: 0..a,
        validation: a..b,
        test: b..n,
        order,
        roles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(v: &str, c: &str, u: &str, t: i64) -> PostingInstance {
        PostingInstance::new(v, c, u, t)
    }

    #[test]
    fn empty_input_gives_empty_corpus() {
        let c = read_jsonl("".as_bytes()).unwrap();
        assert_eq!(c.len(), 0);
        assert_eq!(c.num_videos(), 0);
    }

    #[test]
    fn singleton_record() {
        let c = read_jsonl(r#"{"video_id":"v1","community_id":"sA","user_id":"u1","timestamp":100}"#.as_bytes()).unwrap();
        assert_eq!(c.len(), 1);
        let seq = posting_sequence(&c, "v1", None).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq[0].timestamp, 100);
    }

    #[test]
    fn identical_records_collapse() {
        let line = r#"{"video_id":"v1","community_id":"sA","user_id":"u1","timestamp":100}"#;
        let c = read_jsonl(format!("{line}\n{line}\n").as_bytes()).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn repeat_share_at_other_time_kept() {
        let c = Corpus::from_events(vec![ev("v", "A", "u", 1), ev("v", "A", "u", 2)]).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = "{\"video_id\":\"v\",\"community_id\":\"A\",\"user_id\":\"u\",\"timestamp\":1}\nnot json\n";
        match read_jsonl(text.as_bytes()) {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_field_and_negative_time_rejected() {
        let empty = r#"{"video_id":"","community_id":"A","user_id":"u","timestamp":1}"#;
        assert!(matches!(
            read_jsonl(empty.as_bytes()),
            Err(DataError::EmptyField { field: "video_id", line: 1 })
        ));
        let neg = r#"{"video_id":"v","community_id":"A","user_id":"u","timestamp":-5}"#;
        assert!(matches!(
            read_jsonl(neg.as_bytes()),
            Err(DataError::NegativeTimestamp { value: -5, .. })
        ));
    }

    #[test]
    fn csv_requires_header_and_parses_optionals() {
        let text = "video_id,community_id,user_id,timestamp,title,channel_id\nv1,A,u1,5,Hello,ch\nv1,B,u2,3,,\n";
        let c = read_csv(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.event(0).title.as_deref(), Some("Hello"));
        assert_eq!(c.event(1).channel_id, None);
        assert_eq!(c.channel_of(0), Some(0));
        let seq = c.sequence(0);
        assert_eq!(seq.iter().map(|p| p.timestamp).collect::<Vec<_>>(), vec![3, 5]);

        let bad = "video_id,community_id,user_id,timestamp\nv1,A,u1,\n";
        assert!(matches!(read_csv(bad.as_bytes()), Err(DataError::EmptyField { line: 2, .. })));
    }

    #[test]
    fn posting_sequence_until() {
        let c = Corpus::from_events(vec![ev("v", "A", "u1", 9), ev("v", "B", "u2", 1), ev("v", "C", "u3", 5)]).unwrap();
        assert!(posting_sequence(&c, "v", Some(0)).unwrap().is_empty());
        assert_eq!(posting_sequence(&c, "v", None).unwrap().len(), 3);
        let s = posting_sequence(&c, "v", Some(6)).unwrap();
        assert_eq!(s.iter().map(|p| p.timestamp).collect::<Vec<_>>(), vec![1, 5]);
        assert!(matches!(posting_sequence(&c, "nope", None), Err(DataError::UnknownVideo(_))));
    }

    fn corpus_of(n: usize, time: impl Fn(usize) -> i64) -> Corpus {
        Corpus::from_events((0..n).map(|i| ev(&format!("v{}", i % 3), "A", &format!("u{i}"), time(i))).collect()).unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = chronological_split(&corpus_of(10, |i| i as i64), DEFAULT_SPLIT).unwrap();
        assert_eq!(s.sizes(), (7, 1, 2));
        let s = chronological_split(&corpus_of(100, |i| i as i64), DEFAULT_SPLIT).unwrap();
        assert_eq!(s.sizes(), (70, 15, 15));
    }

    #[test]
    fn split_with_equal_times_uses_input_order() {
        let s = chronological_split(&corpus_of(10, |_| 42), DEFAULT_SPLIT).unwrap();
        assert_eq!(s.train_events(), &[0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(s.test_events(), &[8, 9]);
    }

    #[test]
    fn split_errors() {
        let empty = Corpus::from_events(vec![]).unwrap();
        assert!(matches!(chronological_split(&empty, DEFAULT_SPLIT), Err(DataError::EmptyCorpus)));
        let c = corpus_of(3, |i| i as i64);
        assert!(chronological_split(&c, [0.5, 0.5, 0.0]).is_err());
        assert!(chronological_split(&c, [0.5, 0.2, 0.2]).is_err());
    }

    fn arb_events() -> impl Strategy<Value = Vec<PostingInstance>> {
        proptest::collection::vec((0..6usize, 0..5usize, 0..4usize, 0..50i64), 1..60).prop_map(|rows| {
            rows.into_iter()
                .map(|(v, c, u, t)| ev(&format!("v{v}"), &format!("c{c}"), &format!("u{u}"), t))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn sequences_sorted_and_cover_events(events in arb_events()) {
            let c = Corpus::from_events(events).unwrap();
            let mut total = 0;
            for v in 0..c.num_videos() {
                let seq = c.sequence(v);
                prop_assert!(seq.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
                total += seq.len();
            }
            prop_assert_eq!(total, c.len());
        }

        #[test]
        fn jsonl_roundtrip_preserves_indices(events in arb_events()) {
            let c = Corpus::from_events(events).unwrap();
            let mut buf = Vec::new();
            c.write_jsonl(&mut buf).unwrap();
            let back = read_jsonl(buf.as_slice()).unwrap();
            prop_assert_eq!(back, c);
        }

        #[test]
        fn split_is_a_chronological_partition(events in arb_events()) {
            let c = Corpus::from_events(events).unwrap();
            let s = chronological_split(&c, DEFAULT_SPLIT).unwrap();
            let mut all: Vec<usize> = s.train_events().iter()
                .chain(s.validation_events())
                .chain(s.test_events())
                .copied()
                .collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..c.len()).collect::<Vec<_>>());
            let t = |e: &usize| c.posting(*e).timestamp;
            let max_train = s.train_events().iter().map(t).max();
            let min_val = s.validation_events().iter().map(t).min();
            if let (Some(a), Some(b)) = (max_train, min_val) { prop_assert!(a <= b); }
        }
    }
}
