//! Session corpora: loading, filtering, prefix augmentation and a seeded
//! synthetic generator.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default number of most recent items kept in a prefix.
pub const DEFAULT_MAX_SESSION_LEN: usize = 19;

/// One anonymous click sequence. Items are dense vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub items: Vec<usize>,
}

/// Bijection between item labels and dense indices `0..N`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab::new();
        for label in labels {
            let label = label.into();
            if vocab.index.contains_key(&label) {
                return Err(Error::invalid(format!("duplicate vocabulary label {label:?}")));
            }
            vocab.intern(&label);
        }
        Ok(vocab)
    }

    /// Returns the index for `label`, assigning the next free one if unseen.
    pub fn intern(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        let i = self.labels.len();
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), i);
        i
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionCorpus {
    pub sessions: Vec<Session>,
    pub vocab: Vocab,
}

impl SessionCorpus {
    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn total_clicks(&self) -> usize {
        self.sessions.iter().map(|s| s.items.len()).sum()
    }

    /// Global click count per item index.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_items()];
        for s in &self.sessions {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        counts
    }
}

/// A (prefix, next item) pair used for training and evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub prefix: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionFormat {
    /// `session_id,item_id,timestamp` with a header row.
    EventCsv,
    /// `session_id<TAB>item,item,...`, one session per line.
    Lines,
}

impl SessionFormat {
    /// `.csv` files are event CSV, anything else is the lines format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => SessionFormat::EventCsv,
            _ => SessionFormat::Lines,
        }
    }
}

impl FromStr for SessionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "event_csv" | "csv" => Ok(SessionFormat::EventCsv),
            "lines" => Ok(SessionFormat::Lines),
            other => Err(Error::invalid(format!("unknown session format {other:?}"))),
        }
    }
}

pub fn load_sessions(path: &Path, format: SessionFormat) -> Result<SessionCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sessions(&text, format)
}

/// Parses corpus text. Sessions keep the order in which their ids first
/// appear; the vocabulary is built in file order.
pub fn parse_sessions(text: &str, format: SessionFormat) -> Result<SessionCorpus> {
    if text.trim().is_empty() {
        return Err(Error::Empty("session file has no content".into()));
    }
    match format {
        SessionFormat::Lines => parse_lines(text),
        SessionFormat::EventCsv => parse_event_csv(text),
    }
}

fn parse_lines(text: &str) -> Result<SessionCorpus> {
    let mut vocab = Vocab::new();
    let mut sessions = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, items) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: "expected `session_id<TAB>items`".into(),
        })?;
        let items: Vec<usize> = items
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|label| vocab.intern(label))
            .collect();
        if items.is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                message: "session has no items".into(),
            });
        }
        sessions.push(Session {
            id: id.to_owned(),
            items,
        });
    }
    if sessions.is_empty() {
        return Err(Error::Empty("no sessions found".into()));
    }
    Ok(SessionCorpus { sessions, vocab })
}

fn parse_event_csv(text: &str) -> Result<SessionCorpus> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Empty("missing header".into()))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').map(str::trim).collect();
    if cols != ["session_id", "item_id", "timestamp"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `session_id,item_id,timestamp`, got {header:?}"),
        });
    }

    let mut vocab = Vocab::new();
    let mut order: Vec<String> = Vec::new();
    // session id -> (timestamp, file position, item)
    let mut events: HashMap<String, Vec<(i64, usize, usize)>> = HashMap::new();
    for (n, raw) in lines {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected 3 non-empty fields, got {line:?}"),
            });
        }
        let ts: i64 = fields[2].parse().map_err(|_| Error::Parse {
            line: n + 1,
            message: format!("timestamp {:?} is not an integer", fields[2]),
        })?;
        let item = vocab.intern(fields[1]);
        let entry = events.entry(fields[0].to_owned()).or_insert_with(|| {
            order.push(fields[0].to_owned());
            Vec::new()
        });
        entry.push((ts, n, item));
    }
    if order.is_empty() {
        return Err(Error::Empty("no events found".into()));
    }
    let sessions = order
        .into_iter()
        .map(|id| {
            let mut ev = events.remove(&id).unwrap_or_default();
            ev.sort_by_key(|&(ts, pos, _)| (ts, pos));
            Session {
                id,
                items: ev.into_iter().map(|(_, _, item)| item).collect(),
            }
        })
        .collect();
    Ok(SessionCorpus { sessions, vocab })
}

/// Serializes a corpus. Event CSV timestamps are the within-session positions.
pub fn format_sessions(corpus: &SessionCorpus, format: SessionFormat) -> String {
    let mut out = String::new();
    let label = |i: usize| corpus.vocab.label(i).unwrap_or("?");
    match format {
        SessionFormat::EventCsv => {
            out.push_str("session_id,item_id,timestamp\n");
            for s in &corpus.sessions {
                for (t, &item) in s.items.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{}", s.id, label(item), t);
                }
            }
        }
        SessionFormat::Lines => {
            for s in &corpus.sessions {
                let items: Vec<&str> = s.items.iter().map(|&i| label(i)).collect();
                let _ = writeln!(out, "{}\t{}", s.id, items.join(","));
            }
        }
    }
    out
}

pub fn write_sessions(corpus: &SessionCorpus, path: &Path, format: SessionFormat) -> Result<()> {
    std::fs::write(path, format_sessions(corpus, format)).map_err(|e| Error::io(path, e))
}

/// Drops rare items and short sessions until neither filter changes anything,
/// then re-densifies the vocabulary keeping the surviving items' relative order.
pub fn preprocess(
    corpus: &SessionCorpus,
    min_item_freq: usize,
    min_session_len: usize,
) -> Result<SessionCorpus> {
    let n = corpus.n_items();
    let mut sessions: Vec<Session> = corpus.sessions.clone();
    loop {
        let mut counts = vec![0usize; n];
        for s in &sessions {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        let mut changed = false;
        for s in sessions.iter_mut() {
            let before = s.items.len();
            s.items.retain(|&i| counts[i] >= min_item_freq);
            changed |= s.items.len() != before;
        }
        let before = sessions.len();
        sessions.retain(|s| s.items.len() >= min_session_len);
        changed |= sessions.len() != before;
        if !changed {
            break;
        }
    }
    if sessions.is_empty() {
        return Err(Error::EmptyAfterPreprocessing);
    }

    let mut used = vec![false; n];
    for s in &sessions {
        for &i in &s.items {
            used[i] = true;
        }
    }
    let mut remap = vec![usize::MAX; n];
    let mut vocab = Vocab::new();
    for old in 0..n {
        if used[old] {
            remap[old] = vocab.intern(corpus.vocab.label(old).unwrap_or_default());
        }
    }
    for s in sessions.iter_mut() {
        for i in s.items.iter_mut() {
            *i = remap[*i];
        }
    }
    Ok(SessionCorpus { sessions, vocab })
}

/// All-prefix augmentation: `[v1..vτ]` yields `([v1..vt], v_{t+1})` for
/// `t = 1..τ-1`, keeping only the last `max_len` items of each prefix.
pub fn augment(corpus: &SessionCorpus, max_len: usize) -> Vec<TrainingExample> {
    augment_sessions(&corpus.sessions, max_len)
}

pub fn augment_sessions(sessions: &[Session], max_len: usize) -> Vec<TrainingExample> {
    let max_len = max_len.max(1);
    let mut out = Vec::new();
    for s in sessions {
        for t in 1..s.items.len() {
            let start = t.saturating_sub(max_len);
            out.push(TrainingExample {
                prefix: s.items[start..t].to_vec(),
                target: s.items[t],
            });
        }
    }
    out
}

/// Seeded split by session. Both halves share the full vocabulary.
pub fn split_by_session(
    corpus: &SessionCorpus,
    test_fraction: f64,
    seed: u64,
) -> Result<(SessionCorpus, SessionCorpus)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.sessions.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (corpus.sessions.len() as f64 * test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        SessionCorpus {
            sessions: idx.iter().map(|&i| corpus.sessions[i].clone()).collect(),
            vocab: corpus.vocab.clone(),
        }
    };
    Ok((pick(train_idx), pick(test_idx)))
}

/// Maps a corpus that was read independently onto an existing vocabulary.
/// Unknown labels become `vocab.len()` so downstream evaluation can skip them.
pub fn remap_to_vocab(corpus: &SessionCorpus, vocab: &Vocab) -> SessionCorpus {
    let unknown = vocab.len();
    let sessions = corpus
        .sessions
        .iter()
        .map(|s| Session {
            id: s.id.clone(),
            items: s
                .items
                .iter()
                .map(|&i| {
                    corpus
                        .vocab
                        .label(i)
                        .and_then(|l| vocab.get(l))
                        .unwrap_or(unknown)
                })
                .collect(),
        })
        .collect();
    SessionCorpus {
        sessions,
        vocab: vocab.clone(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_sessions: usize,
    pub len_range: (usize, usize),
    pub p_same_category: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_items: 200,
            n_categories: 5,
            n_sessions: 5000,
            len_range: (2, 10),
            p_same_category: 0.9,
        }
    }
}

/// Category of a synthetic item; items are split into contiguous, evenly
/// sized blocks.
pub fn synthetic_category(item: usize, n_items: usize, n_categories: usize) -> usize {
    item * n_categories / n_items
}

/// Category-structured random-walk sessions. Item `i` has label `i` and
/// vocabulary index `i`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SessionCorpus> {
    let (min_len, max_len) = cfg.len_range;
    if min_len < 2 {
        return Err(Error::invalid("minimum session length must be at least 2"));
    }
    if max_len < min_len {
        return Err(Error::invalid("len_range max is below min"));
    }
    if cfg.n_categories == 0 || cfg.n_categories > cfg.n_items {
        return Err(Error::invalid(format!(
            "need 1 <= n_categories <= n_items, got {} categories for {} items",
            cfg.n_categories, cfg.n_items
        )));
    }
    if !(0.0..=1.0).contains(&cfg.p_same_category) {
        return Err(Error::invalid("p_same_category must lie in [0, 1]"));
    }
    if cfg.n_sessions == 0 {
        return Err(Error::invalid("n_sessions must be positive"));
    }

    let members: Vec<Vec<usize>> = {
        let mut m = vec![Vec::new(); cfg.n_categories];
        for i in 0..cfg.n_items {
            m[synthetic_category(i, cfg.n_items, cfg.n_categories)].push(i);
        }
        m
    };
    let vocab = Vocab::from_labels((0..cfg.n_items).map(|i| i.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sessions = Vec::with_capacity(cfg.n_sessions);
    for s in 0..cfg.n_sessions {
        let len = rng.gen_range(min_len..=max_len);
        let mut cat = rng.gen_range(0..cfg.n_categories);
        let mut items = Vec::with_capacity(len);
        items.push(*members[cat].choose(&mut rng).expect("non-empty category"));
        for _ in 1..len {
            if cfg.n_categories > 1 && !rng.gen_bool(cfg.p_same_category) {
                // jump to one of the other categories
                let other = rng.gen_range(0..cfg.n_categories - 1);
                cat = if other >= cat { other + 1 } else { other };
            }
            items.push(*members[cat].choose(&mut rng).expect("non-empty category"));
        }
        sessions.push(Session {
            id: format!("s{s}"),
            items,
        });
    }
    Ok(SessionCorpus { sessions, vocab })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_of(sessions: &[&[&str]]) -> SessionCorpus {
        let mut vocab = Vocab::new();
        let sessions = sessions
            .iter()
            .enumerate()
            .map(|(n, s)| Session {
                id: format!("s{n}"),
                items: s.iter().map(|l| vocab.intern(l)).collect(),
            })
            .collect();
        SessionCorpus { sessions, vocab }
    }

    fn labels(c: &SessionCorpus, s: usize) -> Vec<&str> {
        c.sessions[s].items.iter().map(|&i| c.vocab.label(i).unwrap()).collect()
    }

    #[test]
    fn lines_format_groups_items() {
        let c = parse_sessions("s1\ta,b,c\n", SessionFormat::Lines).unwrap();
        assert_eq!(c.sessions.len(), 1);
        assert_eq!(c.sessions[0].items, vec![0, 1, 2]);
        assert_eq!(c.n_items(), 3);
    }

    #[test]
    fn event_csv_sorts_by_timestamp() {
        let text = "session_id,item_id,timestamp\ns1,a,2\ns1,b,1\n";
        let c = parse_sessions(text, SessionFormat::EventCsv).unwrap();
        assert_eq!(labels(&c, 0), vec!["b", "a"]);
    }

    #[test]
    fn event_csv_merges_non_adjacent_rows() {
        let text = "session_id,item_id,timestamp\ns1,a,5\ns2,x,1\ns1,b,3\ns2,y,2\ns1,c,4\n";
        let c = parse_sessions(text, SessionFormat::EventCsv).unwrap();
        assert_eq!(c.sessions.len(), 2);
        assert_eq!(c.sessions[0].id, "s1");
        assert_eq!(labels(&c, 0), vec!["b", "c", "a"]);
        assert_eq!(labels(&c, 1), vec!["x", "y"]);
    }

    #[test]
    fn malformed_row_names_line() {
        let text = "session_id,item_id,timestamp\ns1,a,1\ns1,b\n";
        match parse_sessions(text, SessionFormat::EventCsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match parse_sessions("s1\ta\nnotab\n", SessionFormat::Lines) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad_ts = "session_id,item_id,timestamp\ns1,a,x\n";
        assert!(matches!(
            parse_sessions(bad_ts, SessionFormat::EventCsv),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn empty_file_is_error() {
        assert!(matches!(
            parse_sessions("", SessionFormat::Lines),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            parse_sessions("session_id,item_id,timestamp\n", SessionFormat::EventCsv),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn preprocess_identity_when_nothing_to_filter() {
        let s: Vec<&[&str]> = (0..5).map(|_| &["a", "b", "c"][..]).collect();
        let c = corpus_of(&s);
        assert_eq!(preprocess(&c, 5, 2).unwrap(), c);
    }

    #[test]
    fn preprocess_everything_removed_is_error() {
        let c = corpus_of(&[&["a", "b"]]);
        assert!(matches!(
            preprocess(&c, 5, 2),
            Err(Error::EmptyAfterPreprocessing)
        ));
    }

    #[test]
    fn preprocess_fixed_point_cascade() {
        // x occurs 4 times -> removed. s0 = [x,y] shrinks to [y] and is dropped,
        // which leaves y with 4 occurrences, so a second pass strips y from s1.
        // z survives with 5 clicks.
        let c = corpus_of(&[
            &["x", "y"],
            &["y", "y", "y", "y", "z", "z", "z"],
            &["x", "x", "x", "z", "z"],
        ]);
        let p = preprocess(&c, 5, 2).unwrap();
        assert_eq!(p.sessions.len(), 2);
        assert_eq!(p.n_items(), 1);
        assert_eq!(labels(&p, 0), vec!["z", "z", "z"]);
        assert_eq!(labels(&p, 1), vec!["z", "z"]);
        assert_eq!(p.sessions[0].id, "s1");
    }

    #[test]
    fn augment_prefixes() {
        let c = corpus_of(&[&["a", "b", "c"], &["a", "b"]]);
        let ex = augment(&c, 19);
        assert_eq!(
            ex,
            vec![
                TrainingExample { prefix: vec![0], target: 1 },
                TrainingExample { prefix: vec![0, 1], target: 2 },
                TrainingExample { prefix: vec![0], target: 1 },
            ]
        );
    }

    #[test]
    fn augment_truncates_long_prefixes() {
        let items: Vec<String> = (0..25).map(|i| i.to_string()).collect();
        let refs: Vec<&str> = items.iter().map(String::as_str).collect();
        let c = corpus_of(&[&refs]);
        let ex = augment(&c, 19);
        assert_eq!(ex.len(), 24);
        let last = ex.last().unwrap();
        assert_eq!(last.prefix, (5..24).collect::<Vec<_>>());
        assert_eq!(last.target, 24);
    }

    #[test]
    fn synthetic_is_deterministic_and_validated() {
        let cfg = SynthConfig {
            n_sessions: 50,
            ..SynthConfig::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let bad = SynthConfig {
            len_range: (1, 4),
            ..cfg.clone()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn synthetic_single_category_pool() {
        let cfg = SynthConfig {
            n_items: 10,
            n_categories: 1,
            p_same_category: 1.0,
            n_sessions: 20,
            ..SynthConfig::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        assert!(c.sessions.iter().all(|s| s.items.iter().all(|&i| i < 10)));
    }

    #[test]
    fn synthetic_within_category_frequency() {
        let cfg = SynthConfig {
            seed: 7,
            n_items: 200,
            n_categories: 5,
            n_sessions: 5000,
            len_range: (2, 10),
            p_same_category: 0.9,
        };
        let c = generate_synthetic(&cfg).unwrap();
        let (mut same, mut total) = (0usize, 0usize);
        for s in &c.sessions {
            for w in s.items.windows(2) {
                total += 1;
                if w[0] / 40 == w[1] / 40 {
                    same += 1;
                }
            }
        }
        let freq = same as f64 / total as f64;
        assert!((freq - 0.9).abs() <= 0.02, "within-category frequency {freq}");
    }

    #[test]
    fn split_is_seeded_partition() {
        let cfg = SynthConfig {
            n_sessions: 100,
            ..SynthConfig::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        let (tr, te) = split_by_session(&c, 0.1, 3).unwrap();
        assert_eq!(te.sessions.len(), 10);
        assert_eq!(tr.sessions.len(), 90);
        assert_eq!(split_by_session(&c, 0.1, 3).unwrap(), (tr, te));
    }
}
