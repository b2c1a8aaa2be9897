//! Conversation data: parsing, segmentation, splitting, synthesis and
//! minority-class oversampling.
//!
//! A conversation stands for one user. Every operation here is a pure
//! function of its inputs and an explicit seed.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};

/// Maximum number of messages in a training segment.
pub const MAX_SEGMENT_LEN: usize = 150;

/// Placeholder token marking a message that carries the positive-class signal
/// in synthetic corpora.
pub const SIGNAL_TOKEN: &str = "<risk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Negative => 0.0,
            Label::Positive => 1.0,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(Error::invalid("label", format!("expected 0 or 1, got {other}"))),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::try_from(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub author_id: String,
    pub text: String,
    /// 0-based position in the conversation.
    pub index: usize,
}

impl Message {
    pub fn carries_signal(&self) -> bool {
        self.text.split_whitespace().any(|t| t == SIGNAL_TOKEN)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub label: Label,
    pub messages: Vec<Message>,
}

impl Conversation {
    /// Build a conversation, assigning contiguous message indices.
    pub fn new(
        id: impl Into<String>,
        label: Label,
        messages: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let id = id.into();
        let messages: Vec<Message> = messages
            .into_iter()
            .enumerate()
            .map(|(index, (author_id, text))| Message {
                author_id,
                text,
                index,
            })
            .collect();
        if messages.is_empty() {
            return Err(Error::invalid(
                format!("conversation `{id}`"),
                "message list is empty",
            ));
        }
        Ok(Self {
            id,
            label,
            messages,
        })
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// A training unit of at most [`MAX_SEGMENT_LEN`] consecutive messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub conversation_id: String,
    pub seq_no: usize,
    pub label: Label,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub warmup: Vec<Segment>,
    pub train: Vec<Conversation>,
    pub validation: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMessage {
    author: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: Label,
    messages: Vec<RecordMessage>,
}

/// Read line-delimited conversation records. Blank lines are skipped.
pub fn parse_conversations<R: BufRead>(reader: R) -> Result<Vec<Conversation>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        let conv = Conversation::new(
            rec.id,
            rec.label,
            rec.messages.into_iter().map(|m| (m.author, m.text)),
        )
        .map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(conv);
    }
    Ok(out)
}

/// Write conversations in the format read by [`parse_conversations`].
pub fn write_conversations<W: Write>(mut w: W, convs: &[Conversation]) -> Result<()> {
    for c in convs {
        let rec = Record {
            id: c.id.clone(),
            label: c.label,
            messages: c
                .messages
                .iter()
                .map(|m| RecordMessage {
                    author: m.author_id.clone(),
                    text: m.text.clone(),
                })
                .collect(),
        };
        let line = serde_json::to_string(&rec).map_err(|source| Error::Json {
            context: format!("conversation `{}`", c.id),
            source,
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io("conversation output", e))?;
    }
    Ok(())
}

/// Greedy chunking into segments of `max_len` messages; only the last segment
/// may be shorter.
pub fn segment(conv: &Conversation, max_len: usize) -> Result<Vec<Segment>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len", "must be at least 1"));
    }
    Ok(conv
        .messages
        .chunks(max_len)
        .enumerate()
        .map(|(seq_no, chunk)| Segment {
            conversation_id: conv.id.clone(),
            seq_no,
            label: conv.label,
            messages: chunk.to_vec(),
        })
        .collect())
}

pub fn segment_all(convs: &[Conversation], max_len: usize) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for c in convs {
        out.extend(segment(c, max_len)?);
    }
    Ok(out)
}

/// Fractions of the input assigned to each part; the training set takes the
/// remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub warmup: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            warmup: 0.10,
            validation: 0.09,
            test: 0.0,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("warmup", self.warmup),
            ("validation", self.validation),
            ("test", self.test),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid(
                    format!("split ratio {name}"),
                    format!("{r} not in [0, 1)"),
                ));
            }
        }
        if self.warmup <= 0.0 {
            return Err(Error::invalid("split ratio warmup", "must be positive"));
        }
        if self.warmup + self.validation + self.test >= 1.0 {
            return Err(Error::invalid("split ratios", "leave no room for training"));
        }
        Ok(())
    }
}

/// Allocate `total` items among groups proportionally to `sizes` by largest
/// remainder. Ties go to the earlier group.
fn apportion(total: usize, sizes: &[usize], ratio: f64) -> Vec<usize> {
    let quotas: Vec<f64> = sizes.iter().map(|&n| n as f64 * ratio).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = alloc.iter().sum();
    for &g in order.iter().cycle().take(sizes.len() * 2) {
        if assigned >= total {
            break;
        }
        if alloc[g] < sizes[g] {
            alloc[g] += 1;
            assigned += 1;
        }
    }
    alloc
}

/// Stratified, user-disjoint split into warm-up, train, validation (and
/// optionally test) parts.
///
/// Warm-up conversations are segmented and then label-balanced by
/// downsampling the majority label.
pub fn split_dataset(
    convs: &[Conversation],
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    let mut pos: Vec<&Conversation> = convs.iter().filter(|c| c.label.is_positive()).collect();
    let mut neg: Vec<&Conversation> = convs.iter().filter(|c| !c.label.is_positive()).collect();
    if pos.len() < 10 || neg.len() < 10 {
        return Err(Error::Insufficient(format!(
            "split needs at least 10 conversations per class, got {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = rng_from(seed, &[tag::SPLIT]);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let n = convs.len();
    let sizes = [pos.len(), neg.len()];
    let target = |r: f64| (n as f64 * r).round() as usize;
    let warm = apportion(target(ratios.warmup), &sizes, ratios.warmup);
    let val = apportion(target(ratios.validation), &sizes, ratios.validation);
    let test = apportion(target(ratios.test), &sizes, ratios.test);

    let mut split = DatasetSplit::default();
    let mut warm_convs = Vec::new();
    for (g, group) in [pos, neg].into_iter().enumerate() {
        let (w, v, t) = (warm[g], val[g], test[g]);
        if w == 0 || w + v + t >= group.len() {
            return Err(Error::Insufficient(
                "too few conversations to populate every part of the split".into(),
            ));
        }
        let mut it = group.into_iter().cloned();
        warm_convs.extend(it.by_ref().take(w));
        split.validation.extend(it.by_ref().take(v));
        split.test.extend(it.by_ref().take(t));
        split.train.extend(it);
    }
    if ratios.validation > 0.0 && split.validation.is_empty() {
        return Err(Error::Insufficient("validation part would be empty".into()));
    }

    let segs = segment_all(&warm_convs, MAX_SEGMENT_LEN)?;
    let (mut wpos, mut wneg): (Vec<Segment>, Vec<Segment>) =
        segs.into_iter().partition(|s| s.label.is_positive());
    let keep = wpos.len().min(wneg.len());
    wpos.shuffle(&mut rng);
    wneg.shuffle(&mut rng);
    wpos.truncate(keep);
    wneg.truncate(keep);
    split.warmup = wpos.into_iter().chain(wneg).collect();
    Ok(split)
}

/// Message-count distribution for one class, parameterised by mean and
/// standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDist {
    pub mean: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub n_positive: usize,
    pub n_negative: usize,
    pub positive_messages: LengthDist,
    pub negative_messages: LengthDist,
    /// Probability that a message of a positive conversation carries the
    /// class signal.
    pub signal_rate: f64,
    pub vocab_size: usize,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        // ~9% positives; negatives are short single-segment chats, positives
        // are full multi-segment conversations.
        Self {
            n_positive: 300,
            n_negative: 3000,
            positive_messages: LengthDist {
                mean: 220.0,
                spread: 90.0,
            },
            negative_messages: LengthDist {
                mean: 36.0,
                spread: 25.0,
            },
            signal_rate: 0.8,
            vocab_size: 5000,
            id_prefix: "c".into(),
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_positive == 0 || self.n_negative == 0 {
            return Err(Error::invalid("corpus counts", "n_positive and n_negative must be >= 1"));
        }
        for (name, d) in [("positive_messages", self.positive_messages), ("negative_messages", self.negative_messages)] {
            if !(d.mean >= 1.0 && d.mean.is_finite()) || !(d.spread > 0.0 && d.spread.is_finite()) {
                return Err(Error::invalid(name, "mean must be >= 1 and spread > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.signal_rate) {
            return Err(Error::invalid("signal_rate", "must be in [0, 1]"));
        }
        if self.vocab_size == 0 {
            return Err(Error::invalid("vocab_size", "must be >= 1"));
        }
        Ok(())
    }
}

fn sample_length<R: Rng>(d: LengthDist, rng: &mut R) -> usize {
    let shape = (d.mean / d.spread).powi(2);
    let scale = d.spread * d.spread / d.mean;
    let g = Gamma::new(shape, scale).expect("validated gamma parameters");
    (g.sample(rng).round() as usize).max(1)
}

/// Generate a labeled corpus of placeholder-token conversations. Positives
/// come first, then negatives.
pub fn generate_synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<Vec<Conversation>> {
    cfg.validate()?;
    let total = cfg.n_positive + cfg.n_negative;
    let width = total.to_string().len();
    let mut out = Vec::with_capacity(total);
    for k in 0..total {
        let label = if k < cfg.n_positive {
            Label::Positive
        } else {
            Label::Negative
        };
        let mut rng = rng_from(cfg.seed, &[tag::CORPUS, k as u64]);
        let dist = if label.is_positive() {
            cfg.positive_messages
        } else {
            cfg.negative_messages
        };
        let len = sample_length(dist, &mut rng);
        let id = format!("{}{:0width$}", cfg.id_prefix, k);
        let authors = [format!("{id}-a"), format!("{id}-b")];
        let messages = (0..len).map(|i| {
            let n_tokens = rng.random_range(3..=8);
            let mut text = (0..n_tokens)
                .map(|_| format!("w{}", rng.random_range(0..cfg.vocab_size)))
                .collect::<Vec<_>>()
                .join(" ");
            if label.is_positive() && rng.random_bool(cfg.signal_rate) {
                text.push(' ');
                text.push_str(SIGNAL_TOKEN);
            }
            (authors[i % 2].clone(), text)
        });
        out.push(Conversation::new(id, label, messages.collect::<Vec<_>>())?);
    }
    Ok(out)
}

/// Prefix chunks of every positive conversation at lengths `step`, `2*step`,
/// ... and finally the full length, each segmented. Negatives contribute
/// nothing.
pub fn oversample_prefixes(convs: &[Conversation], step: usize) -> Result<Vec<Segment>> {
    if step == 0 {
        return Err(Error::invalid("oversample step", "must be at least 1"));
    }
    let mut out = Vec::new();
    for c in convs.iter().filter(|c| c.label.is_positive()) {
        let n = c.len();
        let mut lengths: Vec<usize> = (1..).map(|k| k * step).take_while(|&l| l < n).collect();
        lengths.push(n);
        for l in lengths {
            let prefix = Conversation {
                id: c.id.clone(),
                label: c.label,
                messages: c.messages[..l].to_vec(),
            };
            out.extend(segment(&prefix, MAX_SEGMENT_LEN)?);
        }
    }
    Ok(out)
}

/// Lower median of per-conversation message counts.
pub fn median_messages(convs: &[Conversation]) -> Result<usize> {
    if convs.is_empty() {
        return Err(Error::Empty("conversation list"));
    }
    let mut counts: Vec<usize> = convs.iter().map(Conversation::len).collect();
    counts.sort_unstable();
    Ok(counts[(counts.len() - 1) / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conv(id: &str, label: Label, n: usize) -> Conversation {
        Conversation::new(
            id,
            label,
            (0..n).map(|i| (format!("a{}", i % 2), format!("m{i}"))),
        )
        .unwrap()
    }

    fn corpus(n_pos: usize, n_neg: usize) -> Vec<Conversation> {
        (0..n_pos)
            .map(|i| conv(&format!("p{i}"), Label::Positive, 30))
            .chain((0..n_neg).map(|i| conv(&format!("n{i}"), Label::Negative, 20)))
            .collect()
    }

    #[test]
    fn parse_single_record() {
        let line = r#"{"id":"x","label":1,"messages":[{"author":"a","text":"hi"},{"author":"b","text":"yo"},{"author":"a","text":"ok"}]}"#;
        let convs = parse_conversations(line.as_bytes()).unwrap();
        assert_eq!(convs.len(), 1);
        assert_eq!(convs[0].label, Label::Positive);
        assert_eq!(convs[0].messages.len(), 3);
        assert_eq!(convs[0].messages.iter().map(|m| m.index).collect::<Vec<_>>(), [0, 1, 2]);
        assert_eq!(convs[0].messages[1].author_id, "b");
    }

    #[test]
    fn parse_rejects_empty_messages() {
        let line = r#"{"id":"x","label":0,"messages":[]}"#;
        assert!(matches!(
            parse_conversations(line.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn parse_rejects_duplicate_ids() {
        let text = "{\"id\":\"x\",\"label\":0,\"messages\":[{\"author\":\"a\",\"text\":\"t\"}]}\n\
                    {\"id\":\"x\",\"label\":1,\"messages\":[{\"author\":\"a\",\"text\":\"t\"}]}\n";
        assert!(matches!(
            parse_conversations(text.as_bytes()),
            Err(Error::DuplicateId(id)) if id == "x"
        ));
    }

    #[test]
    fn parse_names_malformed_line() {
        let text = "{\"id\":\"x\",\"label\":0,\"messages\":[{\"author\":\"a\",\"text\":\"t\"}]}\n{not json\n";
        match parse_conversations(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad_label = r#"{"id":"x","label":2,"messages":[{"author":"a","text":"t"}]}"#;
        assert!(parse_conversations(bad_label.as_bytes()).is_err());
    }

    #[test]
    fn write_then_parse_is_identity() {
        let convs = corpus(2, 3);
        let mut buf = Vec::new();
        write_conversations(&mut buf, &convs).unwrap();
        assert_eq!(parse_conversations(buf.as_slice()).unwrap(), convs);
    }

    #[test]
    fn segment_boundaries() {
        let lens = |n| {
            segment(&conv("c", Label::Positive, n), 150)
                .unwrap()
                .iter()
                .map(|s| s.messages.len())
                .collect::<Vec<_>>()
        };
        assert_eq!(lens(150), [150]);
        assert_eq!(lens(151), [150, 1]);
        assert_eq!(lens(40), [40]);
        assert!(segment(&conv("c", Label::Positive, 3), 0).is_err());
    }

    #[test]
    fn split_counts_100() {
        let convs = corpus(10, 90);
        let s = split_dataset(&convs, &SplitRatios::default(), 3).unwrap();
        assert_eq!(s.train.len(), 81);
        assert_eq!(s.validation.len(), 9);
        // 10 warm-up conversations: 1 positive, 9 negative, one segment each,
        // balanced down to 1 + 1 segments.
        assert_eq!(s.warmup.len(), 2);

        let even = corpus(50, 50);
        let s = split_dataset(&even, &SplitRatios::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (81, 9));
        assert_eq!(s.warmup.len(), 10);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let convs = corpus(20, 180);
        let a = split_dataset(&convs, &SplitRatios::default(), 11).unwrap();
        let b = split_dataset(&convs, &SplitRatios::default(), 11).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&convs, &SplitRatios::default(), 12).unwrap();
        assert_ne!(a.train, c.train);

        let mut ids: Vec<&str> = a
            .train
            .iter()
            .chain(&a.validation)
            .chain(&a.test)
            .map(|c| c.id.as_str())
            .collect();
        let warm_ids: HashSet<&str> = a.warmup.iter().map(|s| s.conversation_id.as_str()).collect();
        assert!(ids.iter().all(|id| !warm_ids.contains(id)));
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), a.train.len() + a.validation.len());
        assert!(a.warmup.iter().any(|s| s.label.is_positive()));
    }

    #[test]
    fn split_with_test_ratio() {
        let convs = corpus(40, 160);
        let ratios = SplitRatios {
            test: 0.4,
            ..Default::default()
        };
        let s = split_dataset(&convs, &ratios, 1).unwrap();
        assert_eq!(s.test.len(), 80);
        assert_eq!(s.validation.len(), 18);
        assert_eq!(s.train.len(), 200 - 80 - 18 - 20);
    }

    #[test]
    fn split_rejects_tiny_input() {
        let convs = corpus(2, 1);
        assert!(matches!(
            split_dataset(&convs, &SplitRatios::default(), 0),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn warmup_is_balanced() {
        let mut convs = corpus(0, 180);
        convs.extend((0..20).map(|i| conv(&format!("long{i}"), Label::Positive, 400)));
        let s = split_dataset(&convs, &SplitRatios::default(), 5).unwrap();
        let n_pos = s.warmup.iter().filter(|x| x.label.is_positive()).count();
        assert_eq!(n_pos * 2, s.warmup.len());
        assert!(n_pos > 0);
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let cfg = SyntheticCorpusConfig {
            n_positive: 10,
            n_negative: 90,
            seed: 1,
            ..Default::default()
        };
        let a = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.iter().filter(|c| c.label.is_positive()).count(), 10);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_conversations(&mut ba, &a).unwrap();
        write_conversations(&mut bb, &generate_synthetic_corpus(&cfg).unwrap()).unwrap();
        assert_eq!(ba, bb);
        assert!(a.iter().filter(|c| !c.label.is_positive()).all(|c| !c.messages.iter().any(Message::carries_signal)));
    }

    #[test]
    fn synthetic_length_means() {
        let cfg = SyntheticCorpusConfig {
            n_positive: 1000,
            n_negative: 1000,
            seed: 7,
            ..Default::default()
        };
        let convs = generate_synthetic_corpus(&cfg).unwrap();
        let mean = |label: Label| {
            let v: Vec<usize> = convs.iter().filter(|c| c.label == label).map(Conversation::len).collect();
            v.iter().sum::<usize>() as f64 / v.len() as f64
        };
        let pm = mean(Label::Positive);
        let nm = mean(Label::Negative);
        assert!((pm / cfg.positive_messages.mean - 1.0).abs() < 0.2, "{pm}");
        assert!((nm / cfg.negative_messages.mean - 1.0).abs() < 0.2, "{nm}");
        assert!(pm > nm);
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let cfg = SyntheticCorpusConfig {
            n_positive: 0,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic_corpus(&cfg), Err(Error::Invalid { .. })));
    }

    #[test]
    fn oversampling() {
        let one = vec![conv("p", Label::Positive, 100)];
        let segs = oversample_prefixes(&one, 50).unwrap();
        assert_eq!(segs.iter().map(|s| s.messages.len()).collect::<Vec<_>>(), [50, 100]);

        let negs = vec![conv("n", Label::Negative, 100)];
        assert!(oversample_prefixes(&negs, 10).unwrap().is_empty());

        let short = vec![conv("p", Label::Positive, 30)];
        let segs = oversample_prefixes(&short, 50).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].messages.len(), 30);

        let long = vec![conv("p", Label::Positive, 320)];
        let segs = oversample_prefixes(&long, 200).unwrap();
        // prefixes of 200 and 320, segmented at 150
        assert_eq!(segs.iter().map(|s| s.messages.len()).collect::<Vec<_>>(), [150, 50, 150, 150, 20]);
    }

    #[test]
    fn medians() {
        let with = |ns: &[usize]| {
            let cs: Vec<_> = ns.iter().enumerate().map(|(i, &n)| conv(&i.to_string(), Label::Negative, n)).collect();
            median_messages(&cs).unwrap()
        };
        assert_eq!(with(&[10, 20, 30]), 20);
        assert_eq!(with(&[20, 10]), 10);
        assert_eq!(with(&[7]), 7);
        assert!(median_messages(&[]).is_err());
    }

    proptest! {
        #[test]
        fn segments_concatenate_to_conversation(n in 1usize..700, max_len in 1usize..200) {
            let c = conv("c", Label::Positive, n);
            let segs = segment(&c, max_len).unwrap();
            prop_assert!(segs.iter().all(|s| !s.messages.is_empty() && s.messages.len() <= max_len));
            prop_assert!(segs.iter().enumerate().all(|(i, s)| s.seq_no == i));
            let joined: Vec<Message> = segs.into_iter().flat_map(|s| s.messages).collect();
            prop_assert_eq!(joined, c.messages);
        }

        #[test]
        fn split_partitions_input(n_pos in 10usize..40, n_neg in 10usize..120, seed in any::<u64>()) {
            let convs = corpus(n_pos, n_neg);
            let s = split_dataset(&convs, &SplitRatios::default(), seed).unwrap();
            let warm_ids: HashSet<String> = s.warmup.iter().map(|x| x.conversation_id.clone()).collect();
            let rest: Vec<&Conversation> = s.train.iter().chain(&s.validation).collect();
            let rest_ids: HashSet<&str> = rest.iter().map(|c| c.id.as_str()).collect();
            prop_assert_eq!(rest_ids.len(), rest.len());
            prop_assert!(warm_ids.iter().all(|id| !rest_ids.contains(id.as_str())));
            // warm-up conversations are exactly the ones missing from the rest
            let warm_n = n_pos + n_neg - rest.len();
            prop_assert_eq!(warm_n, ((n_pos + n_neg) as f64 * 0.1).round() as usize);
        }
    }
}
