//! Fixed-length feature vectors for message sequences.
//!
//! Three kinds of embedder sit behind one interface:
//!
//! * `synthetic` draws a Gaussian blob around a class center. The positive
//!   center is reached in proportion to the fraction of messages carrying
//!   [`SIGNAL_TOKEN`](crate::corpus::SIGNAL_TOKEN), which lets synthetic
//!   conversations ramp up or dilute their signal per window.
//! * `hashing` is a signed bag-of-words hashed into `dimension` buckets and
//!   L2-normalized.
//! * `precomputed` looks vectors up by `(conversation id, message range)`, so
//!   features from an external encoder can be supplied as a CSV file.
//!
//! Embedding is deterministic: any noise is seeded from a hash of the input
//! and the embedder seed.

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Label, Message, Segment};
use crate::error::{ensure_finite, Error, Result};
use crate::rng::SimRng;

pub const DEFAULT_DIMENSION: usize = 768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure_finite(&values, "embedding")?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A contiguous run of messages from one conversation, the unit that gets
/// embedded (a training segment or an inference window).
#[derive(Debug, Clone, Copy)]
pub struct Span<'a> {
    pub conversation_id: &'a str,
    pub messages: &'a [Message],
    /// Class of the source conversation; only the synthetic embedder reads it.
    pub hidden_label: Option<Label>,
}

impl<'a> Span<'a> {
    pub fn from_segment(seg: &'a Segment) -> Self {
        Span {
            conversation_id: &seg.conversation_id,
            messages: &seg.messages,
            hidden_label: Some(seg.label),
        }
    }

    /// Lookup key `id:start-end` with `end` exclusive.
    pub fn key(&self) -> String {
        let start = self.messages.first().map_or(0, |m| m.index);
        let end = self.messages.last().map_or(0, |m| m.index + 1);
        span_key(self.conversation_id, start, end)
    }
}

pub fn span_key(conversation_id: &str, start: usize, end: usize) -> String {
    format!("{conversation_id}:{start}-{end}")
}

fn default_dim() -> usize {
    DEFAULT_DIMENSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderSpec {
    Synthetic {
        #[serde(default = "default_dim")]
        dimension: usize,
        /// Distance between the two class centers.
        separation: f64,
        /// Per-coordinate standard deviation of the blob.
        noise_scale: f64,
        #[serde(default)]
        seed: u64,
    },
    Hashing {
        #[serde(default = "default_dim")]
        dimension: usize,
        #[serde(default)]
        seed: u64,
    },
    Precomputed {
        #[serde(default = "default_dim")]
        dimension: usize,
        path: PathBuf,
    },
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Synthetic {
            dimension: DEFAULT_DIMENSION,
            separation: 8.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl EmbedderSpec {
    pub fn dimension(&self) -> usize {
        match self {
            EmbedderSpec::Synthetic { dimension, .. }
            | EmbedderSpec::Hashing { dimension, .. }
            | EmbedderSpec::Precomputed { dimension, .. } => *dimension,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension() < 2 {
            return Err(Error::invalid("embedder.dimension", "must be at least 2"));
        }
        if let EmbedderSpec::Synthetic {
            separation,
            noise_scale,
            ..
        } = self
        {
            if !(separation.is_finite() && *separation >= 0.0) {
                return Err(Error::invalid("embedder.separation", "must be finite and >= 0"));
            }
            if !(noise_scale.is_finite() && *noise_scale >= 0.0) {
                return Err(Error::invalid("embedder.noise_scale", "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Synthetic {
        direction: Vec<f64>,
        separation: f64,
        noise_scale: f64,
        seed: u64,
    },
    Hashing {
        seed: u64,
    },
    Precomputed(HashMap<String, EmbeddingVector>),
}

/// A constructed embedder; cheap to share across threads.
#[derive(Debug, Clone)]
pub struct Embedder {
    dim: usize,
    kind: Kind,
}

fn seed_hasher(seed: u64) -> Sha256 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h
}

fn digest_u64(h: Sha256) -> u64 {
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

impl Embedder {
    pub fn from_spec(spec: &EmbedderSpec) -> Result<Self> {
        spec.validate()?;
        let dim = spec.dimension();
        let kind = match spec {
            EmbedderSpec::Synthetic {
                separation,
                noise_scale,
                seed,
                ..
            } => {
                let mut h = seed_hasher(*seed);
                h.update(b"class-direction");
                let mut rng = SimRng::seed_from_u64(digest_u64(h));
                let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = l2_norm(&raw);
                Kind::Synthetic {
                    direction: raw.into_iter().map(|x| x / n).collect(),
                    separation: *separation,
                    noise_scale: *noise_scale,
                    seed: *seed,
                }
            }
            EmbedderSpec::Hashing { seed, .. } => Kind::Hashing { seed: *seed },
            EmbedderSpec::Precomputed { path, .. } => {
                let (file_dim, map) = load_precomputed(path)?;
                if file_dim != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: file_dim,
                    });
                }
                Kind::Precomputed(map)
            }
        };
        Ok(Self { dim, kind })
    }

    /// Wrap an in-memory table of vectors.
    pub fn from_table(dim: usize, table: HashMap<String, EmbeddingVector>) -> Result<Self> {
        if let Some(v) = table.values().find(|v| v.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
        Ok(Self {
            dim,
            kind: Kind::Precomputed(table),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, span: &Span<'_>) -> Result<EmbeddingVector> {
        if span.messages.is_empty() {
            return Err(Error::Empty("message list"));
        }
        match &self.kind {
            Kind::Synthetic {
                direction,
                separation,
                noise_scale,
                seed,
            } => {
                let label = span.hidden_label.ok_or_else(|| {
                    Error::invalid("hidden_label", "synthetic embedder requires the source label")
                })?;
                let strength = match label {
                    Label::Negative => 0.0,
                    Label::Positive => {
                        let hits = span.messages.iter().filter(|m| m.carries_signal()).count();
                        hits as f64 / span.messages.len() as f64
                    }
                };
                // centers sit at -sep/2 and +sep/2 along the class direction
                let offset = separation * (strength - 0.5);
                let mut h = seed_hasher(*seed);
                for m in span.messages {
                    h.update(m.author_id.as_bytes());
                    h.update([0x1f]);
                    h.update(m.text.as_bytes());
                    h.update([0x1e]);
                }
                let mut rng = SimRng::seed_from_u64(digest_u64(h));
                let values = direction
                    .iter()
                    .map(|&u| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        u * offset + noise_scale * z
                    })
                    .collect();
                Ok(EmbeddingVector(values))
            }
            Kind::Hashing { seed } => {
                let mut acc = vec![0.0; self.dim];
                for m in span.messages {
                    for tok in m.text.split_whitespace() {
                        let mut h = seed_hasher(*seed);
                        h.update(tok.as_bytes());
                        let x = digest_u64(h);
                        let bucket = (x >> 1) as usize % self.dim;
                        acc[bucket] += if x & 1 == 0 { 1.0 } else { -1.0 };
                    }
                }
                let n = l2_norm(&acc);
                if n == 0.0 {
                    // every token cancelled out (or the text was blank)
                    acc[0] = 1.0;
                } else {
                    acc.iter_mut().for_each(|x| *x /= n);
                }
                Ok(EmbeddingVector(acc))
            }
            Kind::Precomputed(map) => {
                let key = span.key();
                map.get(&key).cloned().ok_or(Error::MissingEmbedding(key))
            }
        }
    }

    pub fn embed_segment(&self, seg: &Segment) -> Result<EmbeddingVector> {
        self.embed(&Span::from_segment(seg))
    }
}

/// Read a precomputed-embedding CSV: header `key,<dim>`, then rows
/// `key,v1,...,v_dim`. Returns the declared dimension and the table.
pub fn load_precomputed(path: &Path) -> Result<(usize, HashMap<String, EmbeddingVector>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_precomputed(file)
}

pub fn read_precomputed<R: Read>(reader: R) -> Result<(usize, HashMap<String, EmbeddingVector>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let header = records
        .next()
        .ok_or_else(|| parse_err(1, "missing header `key,<dim>`".into()))?
        .map_err(|e| parse_err(1, e.to_string()))?;
    if header.len() != 2 || header.get(0) != Some("key") {
        return Err(parse_err(1, "header must be `key,<dim>`".into()));
    }
    let dim: usize = header[1]
        .trim()
        .parse()
        .map_err(|_| parse_err(1, format!("bad dimension `{}`", &header[1])))?;
    let mut map = HashMap::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != dim + 1 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: rec.len().saturating_sub(1),
            });
        }
        let values = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(line, format!("bad number `{s}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let v = EmbeddingVector::new(values)
            .map_err(|_| Error::NonFinite(format!("precomputed row {line}")))?;
        if map.insert(rec[0].to_string(), v).is_some() {
            return Err(parse_err(line, format!("duplicate key `{}`", &rec[0])));
        }
    }
    Ok((dim, map))
}
