//! Word-match similarity between generated text and a reference caption.
//!
//! Both texts are lower-cased, stripped of punctuation and stop words, and
//! split on whitespace. Reference tokens are then matched one-to-one, greedily
//! and in reference order, to the unused generated token with the highest
//! embedding cosine above the threshold. The score is `100 * M / G` for `M`
//! matched tokens out of `G` reference tokens.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

/// Match threshold applied to cosine similarity.
pub const DEFAULT_THRESHOLD: f64 = 0.6;

const STOPWORDS_TEXT: &str = include_str!("stopwords.txt");

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("cannot read embeddings {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("line {line}: expected {expected} components, found {found}")]
    Dimension { line: usize, expected: usize, found: usize },
    #[error("line {line}: unparseable component `{token}`")]
    BadComponent { line: usize, token: String },
    #[error("embedding file holds no vectors")]
    EmptyStore,
    #[error("vectors differ in dimension ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("reference text has no tokens after preprocessing")]
    EmptyTruth,
    #[error("pair {index}: reference text has no tokens after preprocessing")]
    EmptyTruthAt { index: usize },
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    InvalidThreshold(f64),
    #[error("latency must be non-negative, got {0}")]
    NegativeLatency(f64),
}

fn strip_punctuation(text: &str) -> String {
    text.chars()
        .filter_map(|c| match c {
            '\'' | '\u{2019}' => None,
            c if c.is_alphanumeric() || c.is_whitespace() => Some(c),
            _ => Some(' '),
        })
        .collect()
}

/// The bundled English stop-word list, normalised like tokens.
pub fn default_stopwords() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| stopword_set(STOPWORDS_TEXT.lines()))
}

/// Builds a stop-word set, normalising each entry the way tokens are.
pub fn stopword_set<'a>(words: impl IntoIterator<Item = &'a str>) -> HashSet<String> {
    words
        .into_iter()
        .map(|w| strip_punctuation(&w.trim().to_lowercase()).replace(' ', ""))
        .filter(|w| !w.is_empty())
        .collect()
}

/// Lower-cases, removes punctuation, splits on whitespace and drops stop
/// words. Order and duplicates are kept. Apostrophes are deleted (`don't`
/// becomes `dont`); other punctuation separates tokens.
pub fn preprocess(text: &str, stopwords: &HashSet<String>) -> Vec<String> {
    strip_punctuation(&text.to_lowercase())
        .split_whitespace()
        .filter(|t| !stopwords.contains(*t))
        .map(str::to_string)
        .collect()
}

/// Word vectors of one fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl EmbeddingStore {
    /// Builds a store from in-memory vectors. Words are lower-cased; the first
    /// occurrence of a word wins.
    pub fn from_vectors<I, S>(vectors: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut store: Option<Self> = None;
        for (i, (word, v)) in vectors.into_iter().enumerate() {
            let s = store.get_or_insert_with(|| Self {
                dim: v.len(),
                index: HashMap::new(),
                data: Vec::new(),
            });
            if v.len() != s.dim || v.is_empty() {
                return Err(EvalError::Dimension {
                    line: i + 1,
                    expected: s.dim,
                    found: v.len(),
                });
            }
            s.insert(word.as_ref(), &v);
        }
        store.ok_or(EvalError::EmptyStore)
    }

    fn insert(&mut self, word: &str, v: &[f64]) {
        let word = word.to_lowercase();
        if self.index.contains_key(&word) {
            return;
        }
        self.index.insert(word, self.data.len() / self.dim);
        self.data.extend_from_slice(v);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }
}

/// Parses the plain-text embedding format: one `word c1 .. cd` line per word.
/// With `restrict_to`, only those words are kept (every line is still
/// dimension-checked).
pub fn read_embeddings<R: BufRead>(
    reader: R,
    restrict_to: Option<&HashSet<String>>,
) -> Result<EmbeddingStore, EvalError> {
    let mut store: Option<EmbeddingStore> = None;
    let mut expected: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| EvalError::Io {
            path: format!("line {line_no}"),
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap_or_default();
        let components: Vec<&str> = parts.collect();
        let dim = *expected.get_or_insert(components.len());
        if components.len() != dim || dim == 0 {
            return Err(EvalError::Dimension {
                line: line_no,
                expected: dim,
                found: components.len(),
            });
        }
        let word = word.to_lowercase();
        if restrict_to.is_some_and(|keep| !keep.contains(&word)) {
            continue;
        }
        let v = components
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| EvalError::BadComponent {
                        line: line_no,
                        token: t.to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        store
            .get_or_insert_with(|| EmbeddingStore {
                dim,
                index: HashMap::new(),
                data: Vec::new(),
            })
            .insert(&word, &v);
    }
    store.ok_or(EvalError::EmptyStore)
}

pub fn load_embeddings(path: &Path, restrict_to: Option<&HashSet<String>>) -> Result<EmbeddingStore, EvalError> {
    let file = std::fs::File::open(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    read_embeddings(std::io::BufReader::new(file), restrict_to)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub generated: String,
    pub truth: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub matched: usize,
    pub ground_truth_count: usize,
    pub percentage: f64,
    pub pairs: Vec<MatchedPair>,
}

/// Similarity of two tokens: embedding cosine when both have a usable vector,
/// otherwise 1 for identical strings and no score for anything else.
fn token_similarity(a: &str, b: &str, store: &EmbeddingStore) -> Option<f64> {
    if let (Some(va), Some(vb)) = (store.get(a), store.get(b)) {
        if let Ok(c) = cosine(va, vb) {
            return Some(c);
        }
    }
    (a == b).then_some(1.0)
}

/// Greedy one-to-one matching in reference order. A pair matches only when
/// its similarity is strictly greater than `threshold`; ties go to the
/// earliest generated token.
pub fn match_words(
    generated: &[String],
    truth: &[String],
    store: &EmbeddingStore,
    threshold: f64,
) -> Result<SimilarityResult, EvalError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    if truth.is_empty() {
        return Err(EvalError::EmptyTruth);
    }
    let mut used = vec![false; generated.len()];
    let mut pairs = Vec::new();
    for t in truth {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in generated.iter().enumerate() {
            if used[j] {
                continue;
            }
            let Some(score) = token_similarity(t, g, store) else {
                continue;
            };
            if score > threshold && best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        if let Some((j, score)) = best {
            used[j] = true;
            pairs.push(MatchedPair {
                generated: generated[j].clone(),
                truth: t.clone(),
                cosine: score,
            });
        }
    }
    let matched = pairs.len();
    Ok(SimilarityResult {
        matched,
        ground_truth_count: truth.len(),
        percentage: 100.0 * matched as f64 / truth.len() as f64,
        pairs,
    })
}

/// Preprocesses both texts and scores them.
pub fn score_text(
    generated: &str,
    truth: &str,
    store: &EmbeddingStore,
    stopwords: &HashSet<String>,
    threshold: f64,
) -> Result<SimilarityResult, EvalError> {
    match_words(
        &preprocess(generated, stopwords),
        &preprocess(truth, stopwords),
        store,
        threshold,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchScore {
    pub results: Vec<SimilarityResult>,
    /// Unweighted mean of the per-pair percentages.
    pub mean_percentage: f64,
}

fn check_batch(pairs: &[(String, String)], stopwords: &HashSet<String>, threshold: f64) -> Result<(), EvalError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    if let Some(index) = pairs.iter().position(|(_, t)| preprocess(t, stopwords).is_empty()) {
        return Err(EvalError::EmptyTruthAt { index });
    }
    Ok(())
}

fn finish_batch(results: Vec<Result<SimilarityResult, EvalError>>) -> Result<BatchScore, EvalError> {
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mean_percentage = if results.is_empty() {
        0.0
    } else {
        results.iter().map(|r| r.percentage).sum::<f64>() / results.len() as f64
    };
    Ok(BatchScore {
        results,
        mean_percentage,
    })
}

/// Scores every `(generated, truth)` pair, in parallel when enabled.
pub fn score_batch(
    pairs: &[(String, String)],
    store: &EmbeddingStore,
    stopwords: &HashSet<String>,
    threshold: f64,
) -> Result<BatchScore, EvalError> {
    check_batch(pairs, stopwords, threshold)?;
    finish_batch(par::map(pairs, |(g, t)| score_text(g, t, store, stopwords, threshold)))
}

/// [`score_batch`] on the calling thread only.
pub fn score_batch_sequential(
    pairs: &[(String, String)],
    store: &EmbeddingStore,
    stopwords: &HashSet<String>,
    threshold: f64,
) -> Result<BatchScore, EvalError> {
    check_batch(pairs, stopwords, threshold)?;
    finish_batch(par::map_sequential(pairs, |(g, t)| {
        score_text(g, t, store, stopwords, threshold)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Vision,
    Text,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub count: u64,
    pub total_s: f64,
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl StageStats {
    pub fn record(&mut self, seconds: f64) -> Result<(), EvalError> {
        if !(seconds.is_finite() && seconds >= 0.0) {
            return Err(EvalError::NegativeLatency(seconds));
        }
        if self.count == 0 {
            self.min_s = seconds;
            self.max_s = seconds;
        } else {
            self.min_s = self.min_s.min(seconds);
            self.max_s = self.max_s.max(seconds);
        }
        self.count += 1;
        self.total_s += seconds;
        self.mean_s = self.total_s / self.count as f64;
        Ok(())
    }
}

/// Provider latency per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub vision: StageStats,
    pub text: StageStats,
}

impl TimingStats {
    pub fn stage(&self, stage: Stage) -> &StageStats {
        match stage {
            Stage::Vision => &self.vision,
            Stage::Text => &self.text,
        }
    }

    pub fn record(&mut self, stage: Stage, seconds: f64) -> Result<(), EvalError> {
        match stage {
            Stage::Vision => self.vision.record(seconds),
            Stage::Text => self.text.record(seconds),
        }
    }
}

/// Returns `stats` with one more `stage` sample.
pub fn record_latency(mut stats: TimingStats, stage: Stage, seconds: f64) -> Result<TimingStats, EvalError> {
    stats.record(stage, seconds)?;
    Ok(stats)
}
