//! Case corpus: per-article outcomes, citation lists, split assignment,
//! JSON-lines persistence, precedent filtering, and embedding resolution.
//!
//! A corpus file starts with a header line declaring the article set, followed
//! by one JSON object per case:
//!
//! ```text
//! {"num_articles": 4, "article_names": ["art-1", ...]}
//! {"id": "c1", "split": "train", "outcomes": ["0", "+", "-", "0"], "cites": [], ...}
//! ```
//!
//! Outcomes are `"+"` (claimed, violation found), `"-"` (claimed, no
//! violation), and `"0"` (not claimed). Article positions are 0-indexed
//! everywhere in this crate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::citegraph::CitationNetwork;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema violation{}: {message}", id.as_deref().map(|i| format!(" in case {i}")).unwrap_or_default())]
    Schema { id: Option<String>, message: String },
    #[error("case {id}: embedding unusable ({reason})")]
    DanglingEmbedding { id: String, reason: String },
    #[error("{split} split is empty")]
    EmptySplit { split: Split },
    #[error("case {id} has neither facts text nor an embedding")]
    NoRepresentation { id: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-article outcome of a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Outcome {
    /// Claimed and a violation was found.
    Pos,
    /// Claimed and no violation was found.
    Neg,
    /// Not claimed.
    Null,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Pos => "+",
            Outcome::Neg => "-",
            Outcome::Null => "0",
        }
    }

    pub fn claimed(self) -> bool {
        self != Outcome::Null
    }
}

impl Serialize for Outcome {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        match raw.as_str() {
            "+" => Ok(Outcome::Pos),
            "-" => Ok(Outcome::Neg),
            "0" => Ok(Outcome::Null),
            other => Err(D::Error::custom(format!(
                "outcome must be \"+\", \"-\" or \"0\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facts_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub outcomes: Vec<Outcome>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub cites: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

impl Case {
    /// Indices of the articles the case actually raises (outcome not `"0"`).
    pub fn claimed_articles(&self) -> BTreeSet<usize> {
        self.outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| o.claimed())
            .map(|(k, _)| k)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    num_articles: usize,
    article_names: Vec<String>,
    /// Provenance annotation; readers ignore it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseRecord {
    id: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    facts_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    outcomes: Vec<Outcome>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    cites: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    date: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub num_articles: usize,
    pub article_names: Vec<String>,
    pub train: Vec<Case>,
    pub validation: Vec<Case>,
    pub test: Vec<Case>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Case] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Map from case id to its (split, position-within-split).
    pub fn index(&self) -> BTreeMap<&str, (Split, usize)> {
        let mut map = BTreeMap::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            for (i, case) in self.split(split).iter().enumerate() {
                map.insert(case.id.as_str(), (split, i));
            }
        }
        map
    }

    pub fn cases(&self) -> impl Iterator<Item = (Split, &Case)> {
        [Split::Train, Split::Validation, Split::Test]
            .into_iter()
            .flat_map(|s| self.split(s).iter().map(move |c| (s, c)))
    }

    /// Dimension of the stored embeddings, if any case carries one.
    pub fn embedding_dim(&self) -> Option<usize> {
        self.cases()
            .find_map(|(_, c)| c.embedding.as_ref().map(Vec::len))
    }

    /// Structural checks shared by load and the generators. With
    /// `strict_test_citations` set, a test case citing another test case is
    /// rejected instead of tolerated.
    pub fn validate(&self, strict_test_citations: bool) -> Result<(), CorpusError> {
        if self.article_names.len() != self.num_articles {
            return Err(CorpusError::Schema {
                id: None,
                message: format!(
                    "article_names has {} entries for num_articles = {}",
                    self.article_names.len(),
                    self.num_articles
                ),
            });
        }
        if self.train.is_empty() {
            return Err(CorpusError::EmptySplit { split: Split::Train });
        }
        if self.test.is_empty() {
            return Err(CorpusError::EmptySplit { split: Split::Test });
        }
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        let mut dim: Option<(usize, &str)> = None;
        for (split, case) in self.cases() {
            if let Some(first) = seen.insert(&case.id, split) {
                return Err(CorpusError::Schema {
                    id: Some(case.id.clone()),
                    message: format!("duplicate id (first seen in {first} split)"),
                });
            }
            if case.outcomes.len() != self.num_articles {
                return Err(CorpusError::Schema {
                    id: Some(case.id.clone()),
                    message: format!(
                        "outcome vector has length {}, corpus has {} articles",
                        case.outcomes.len(),
                        self.num_articles
                    ),
                });
            }
            if case.facts_text.is_none() && case.embedding.is_none() {
                return Err(CorpusError::NoRepresentation { id: case.id.clone() });
            }
            if case.cites.contains(&case.id) {
                return Err(CorpusError::Schema {
                    id: Some(case.id.clone()),
                    message: "case cites itself".into(),
                });
            }
            if let Some(emb) = &case.embedding {
                match dim {
                    None => dim = Some((emb.len(), &case.id)),
                    Some((d, first_id)) if emb.len() != d => {
                        return Err(CorpusError::DanglingEmbedding {
                            id: case.id.clone(),
                            reason: format!(
                                "dimension {} does not match {} from case {first_id}",
                                emb.len(),
                                d
                            ),
                        });
                    }
                    _ => {}
                }
            }
        }
        if strict_test_citations {
            let test_ids: BTreeSet<&str> = self.test.iter().map(|c| c.id.as_str()).collect();
            for case in &self.test {
                if let Some(cited) = case.cites.iter().find(|c| test_ids.contains(c.as_str())) {
                    return Err(CorpusError::Schema {
                        id: Some(case.id.clone()),
                        message: format!("test case cites test case {cited}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Sidecar embedding table keyed by case id.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    entries: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreRecord {
    id: String,
    embedding: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, embedding: Vec<f64>) {
        self.entries.insert(id.into(), embedding);
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads a JSON-lines file of `{"id": ..., "embedding": [...]}` records.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let reader = BufReader::new(File::open(path)?);
        let mut store = Self::new();
        let mut dim = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: StoreRecord =
                serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            match dim {
                None => dim = Some(record.embedding.len()),
                Some(d) if d != record.embedding.len() => {
                    return Err(CorpusError::DanglingEmbedding {
                        id: record.id,
                        reason: format!(
                            "store dimension {} differs from earlier entries ({d})",
                            record.embedding.len()
                        ),
                    });
                }
                _ => {}
            }
            if store.entries.insert(record.id.clone(), record.embedding).is_some() {
                return Err(CorpusError::Schema {
                    id: Some(record.id),
                    message: "duplicate id in embedding store".into(),
                });
            }
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions<'a> {
    pub store: Option<&'a EmbeddingStore>,
    pub strict_test_citations: bool,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    load_corpus_opts(path, LoadOptions::default())
}

pub fn load_corpus_opts(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Corpus, CorpusError> {
    read_corpus(BufReader::new(File::open(path)?), opts)
}

/// Parses the JSON-lines corpus format, preserving in-file case order within
/// each split. A sidecar store, when given, counts as representation for
/// cases that carry no inline embedding and no text.
pub fn read_corpus<R: BufRead>(reader: R, opts: LoadOptions) -> Result<Corpus, CorpusError> {
    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                    line: i + 1,
                    message: format!("bad header: {e}"),
                })?;
            }
            None => {
                return Err(CorpusError::Parse {
                    line: 1,
                    message: "empty corpus file".into(),
                })
            }
        }
    };

    let mut corpus = Corpus {
        num_articles: header.num_articles,
        article_names: header.article_names,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };

    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CaseRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let case = Case {
            id: record.id,
            facts_text: record.facts_text,
            embedding: record.embedding,
            outcomes: record.outcomes,
            cites: record.cites,
            date: record.date,
        };
        match record.split {
            Split::Train => corpus.train.push(case),
            Split::Validation => corpus.validation.push(case),
            Split::Test => corpus.test.push(case),
        }
    }

    // Cases represented only through the sidecar store would fail the
    // inline representation check; patch the check by consulting the store.
    let store = opts.store;
    for (_, case) in corpus.cases() {
        if case.facts_text.is_none() && case.embedding.is_none() {
            match store {
                Some(s) if s.get(&case.id).is_some() => {}
                Some(_) => {
                    return Err(CorpusError::DanglingEmbedding {
                        id: case.id.clone(),
                        reason: "not present in the embedding store".into(),
                    })
                }
                None => return Err(CorpusError::NoRepresentation { id: case.id.clone() }),
            }
        }
    }
    validate_with_store(&corpus, opts.strict_test_citations)?;
    Ok(corpus)
}

// validate() rejects cases with no inline representation; when a store is in
// play that rejection has already been handled above, so run the remaining
// checks on a corpus where representation is guaranteed.
fn validate_with_store(corpus: &Corpus, strict: bool) -> Result<(), CorpusError> {
    match corpus.validate(strict) {
        Err(CorpusError::NoRepresentation { .. }) => Ok(()),
        other => other,
    }
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_corpus(corpus, &mut writer)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, writer: &mut W) -> Result<(), CorpusError> {
    write_corpus_stamped(corpus, writer, None)
}

/// Like `write_corpus`, with an optional provenance stamp carried in the
/// header. Stamped files load with the same reader.
pub fn write_corpus_stamped<W: Write>(
    corpus: &Corpus,
    writer: &mut W,
    config_hash: Option<&str>,
) -> Result<(), CorpusError> {
    let header = Header {
        num_articles: corpus.num_articles,
        article_names: corpus.article_names.clone(),
        config_hash: config_hash.map(str::to_string),
    };
    serde_json::to_writer(&mut *writer, &header).map_err(io_from_json)?;
    writer.write_all(b"\n")?;
    for (split, case) in corpus.cases() {
        let record = CaseRecord {
            id: case.id.clone(),
            split,
            facts_text: case.facts_text.clone(),
            embedding: case.embedding.clone(),
            outcomes: case.outcomes.clone(),
            cites: case.cites.clone(),
            date: case.date.clone(),
        };
        serde_json::to_writer(&mut *writer, &record).map_err(io_from_json)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

fn io_from_json(e: serde_json::Error) -> CorpusError {
    CorpusError::Io(std::io::Error::other(e))
}

/// Which citations keep a training case alive during filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CitedBy {
    /// Only citations from surviving test cases count. This is the mode that
    /// guarantees every surviving training case is a precedent of at least
    /// one test case, and the default.
    #[default]
    TestSplit,
    /// Citations from any surviving case count.
    AnySplit,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub corpus: Corpus,
    pub removed_train: Vec<String>,
    pub removed_test: Vec<String>,
    pub rounds: usize,
}

/// Restricts the corpus to cases that participate in precedent: training
/// cases must be cited, test cases must cite surviving training cases.
/// Removal cascades to a fixpoint; the validation split is never touched.
pub fn filter_for_precedent(
    corpus: &Corpus,
    network: &CitationNetwork,
    cited_by: CitedBy,
) -> Result<FilterOutcome, CorpusError> {
    let train_ids: BTreeSet<&str> = corpus.train.iter().map(|c| c.id.as_str()).collect();

    let mut train_alive: BTreeMap<&str, bool> =
        corpus.train.iter().map(|c| (c.id.as_str(), true)).collect();
    let mut test_alive: BTreeMap<&str, bool> =
        corpus.test.iter().map(|c| (c.id.as_str(), true)).collect();

    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut changed = false;

        for case in &corpus.train {
            if !train_alive[case.id.as_str()] {
                continue;
            }
            let cited = network.citers_of(&case.id).any(|citing| {
                match cited_by {
                    CitedBy::TestSplit => test_alive.get(citing).copied().unwrap_or(false),
                    CitedBy::AnySplit => {
                        test_alive.get(citing).copied().unwrap_or(false)
                            || train_alive.get(citing).copied().unwrap_or(false)
                            || corpus.validation.iter().any(|v| v.id == citing)
                    }
                }
            });
            if !cited {
                train_alive.insert(&case.id, false);
                changed = true;
            }
        }

        for case in &corpus.test {
            if !test_alive[case.id.as_str()] {
                continue;
            }
            let cites_train = network
                .cites_of(&case.id)
                .any(|cited| train_ids.contains(cited) && train_alive[cited]);
            if !cites_train {
                test_alive.insert(&case.id, false);
                changed = true;
            }
        }

        if !changed {
            break;
        }
    }

    let keep_train: Vec<Case> = corpus
        .train
        .iter()
        .filter(|c| train_alive[c.id.as_str()])
        .cloned()
        .collect();
    let keep_test: Vec<Case> = corpus
        .test
        .iter()
        .filter(|c| test_alive[c.id.as_str()])
        .cloned()
        .collect();

    if keep_train.is_empty() {
        return Err(CorpusError::EmptySplit { split: Split::Train });
    }
    if keep_test.is_empty() {
        return Err(CorpusError::EmptySplit { split: Split::Test });
    }

    Ok(FilterOutcome {
        removed_train: corpus
            .train
            .iter()
            .filter(|c| !train_alive[c.id.as_str()])
            .map(|c| c.id.clone())
            .collect(),
        removed_test: corpus
            .test
            .iter()
            .filter(|c| !test_alive[c.id.as_str()])
            .map(|c| c.id.clone())
            .collect(),
        corpus: Corpus {
            num_articles: corpus.num_articles,
            article_names: corpus.article_names.clone(),
            train: keep_train,
            validation: corpus.validation.clone(),
            test: keep_test,
        },
        rounds,
    })
}

/// Deterministic bag-of-tokens fallback encoder: unigram and bigram counts
/// hashed into `dim` buckets, L2-normalized. Stands in when no pretrained
/// text encoder output is available.
#[derive(Debug, Clone, Copy)]
pub struct HashingEncoder {
    pub dim: usize,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        assert!(self.dim > 0, "encoder dimension must be positive");
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .collect();
        let mut counts = vec![0.0f64; self.dim];
        for token in &tokens {
            counts[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        for pair in tokens.windows(2) {
            let bigram = format!("{} {}", pair[0], pair[1]);
            counts[(fnv1a(bigram.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in &mut counts {
                *c /= norm;
            }
        }
        counts
    }
}

// FNV-1a, fixed here so bucket assignment never shifts under std hasher changes.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Resolves the vector for one case: inline embedding first, then the
/// sidecar store, then the hashing encoder over the facts text.
pub fn embed(
    case: &Case,
    store: Option<&EmbeddingStore>,
    encoder: &HashingEncoder,
) -> Result<Vec<f64>, CorpusError> {
    if let Some(emb) = &case.embedding {
        return Ok(emb.clone());
    }
    if let Some(store) = store {
        if let Some(emb) = store.get(&case.id) {
            return Ok(emb.to_vec());
        }
    }
    if let Some(text) = &case.facts_text {
        return Ok(encoder.encode(text));
    }
    Err(CorpusError::NoRepresentation { id: case.id.clone() })
}
