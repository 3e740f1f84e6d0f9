//! Citation extraction and the citation network.
//!
//! Mentions are pulled out of case text with configurable regex patterns,
//! resolved against a registry of known case names and docket numbers, and
//! merged with each case's explicit citation list into one directed network.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

#[derive(Debug, Error)]
pub enum CiteError {
    #[error("pattern {pattern_id}: {message}")]
    InvalidPattern { pattern_id: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry: {0}")]
    MalformedRegistry(String),
}

/// One configurable citation format. Groups are addressed by index into the
/// compiled regex's capture list (group 0 is the whole match).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CitationPattern {
    pub pattern_id: String,
    pub regex_source: String,
    pub name_group: usize,
    #[serde(default)]
    pub number_group: Option<usize>,
}

impl CitationPattern {
    fn compile(&self) -> Result<Regex, CiteError> {
        let re = Regex::new(&self.regex_source).map_err(|e| CiteError::InvalidPattern {
            pattern_id: self.pattern_id.clone(),
            message: e.to_string(),
        })?;
        let groups = re.captures_len();
        for (label, idx) in [("name_group", Some(self.name_group)), ("number_group", self.number_group)] {
            if let Some(idx) = idx {
                if idx == 0 || idx >= groups {
                    return Err(CiteError::InvalidPattern {
                        pattern_id: self.pattern_id.clone(),
                        message: format!("{label} {idx} out of range (pattern has {groups} groups)"),
                    });
                }
            }
        }
        Ok(re)
    }
}

/// Two stock patterns approximating the ECtHR house styles: the reported
/// form `Name v. State [GC], no. 123/99, ...` and the parenthesized
/// application form `Name v. State (application no. 123/15)`. Corpora with
/// other conventions supply their own pattern file.
pub fn default_patterns() -> Vec<CitationPattern> {
    vec![
        CitationPattern {
            pattern_id: "ecthr-reported".into(),
            regex_source:
                r"(?P<name>\p{Lu}[\p{L}'’.\- ]{0,90}? v\. [\p{L}'’.\- ]{1,90}?)(?: \[GC\])?, no\. (?P<number>\d{1,6}/\d{2})"
                    .into(),
            name_group: 1,
            number_group: Some(2),
        },
        CitationPattern {
            pattern_id: "ecthr-application".into(),
            regex_source:
                r"(?P<name>\p{Lu}[\p{L}'’.\- ]{0,90}? v\. [\p{L}'’.\- ]{1,90}?) \(applications? nos?\. (?P<number>\d{1,6}/\d{2})\)"
                    .into(),
            name_group: 1,
            number_group: Some(2),
        },
    ]
}

/// Loads a JSON file holding a list of patterns.
pub fn load_patterns(path: impl AsRef<Path>) -> Result<Vec<CitationPattern>, CiteError> {
    let reader = BufReader::new(File::open(path)?);
    serde_json::from_reader(reader)
        .map_err(|e| CiteError::MalformedRegistry(format!("pattern file: {e}")))
}

/// A matched citation. `span` holds character offsets into the source text,
/// end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationMention {
    pub span: (usize, usize),
    pub case_name: String,
    pub docket: Option<String>,
}

struct Candidate {
    start: usize,
    end: usize,
    pattern_order: usize,
    name: String,
    docket: Option<String>,
}

/// All non-overlapping matches of the given patterns, in document order.
/// Overlaps are resolved by earliest start, then longest match, then lowest
/// pattern id.
pub fn extract_mentions(
    text: &str,
    patterns: &[CitationPattern],
) -> Result<Vec<CitationMention>, CiteError> {
    if patterns.is_empty() {
        return Err(CiteError::InvalidPattern {
            pattern_id: "<none>".into(),
            message: "at least one pattern is required".into(),
        });
    }
    // Ties on start and length go to the lexicographically smallest id.
    let mut order: Vec<usize> = (0..patterns.len()).collect();
    order.sort_by(|&a, &b| patterns[a].pattern_id.cmp(&patterns[b].pattern_id));
    let rank_of: BTreeMap<usize, usize> =
        order.iter().enumerate().map(|(rank, &idx)| (idx, rank)).collect();

    let mut candidates: Vec<Candidate> = Vec::new();
    for (idx, pattern) in patterns.iter().enumerate() {
        let re = pattern.compile()?;
        for caps in re.captures_iter(text) {
            let whole = caps.get(0).expect("group 0 always present");
            let Some(name) = caps.get(pattern.name_group) else {
                continue;
            };
            if name.as_str().is_empty() {
                continue;
            }
            let docket = pattern
                .number_group
                .and_then(|g| caps.get(g))
                .map(|m| m.as_str().to_string());
            candidates.push(Candidate {
                start: whole.start(),
                end: whole.end(),
                pattern_order: rank_of[&idx],
                name: name.as_str().to_string(),
                docket,
            });
        }
    }

    candidates.sort_by(|a, b| {
        a.start
            .cmp(&b.start)
            .then(b.end.cmp(&a.end))
            .then(a.pattern_order.cmp(&b.pattern_order))
    });

    let mut taken: Vec<Candidate> = Vec::new();
    let mut last_end = 0usize;
    for cand in candidates {
        if taken.is_empty() || cand.start >= last_end {
            last_end = cand.end;
            taken.push(cand);
        }
    }

    // Byte offsets out of regex become character offsets in the mention.
    let mut mentions = Vec::with_capacity(taken.len());
    let mut chars_seen = 0usize;
    let mut bytes_seen = 0usize;
    for cand in taken {
        chars_seen += text[bytes_seen..cand.start].chars().count();
        let start_chars = chars_seen;
        chars_seen += text[cand.start..cand.end].chars().count();
        bytes_seen = cand.end;
        mentions.push(CitationMention {
            span: (start_chars, chars_seen),
            case_name: cand.name,
            docket: cand.docket,
        });
    }
    Ok(mentions)
}

/// Lookup table from case names and docket numbers to case ids.
#[derive(Debug, Clone, Default)]
pub struct CaseRegistry {
    by_docket: BTreeMap<String, BTreeSet<String>>,
    by_name: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryRecord {
    id: String,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    docket: Option<String>,
}

/// Case-insensitive, whitespace-collapsed form used for name matching.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl CaseRegistry {
    pub fn add(&mut self, id: &str, name: Option<&str>, docket: Option<&str>) {
        if let Some(name) = name {
            self.by_name
                .entry(normalize_name(name))
                .or_default()
                .insert(id.to_string());
        }
        if let Some(docket) = docket {
            self.by_docket
                .entry(docket.trim().to_string())
                .or_default()
                .insert(id.to_string());
        }
    }

    /// Loads a JSON array of `{"id", "name"?, "docket"?}` records.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CiteError> {
        let reader = BufReader::new(File::open(path)?);
        let records: Vec<RegistryRecord> = serde_json::from_reader(reader)
            .map_err(|e| CiteError::MalformedRegistry(e.to_string()))?;
        let mut registry = Self::default();
        for r in &records {
            registry.add(&r.id, r.name.as_deref(), r.docket.as_deref());
        }
        Ok(registry)
    }

    pub fn is_empty(&self) -> bool {
        self.by_docket.is_empty() && self.by_name.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UnresolvedReason {
    /// More than one registry entry ties for the mention.
    Ambiguous,
    /// Nothing in the registry matches.
    Unknown,
}

#[derive(Debug, Clone)]
pub struct Unresolved {
    pub mention: CitationMention,
    pub reason: UnresolvedReason,
}

#[derive(Debug, Clone, Default)]
pub struct Resolution {
    pub resolved: Vec<(CitationMention, String)>,
    pub unresolved: Vec<Unresolved>,
}

/// Maps mentions to case ids: an exact docket match wins, then a normalized
/// name match; ties go to unresolved with an ambiguity reason.
pub fn resolve(mentions: Vec<CitationMention>, registry: &CaseRegistry) -> Resolution {
    let mut out = Resolution::default();
    for mention in mentions {
        if let Some(docket) = &mention.docket {
            if let Some(ids) = registry.by_docket.get(docket.trim()) {
                match ids.len() {
                    1 => {
                        let id = ids.iter().next().unwrap().clone();
                        out.resolved.push((mention, id));
                    }
                    _ => out.unresolved.push(Unresolved {
                        mention,
                        reason: UnresolvedReason::Ambiguous,
                    }),
                }
                continue;
            }
        }
        match registry.by_name.get(&normalize_name(&mention.case_name)) {
            Some(ids) if ids.len() == 1 => {
                let id = ids.iter().next().unwrap().clone();
                out.resolved.push((mention, id));
            }
            Some(_) => out.unresolved.push(Unresolved {
                mention,
                reason: UnresolvedReason::Ambiguous,
            }),
            None => out.unresolved.push(Unresolved {
                mention,
                reason: UnresolvedReason::Unknown,
            }),
        }
    }
    out
}

/// Directed citation graph over corpus cases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CitationNetwork {
    edges: BTreeMap<String, BTreeSet<String>>,
    reverse: BTreeMap<String, BTreeSet<String>>,
    pub unresolved: Vec<CitationMention>,
}

impl CitationNetwork {
    fn insert_edge(&mut self, citing: &str, cited: &str) {
        self.edges
            .entry(citing.to_string())
            .or_default()
            .insert(cited.to_string());
        self.reverse
            .entry(cited.to_string())
            .or_default()
            .insert(citing.to_string());
    }

    /// Ids cited by `citing`.
    pub fn cites_of(&self, citing: &str) -> impl Iterator<Item = &str> + '_ {
        self.edges
            .get(citing)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    /// Ids that cite `cited`.
    pub fn citers_of(&self, cited: &str) -> impl Iterator<Item = &str> + '_ {
        self.reverse
            .get(cited)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn contains_edge(&self, citing: &str, cited: &str) -> bool {
        self.edges.get(citing).is_some_and(|s| s.contains(cited))
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.edges
            .iter()
            .flat_map(|(citing, cited)| cited.iter().map(move |c| (citing.as_str(), c.as_str())))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeSet::len).sum()
    }

    pub fn write_tsv<W: Write>(&self, writer: &mut W) -> io::Result<()> {
        for (citing, cited) in self.edges() {
            writeln!(writer, "{citing}\t{cited}")?;
        }
        Ok(())
    }
}

/// Builds the network for a corpus: text-extracted citations (when patterns
/// are given) unioned with each case's explicit `cites`, keeping only edges
/// whose endpoints are corpus cases and dropping self-citations.
pub fn build_network(
    corpus: &Corpus,
    patterns: &[CitationPattern],
    registry: &CaseRegistry,
) -> Result<CitationNetwork, CiteError> {
    let ids: BTreeSet<&str> = corpus.cases().map(|(_, c)| c.id.as_str()).collect();
    let mut network = CitationNetwork::default();
    for (_, case) in corpus.cases() {
        let mut targets: BTreeSet<String> = case.cites.iter().cloned().collect();
        if !patterns.is_empty() {
            if let Some(text) = &case.facts_text {
                let mentions = extract_mentions(text, patterns)?;
                let resolution = resolve(mentions, registry);
                for (_, id) in resolution.resolved {
                    targets.insert(id);
                }
                network
                    .unresolved
                    .extend(resolution.unresolved.into_iter().map(|u| u.mention));
            }
        }
        for target in targets {
            if target != case.id && ids.contains(target.as_str()) {
                network.insert_edge(&case.id, &target);
            }
        }
    }
    Ok(network)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Case, Corpus, Outcome};
    use std::collections::BTreeSet;

    #[test]
    fn extracts_reported_style_citation() {
        let text = "see Smith v. Jones, no. 123/99, § 45";
        let mentions = extract_mentions(text, &default_patterns()).unwrap();
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].case_name, "Smith v. Jones");
        assert_eq!(mentions[0].docket.as_deref(), Some("123/99"));
        let (start, end) = mentions[0].span;
        assert_eq!(&text[start..end], "Smith v. Jones, no. 123/99");
    }

    #[test]
    fn empty_text_has_no_mentions() {
        assert!(extract_mentions("", &default_patterns()).unwrap().is_empty());
    }

    #[test]
    fn adjacent_citations_come_out_in_document_order() {
        let text = "compare Alpha v. Beta, no. 11/95, § 3, and Gamma v. Delta, no. 22/01, § 9.";
        let mentions = extract_mentions(text, &default_patterns()).unwrap();
        // Oracle: a naive scan over every match position of every pattern
        // finds the same two non-overlapping hits, left to right.
        let mut naive: Vec<(usize, &str)> = Vec::new();
        for p in default_patterns() {
            let re = Regex::new(&p.regex_source).unwrap();
            for c in re.captures_iter(text) {
                naive.push((c.get(0).unwrap().start(), c.get(1).unwrap().as_str()));
            }
        }
        naive.sort();
        naive.dedup();
        assert_eq!(
            mentions.iter().map(|m| m.case_name.as_str()).collect::<Vec<_>>(),
            naive.iter().map(|(_, n)| *n).collect::<Vec<_>>()
        );
        assert!(mentions[0].span.1 <= mentions[1].span.0);
    }

    #[test]
    fn both_default_styles_match() {
        let text = "see Hoxha v. Albania (application no. 871/16) and Kern v. Austria [GC], no. 14/02, § 7";
        let mentions = extract_mentions(text, &default_patterns()).unwrap();
        let names: Vec<&str> = mentions.iter().map(|m| m.case_name.as_str()).collect();
        assert_eq!(names, vec!["Hoxha v. Albania", "Kern v. Austria"]);
        assert_eq!(mentions[0].docket.as_deref(), Some("871/16"));
    }

    #[test]
    fn prefix_padding_shifts_offsets_only() {
        let text = "per Smith v. Jones, no. 123/99";
        let pad = "xxxx ";
        let padded = format!("{pad}{text}");
        let base = extract_mentions(text, &default_patterns()).unwrap();
        let shifted = extract_mentions(&padded, &default_patterns()).unwrap();
        assert_eq!(base.len(), shifted.len());
        for (a, b) in base.iter().zip(&shifted) {
            assert_eq!(a.case_name, b.case_name);
            assert_eq!(a.docket, b.docket);
            assert_eq!(b.span.0, a.span.0 + pad.chars().count());
            assert_eq!(b.span.1, a.span.1 + pad.chars().count());
        }
    }

    #[test]
    fn spans_are_character_offsets() {
        // Multibyte character before the citation: byte and char offsets
        // diverge, the mention must carry char offsets.
        let text = "«décision» Smith v. Jones, no. 123/99";
        let mentions = extract_mentions(text, &default_patterns()).unwrap();
        assert_eq!(mentions.len(), 1);
        let chars: Vec<char> = text.chars().collect();
        let slice: String = chars[mentions[0].span.0..mentions[0].span.1].iter().collect();
        assert!(slice.starts_with("Smith v. Jones"));
    }

    fn pat(id: &str, src: &str) -> CitationPattern {
        CitationPattern {
            pattern_id: id.into(),
            regex_source: src.into(),
            name_group: 1,
            number_group: None,
        }
    }

    #[test]
    fn overlap_resolution_prefers_start_then_length_then_id() {
        // Both patterns hit "Ab v. Cd"; the wider one must win, and on exact
        // span ties the lexicographically lower pattern id wins.
        let text = "Ab v. Cd, no. 1/99 end";
        let wide = pat("z-wide", r"(Ab v\. Cd), no\. 1/99");
        let narrow = pat("a-narrow", r"(Ab v\. Cd)");
        let mentions = extract_mentions(text, &[narrow.clone(), wide.clone()]).unwrap();
        assert_eq!(mentions.len(), 1);
        assert_eq!(&text[mentions[0].span.0..mentions[0].span.1], "Ab v. Cd, no. 1/99");

        let twin_a = pat("a-id", r"(Ab) v\.");
        let twin_b = CitationPattern {
            pattern_id: "b-id".into(),
            regex_source: r"(A)(b) v\.".into(),
            name_group: 2,
            number_group: None,
        };
        let picked = extract_mentions(text, &[twin_b.clone(), twin_a.clone()]).unwrap();
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].case_name, "Ab");
    }

    #[test]
    fn bad_regex_and_bad_group_are_invalid_pattern() {
        let broken = pat("broken", r"([unclosed");
        assert!(matches!(
            extract_mentions("text", &[broken]),
            Err(CiteError::InvalidPattern { .. })
        ));
        let mut out_of_range = pat("groups", r"(Ab)");
        out_of_range.name_group = 7;
        assert!(matches!(
            extract_mentions("text", &[out_of_range]),
            Err(CiteError::InvalidPattern { .. })
        ));
    }

    fn mention(name: &str, docket: Option<&str>) -> CitationMention {
        CitationMention {
            span: (0, name.len()),
            case_name: name.into(),
            docket: docket.map(String::from),
        }
    }

    #[test]
    fn docket_match_wins_over_name() {
        let mut reg = CaseRegistry::default();
        reg.add("id-1", Some("Smith v. Jones"), Some("123/99"));
        reg.add("id-2", Some("Smith v. Jones"), Some("456/01"));
        let res = resolve(vec![mention("Smith v. Jones", Some("123/99"))], &reg);
        assert_eq!(res.resolved.len(), 1);
        assert_eq!(res.resolved[0].1, "id-1");
    }

    #[test]
    fn name_match_is_case_insensitive_and_normalized() {
        let mut reg = CaseRegistry::default();
        reg.add("id-1", Some("Smith  v. Jones"), None);
        let res = resolve(vec![mention("SMITH V. JONES", None)], &reg);
        assert_eq!(res.resolved.len(), 1);
        assert_eq!(res.resolved[0].1, "id-1");
    }

    #[test]
    fn ambiguous_name_goes_unresolved_with_reason() {
        let mut reg = CaseRegistry::default();
        reg.add("id-1", Some("Smith v. Jones"), None);
        reg.add("id-2", Some("Smith v. Jones"), None);
        let res = resolve(vec![mention("Smith v. Jones", None)], &reg);
        assert!(res.resolved.is_empty());
        assert_eq!(res.unresolved.len(), 1);
        assert_eq!(res.unresolved[0].reason, UnresolvedReason::Ambiguous);
    }

    #[test]
    fn resolution_partitions_the_input() {
        let mut reg = CaseRegistry::default();
        reg.add("id-1", Some("A v. B"), Some("1/99"));
        reg.add("id-2", Some("C v. D"), None);
        reg.add("id-3", Some("C v. D"), None);
        let batch = vec![
            mention("A v. B", Some("1/99")),
            mention("C v. D", None),
            mention("E v. F", None),
        ];
        let n = batch.len();
        let res = resolve(batch, &reg);
        assert_eq!(res.resolved.len() + res.unresolved.len(), n);
        assert_eq!(res.resolved.len(), 1);
    }

    fn text_case(id: &str, text: &str, cites: &[&str]) -> Case {
        Case {
            id: id.into(),
            facts_text: Some(text.into()),
            embedding: None,
            outcomes: vec![Outcome::Pos],
            cites: cites.iter().map(|s| s.to_string()).collect(),
            date: None,
        }
    }

    fn corpus_of(train: Vec<Case>, test: Vec<Case>) -> Corpus {
        Corpus {
            num_articles: 1,
            article_names: vec!["a1".into()],
            train,
            validation: vec![],
            test,
        }
    }

    #[test]
    fn explicit_cites_pass_through_when_texts_are_empty() {
        let corpus = corpus_of(
            vec![text_case("t1", "", &[]), text_case("t2", "", &[])],
            vec![text_case("x1", "", &["t1", "t2"])],
        );
        let network = build_network(&corpus, &default_patterns(), &CaseRegistry::default()).unwrap();
        assert_eq!(network.edge_count(), 2);
        assert!(network.contains_edge("x1", "t1"));
        assert!(network.contains_edge("x1", "t2"));
        assert!(network.unresolved.is_empty());
    }

    #[test]
    fn self_citation_in_text_is_dropped() {
        let mut reg = CaseRegistry::default();
        reg.add("t1", Some("Self v. Self"), Some("9/99"));
        let corpus = corpus_of(
            vec![text_case("t1", "as held in Self v. Self, no. 9/99", &[])],
            vec![text_case("x1", "", &["t1"])],
        );
        let network = build_network(&corpus, &default_patterns(), &reg).unwrap();
        assert!(!network.contains_edge("t1", "t1"));
        assert_eq!(network.edge_count(), 1);
    }

    #[test]
    fn dangling_explicit_cite_is_not_an_edge() {
        let corpus = corpus_of(
            vec![text_case("t1", "", &[])],
            vec![text_case("x1", "", &["t1", "missing"])],
        );
        let network = build_network(&corpus, &[], &CaseRegistry::default()).unwrap();
        assert_eq!(network.edge_count(), 1);
        assert!(!network.contains_edge("x1", "missing"));
    }

    #[test]
    fn text_and_explicit_edges_union() {
        let mut reg = CaseRegistry::default();
        reg.add("t1", Some("Early v. Late"), Some("1/90"));
        let corpus = corpus_of(
            vec![text_case("t1", "", &[]), text_case("t2", "", &[])],
            vec![text_case("x1", "citing Early v. Late, no. 1/90 here", &["t2"])],
        );
        let network = build_network(&corpus, &default_patterns(), &reg).unwrap();
        assert!(network.contains_edge("x1", "t1"));
        assert!(network.contains_edge("x1", "t2"));
        let citers: Vec<&str> = network.citers_of("t1").collect();
        assert_eq!(citers, vec!["x1"]);
    }

    #[test]
    fn network_build_is_deterministic() {
        let mut reg = CaseRegistry::default();
        reg.add("t1", Some("Early v. Late"), Some("1/90"));
        let corpus = corpus_of(
            vec![text_case("t1", "", &[])],
            vec![text_case("x1", "per Early v. Late, no. 1/90", &[])],
        );
        let a = build_network(&corpus, &default_patterns(), &reg).unwrap();
        let b = build_network(&corpus, &default_patterns(), &reg).unwrap();
        assert_eq!(a, b);
        let mut tsv_a = Vec::new();
        let mut tsv_b = Vec::new();
        a.write_tsv(&mut tsv_a).unwrap();
        b.write_tsv(&mut tsv_b).unwrap();
        assert_eq!(tsv_a, tsv_b);
    }

    #[test]
    fn unknown_mentions_are_collected() {
        let corpus = corpus_of(
            vec![text_case("t1", "", &[])],
            vec![text_case("x1", "per Ghost v. Machine, no. 404/04", &["t1"])],
        );
        let network = build_network(&corpus, &default_patterns(), &CaseRegistry::default()).unwrap();
        assert_eq!(network.unresolved.len(), 1);
        assert_eq!(network.unresolved[0].case_name, "Ghost v. Machine");
        let empty: BTreeSet<String> = BTreeSet::new();
        assert_eq!(
            network.cites_of("x1").map(String::from).collect::<BTreeSet<_>>(),
            ["t1".to_string()].into_iter().collect::<BTreeSet<_>>(),
            "unresolved mention must not create an edge: {empty:?}"
        );
    }
}
