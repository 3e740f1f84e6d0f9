//! Precedent labeling of train/test case pairs.
//!
//! A training case can act as precedent for a test case in four ways,
//! depending on whether the two cases agree or disagree on the outcome of a
//! shared claimed article: applied (same outcome) or distinguished
//! (opposite), each in a positive and a negative flavor. Pairs come either
//! from citation edges or from claim overlap.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::citegraph::CitationNetwork;
use crate::corpus::{Corpus, Outcome};

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("article index {k} out of range for {len} articles")]
    IndexOutOfRange { k: usize, len: usize },
    #[error("outcome vectors differ in length: {citing} vs {cited}")]
    LengthMismatch { citing: usize, cited: usize },
    #[error("cited scope requested but the citation network has no edges")]
    ScopeUnavailable,
    #[error("no predicted outcomes for test case {id}")]
    MissingPrediction { id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecedentKind {
    AppliedPos,
    AppliedNeg,
    DistPos,
    DistNeg,
}

impl PrecedentKind {
    pub const ALL: [PrecedentKind; 4] = [
        PrecedentKind::AppliedPos,
        PrecedentKind::AppliedNeg,
        PrecedentKind::DistPos,
        PrecedentKind::DistNeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PrecedentKind::AppliedPos => "applied_pos",
            PrecedentKind::AppliedNeg => "applied_neg",
            PrecedentKind::DistPos => "dist_pos",
            PrecedentKind::DistNeg => "dist_neg",
        }
    }

    pub fn is_applied(self) -> bool {
        matches!(self, PrecedentKind::AppliedPos | PrecedentKind::AppliedNeg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Pairs are citation edges from test to train.
    Cited,
    /// Pairs are all train/test combinations satisfying the claim rule.
    Claimed,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Cited => "cited",
            Scope::Claimed => "claimed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Article,
    Case,
}

/// How much claim overlap a pair needs at case granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimRule {
    /// One shared claimed article suffices.
    #[default]
    Existential,
    /// The two cases must claim exactly the same article set.
    IdenticalClaimSets,
}

/// One labeled train/test pair. `articles` lists every article index at
/// which `kind` holds; never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrecedentRelation {
    pub train_id: String,
    pub test_id: String,
    pub kind: PrecedentKind,
    pub scope: Scope,
    pub articles: BTreeSet<usize>,
}

/// Binary indicator over all (test, train) pairs, flattened test-major:
/// entry for (test i, train j) sits at `i * n_train + j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    pub n_test: usize,
    pub n_train: usize,
    pub values: Vec<u8>,
}

impl LabelMatrix {
    fn zeros(n_test: usize, n_train: usize) -> Self {
        LabelMatrix { n_test, n_train, values: vec![0; n_test * n_train] }
    }

    pub fn flat_index(&self, test_idx: usize, train_idx: usize) -> usize {
        test_idx * self.n_train + train_idx
    }

    pub fn get(&self, test_idx: usize, train_idx: usize) -> u8 {
        self.values[self.flat_index(test_idx, train_idx)]
    }

    fn set(&mut self, test_idx: usize, train_idx: usize) {
        let idx = self.flat_index(test_idx, train_idx);
        self.values[idx] = 1;
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// The outcome pair at one article decides the kind: both positive is
/// applied-positive, both negative applied-negative, and a disagreement is
/// distinguished, signed by the citing case's outcome being the opposite of
/// the cited one. A null on either side means the article was not claimed
/// there, so no relation.
pub fn relate_per_article(
    citing: &[Outcome],
    cited: &[Outcome],
    k: usize,
) -> Result<Option<PrecedentKind>, TaxonomyError> {
    if citing.len() != cited.len() {
        return Err(TaxonomyError::LengthMismatch { citing: citing.len(), cited: cited.len() });
    }
    if k >= citing.len() {
        return Err(TaxonomyError::IndexOutOfRange { k, len: citing.len() });
    }
    Ok(match (citing[k], cited[k]) {
        (Outcome::Pos, Outcome::Pos) => Some(PrecedentKind::AppliedPos),
        (Outcome::Neg, Outcome::Neg) => Some(PrecedentKind::AppliedNeg),
        (Outcome::Neg, Outcome::Pos) => Some(PrecedentKind::DistPos),
        (Outcome::Pos, Outcome::Neg) => Some(PrecedentKind::DistNeg),
        _ => None,
    })
}

fn claimed_set(outcomes: &[Outcome]) -> BTreeSet<usize> {
    outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.claimed())
        .map(|(k, _)| k)
        .collect()
}

/// Kinds holding at any article of the pair. Under
/// `ClaimRule::IdenticalClaimSets` the pair must additionally claim the same
/// articles, otherwise the result is empty.
pub fn relate_per_case(
    citing: &[Outcome],
    cited: &[Outcome],
    rule: ClaimRule,
) -> Result<BTreeSet<PrecedentKind>, TaxonomyError> {
    if citing.len() != cited.len() {
        return Err(TaxonomyError::LengthMismatch { citing: citing.len(), cited: cited.len() });
    }
    if rule == ClaimRule::IdenticalClaimSets && claimed_set(citing) != claimed_set(cited) {
        return Ok(BTreeSet::new());
    }
    let mut kinds = BTreeSet::new();
    for k in 0..citing.len() {
        if let Some(kind) = relate_per_article(citing, cited, k)? {
            kinds.insert(kind);
        }
    }
    Ok(kinds)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LabelConfig {
    pub scope: Scope,
    pub granularity: Granularity,
    pub claim_rule: ClaimRule,
}

impl Default for Scope {
    fn default() -> Self {
        Scope::Cited
    }
}

/// Full labeling of a corpus: the relation list plus one indicator matrix
/// per kind and an overall matrix marking pairs where any kind holds.
#[derive(Debug, Clone)]
pub struct Labeling {
    pub relations: Vec<PrecedentRelation>,
    pub matrices: BTreeMap<PrecedentKind, LabelMatrix>,
    pub overall: LabelMatrix,
    /// Pairs carrying both an applied and a distinguished kind. Reported,
    /// not resolved: no precedence rule between the two is imposed.
    pub mixed_pairs: Vec<(String, String)>,
}

/// Labels every eligible (train, test) pair of the corpus.
///
/// Cited scope takes pairs from test→train citation edges; claimed scope
/// takes every pair sharing claims per the rule. Case granularity applies
/// the claim rule before collecting kinds; article granularity labels each
/// article independently.
pub fn label_corpus(
    corpus: &Corpus,
    network: &CitationNetwork,
    config: LabelConfig,
) -> Result<Labeling, TaxonomyError> {
    let train_index: BTreeMap<&str, usize> =
        corpus.train.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    match config.scope {
        Scope::Cited => {
            if network.edge_count() == 0 {
                return Err(TaxonomyError::ScopeUnavailable);
            }
            for (ti, test) in corpus.test.iter().enumerate() {
                for cited in network.cites_of(&test.id) {
                    if let Some(&tj) = train_index.get(cited) {
                        pairs.push((ti, tj));
                    }
                }
            }
        }
        Scope::Claimed => {
            for (ti, test) in corpus.test.iter().enumerate() {
                let test_claims = claimed_set(&test.outcomes);
                for (tj, train) in corpus.train.iter().enumerate() {
                    let train_claims = claimed_set(&train.outcomes);
                    let eligible = match (config.granularity, config.claim_rule) {
                        (Granularity::Case, ClaimRule::IdenticalClaimSets) => {
                            !test_claims.is_empty() && test_claims == train_claims
                        }
                        _ => test_claims.intersection(&train_claims).next().is_some(),
                    };
                    if eligible {
                        pairs.push((ti, tj));
                    }
                }
            }
        }
    }

    let n_test = corpus.test.len();
    let n_train = corpus.train.len();
    let mut relations = Vec::new();
    let mut matrices: BTreeMap<PrecedentKind, LabelMatrix> = PrecedentKind::ALL
        .iter()
        .map(|&k| (k, LabelMatrix::zeros(n_test, n_train)))
        .collect();
    let mut overall = LabelMatrix::zeros(n_test, n_train);
    let mut mixed_pairs = Vec::new();

    for (ti, tj) in pairs {
        let citing = &corpus.test[ti].outcomes;
        let cited = &corpus.train[tj].outcomes;
        let allowed: Option<BTreeSet<PrecedentKind>> = match config.granularity {
            Granularity::Article => None,
            Granularity::Case => Some(relate_per_case(citing, cited, config.claim_rule)?),
        };

        let mut by_kind: BTreeMap<PrecedentKind, BTreeSet<usize>> = BTreeMap::new();
        for k in 0..citing.len() {
            if let Some(kind) = relate_per_article(citing, cited, k)? {
                if allowed.as_ref().is_none_or(|set| set.contains(&kind)) {
                    by_kind.entry(kind).or_default().insert(k);
                }
            }
        }

        let has_applied = by_kind.keys().any(|k| k.is_applied());
        let has_dist = by_kind.keys().any(|k| !k.is_applied());
        if has_applied && has_dist {
            mixed_pairs.push((corpus.train[tj].id.clone(), corpus.test[ti].id.clone()));
        }

        for (kind, articles) in by_kind {
            matrices.get_mut(&kind).unwrap().set(ti, tj);
            overall.set(ti, tj);
            relations.push(PrecedentRelation {
                train_id: corpus.train[tj].id.clone(),
                test_id: corpus.test[ti].id.clone(),
                kind,
                scope: config.scope,
                articles,
            });
        }
    }

    relations.sort_by(|a, b| {
        (&a.test_id, &a.train_id, a.kind).cmp(&(&b.test_id, &b.train_id, b.kind))
    });
    Ok(Labeling { relations, matrices, overall, mixed_pairs })
}

/// Same labeling with each test case's outcomes replaced by a model
/// prediction; training outcomes stay as annotated.
pub fn relabel_model_based(
    corpus: &Corpus,
    predictions: &BTreeMap<String, Vec<Outcome>>,
    network: &CitationNetwork,
    config: LabelConfig,
) -> Result<Labeling, TaxonomyError> {
    let mut swapped = corpus.clone();
    for case in &mut swapped.test {
        let predicted = predictions
            .get(&case.id)
            .ok_or_else(|| TaxonomyError::MissingPrediction { id: case.id.clone() })?;
        if predicted.len() != case.outcomes.len() {
            return Err(TaxonomyError::LengthMismatch {
                citing: predicted.len(),
                cited: case.outcomes.len(),
            });
        }
        case.outcomes = predicted.clone();
    }
    label_corpus(&swapped, network, config)
}

/// Writes relations as TSV rows: train, test, kind, scope, article list.
pub fn write_relations_tsv<W: Write>(
    relations: &[PrecedentRelation],
    writer: &mut W,
) -> io::Result<()> {
    for r in relations {
        let articles: Vec<String> = r.articles.iter().map(|a| a.to_string()).collect();
        writeln!(
            writer,
            "{}\t{}\t{}\t{}\t{}",
            r.train_id,
            r.test_id,
            r.kind.as_str(),
            r.scope.as_str(),
            articles.join(",")
        )?;
    }
    Ok(())
}
