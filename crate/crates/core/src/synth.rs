//! Seeded synthetic corpora with planted precedent structure.
//!
//! Outcomes drive the geometry: each article has an orthonormal prototype
//! vector, and a case's embedding is the unit-normalized sum of its claimed
//! prototypes, sign-shifted by outcome, plus a shared anchor direction and
//! Gaussian noise. The anchor gives bias-free linear heads an offset coordinate;
//! without it, unclaimed articles would sit exactly on the decision
//! boundary. Test cases cite training cases picked to be purely
//! outcome-matching (applied) or purely outcome-mismatching (distinguished)
//! on every shared claimed article, so the generator knows the exact
//! relation set it planted.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Case, Corpus, Outcome};
use crate::taxonomy::{PrecedentKind, PrecedentRelation, Scope};
use crate::vecmath::{axpy, dot, norm2};

/// Full regenerations allowed per test case before citation assignment
/// gives up.
const MAX_CASE_RETRIES: usize = 50;
/// Redraws allowed when sampling an outcome vector with at least one claim.
const MAX_DRAW_RETRIES: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("test case {case} found no eligible citation partner in {retries} attempts")]
    InfeasibleCitation { case: usize, retries: usize },
    #[error("could not draw {what} in {retries} attempts")]
    ExhaustedRetries { what: &'static str, retries: usize },
}

fn default_k() -> usize {
    4
}
fn default_n_train() -> usize {
    200
}
fn default_n_test() -> usize {
    40
}
fn default_d1() -> usize {
    32
}
fn default_seed() -> u64 {
    7
}
fn default_claim_rate() -> f64 {
    0.7
}
fn default_positive_rate() -> f64 {
    0.5
}
fn default_cite_per_test() -> usize {
    5
}
fn default_applied_bias() -> f64 {
    0.9
}
fn default_noise_sigma() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of articles.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Training cases requested; uncited ones are dropped, so the emitted
    /// split can be smaller.
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Embedding dimension; must exceed `k` so the prototypes and the
    /// anchor can be orthonormal.
    #[serde(default = "default_d1")]
    pub d1: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Probability that a case claims any given article.
    #[serde(default = "default_claim_rate")]
    pub claim_rate: f64,
    /// Probability that a claimed article is violated.
    #[serde(default = "default_positive_rate")]
    pub positive_rate: f64,
    /// Distinct training cases each test case cites.
    #[serde(default = "default_cite_per_test")]
    pub cite_per_test: usize,
    /// Probability that a citation slot seeks an applied partner rather
    /// than a distinguished one.
    #[serde(default = "default_applied_bias")]
    pub applied_bias: f64,
    /// Standard deviation of the embedding noise; 0 gives exactly separable
    /// geometry.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k: default_k(),
            n_train: default_n_train(),
            n_test: default_n_test(),
            d1: default_d1(),
            seed: default_seed(),
            claim_rate: default_claim_rate(),
            positive_rate: default_positive_rate(),
            cite_per_test: default_cite_per_test(),
            applied_bias: default_applied_bias(),
            noise_sigma: default_noise_sigma(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.k == 0 || self.n_train == 0 || self.n_test == 0 || self.d1 == 0 {
            return Err(SynthError::BadConfig("sizes must be positive".into()));
        }
        if self.d1 < self.k + 1 {
            return Err(SynthError::BadConfig(format!(
                "d1 = {} cannot hold {} orthonormal prototypes plus an anchor",
                self.d1, self.k
            )));
        }
        if !(self.claim_rate > 0.0 && self.claim_rate <= 1.0) {
            return Err(SynthError::BadConfig("claim_rate must lie in (0, 1]".into()));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(SynthError::BadConfig("positive_rate must lie in (0, 1)".into()));
        }
        if self.cite_per_test == 0 {
            return Err(SynthError::BadConfig("cite_per_test must be at least 1".into()));
        }
        if self.cite_per_test > self.n_train {
            return Err(SynthError::BadConfig(format!(
                "cite_per_test = {} exceeds n_train = {}",
                self.cite_per_test, self.n_train
            )));
        }
        if !(0.0..=1.0).contains(&self.applied_bias) {
            return Err(SynthError::BadConfig("applied_bias must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::BadConfig("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpus: Corpus,
    /// Exactly the relations planted through citation choices, in the same
    /// grouping and order the taxonomy module produces.
    pub relations: Vec<PrecedentRelation>,
    /// Orthonormal article prototypes underlying the embeddings.
    pub prototypes: Vec<Vec<f64>>,
    /// Unit vector added to every embedding, orthogonal to the prototypes.
    pub anchor: Vec<f64>,
}

impl SynthOutput {
    pub fn kind_counts(&self) -> std::collections::BTreeMap<PrecedentKind, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for r in &self.relations {
            *counts.entry(r.kind).or_insert(0) += 1;
        }
        counts
    }
}

fn orthonormal_prototypes(
    k: usize,
    d1: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, SynthError> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut accepted = None;
        for _ in 0..MAX_DRAW_RETRIES {
            let mut v: Vec<f64> = (0..d1).map(|_| normal.sample(rng)).collect();
            for b in &basis {
                let proj = dot(&v, b);
                axpy(-proj, b, &mut v);
            }
            let n = norm2(&v);
            if n > 1e-6 {
                for x in v.iter_mut() {
                    *x /= n;
                }
                accepted = Some(v);
                break;
            }
        }
        basis.push(accepted.ok_or(SynthError::ExhaustedRetries {
            what: "independent prototype",
            retries: MAX_DRAW_RETRIES,
        })?);
    }
    Ok(basis)
}

fn draw_outcomes(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Outcome>, SynthError> {
    for _ in 0..MAX_DRAW_RETRIES {
        let outcomes: Vec<Outcome> = (0..config.k)
            .map(|_| {
                if rng.random::<f64>() < config.claim_rate {
                    if rng.random::<f64>() < config.positive_rate {
                        Outcome::Pos
                    } else {
                        Outcome::Neg
                    }
                } else {
                    Outcome::Null
                }
            })
            .collect();
        if outcomes.iter().any(|o| o.claimed()) {
            return Ok(outcomes);
        }
    }
    Err(SynthError::ExhaustedRetries {
        what: "outcome vector with a claim",
        retries: MAX_DRAW_RETRIES,
    })
}

fn embed(
    outcomes: &[Outcome],
    prototypes: &[Vec<f64>],
    anchor: &[f64],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let d1 = anchor.len();
    let mut x = vec![0.0; d1];
    let mut claimed = 0usize;
    for (k, &o) in outcomes.iter().enumerate() {
        match o {
            Outcome::Pos => {
                axpy(1.0, &prototypes[k], &mut x);
                claimed += 1;
            }
            Outcome::Neg => {
                axpy(-1.0, &prototypes[k], &mut x);
                claimed += 1;
            }
            Outcome::Null => {}
        }
    }
    // The claimed prototypes are orthonormal, so dividing by sqrt(m) keeps
    // the signal part at unit length for every claim count m.
    let inv = 1.0 / (claimed as f64).sqrt();
    for v in x.iter_mut() {
        *v *= inv;
    }
    axpy(1.0, anchor, &mut x);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).unwrap();
        for v in x.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    x
}

/// Shared claimed articles with fully matching (applied) or fully opposing
/// (distinguished) outcomes; None when the pair is mixed or shares nothing.
fn pure_shared_articles(
    citing: &[Outcome],
    cited: &[Outcome],
    applied: bool,
) -> Option<Vec<usize>> {
    let mut shared = Vec::new();
    for (k, (&a, &b)) in citing.iter().zip(cited).enumerate() {
        if !(a.claimed() && b.claimed()) {
            continue;
        }
        if (a == b) != applied {
            return None;
        }
        shared.push(k);
    }
    if shared.is_empty() {
        None
    } else {
        Some(shared)
    }
}

fn kind_at(citing: Outcome, cited: Outcome) -> PrecedentKind {
    match (citing, cited) {
        (Outcome::Pos, Outcome::Pos) => PrecedentKind::AppliedPos,
        (Outcome::Neg, Outcome::Neg) => PrecedentKind::AppliedNeg,
        (Outcome::Neg, Outcome::Pos) => PrecedentKind::DistPos,
        (Outcome::Pos, Outcome::Neg) => PrecedentKind::DistNeg,
        _ => unreachable!("claimed outcomes only"),
    }
}

struct DraftCase {
    outcomes: Vec<Outcome>,
    embedding: Vec<f64>,
}

/// Citations one test case planted: (train index, articles, applied?).
type PlantedCites = Vec<(usize, Vec<usize>, bool)>;

/// Generates a corpus with planted precedent structure. Training cases that
/// end up uncited are dropped, so the result passes the precedent filter
/// unchanged; the emitted relation list is exactly what the citation
/// choices planted.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut prototypes = orthonormal_prototypes(config.k + 1, config.d1, &mut rng)?;
    let anchor = prototypes.pop().unwrap();

    let train: Vec<DraftCase> = (0..config.n_train)
        .map(|_| {
            let outcomes = draw_outcomes(config, &mut rng)?;
            let embedding = embed(&outcomes, &prototypes, &anchor, config.noise_sigma, &mut rng);
            Ok(DraftCase { outcomes, embedding })
        })
        .collect::<Result<_, SynthError>>()?;

    let mut cite_counts = vec![0usize; config.n_train];
    let mut tests: Vec<(DraftCase, PlantedCites)> = Vec::with_capacity(config.n_test);
    for case_idx in 0..config.n_test {
        let mut planted: Option<(DraftCase, PlantedCites)> = None;
        'attempt: for _ in 0..MAX_CASE_RETRIES {
            let outcomes = draw_outcomes(config, &mut rng)?;
            let embedding = embed(&outcomes, &prototypes, &anchor, config.noise_sigma, &mut rng);
            let mut cites: PlantedCites = Vec::with_capacity(config.cite_per_test);
            for _ in 0..config.cite_per_test {
                let applied = rng.random::<f64>() < config.applied_bias;
                let eligible: Vec<(usize, Vec<usize>)> = train
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !cites.iter().any(|&(c, _, _)| c == *i))
                    .filter_map(|(i, t)| {
                        pure_shared_articles(&outcomes, &t.outcomes, applied)
                            .map(|arts| (i, arts))
                    })
                    .collect();
                if eligible.is_empty() {
                    continue 'attempt;
                }
                // Prefer the least-cited partners so the training split
                // stays covered; break ties by seeded draw.
                let min_count = eligible.iter().map(|&(i, _)| cite_counts[i]).min().unwrap();
                let least: Vec<&(usize, Vec<usize>)> =
                    eligible.iter().filter(|&&(i, _)| cite_counts[i] == min_count).collect();
                let &(target, ref articles) = least[rng.random_range(0..least.len())];
                cites.push((target, articles.clone(), applied));
            }
            for &(target, _, _) in &cites {
                cite_counts[target] += 1;
            }
            planted = Some((DraftCase { outcomes, embedding }, cites));
            break;
        }
        match planted {
            Some(entry) => tests.push(entry),
            None => {
                return Err(SynthError::InfeasibleCitation {
                    case: case_idx,
                    retries: MAX_CASE_RETRIES,
                })
            }
        }
    }

    // Drop uncited training cases and renumber the survivors.
    let kept: Vec<usize> = (0..config.n_train).filter(|&i| cite_counts[i] > 0).collect();
    let mut new_index = vec![usize::MAX; config.n_train];
    for (new_i, &old_i) in kept.iter().enumerate() {
        new_index[old_i] = new_i;
    }
    let train_id = |new_i: usize| format!("tr-{new_i:04}");
    let test_id = |j: usize| format!("te-{j:04}");

    let train_cases: Vec<Case> = kept
        .iter()
        .enumerate()
        .map(|(new_i, &old_i)| Case {
            id: train_id(new_i),
            facts_text: None,
            embedding: Some(train[old_i].embedding.clone()),
            outcomes: train[old_i].outcomes.clone(),
            cites: BTreeSet::new(),
            date: None,
        })
        .collect();

    let mut relations: Vec<PrecedentRelation> = Vec::new();
    let test_cases: Vec<Case> = tests
        .iter()
        .enumerate()
        .map(|(j, (draft, cites))| {
            let mut cite_ids = BTreeSet::new();
            for (old_i, articles, _) in cites {
                let tid = train_id(new_index[*old_i]);
                cite_ids.insert(tid.clone());
                let mut by_kind: std::collections::BTreeMap<PrecedentKind, BTreeSet<usize>> =
                    std::collections::BTreeMap::new();
                for &k in articles {
                    let kind = kind_at(draft.outcomes[k], train[*old_i].outcomes[k]);
                    by_kind.entry(kind).or_default().insert(k);
                }
                for (kind, articles) in by_kind {
                    relations.push(PrecedentRelation {
                        train_id: tid.clone(),
                        test_id: test_id(j),
                        kind,
                        scope: Scope::Cited,
                        articles,
                    });
                }
            }
            Case {
                id: test_id(j),
                facts_text: None,
                embedding: Some(draft.embedding.clone()),
                outcomes: draft.outcomes.clone(),
                cites: cite_ids,
                date: None,
            }
        })
        .collect();

    relations.sort_by(|a, b| {
        (&a.test_id, &a.train_id, a.kind).cmp(&(&b.test_id, &b.train_id, b.kind))
    });

    let corpus = Corpus {
        num_articles: config.k,
        article_names: (0..config.k).map(|k| format!("article-{k:02}")).collect(),
        train: train_cases,
        validation: Vec::new(),
        test: test_cases,
    };
    Ok(SynthOutput { corpus, relations, prototypes, anchor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citegraph::{build_network, CaseRegistry};
    use crate::corpus::{filter_for_precedent, CitedBy};
    use crate::model::{micro_f1, predict, train, Head, ModelConfig};
    use crate::taxonomy::{label_corpus, Granularity, LabelConfig};

    fn small_config() -> SynthConfig {
        SynthConfig {
            k: 3,
            n_train: 30,
            n_test: 8,
            d1: 8,
            seed: 11,
            claim_rate: 0.8,
            positive_rate: 0.5,
            cite_per_test: 3,
            applied_bias: 0.7,
            noise_sigma: 0.05,
        }
    }

    #[test]
    fn same_config_is_bitwise_identical() {
        let a = generate(&small_config()).unwrap();
        let b = generate(&small_config()).unwrap();
        assert_eq!(a.relations, b.relations);
        assert_eq!(a.corpus.train.len(), b.corpus.train.len());
        for (ca, cb) in a.corpus.cases().zip(b.corpus.cases()) {
            assert_eq!(ca.1.id, cb.1.id);
            assert_eq!(ca.1.outcomes, cb.1.outcomes);
            assert_eq!(ca.1.cites, cb.1.cites);
            let (ea, eb) = (ca.1.embedding.as_ref().unwrap(), cb.1.embedding.as_ref().unwrap());
            for (x, y) in ea.iter().zip(eb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&small_config()).unwrap();
        let b = generate(&SynthConfig { seed: 12, ..small_config() }).unwrap();
        let ea = a.corpus.test[0].embedding.as_ref().unwrap();
        let eb = b.corpus.test[0].embedding.as_ref().unwrap();
        assert_ne!(ea, eb);
    }

    #[test]
    fn prototypes_and_anchor_are_orthonormal() {
        let out = generate(&small_config()).unwrap();
        let mut frame = out.prototypes.clone();
        frame.push(out.anchor.clone());
        for (i, p) in frame.iter().enumerate() {
            for (j, q) in frame.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(p, q) - expect).abs() < 1e-10, "({i},{j}) -> {}", dot(p, q));
            }
        }
    }

    #[test]
    fn applied_bias_extremes_plant_single_families() {
        let pure_applied =
            generate(&SynthConfig { applied_bias: 1.0, ..small_config() }).unwrap();
        assert!(!pure_applied.relations.is_empty());
        assert!(pure_applied.relations.iter().all(|r| r.kind.is_applied()));

        let pure_dist = generate(&SynthConfig { applied_bias: 0.0, ..small_config() }).unwrap();
        assert!(!pure_dist.relations.is_empty());
        assert!(pure_dist.relations.iter().all(|r| !r.kind.is_applied()));
    }

    #[test]
    fn mixed_bias_plants_both_families() {
        let out = generate(&SynthConfig { applied_bias: 0.5, ..small_config() }).unwrap();
        assert!(out.relations.iter().any(|r| r.kind.is_applied()));
        assert!(out.relations.iter().any(|r| !r.kind.is_applied()));
    }

    #[test]
    fn taxonomy_labeling_reproduces_planted_relations() {
        let out = generate(&small_config()).unwrap();
        let network = build_network(&out.corpus, &[], &CaseRegistry::default()).unwrap();
        let labeling = label_corpus(
            &out.corpus,
            &network,
            LabelConfig {
                scope: Scope::Cited,
                granularity: Granularity::Article,
                claim_rule: Default::default(),
            },
        )
        .unwrap();
        assert_eq!(labeling.relations, out.relations);
    }

    #[test]
    fn corpus_validates_and_filter_is_a_noop() {
        let out = generate(&small_config()).unwrap();
        out.corpus.validate(true).unwrap();
        let network = build_network(&out.corpus, &[], &CaseRegistry::default()).unwrap();
        let filtered = filter_for_precedent(&out.corpus, &network, CitedBy::TestSplit).unwrap();
        assert!(filtered.removed_train.is_empty());
        assert!(filtered.removed_test.is_empty());
        assert_eq!(filtered.corpus.train.len(), out.corpus.train.len());
    }

    #[test]
    fn every_test_case_cites_the_requested_number() {
        let config = small_config();
        let out = generate(&config).unwrap();
        assert_eq!(out.corpus.test.len(), config.n_test);
        for case in &out.corpus.test {
            assert_eq!(case.cites.len(), config.cite_per_test, "{}", case.id);
        }
        assert!(out.corpus.train.len() <= config.n_train);
        // Every surviving train case is cited.
        let cited: BTreeSet<&str> = out
            .corpus
            .test
            .iter()
            .flat_map(|c| c.cites.iter().map(String::as_str))
            .collect();
        for case in &out.corpus.train {
            assert!(cited.contains(case.id.as_str()));
        }
    }

    #[test]
    fn relations_cover_every_citation_edge() {
        let out = generate(&small_config()).unwrap();
        let edges: BTreeSet<(String, String)> = out
            .corpus
            .test
            .iter()
            .flat_map(|t| t.cites.iter().map(|tr| (t.id.clone(), tr.clone())))
            .collect();
        let related: BTreeSet<(String, String)> = out
            .relations
            .iter()
            .map(|r| (r.test_id.clone(), r.train_id.clone()))
            .collect();
        assert_eq!(edges, related);
    }

    #[test]
    fn noiseless_corpus_trains_to_high_f1() {
        // Every case claims every article, so with zero noise the embedding
        // is a pure function of the sign pattern and applied partners share
        // it exactly; the test split stays inside the trained pattern set.
        let config = SynthConfig {
            noise_sigma: 0.0,
            claim_rate: 1.0,
            applied_bias: 0.9,
            n_train: 60,
            n_test: 12,
            cite_per_test: 3,
            ..small_config()
        };
        let out = generate(&config).unwrap();
        let model_config = ModelConfig {
            head: Head::Simple,
            d1: config.d1,
            d2: 0,
            k: config.k,
            linear: true,
            learning_rate: 2.0,
            l2_strength: 1e-4,
            dropout_rate: 0.0,
            max_epochs: 2000,
            patience: 2,
            batch_size: 64,
            grad_tol: None,
            seed: 5,
        };
        let trained = train(&out.corpus, &model_config).unwrap();
        let predictions = predict(&trained.params, &out.corpus.test, 0.5).unwrap();
        let decoded: Vec<Vec<Outcome>> =
            predictions.predictions.iter().map(|p| p.decoded.clone()).collect();
        let gold: Vec<Vec<Outcome>> =
            out.corpus.test.iter().map(|c| c.outcomes.clone()).collect();
        let score = micro_f1(&decoded, &gold).unwrap();
        assert!(score.value >= 0.99, "micro f1 {}", score.value);
    }

    #[test]
    fn validation_rejects_out_of_range_fields() {
        let base = small_config();
        let bad = [
            SynthConfig { claim_rate: 0.0, ..base },
            SynthConfig { claim_rate: 1.5, ..base },
            SynthConfig { positive_rate: 1.0, ..base },
            SynthConfig { positive_rate: 0.0, ..base },
            SynthConfig { cite_per_test: 0, ..base },
            SynthConfig { cite_per_test: 31, ..base },
            SynthConfig { applied_bias: 1.5, ..base },
            SynthConfig { noise_sigma: -0.1, ..base },
            SynthConfig { d1: 3, ..base },
            SynthConfig { n_test: 0, ..base },
        ];
        for config in bad {
            assert!(matches!(generate(&config), Err(SynthError::BadConfig(_))), "{config:?}");
        }
    }

    #[test]
    fn kind_counts_sum_to_relation_count() {
        let out = generate(&small_config()).unwrap();
        let counts = out.kind_counts();
        assert_eq!(counts.values().sum::<usize>(), out.relations.len());
    }
}
