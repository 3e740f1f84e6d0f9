//! Correlation and retrieval evaluation.
//!
//! Flattens the influence matrix against precedent label matrices, computes
//! Spearman rank correlations per (kind, scope, granularity, filter) cell,
//! and fits the one-dimensional logistic retrieval classifier with its
//! closed-form random baseline.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::citegraph::CitationNetwork;
use crate::corpus::{Corpus, Outcome};
use crate::influence::InfluenceMatrix;
use crate::model::PredictionSet;
use crate::taxonomy::{
    self, ClaimRule, LabelConfig, LabelMatrix, Labeling, PrecedentKind, Scope, TaxonomyError,
};
use crate::vecmath::sigmoid;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least 2 observations, got {len}")]
    TooFew { len: usize },
    #[error("{which} vector is constant")]
    ConstantVector { which: &'static str },
    #[error("non-finite value in {which} vector")]
    NonFinite { which: &'static str },
    #[error("shape mismatch: scores {scores_test}x{scores_train}, labels {labels_test}x{labels_train}")]
    ShapeMismatch {
        scores_test: usize,
        scores_train: usize,
        labels_test: usize,
        labels_train: usize,
    },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("tie-break strength must be positive")]
    BadTiebreak,
    #[error("no test case claims article {article}")]
    NoEligiblePairs { article: usize },
    #[error("no positive labels anywhere")]
    DegenerateF1,
    #[error("filter requires model predictions but none were supplied")]
    MissingPredictions,
    #[error(transparent)]
    Labeling(#[from] TaxonomyError),
}

fn check_finite(v: &[f64], which: &'static str) -> Result<(), AnalysisError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFinite { which });
    }
    Ok(())
}

/// Fractional ranks (1-based), ties sharing their average rank.
fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        // Positions start+1 ..= end share the average rank.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(AnalysisError::ConstantVector { which: "score" });
    }
    if syy == 0.0 {
        return Err(AnalysisError::ConstantVector { which: "label" });
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Spearman's rank correlation: Pearson on fractional average-tie ranks.
/// Constant input is a typed error, never a silent zero.
pub fn spearman(s: &[f64], c: &[f64]) -> Result<f64, AnalysisError> {
    if s.len() != c.len() {
        return Err(AnalysisError::LengthMismatch { a: s.len(), b: c.len() });
    }
    if s.len() < 2 {
        return Err(AnalysisError::TooFew { len: s.len() });
    }
    check_finite(s, "score")?;
    check_finite(c, "label")?;
    pearson(&fractional_ranks(s), &fractional_ranks(c))
}

/// Pairs the influence matrix with a label matrix in the shared flat order
/// (test-major).
pub fn flatten(
    scores: &InfluenceMatrix,
    labels: &LabelMatrix,
) -> Result<(Vec<f64>, Vec<u8>), AnalysisError> {
    if scores.n_test != labels.n_test || scores.n_train != labels.n_train {
        return Err(AnalysisError::ShapeMismatch {
            scores_test: scores.n_test,
            scores_train: scores.n_train,
            labels_test: labels.n_test,
            labels_train: labels.n_train,
        });
    }
    Ok((scores.values.clone(), labels.values.clone()))
}

/// How raw influence becomes the score vector. Under the loss convention a
/// helpful training case has negative influence (upweighting it lowers test
/// loss), so by default scores are negated: larger score = more supportive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOrientation {
    #[default]
    Support,
    RawLoss,
}

impl ScoreOrientation {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            ScoreOrientation::Support => -raw,
            ScoreOrientation::RawLoss => raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindSelector {
    Kind(PrecedentKind),
    /// Any of the four kinds.
    Overall,
}

impl KindSelector {
    pub fn as_str(self) -> &'static str {
        match self {
            KindSelector::Kind(k) => k.as_str(),
            KindSelector::Overall => "overall",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    #[default]
    All,
    /// Restrict to test cases whose decoded prediction matches gold.
    CorrectOnly,
    /// Relabel pairs using decoded predictions as the test outcomes.
    ModelBased,
}

/// What "correctly predicted" means under `Filter::CorrectOnly`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectMode {
    /// The whole decoded outcome vector matches gold.
    #[default]
    FullVector,
    /// Only the article under analysis must match; falls back to the full
    /// vector at per-case granularity.
    PerArticle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrGranularity {
    PerCase,
    PerArticle(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSpec {
    pub kind: KindSelector,
    pub scope: Scope,
    pub granularity: CorrGranularity,
    pub filter: Filter,
}

/// The standard report grid: every kind plus overall, under both scopes,
/// per-case, unfiltered.
pub fn standard_specs() -> Vec<CorrelationSpec> {
    let mut specs = Vec::new();
    for scope in [Scope::Cited, Scope::Claimed] {
        for kind in PrecedentKind::ALL {
            specs.push(CorrelationSpec {
                kind: KindSelector::Kind(kind),
                scope,
                granularity: CorrGranularity::PerCase,
                filter: Filter::All,
            });
        }
        specs.push(CorrelationSpec {
            kind: KindSelector::Overall,
            scope,
            granularity: CorrGranularity::PerCase,
            filter: Filter::All,
        });
    }
    specs
}

pub struct CorrelateContext<'a> {
    pub corpus: &'a Corpus,
    pub network: &'a CitationNetwork,
    pub predictions: Option<&'a PredictionSet>,
    pub claim_rule: ClaimRule,
    pub orientation: ScoreOrientation,
    pub correct_mode: CorrectMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub kind: String,
    pub scope: Scope,
    pub granularity: String,
    pub filter: Filter,
    pub rho: Option<f64>,
    pub skip_reason: Option<String>,
    pub pairs: usize,
    pub positives: usize,
    pub tests_kept: usize,
    pub tests_total: usize,
    pub orientation: ScoreOrientation,
}

fn granularity_name(g: CorrGranularity) -> String {
    match g {
        CorrGranularity::PerCase => "per_case".into(),
        CorrGranularity::PerArticle(k) => format!("article_{k}"),
    }
}

fn decoded_map(predictions: &PredictionSet) -> BTreeMap<String, Vec<Outcome>> {
    predictions.predictions.iter().map(|p| (p.id.clone(), p.decoded.clone())).collect()
}

fn labeling_for(
    ctx: &CorrelateContext,
    spec: &CorrelationSpec,
) -> Result<Labeling, AnalysisError> {
    let config = LabelConfig {
        scope: spec.scope,
        granularity: match spec.granularity {
            CorrGranularity::PerCase => taxonomy::Granularity::Case,
            CorrGranularity::PerArticle(_) => taxonomy::Granularity::Article,
        },
        claim_rule: ctx.claim_rule,
    };
    let labeling = match spec.filter {
        Filter::ModelBased => {
            let predictions = ctx.predictions.ok_or(AnalysisError::MissingPredictions)?;
            taxonomy::relabel_model_based(ctx.corpus, &decoded_map(predictions), ctx.network, config)?
        }
        _ => taxonomy::label_corpus(ctx.corpus, ctx.network, config)?,
    };
    Ok(labeling)
}

/// Outcome vectors the labeling actually used for test cases: decoded
/// predictions under the model-based filter, gold otherwise.
fn effective_test_outcomes(
    ctx: &CorrelateContext,
    spec: &CorrelationSpec,
) -> Result<Vec<Vec<Outcome>>, AnalysisError> {
    match spec.filter {
        Filter::ModelBased => {
            let predictions = ctx.predictions.ok_or(AnalysisError::MissingPredictions)?;
            let map = decoded_map(predictions);
            ctx.corpus
                .test
                .iter()
                .map(|case| {
                    map.get(&case.id)
                        .cloned()
                        .ok_or(AnalysisError::Labeling(TaxonomyError::MissingPrediction {
                            id: case.id.clone(),
                        }))
                })
                .collect()
        }
        _ => Ok(ctx.corpus.test.iter().map(|c| c.outcomes.clone()).collect()),
    }
}

fn kept_test_indices(
    ctx: &CorrelateContext,
    spec: &CorrelationSpec,
    effective: &[Vec<Outcome>],
) -> Result<Vec<usize>, AnalysisError> {
    let mut kept: Vec<usize> = (0..ctx.corpus.test.len()).collect();

    if spec.filter == Filter::CorrectOnly {
        let predictions = ctx.predictions.ok_or(AnalysisError::MissingPredictions)?;
        let map = decoded_map(predictions);
        kept.retain(|&j| {
            let case = &ctx.corpus.test[j];
            match map.get(&case.id) {
                None => false,
                Some(decoded) => match (ctx.correct_mode, spec.granularity) {
                    (CorrectMode::PerArticle, CorrGranularity::PerArticle(k)) => {
                        decoded.get(k) == case.outcomes.get(k)
                    }
                    _ => *decoded == case.outcomes,
                },
            }
        });
    }

    if let CorrGranularity::PerArticle(k) = spec.granularity {
        kept.retain(|&j| effective[j].get(k).is_some_and(|o| o.claimed()));
    }
    Ok(kept)
}

fn article_label_matrix(
    labeling: &Labeling,
    corpus: &Corpus,
    kind: KindSelector,
    article: usize,
) -> LabelMatrix {
    let train_index: BTreeMap<&str, usize> =
        corpus.train.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();
    let test_index: BTreeMap<&str, usize> =
        corpus.test.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();
    let mut matrix = LabelMatrix {
        n_test: corpus.test.len(),
        n_train: corpus.train.len(),
        values: vec![0; corpus.test.len() * corpus.train.len()],
    };
    for r in &labeling.relations {
        if !r.articles.contains(&article) {
            continue;
        }
        let matches = match kind {
            KindSelector::Overall => true,
            KindSelector::Kind(k) => r.kind == k,
        };
        if !matches {
            continue;
        }
        let (Some(&j), Some(&i)) = (test_index.get(r.test_id.as_str()), train_index.get(r.train_id.as_str()))
        else {
            continue;
        };
        let idx = matrix.flat_index(j, i);
        matrix.values[idx] = 1;
    }
    matrix
}

/// One correlation cell. Data-dependent emptiness (a category with no
/// positive pairs, a filter keeping nothing) produces a skip row, not an
/// error; misuse (shape mismatch, missing predictions) stays an error.
pub fn correlate(
    scores: &InfluenceMatrix,
    ctx: &CorrelateContext,
    spec: &CorrelationSpec,
) -> Result<CorrelationRow, AnalysisError> {
    let n_train = ctx.corpus.train.len();
    let n_test = ctx.corpus.test.len();
    if scores.n_test != n_test || scores.n_train != n_train {
        return Err(AnalysisError::ShapeMismatch {
            scores_test: scores.n_test,
            scores_train: scores.n_train,
            labels_test: n_test,
            labels_train: n_train,
        });
    }

    let labeling = labeling_for(ctx, spec)?;
    let effective = effective_test_outcomes(ctx, spec)?;
    let kept = kept_test_indices(ctx, spec, &effective)?;

    let label_matrix = match spec.granularity {
        CorrGranularity::PerCase => match spec.kind {
            KindSelector::Overall => labeling.overall.clone(),
            KindSelector::Kind(k) => labeling.matrices[&k].clone(),
        },
        CorrGranularity::PerArticle(k) => article_label_matrix(&labeling, ctx.corpus, spec.kind, k),
    };

    let mut s = Vec::with_capacity(kept.len() * n_train);
    let mut c = Vec::with_capacity(kept.len() * n_train);
    for &j in &kept {
        for i in 0..n_train {
            s.push(ctx.orientation.apply(scores.get(j, i)));
            c.push(label_matrix.get(j, i) as f64);
        }
    }
    let positives = c.iter().filter(|&&v| v == 1.0).count();

    let mut row = CorrelationRow {
        kind: spec.kind.as_str().into(),
        scope: spec.scope,
        granularity: granularity_name(spec.granularity),
        filter: spec.filter,
        rho: None,
        skip_reason: None,
        pairs: s.len(),
        positives,
        tests_kept: kept.len(),
        tests_total: n_test,
        orientation: ctx.orientation,
    };

    if kept.is_empty() {
        row.skip_reason = Some(match spec.granularity {
            CorrGranularity::PerArticle(k) => format!("no eligible test cases for article {k}"),
            CorrGranularity::PerCase => "filter kept no test cases".into(),
        });
        return Ok(row);
    }

    match spearman(&s, &c) {
        Ok(rho) => row.rho = Some(rho),
        Err(AnalysisError::ConstantVector { which }) => {
            row.skip_reason = Some(format!("constant {which} vector"));
        }
        Err(AnalysisError::TooFew { len }) => {
            row.skip_reason = Some(format!("only {len} pairs"));
        }
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Strict per-article variant: an article no kept test case claims is a hard
/// error instead of a skip row.
pub fn per_article_correlate(
    scores: &InfluenceMatrix,
    ctx: &CorrelateContext,
    article: usize,
    kind: KindSelector,
    scope: Scope,
    filter: Filter,
) -> Result<CorrelationRow, AnalysisError> {
    let spec = CorrelationSpec {
        kind,
        scope,
        granularity: CorrGranularity::PerArticle(article),
        filter,
    };
    let row = correlate(scores, ctx, &spec)?;
    if row.tests_kept == 0 {
        return Err(AnalysisError::NoEligiblePairs { article });
    }
    Ok(row)
}

/// TSV export: one row per correlation cell.
pub fn write_rows_tsv<W: Write>(rows: &[CorrelationRow], writer: &mut W) -> io::Result<()> {
    writeln!(writer, "kind\tscope\tgranularity\tfilter\trho\tskip_reason\tpairs\tpositives")?;
    for r in rows {
        let rho = r.rho.map(|v| v.to_string()).unwrap_or_default();
        let filter = match r.filter {
            Filter::All => "all",
            Filter::CorrectOnly => "correct_only",
            Filter::ModelBased => "model_based",
        };
        writeln!(
            writer,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.kind,
            r.scope.as_str(),
            r.granularity,
            filter,
            rho,
            r.skip_reason.clone().unwrap_or_default(),
            r.pairs,
            r.positives
        )?;
    }
    Ok(())
}

/// Logistic retrieval classifier p(precedent | score) = sigmoid(a*s + b).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub a: f64,
    pub b: f64,
    /// Tie-break penalty strength used during fitting.
    pub tiebreak: f64,
}

fn log_likelihood(a: f64, b: f64, s: &[f64], c: &[u8], tiebreak: f64) -> f64 {
    let mut ll = 0.0;
    for (&x, &y) in s.iter().zip(c) {
        let p = sigmoid(a * x + b);
        ll += if y == 1 { p.max(1e-300).ln() } else { (1.0 - p).max(1e-300).ln() };
    }
    ll - tiebreak * (a * a + b * b)
}

/// Maximizes the penalized Bernoulli log-likelihood over both classes with
/// the penalty subtracted, by damped Newton ascent from (0, 0). Deterministic.
pub fn fit_classifier(s: &[f64], c: &[u8], tiebreak: f64) -> Result<ClassifierParams, AnalysisError> {
    if s.len() != c.len() {
        return Err(AnalysisError::LengthMismatch { a: s.len(), b: c.len() });
    }
    if !(tiebreak > 0.0) {
        return Err(AnalysisError::BadTiebreak);
    }
    check_finite(s, "score")?;
    let positives = c.iter().filter(|&&v| v == 1).count();
    if positives == 0 || positives == c.len() {
        return Err(AnalysisError::SingleClass);
    }

    let (mut a, mut b) = (0.0, 0.0);
    let mut current = log_likelihood(a, b, s, c, tiebreak);
    for _ in 0..200 {
        let (mut ga, mut gb) = (-2.0 * tiebreak * a, -2.0 * tiebreak * b);
        let (mut haa, mut hab, mut hbb) = (-2.0 * tiebreak, 0.0, -2.0 * tiebreak);
        for (&x, &y) in s.iter().zip(c) {
            let p = sigmoid(a * x + b);
            let r = y as f64 - p;
            let w = p * (1.0 - p);
            ga += r * x;
            gb += r;
            haa -= w * x * x;
            hab -= w * x;
            hbb -= w;
        }
        if (ga * ga + gb * gb).sqrt() <= 1e-8 {
            break;
        }
        // Newton ascent: d = -H^{-1} g with H negative definite.
        let det = haa * hbb - hab * hab;
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(haa * gb - hab * ga) / det;
        let mut t = 1.0;
        loop {
            let candidate = log_likelihood(a + t * da, b + t * db, s, c, tiebreak);
            if candidate >= current || t < 1e-12 {
                a += t * da;
                b += t * db;
                current = candidate;
                break;
            }
            t /= 2.0;
        }
    }
    Ok(ClassifierParams { a, b, tiebreak })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifierReport {
    pub params: ClassifierParams,
    /// Score threshold -b/a; None when a = 0 and the boundary is undefined.
    pub threshold: Option<f64>,
    pub degenerate_threshold: bool,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub positive_rate: f64,
    /// Expected F1 of a predictor emitting 1 at the empirical positive rate:
    /// 2*pi*q/(pi+q) with q = pi, which reduces to the rate itself.
    pub baseline_f1: f64,
    pub gain: f64,
}

pub fn classifier_report(
    params: ClassifierParams,
    s: &[f64],
    c: &[u8],
) -> Result<ClassifierReport, AnalysisError> {
    if s.len() != c.len() {
        return Err(AnalysisError::LengthMismatch { a: s.len(), b: c.len() });
    }
    let positives = c.iter().filter(|&&v| v == 1).count();
    if positives == 0 {
        return Err(AnalysisError::DegenerateF1);
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&x, &y) in s.iter().zip(c) {
        let predicted = params.a * x + params.b >= 0.0;
        match (predicted, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (tp + fn_) as f64;
    let f1 =
        if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let rate = positives as f64 / c.len() as f64;
    let baseline_f1 = 2.0 * rate * rate / (rate + rate);
    Ok(ClassifierReport {
        params,
        threshold: if params.a != 0.0 { Some(-params.b / params.a) } else { None },
        degenerate_threshold: params.a == 0.0,
        f1,
        precision,
        recall,
        positive_rate: rate,
        baseline_f1,
        gain: f1 - baseline_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citegraph::{build_network, CaseRegistry};
    use crate::corpus::Case;
    use crate::model::{Head, Prediction};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Outcome::{Neg, Null, Pos};

    #[test]
    fn spearman_matches_hand_worked_example() {
        let rho = spearman(&[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((rho - 0.8660).abs() < 1e-4);
        // Exact value is 1.5/sqrt(3).
        assert!((rho - 1.5 / 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn top_half_indicator_correlates_positively() {
        let s: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let c: Vec<f64> = (0..20).map(|i| if i >= 10 { 1.0 } else { 0.0 }).collect();
        assert!(spearman(&s, &c).unwrap() > 0.0);
    }

    #[test]
    fn negating_scores_negates_rho_exactly() {
        let s = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let c = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let rho = spearman(&s, &c).unwrap();
        let rho_neg = spearman(&neg, &c).unwrap();
        assert_eq!(rho.to_bits(), (-rho_neg).to_bits());
    }

    #[test]
    fn spearman_error_cases_are_typed() {
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0]),
            Err(AnalysisError::LengthMismatch { .. })
        ));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(AnalysisError::TooFew { .. })));
        assert!(matches!(
            spearman(&[2.0, 2.0, 2.0], &[0.0, 1.0, 0.0]),
            Err(AnalysisError::ConstantVector { which: "score" })
        ));
        assert!(matches!(
            spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]),
            Err(AnalysisError::ConstantVector { which: "label" })
        ));
        assert!(matches!(
            spearman(&[1.0, f64::NAN], &[0.0, 1.0]),
            Err(AnalysisError::NonFinite { .. })
        ));
    }

    // Quadratic-time oracle: rank = |{smaller}| + (|{equal}| + 1) / 2.
    fn rank_oracle(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let smaller = v.iter().filter(|&&y| y < x).count();
                let equal = v.iter().filter(|&&y| y == x).count();
                smaller as f64 + (equal as f64 + 1.0) / 2.0
            })
            .collect()
    }

    proptest! {
        #[test]
        fn ranks_match_quadratic_oracle(values in proptest::collection::vec(0i8..6, 2..40)) {
            let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
            let fast = fractional_ranks(&v);
            let slow = rank_oracle(&v);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn rho_is_invariant_under_monotone_maps(
            pairs in proptest::collection::vec((-4.0f64..4.0, 0u8..2), 3..30)
        ) {
            let values: Vec<f64> = pairs.iter().map(|&(v, _)| v).collect();
            let c: Vec<f64> = pairs.iter().map(|&(_, l)| l as f64).collect();
            let base = spearman(&values, &c);
            prop_assume!(base.is_ok());
            let base = base.unwrap();
            let exp_mapped: Vec<f64> = values.iter().map(|v| v.exp()).collect();
            let affine: Vec<f64> = values.iter().map(|v| 3.5 * v + 11.0).collect();
            prop_assert!((spearman(&exp_mapped, &c).unwrap() - base).abs() < 1e-12);
            prop_assert!((spearman(&affine, &c).unwrap() - base).abs() < 1e-12);
        }
    }

    fn matrix(n_test: usize, n_train: usize, values: Vec<f64>) -> InfluenceMatrix {
        InfluenceMatrix { n_test, n_train, values }
    }

    fn label_matrix(n_test: usize, n_train: usize, ones: &[(usize, usize)]) -> LabelMatrix {
        let mut m = LabelMatrix { n_test, n_train, values: vec![0; n_test * n_train] };
        for &(j, i) in ones {
            let idx = m.flat_index(j, i);
            m.values[idx] = 1;
        }
        m
    }

    #[test]
    fn flatten_is_test_major_and_counts_relations() {
        let scores = matrix(1, 2, vec![0.5, -0.25]);
        let labels = label_matrix(1, 2, &[(0, 1)]);
        let (s, c) = flatten(&scores, &labels).unwrap();
        assert_eq!(s, vec![0.5, -0.25]);
        assert_eq!(c, vec![0, 1]);
        assert_eq!(c.iter().map(|&v| v as usize).sum::<usize>(), 1);
    }

    #[test]
    fn flatten_rejects_shape_mismatch() {
        let scores = matrix(1, 2, vec![0.5, -0.25]);
        let labels = label_matrix(2, 2, &[]);
        assert!(matches!(flatten(&scores, &labels), Err(AnalysisError::ShapeMismatch { .. })));
    }

    #[test]
    fn permuting_train_order_leaves_rho_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n_test, n_train) = (3, 7);
        let values: Vec<f64> = (0..n_test * n_train).map(|_| rng.random::<f64>()).collect();
        let scores = matrix(n_test, n_train, values.clone());
        let ones: Vec<(usize, usize)> = vec![(0, 1), (0, 4), (1, 6), (2, 0), (2, 3)];
        let labels = label_matrix(n_test, n_train, &ones);
        let (s, c) = flatten(&scores, &labels).unwrap();
        let c_f: Vec<f64> = c.iter().map(|&v| v as f64).collect();
        let base = spearman(&s, &c_f).unwrap();

        let perm = [4usize, 2, 6, 0, 5, 1, 3];
        let mut pvalues = vec![0.0; n_test * n_train];
        for j in 0..n_test {
            for (new_i, &old_i) in perm.iter().enumerate() {
                pvalues[j * n_train + new_i] = values[j * n_train + old_i];
            }
        }
        let pones: Vec<(usize, usize)> = ones
            .iter()
            .map(|&(j, i)| (j, perm.iter().position(|&p| p == i).unwrap()))
            .collect();
        let (ps, pc) = flatten(&matrix(n_test, n_train, pvalues), &label_matrix(n_test, n_train, &pones))
            .unwrap();
        let pc_f: Vec<f64> = pc.iter().map(|&v| v as f64).collect();
        let permuted = spearman(&ps, &pc_f).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn top_decile_labels_maximize_rho_at_the_top() {
        // Scores descending; the indicator of each decile in turn. The top
        // decile must win and be positive.
        let n = 100;
        let s: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut rhos = Vec::new();
        for decile in 0..10 {
            let c: Vec<f64> = (0..n)
                .map(|i| if i / 10 == decile { 1.0 } else { 0.0 })
                .collect();
            rhos.push(spearman(&s, &c).unwrap());
        }
        assert!(rhos[0] > 0.0);
        for other in &rhos[1..] {
            assert!(rhos[0] > *other);
        }
    }

    fn ov(spec: &str) -> Vec<Outcome> {
        spec.chars()
            .map(|c| match c {
                '+' => Pos,
                '-' => Neg,
                _ => Null,
            })
            .collect()
    }

    fn case(id: &str, outcomes: &str, cites: &[&str]) -> Case {
        Case {
            id: id.into(),
            facts_text: Some(String::new()),
            embedding: None,
            outcomes: ov(outcomes),
            cites: cites.iter().map(|s| s.to_string()).collect(),
            date: None,
        }
    }

    // Two test cases, three train cases. te-x cites tr-a (applied_pos at 0)
    // and tr-b (applied_neg at 1); te-y cites tr-c (applied_pos at 1).
    fn fixture() -> (Corpus, CitationNetwork) {
        let corpus = Corpus {
            num_articles: 3,
            article_names: vec!["a0".into(), "a1".into(), "a2".into()],
            train: vec![case("tr-a", "+00", &[]), case("tr-b", "0-0", &[]), case("tr-c", "-+0", &[])],
            validation: vec![],
            test: vec![case("te-x", "+-0", &["tr-a", "tr-b"]), case("te-y", "0+0", &["tr-c"])],
        };
        let network = build_network(&corpus, &[], &CaseRegistry::default()).unwrap();
        (corpus, network)
    }

    fn ctx<'a>(
        corpus: &'a Corpus,
        network: &'a CitationNetwork,
        predictions: Option<&'a PredictionSet>,
    ) -> CorrelateContext<'a> {
        CorrelateContext {
            corpus,
            network,
            predictions,
            claim_rule: ClaimRule::Existential,
            orientation: ScoreOrientation::Support,
            correct_mode: CorrectMode::FullVector,
        }
    }

    // Raw influence: supportive pairs most negative. Under the default
    // orientation their scores come out largest.
    fn aligned_scores() -> InfluenceMatrix {
        matrix(
            2,
            3,
            vec![
                -0.9, -0.7, 0.2, // te-x row: tr-a, tr-b supportive
                0.1, 0.3, -0.8, // te-y row: tr-c supportive
            ],
        )
    }

    #[test]
    fn correlate_finds_positive_rho_for_planted_support() {
        let (corpus, network) = fixture();
        let spec = CorrelationSpec {
            kind: KindSelector::Overall,
            scope: Scope::Cited,
            granularity: CorrGranularity::PerCase,
            filter: Filter::All,
        };
        let row = correlate(&aligned_scores(), &ctx(&corpus, &network, None), &spec).unwrap();
        assert_eq!(row.pairs, 6);
        assert_eq!(row.positives, 3);
        assert_eq!(row.tests_kept, 2);
        assert!(row.rho.unwrap() > 0.8, "{row:?}");
    }

    #[test]
    fn empty_category_becomes_a_skip_row() {
        let (corpus, network) = fixture();
        let spec = CorrelationSpec {
            kind: KindSelector::Kind(PrecedentKind::DistNeg),
            scope: Scope::Cited,
            granularity: CorrGranularity::PerCase,
            filter: Filter::All,
        };
        let row = correlate(&aligned_scores(), &ctx(&corpus, &network, None), &spec).unwrap();
        assert!(row.rho.is_none());
        assert_eq!(row.positives, 0);
        assert!(row.skip_reason.unwrap().contains("constant label"));
    }

    #[test]
    fn overall_positives_equal_union_of_kind_supports() {
        let (corpus, network) = fixture();
        let base = ctx(&corpus, &network, None);
        let mut union = std::collections::BTreeSet::new();
        for kind in PrecedentKind::ALL {
            let spec = CorrelationSpec {
                kind: KindSelector::Kind(kind),
                scope: Scope::Cited,
                granularity: CorrGranularity::PerCase,
                filter: Filter::All,
            };
            let labeling = labeling_for(&base, &spec).unwrap();
            for (idx, &v) in labeling.matrices[&kind].values.iter().enumerate() {
                if v == 1 {
                    union.insert(idx);
                }
            }
        }
        let spec = CorrelationSpec {
            kind: KindSelector::Overall,
            scope: Scope::Cited,
            granularity: CorrGranularity::PerCase,
            filter: Filter::All,
        };
        let row = correlate(&aligned_scores(), &base, &spec).unwrap();
        assert_eq!(row.positives, union.len());
    }

    fn predictions_for(corpus: &Corpus, decoded: Vec<Vec<Outcome>>) -> PredictionSet {
        PredictionSet {
            head: Head::Joint,
            threshold: 0.5,
            predictions: corpus
                .test
                .iter()
                .zip(decoded)
                .map(|(case, d)| Prediction { id: case.id.clone(), probs: vec![], decoded: d })
                .collect(),
        }
    }

    #[test]
    fn correct_only_with_no_correct_cases_is_a_skip_row() {
        let (corpus, network) = fixture();
        let predictions = predictions_for(&corpus, vec![ov("000"), ov("000")]);
        let spec = CorrelationSpec {
            kind: KindSelector::Overall,
            scope: Scope::Cited,
            granularity: CorrGranularity::PerCase,
            filter: Filter::CorrectOnly,
        };
        let row =
            correlate(&aligned_scores(), &ctx(&corpus, &network, Some(&predictions)), &spec).unwrap();
        assert_eq!(row.tests_kept, 0);
        assert!(row.rho.is_none());
        assert!(row.skip_reason.unwrap().contains("filter kept no test cases"));
    }

    #[test]
    fn correct_only_keeps_exact_matches() {
        let (corpus, network) = fixture();
        // te-x predicted exactly right, te-y wrong.
        let predictions = predictions_for(&corpus, vec![ov("+-0"), ov("000")]);
        let spec = CorrelationSpec {
            kind: KindSelector::Overall,
            scope: Scope::Cited,
            granularity: CorrGranularity::PerCase,
            filter: Filter::CorrectOnly,
        };
        let row =
            correlate(&aligned_scores(), &ctx(&corpus, &network, Some(&predictions)), &spec).unwrap();
        assert_eq!(row.tests_kept, 1);
        assert_eq!(row.pairs, 3);
    }

    #[test]
    fn model_based_needs_predictions() {
        let (corpus, network) = fixture();
        let spec = CorrelationSpec {
            kind: KindSelector::Overall,
            scope: Scope::Cited,
            granularity: CorrGranularity::PerCase,
            filter: Filter::ModelBased,
        };
        assert!(matches!(
            correlate(&aligned_scores(), &ctx(&corpus, &network, None), &spec),
            Err(AnalysisError::MissingPredictions)
        ));
    }

    #[test]
    fn model_based_with_gold_predictions_matches_unfiltered() {
        let (corpus, network) = fixture();
        let gold = predictions_for(&corpus, corpus.test.iter().map(|c| c.outcomes.clone()).collect());
        for kind in [KindSelector::Overall, KindSelector::Kind(PrecedentKind::AppliedPos)] {
            let all_spec = CorrelationSpec {
                kind,
                scope: Scope::Cited,
                granularity: CorrGranularity::PerCase,
                filter: Filter::All,
            };
            let mb_spec = CorrelationSpec { filter: Filter::ModelBased, ..all_spec };
            let all_row =
                correlate(&aligned_scores(), &ctx(&corpus, &network, None), &all_spec).unwrap();
            let mb_row =
                correlate(&aligned_scores(), &ctx(&corpus, &network, Some(&gold)), &mb_spec)
                    .unwrap();
            assert_eq!(all_row.rho, mb_row.rho);
            assert_eq!(all_row.positives, mb_row.positives);
        }
    }

    #[test]
    fn per_article_restricts_to_claiming_test_cases() {
        let (corpus, network) = fixture();
        // Article 0 is claimed only by te-x.
        let row = per_article_correlate(
            &aligned_scores(),
            &ctx(&corpus, &network, None),
            0,
            KindSelector::Overall,
            Scope::Cited,
            Filter::All,
        )
        .unwrap();
        assert_eq!(row.tests_kept, 1);
        assert_eq!(row.pairs, 3);
        assert_eq!(row.positives, 1);
    }

    #[test]
    fn unclaimed_article_is_no_eligible_pairs() {
        let (corpus, network) = fixture();
        // Article 2 is claimed by no test case.
        let got = per_article_correlate(
            &aligned_scores(),
            &ctx(&corpus, &network, None),
            2,
            KindSelector::Overall,
            Scope::Cited,
            Filter::All,
        );
        assert!(matches!(got, Err(AnalysisError::NoEligiblePairs { article: 2 })));
    }

    #[test]
    fn article_positive_counts_bound_per_case_count() {
        let (corpus, network) = fixture();
        let base = ctx(&corpus, &network, None);
        let per_case_spec = CorrelationSpec {
            kind: KindSelector::Overall,
            scope: Scope::Cited,
            granularity: CorrGranularity::PerCase,
            filter: Filter::All,
        };
        let per_case = correlate(&aligned_scores(), &base, &per_case_spec).unwrap();
        let mut article_sum = 0;
        for k in 0..corpus.num_articles {
            let spec = CorrelationSpec {
                kind: KindSelector::Overall,
                scope: Scope::Cited,
                granularity: CorrGranularity::PerArticle(k),
                filter: Filter::All,
            };
            article_sum += correlate(&aligned_scores(), &base, &spec).unwrap().positives;
        }
        assert!(article_sum >= per_case.positives);
    }

    #[test]
    fn standard_grid_has_ten_cells() {
        let specs = standard_specs();
        assert_eq!(specs.len(), 10);
        let kinds = specs.iter().filter(|s| matches!(s.kind, KindSelector::Kind(_))).count();
        let overall = specs.iter().filter(|s| s.kind == KindSelector::Overall).count();
        assert_eq!(kinds, 8);
        assert_eq!(overall, 2);
    }

    #[test]
    fn rows_tsv_has_header_and_one_row_per_cell() {
        let rows = vec![CorrelationRow {
            kind: "overall".into(),
            scope: Scope::Cited,
            granularity: "per_case".into(),
            filter: Filter::All,
            rho: Some(0.5),
            skip_reason: None,
            pairs: 6,
            positives: 3,
            tests_kept: 2,
            tests_total: 2,
            orientation: ScoreOrientation::Support,
        }];
        let mut buf = Vec::new();
        write_rows_tsv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("overall\tcited\tper_case\tall\t0.5"));
    }

    #[test]
    fn separable_scores_classify_perfectly() {
        let s = [-1.0, 1.0];
        let c = [0u8, 1];
        let params = fit_classifier(&s, &c, 1e-4).unwrap();
        let threshold = -params.b / params.a;
        assert!(params.a > 0.0);
        assert!((-1.0..1.0).contains(&threshold), "threshold {threshold}");
        let report = classifier_report(params, &s, &c).unwrap();
        assert_eq!(report.f1, 1.0);
        assert!((report.gain - (1.0 - report.baseline_f1)).abs() < 1e-15);
    }

    #[test]
    fn newton_fit_matches_grid_search() {
        let s = [-2.0, -1.2, -0.4, 0.1, 0.3, 0.9, 1.4, 2.2, -0.1, 0.6];
        let c = [0u8, 0, 0, 0, 1, 1, 1, 1, 0, 1];
        let tiebreak = 1e-3;
        let fitted = fit_classifier(&s, &c, tiebreak).unwrap();
        let fitted_ll = log_likelihood(fitted.a, fitted.b, &s, &c, tiebreak);

        let mut best = f64::NEG_INFINITY;
        let steps = 800;
        for ai in 0..=steps {
            let a = -20.0 + 40.0 * ai as f64 / steps as f64;
            for bi in 0..=steps {
                let b = -20.0 + 40.0 * bi as f64 / steps as f64;
                best = best.max(log_likelihood(a, b, &s, &c, tiebreak));
            }
        }
        assert!(fitted_ll >= best - 1e-3, "newton {fitted_ll} vs grid {best}");
    }

    #[test]
    fn predictions_survive_positive_score_rescaling() {
        // Overlapping classes keep the unpenalized optimum finite, so the
        // tiny tie-break penalty barely moves it and the slope transforms
        // inversely with the score scale.
        let s = [-2.0, -0.5, 0.1, 0.4, 1.0, 1.7, -1.1, 0.8];
        let c = [0u8, 0, 1, 0, 1, 1, 0, 1];
        let params = fit_classifier(&s, &c, 1e-6).unwrap();
        let scaled: Vec<f64> = s.iter().map(|v| v * 10.0).collect();
        let scaled_params = fit_classifier(&scaled, &c, 1e-6).unwrap();
        let predict = |p: &ClassifierParams, xs: &[f64]| -> Vec<bool> {
            xs.iter().map(|&x| p.a * x + p.b >= 0.0).collect()
        };
        assert_eq!(predict(&params, &s), predict(&scaled_params, &scaled));
        assert!((scaled_params.a * 10.0 - params.a).abs() / params.a.abs() < 0.1);
    }

    #[test]
    fn single_class_labels_are_rejected() {
        assert!(matches!(
            fit_classifier(&[1.0, 2.0], &[1, 1], 1e-4),
            Err(AnalysisError::SingleClass)
        ));
        assert!(matches!(fit_classifier(&[1.0, 2.0], &[0, 1], 0.0), Err(AnalysisError::BadTiebreak)));
    }

    #[test]
    fn zero_slope_is_a_degenerate_threshold() {
        let params = ClassifierParams { a: 0.0, b: 0.4, tiebreak: 1e-4 };
        let report = classifier_report(params, &[1.0, -1.0, 2.0], &[1, 0, 1]).unwrap();
        assert!(report.degenerate_threshold);
        assert!(report.threshold.is_none());
        // b >= 0 predicts 1 everywhere.
        assert_eq!(report.recall, 1.0);
    }

    #[test]
    fn baseline_equals_positive_rate_and_matches_monte_carlo() {
        let n = 1_000_000usize;
        let rate = 0.1;
        let mut c = vec![0u8; n];
        for v in c.iter_mut().take((n as f64 * rate) as usize) {
            *v = 1;
        }
        let params = ClassifierParams { a: 1.0, b: 0.0, tiebreak: 1e-4 };
        let s = vec![1.0; n / 2].into_iter().chain(vec![-1.0; n - n / 2]).collect::<Vec<_>>();
        let report = classifier_report(params, &s, &c).unwrap();
        assert!((report.baseline_f1 - rate).abs() < 1e-12);

        // Monte Carlo: a predictor emitting 1 at the empirical rate.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for &y in &c {
            let predicted = rng.random::<f64>() < rate;
            match (predicted, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / (tp + fn_) as f64;
        let mc_f1 = 2.0 * p * r / (p + r);
        assert!((mc_f1 - report.baseline_f1).abs() < 0.005, "mc {mc_f1}");
    }

    #[test]
    fn no_positive_labels_is_degenerate() {
        let params = ClassifierParams { a: 1.0, b: 0.0, tiebreak: 1e-4 };
        assert!(matches!(
            classifier_report(params, &[1.0, 2.0], &[0, 0]),
            Err(AnalysisError::DegenerateF1)
        ));
    }
}
