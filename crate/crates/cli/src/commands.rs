//! The nine pipeline stages. Every stage resolves its configuration
//! (flags over file over defaults), echoes the resolution to
//! `run_config.json`, runs, and leaves stamped artifacts in the output
//! directory for the next stage.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use precedent_core::analysis;
use precedent_core::citegraph::{self, CaseRegistry};
use precedent_core::corpus::{
    load_corpus, load_corpus_opts, write_corpus_stamped, EmbeddingStore, HashingEncoder,
    LoadOptions, Outcome,
};
use precedent_core::influence;
use precedent_core::model;
use precedent_core::synth;
use precedent_core::taxonomy;

use crate::artifacts::{self, partial_path, stamp_line, write_atomic, write_json};
use crate::config::{
    config_hash, load_file_config, parse_enum_field, FileConfig, Provenance, RunConfigEcho, Source,
};
use crate::errors::{
    from_analysis, from_cite, from_corpus_read, from_corpus_write, from_filter, from_influence,
    from_model, from_synth, from_taxonomy, read_context, write_context, CliError,
};
use crate::{
    Cli, ClaimRuleArg, ClassifyArgs, CitedByArg, Command, CorrelateArgs, CorrectModeArg,
    FilterArg, FilterArgs, GranularityArg, HeadArg, InfluenceArgs, IngestArgs, KindArg, LabelArgs,
    MethodArg, OrientationArg, ScopeArg, SynthArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let Cli { out_dir, config, seed, command } = cli;
    let file = load_file_config(config.as_ref())?;
    let mut prov = Provenance::default();
    let out = resolve_out_dir(out_dir, &file, &mut prov);
    fs::create_dir_all(&out).map_err(|e| {
        CliError::Output(format!("creating output directory {}: {e}", out.display()))
    })?;
    match command {
        Command::Synth(args) => run_synth(&out, &file, seed, prov, args),
        Command::Ingest(args) => run_ingest(&out, &file, prov, args),
        Command::Filter(args) => run_filter(&out, &file, prov, args),
        Command::Train(args) => run_train(&out, &file, seed, prov, args),
        Command::Influence(args) => run_influence(&out, &file, seed, prov, args),
        Command::Label(args) => run_label(&out, &file, prov, args),
        Command::Correlate(args) => run_correlate(&out, &file, prov, args),
        Command::Classify(args) => run_classify(&out, &file, prov, args),
        Command::Report(_) => run_report(&out, prov),
    }
}

fn resolve_out_dir(flag: Option<PathBuf>, file: &FileConfig, prov: &mut Provenance) -> PathBuf {
    let (dir, source) = if let Some(d) = flag {
        (d, Source::Flag)
    } else if let Some(d) = &file.out_dir {
        (d.clone(), Source::File)
    } else if let Some(d) = std::env::var_os(crate::OUT_DIR_ENV) {
        (PathBuf::from(d), Source::Env)
    } else {
        (PathBuf::from("."), Source::Default)
    };
    prov.0.insert("out_dir".into(), source);
    dir
}

/// Writes the resolved-configuration echo. Runs after validation and before
/// the stage does any real work, so a failed run still records what it was
/// asked to do.
fn echo(
    out: &Path,
    command: &str,
    hash: &str,
    resolved: Value,
    prov: Provenance,
) -> Result<(), CliError> {
    write_json(
        &out.join(artifacts::RUN_CONFIG),
        &RunConfigEcho {
            command: command.into(),
            config_hash: hash.into(),
            out_dir: out.to_path_buf(),
            resolved,
            sources: prov,
        },
    )
}

fn run_synth(
    out: &Path,
    file: &FileConfig,
    seed: Option<u64>,
    mut prov: Provenance,
    args: SynthArgs,
) -> Result<(), CliError> {
    let s = &file.synth;
    let d = synth::SynthConfig::default();
    let cfg = synth::SynthConfig {
        k: prov.pick("synth.k", args.k, s.k, d.k),
        n_train: prov.pick("synth.n_train", args.n_train, s.n_train, d.n_train),
        n_test: prov.pick("synth.n_test", args.n_test, s.n_test, d.n_test),
        d1: prov.pick("synth.d1", args.d1, s.d1, d.d1),
        seed: prov.pick("synth.seed", seed, s.seed.or(file.seed), d.seed),
        claim_rate: prov.pick("synth.claim_rate", args.claim_rate, s.claim_rate, d.claim_rate),
        positive_rate: prov.pick(
            "synth.positive_rate",
            args.positive_rate,
            s.positive_rate,
            d.positive_rate,
        ),
        cite_per_test: prov.pick(
            "synth.cite_per_test",
            args.cite_per_test,
            s.cite_per_test,
            d.cite_per_test,
        ),
        applied_bias: prov.pick(
            "synth.applied_bias",
            args.applied_bias,
            s.applied_bias,
            d.applied_bias,
        ),
        noise_sigma: prov.pick("synth.noise_sigma", args.noise_sigma, s.noise_sigma, d.noise_sigma),
    };
    cfg.validate().map_err(from_synth)?;
    let semantic = serde_json::to_value(&cfg).expect("config serialization");
    let hash = config_hash("synth", &semantic);
    echo(out, "synth", &hash, semantic, prov)?;

    let output = synth::generate(&cfg).map_err(from_synth)?;
    let corpus_path = out.join(artifacts::CORPUS);
    write_atomic(&corpus_path, |w| {
        write_corpus_stamped(&output.corpus, w, Some(&hash))
            .map_err(|e| from_corpus_write(e, &corpus_path))
    })?;
    let kind_counts: BTreeMap<String, usize> = output
        .kind_counts()
        .into_iter()
        .map(|(k, n)| (k.as_str().to_string(), n))
        .collect();
    write_json(
        &out.join(artifacts::SYNTH_RELATIONS),
        &SynthRelationsArtifact {
            config_hash: hash,
            planted: output.relations.len(),
            kind_counts,
            relations: output.relations,
        },
    )
}

fn run_ingest(
    out: &Path,
    file: &FileConfig,
    mut prov: Provenance,
    args: IngestArgs,
) -> Result<(), CliError> {
    let input = prov.required("ingest.input", args.input, file.ingest.input.clone())?;
    let store_path = prov.pick_opt("ingest.store", args.store, file.ingest.store.clone());
    let encode_dim = prov.pick_opt("ingest.encode_dim", args.encode_dim, file.ingest.encode_dim);
    let strict = prov.pick(
        "ingest.strict_test_citations",
        args.strict_test_citations,
        file.ingest.strict_test_citations,
        false,
    );
    if encode_dim == Some(0) {
        return Err(CliError::Config("encode_dim must be positive".into()));
    }
    let semantic = json!({ "encode_dim": encode_dim, "strict_test_citations": strict });
    let hash = config_hash("ingest", &semantic);
    let resolved = json!({
        "input": input,
        "store": store_path,
        "encode_dim": encode_dim,
        "strict_test_citations": strict,
    });
    echo(out, "ingest", &hash, resolved, prov)?;

    let store = match &store_path {
        Some(p) => Some(EmbeddingStore::load(p).map_err(|e| read_context("embedding store", p, e))?),
        None => None,
    };
    let opts = LoadOptions { store: store.as_ref(), strict_test_citations: strict };
    let mut corpus = load_corpus_opts(&input, opts).map_err(|e| from_corpus_read(e, &input))?;

    if store.is_some() || encode_dim.is_some() {
        let encoder = encode_dim.map(HashingEncoder::new);
        let cases = corpus
            .train
            .iter_mut()
            .chain(corpus.validation.iter_mut())
            .chain(corpus.test.iter_mut());
        for case in cases {
            if case.embedding.is_some() {
                continue;
            }
            if let Some(s) = &store {
                if let Some(e) = s.get(&case.id) {
                    case.embedding = Some(e.to_vec());
                    continue;
                }
            }
            if let (Some(enc), Some(text)) = (&encoder, &case.facts_text) {
                case.embedding = Some(enc.encode(text));
            }
        }
        corpus
            .validate(strict)
            .map_err(|e| CliError::Config(format!("after embedding: {e}")))?;
    }

    let corpus_path = out.join(artifacts::CORPUS);
    write_atomic(&corpus_path, |w| {
        write_corpus_stamped(&corpus, w, Some(&hash)).map_err(|e| from_corpus_write(e, &corpus_path))
    })
}

fn run_filter(
    out: &Path,
    file: &FileConfig,
    mut prov: Provenance,
    args: FilterArgs,
) -> Result<(), CliError> {
    let corpus_path = prov.pick(
        "filter.corpus",
        args.corpus,
        file.filter.corpus.clone(),
        out.join(artifacts::CORPUS),
    );
    let file_cited: Option<CitedByArg> =
        parse_enum_field("filter.cited_by", file.filter.cited_by.clone())?;
    let cited_by = prov.pick("filter.cited_by", args.cited_by, file_cited, CitedByArg::Test);
    let patterns_path = prov.pick_opt("filter.patterns", args.patterns, file.filter.patterns.clone());
    let registry_path = prov.pick_opt("filter.registry", args.registry, file.filter.registry.clone());
    let semantic = json!({
        "cited_by": cited_by.as_str(),
        "patterns_given": patterns_path.is_some(),
        "registry_given": registry_path.is_some(),
    });
    let hash = config_hash("filter", &semantic);
    let resolved = json!({
        "corpus": corpus_path,
        "cited_by": cited_by.as_str(),
        "patterns": patterns_path,
        "registry": registry_path,
    });
    echo(out, "filter", &hash, resolved, prov)?;

    let corpus = load_corpus(&corpus_path).map_err(|e| from_corpus_read(e, &corpus_path))?;
    let patterns = match &patterns_path {
        Some(p) => citegraph::load_patterns(p).map_err(|e| read_context("citation patterns", p, e))?,
        None => Vec::new(),
    };
    let registry = match &registry_path {
        Some(p) => CaseRegistry::load(p).map_err(|e| read_context("case registry", p, e))?,
        None => CaseRegistry::default(),
    };
    let network = citegraph::build_network(&corpus, &patterns, &registry).map_err(from_cite)?;
    let outcome =
        precedent_core::corpus::filter_for_precedent(&corpus, &network, cited_by.into_core())
            .map_err(from_filter)?;

    let filtered_path = out.join(artifacts::FILTERED_CORPUS);
    write_atomic(&filtered_path, |w| {
        write_corpus_stamped(&outcome.corpus, w, Some(&hash))
            .map_err(|e| from_corpus_write(e, &filtered_path))
    })?;
    write_json(
        &out.join(artifacts::FILTER_REPORT),
        &FilterReportArtifact {
            config_hash: hash,
            cited_by: cited_by.as_str(),
            rounds: outcome.rounds,
            kept_train: outcome.corpus.train.len(),
            kept_test: outcome.corpus.test.len(),
            kept_validation: outcome.corpus.validation.len(),
            removed_train: outcome.removed_train,
            removed_test: outcome.removed_test,
        },
    )
}

fn run_train(
    out: &Path,
    file: &FileConfig,
    seed: Option<u64>,
    mut prov: Provenance,
    args: TrainArgs,
) -> Result<(), CliError> {
    let corpus_path = prov.pick(
        "train.corpus",
        args.corpus,
        file.train.corpus.clone(),
        out.join(artifacts::FILTERED_CORPUS),
    );
    let corpus = load_corpus(&corpus_path).map_err(|e| from_corpus_read(e, &corpus_path))?;
    let d1 = corpus.embedding_dim().ok_or_else(|| {
        CliError::Config(format!(
            "corpus {} carries no embeddings; ingest with --encode-dim or supply vectors",
            corpus_path.display()
        ))
    })?;
    prov.data("model.d1");
    let k = corpus
        .cases()
        .next()
        .map(|(_, c)| c.outcomes.len())
        .ok_or_else(|| CliError::Config(format!("corpus {} has no cases", corpus_path.display())))?;
    prov.data("model.k");

    let m = &file.model;
    let file_head: Option<HeadArg> = parse_enum_field("model.head", m.head.clone())?;
    let head = prov.pick("model.head", args.head, file_head, HeadArg::Joint).into_core();
    let linear = prov.pick("model.linear", args.linear, m.linear, false);
    if linear && args.d2.or(m.d2).unwrap_or(0) > 0 {
        return Err(CliError::Config(
            "conflicting values: a linear head has no hidden layer; drop d2 or disable linear"
                .into(),
        ));
    }
    let d2 = if linear {
        prov.0.insert("model.d2".into(), Source::Default);
        0
    } else {
        prov.pick("model.d2", args.d2, m.d2, 100)
    };
    let cfg = model::ModelConfig {
        head,
        d1,
        d2,
        k,
        linear,
        learning_rate: prov.pick("model.learning_rate", args.learning_rate, m.learning_rate, 3e-4),
        l2_strength: prov.pick("model.l2_strength", args.l2_strength, m.l2_strength, 1e-4),
        dropout_rate: prov.pick("model.dropout_rate", args.dropout_rate, m.dropout_rate, 0.1),
        max_epochs: prov.pick("model.max_epochs", args.max_epochs, m.max_epochs, 10),
        patience: prov.pick("model.patience", args.patience, m.patience, 2),
        batch_size: prov.pick("model.batch_size", args.batch_size, m.batch_size, 16),
        grad_tol: prov.pick_opt("model.grad_tol", args.grad_tol, m.grad_tol),
        seed: prov.pick("model.seed", args.model_seed.or(seed), m.seed.or(file.seed), 7),
    };
    cfg.validate().map_err(from_model)?;
    let threshold = prov.pick("train.threshold", args.threshold, file.train.threshold, 0.5);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Config("threshold must lie in [0,1]".into()));
    }
    let semantic = json!({ "model": cfg, "threshold": threshold });
    let hash = config_hash("train", &semantic);
    let resolved = json!({ "corpus": corpus_path, "model": cfg, "threshold": threshold });
    echo(out, "train", &hash, resolved, prov)?;

    let trained = model::train(&corpus, &cfg).map_err(from_model)?;
    let pset = model::predict(&trained.params, &corpus.test, threshold).map_err(from_model)?;
    let gold: Vec<Vec<Outcome>> = corpus.test.iter().map(|c| c.outcomes.clone()).collect();
    let decoded: Vec<Vec<Outcome>> = pset.predictions.iter().map(|p| p.decoded.clone()).collect();
    let micro = model::micro_f1(&decoded, &gold).map_err(from_model)?;
    let macro_f1 = model::macro_f1(&decoded, &gold).map_err(from_model)?;

    let checkpoint_path = out.join(artifacts::CHECKPOINT);
    let partial = partial_path(&checkpoint_path);
    model::save_checkpoint_stamped(&partial, &cfg, &trained.params, Some(&hash))
        .map_err(|e| CliError::Output(format!("writing {}: {e}", partial.display())))?;
    fs::rename(&partial, &checkpoint_path).map_err(|e| write_context(&checkpoint_path, e))?;

    let log_path = out.join(artifacts::TRAIN_LOG);
    write_atomic(&log_path, |w| {
        w.write_all(stamp_line(&hash).as_bytes()).map_err(|e| write_context(&log_path, e))?;
        model::write_log_csv(&trained.log, w).map_err(|e| write_context(&log_path, e))
    })?;
    write_json(
        &out.join(artifacts::PREDICTIONS),
        &PredictionsArtifact { config_hash: hash.clone(), set: pset },
    )?;
    write_json(
        &out.join(artifacts::METRICS),
        &MetricsArtifact {
            config_hash: hash,
            head,
            threshold,
            micro_f1: micro,
            macro_f1,
            stopped_early: trained.stopped_early,
            best_epoch: trained.best_epoch,
            epochs: trained.log.len(),
        },
    )
}

fn run_influence(
    out: &Path,
    file: &FileConfig,
    seed: Option<u64>,
    mut prov: Provenance,
    args: InfluenceArgs,
) -> Result<(), CliError> {
    let corpus_path = prov.pick(
        "influence.corpus",
        args.corpus,
        file.influence.corpus.clone(),
        out.join(artifacts::FILTERED_CORPUS),
    );
    let checkpoint_path = prov.pick(
        "influence.checkpoint",
        args.checkpoint,
        file.influence.checkpoint.clone(),
        out.join(artifacts::CHECKPOINT),
    );
    let s = &file.solver;
    let file_method: Option<MethodArg> = parse_enum_field("solver.method", s.method.clone())?;
    let d = influence::InverseHvpConfig::default();
    let cfg = influence::InverseHvpConfig {
        method: prov.pick("solver.method", args.method, file_method, MethodArg::Exact).into_core(),
        damping: prov.pick("solver.damping", args.damping, s.damping, d.damping),
        cg_tol: prov.pick("solver.cg_tol", args.cg_tol, s.cg_tol, d.cg_tol),
        cg_max_iter: prov.pick("solver.cg_max_iter", args.cg_max_iter, s.cg_max_iter, d.cg_max_iter),
        lissa_depth: prov.pick("solver.lissa_depth", args.lissa_depth, s.lissa_depth, d.lissa_depth),
        lissa_samples: prov.pick(
            "solver.lissa_samples",
            args.lissa_samples,
            s.lissa_samples,
            d.lissa_samples,
        ),
        lissa_scale: prov.pick("solver.lissa_scale", args.lissa_scale, s.lissa_scale, d.lissa_scale),
        lissa_batch: prov.pick("solver.lissa_batch", args.lissa_batch, s.lissa_batch, d.lissa_batch),
        seed: prov.pick("solver.seed", args.solver_seed.or(seed), s.seed.or(file.seed), d.seed),
        exact_cap: prov.pick("solver.exact_cap", args.exact_cap, s.exact_cap, d.exact_cap),
    };
    cfg.validate().map_err(from_influence)?;
    let semantic = serde_json::to_value(&cfg).expect("config serialization");
    let hash = config_hash("influence", &semantic);
    let resolved = json!({
        "corpus": corpus_path,
        "checkpoint": checkpoint_path,
        "solver": cfg,
    });
    echo(out, "influence", &hash, resolved, prov)?;

    let corpus = load_corpus(&corpus_path).map_err(|e| from_corpus_read(e, &corpus_path))?;
    let (mc, params) = model::load_checkpoint(&checkpoint_path)
        .map_err(|e| read_context("checkpoint", &checkpoint_path, e))?;
    let train_inst = model::instances(&corpus.train, mc.d1, mc.k).map_err(from_model)?;
    let test_inst = model::instances(&corpus.test, mc.d1, mc.k).map_err(from_model)?;
    let (matrix, diagnostics) = influence::influence_for_model(
        &params,
        &train_inst,
        &test_inst,
        None,
        mc.l2_strength,
        &cfg,
    )
    .map_err(from_influence)?;

    let bin_path = out.join(artifacts::INFLUENCE_BIN);
    let partial = partial_path(&bin_path);
    influence::write_matrix(&matrix, &partial)
        .map_err(|e| CliError::Output(format!("writing {}: {e}", partial.display())))?;
    fs::rename(&partial, &bin_path).map_err(|e| write_context(&bin_path, e))?;

    let test_ids: Vec<String> = corpus.test.iter().map(|c| c.id.clone()).collect();
    let train_ids: Vec<String> = corpus.train.iter().map(|c| c.id.clone()).collect();
    let csv_path = out.join(artifacts::INFLUENCE_CSV);
    write_atomic(&csv_path, |w| {
        w.write_all(stamp_line(&hash).as_bytes()).map_err(|e| write_context(&csv_path, e))?;
        influence::write_matrix_csv(&matrix, &test_ids, &train_ids, w)
            .map_err(|e| CliError::Output(format!("writing {}: {e}", csv_path.display())))
    })?;
    write_json(
        &out.join(artifacts::INFLUENCE_DIAG),
        &InfluenceDiagArtifact {
            config_hash: hash,
            matrix_file: artifacts::INFLUENCE_BIN.into(),
            diagnostics,
        },
    )
}

fn run_label(
    out: &Path,
    file: &FileConfig,
    mut prov: Provenance,
    args: LabelArgs,
) -> Result<(), CliError> {
    let corpus_path = prov.pick(
        "label.corpus",
        args.corpus,
        file.label.corpus.clone(),
        out.join(artifacts::FILTERED_CORPUS),
    );
    let l = &file.label;
    let scope = prov
        .pick(
            "label.scope",
            args.scope,
            parse_enum_field::<ScopeArg>("label.scope", l.scope.clone())?,
            ScopeArg::Cited,
        )
        .into_core();
    let granularity = prov
        .pick(
            "label.granularity",
            args.granularity,
            parse_enum_field::<GranularityArg>("label.granularity", l.granularity.clone())?,
            GranularityArg::Article,
        )
        .into_core();
    let claim_rule = prov
        .pick(
            "label.claim_rule",
            args.claim_rule,
            parse_enum_field::<ClaimRuleArg>("label.claim_rule", l.claim_rule.clone())?,
            ClaimRuleArg::Existential,
        )
        .into_core();
    let semantic = json!({ "scope": scope, "granularity": granularity, "claim_rule": claim_rule });
    let hash = config_hash("label", &semantic);
    let resolved = json!({
        "corpus": corpus_path,
        "scope": scope,
        "granularity": granularity,
        "claim_rule": claim_rule,
    });
    echo(out, "label", &hash, resolved, prov)?;

    let corpus = load_corpus(&corpus_path).map_err(|e| from_corpus_read(e, &corpus_path))?;
    let network =
        citegraph::build_network(&corpus, &[], &CaseRegistry::default()).map_err(from_cite)?;
    let labeling = taxonomy::label_corpus(
        &corpus,
        &network,
        taxonomy::LabelConfig { scope, granularity, claim_rule },
    )
    .map_err(from_taxonomy)?;

    let kind_pairs: BTreeMap<String, usize> = labeling
        .matrices
        .iter()
        .map(|(k, m)| (k.as_str().to_string(), m.ones()))
        .collect();
    write_json(
        &out.join(artifacts::LABELS),
        &LabelsArtifact {
            config_hash: hash,
            scope,
            granularity,
            claim_rule,
            n_test: labeling.overall.n_test,
            n_train: labeling.overall.n_train,
            relation_count: labeling.relations.len(),
            kind_pairs,
            overall_pairs: labeling.overall.ones(),
            mixed_pairs: labeling.mixed_pairs,
            relations: labeling.relations,
        },
    )
}

fn run_correlate(
    out: &Path,
    file: &FileConfig,
    mut prov: Provenance,
    args: CorrelateArgs,
) -> Result<(), CliError> {
    let c = &file.correlate;
    let corpus_path = prov.pick(
        "correlate.corpus",
        args.corpus,
        c.corpus.clone(),
        out.join(artifacts::FILTERED_CORPUS),
    );
    let influence_path = prov.pick(
        "correlate.influence",
        args.influence,
        c.influence.clone(),
        out.join(artifacts::INFLUENCE_BIN),
    );
    let predictions_path = prov.pick(
        "correlate.predictions",
        args.predictions,
        c.predictions.clone(),
        out.join(artifacts::PREDICTIONS),
    );
    let orientation = prov
        .pick(
            "correlate.orientation",
            args.orientation,
            parse_enum_field::<OrientationArg>("correlate.orientation", c.orientation.clone())?,
            OrientationArg::Support,
        )
        .into_core();
    let filter = prov
        .pick(
            "correlate.filter",
            args.filter,
            parse_enum_field::<FilterArg>("correlate.filter", c.filter.clone())?,
            FilterArg::All,
        )
        .into_core();
    let correct_mode = prov
        .pick(
            "correlate.correct_mode",
            args.correct_mode,
            parse_enum_field::<CorrectModeArg>("correlate.correct_mode", c.correct_mode.clone())?,
            CorrectModeArg::FullVector,
        )
        .into_core();
    let claim_rule = prov
        .pick(
            "correlate.claim_rule",
            args.claim_rule,
            parse_enum_field::<ClaimRuleArg>("correlate.claim_rule", c.claim_rule.clone())?,
            ClaimRuleArg::Existential,
        )
        .into_core();
    let semantic = json!({
        "orientation": orientation,
        "filter": filter,
        "correct_mode": correct_mode,
        "claim_rule": claim_rule,
    });
    let hash = config_hash("correlate", &semantic);
    let resolved = json!({
        "corpus": corpus_path,
        "influence": influence_path,
        "predictions": predictions_path,
        "orientation": orientation,
        "filter": filter,
        "correct_mode": correct_mode,
        "claim_rule": claim_rule,
    });
    echo(out, "correlate", &hash, resolved, prov)?;

    let corpus = load_corpus(&corpus_path).map_err(|e| from_corpus_read(e, &corpus_path))?;
    let matrix = influence::read_matrix(&influence_path)
        .map_err(|e| read_context("influence matrix", &influence_path, e))?;
    let predictions: Option<PredictionsArtifact> = if filter == analysis::Filter::All {
        None
    } else {
        let f = File::open(&predictions_path)
            .map_err(|e| read_context("predictions", &predictions_path, e))?;
        Some(
            serde_json::from_reader(BufReader::new(f))
                .map_err(|e| read_context("predictions", &predictions_path, e))?,
        )
    };
    let network =
        citegraph::build_network(&corpus, &[], &CaseRegistry::default()).map_err(from_cite)?;
    let ctx = analysis::CorrelateContext {
        corpus: &corpus,
        network: &network,
        predictions: predictions.as_ref().map(|p| &p.set),
        claim_rule,
        orientation,
        correct_mode,
    };
    let mut rows = Vec::new();
    for mut spec in analysis::standard_specs() {
        spec.filter = filter;
        rows.push(analysis::correlate(&matrix, &ctx, &spec).map_err(from_analysis)?);
    }

    let tsv_path = out.join(artifacts::CORRELATIONS_TSV);
    write_atomic(&tsv_path, |w| {
        w.write_all(stamp_line(&hash).as_bytes()).map_err(|e| write_context(&tsv_path, e))?;
        analysis::write_rows_tsv(&rows, w).map_err(|e| write_context(&tsv_path, e))
    })?;
    write_json(
        &out.join(artifacts::CORRELATIONS_JSON),
        &CorrelationsArtifact {
            config_hash: hash,
            orientation,
            filter,
            correct_mode,
            claim_rule,
            rows,
        },
    )
}

fn run_classify(
    out: &Path,
    file: &FileConfig,
    mut prov: Provenance,
    args: ClassifyArgs,
) -> Result<(), CliError> {
    let c = &file.classify;
    let corpus_path = prov.pick(
        "classify.corpus",
        args.corpus,
        c.corpus.clone(),
        out.join(artifacts::FILTERED_CORPUS),
    );
    let influence_path = prov.pick(
        "classify.influence",
        args.influence,
        c.influence.clone(),
        out.join(artifacts::INFLUENCE_BIN),
    );
    let kind = prov.pick(
        "classify.kind",
        args.kind,
        parse_enum_field::<KindArg>("classify.kind", c.kind.clone())?,
        KindArg::Overall,
    );
    let scope = prov
        .pick(
            "classify.scope",
            args.scope,
            parse_enum_field::<ScopeArg>("classify.scope", c.scope.clone())?,
            ScopeArg::Cited,
        )
        .into_core();
    let claim_rule = prov
        .pick(
            "classify.claim_rule",
            args.claim_rule,
            parse_enum_field::<ClaimRuleArg>("classify.claim_rule", c.claim_rule.clone())?,
            ClaimRuleArg::Existential,
        )
        .into_core();
    let orientation = prov
        .pick(
            "classify.orientation",
            args.orientation,
            parse_enum_field::<OrientationArg>("classify.orientation", c.orientation.clone())?,
            OrientationArg::Support,
        )
        .into_core();
    let tiebreak = prov.pick("classify.tiebreak", args.tiebreak, c.tiebreak, 1e-6);
    if !(tiebreak > 0.0 && tiebreak.is_finite()) {
        return Err(CliError::Config("tiebreak must be a positive number".into()));
    }
    let semantic = json!({
        "kind": kind.as_str(),
        "scope": scope,
        "claim_rule": claim_rule,
        "orientation": orientation,
        "tiebreak": tiebreak,
    });
    let hash = config_hash("classify", &semantic);
    let resolved = json!({
        "corpus": corpus_path,
        "influence": influence_path,
        "kind": kind.as_str(),
        "scope": scope,
        "claim_rule": claim_rule,
        "orientation": orientation,
        "tiebreak": tiebreak,
    });
    echo(out, "classify", &hash, resolved, prov)?;

    let corpus = load_corpus(&corpus_path).map_err(|e| from_corpus_read(e, &corpus_path))?;
    let matrix = influence::read_matrix(&influence_path)
        .map_err(|e| read_context("influence matrix", &influence_path, e))?;
    let network =
        citegraph::build_network(&corpus, &[], &CaseRegistry::default()).map_err(from_cite)?;
    let labeling = taxonomy::label_corpus(
        &corpus,
        &network,
        taxonomy::LabelConfig {
            scope,
            granularity: taxonomy::Granularity::Article,
            claim_rule,
        },
    )
    .map_err(from_taxonomy)?;
    let labels = match kind.kind() {
        None => &labeling.overall,
        Some(k) => labeling.matrices.get(&k).ok_or_else(|| {
            CliError::Numeric(format!("no pairs carry kind {}", k.as_str()))
        })?,
    };
    let (raw, indicators) = analysis::flatten(&matrix, labels).map_err(from_analysis)?;
    let scores: Vec<f64> = raw.iter().map(|&v| orientation.apply(v)).collect();
    let params = analysis::fit_classifier(&scores, &indicators, tiebreak).map_err(from_analysis)?;
    let report = analysis::classifier_report(params, &scores, &indicators).map_err(from_analysis)?;
    let positives = indicators.iter().filter(|&&v| v == 1).count();

    write_json(
        &out.join(artifacts::CLASSIFIER),
        &ClassifierArtifact {
            config_hash: hash,
            kind: kind.as_str(),
            scope,
            claim_rule,
            orientation,
            tiebreak,
            pairs: scores.len(),
            positives,
            report,
        },
    )
}

fn run_report(out: &Path, prov: Provenance) -> Result<(), CliError> {
    let semantic = json!({});
    let hash = config_hash("report", &semantic);
    echo(out, "report", &hash, json!({}), prov)?;

    let read_value = |name: &str| -> Result<Value, CliError> {
        let path = out.join(name);
        let f = File::open(&path).map_err(|e| read_context("report input", &path, e))?;
        serde_json::from_reader(BufReader::new(f))
            .map_err(|e| read_context("report input", &path, e))
    };
    let metrics = read_value(artifacts::METRICS)?;
    let influence_diag = read_value(artifacts::INFLUENCE_DIAG)?;
    let labels = read_value(artifacts::LABELS)?;
    let correlations = read_value(artifacts::CORRELATIONS_JSON)?;
    let classifier = read_value(artifacts::CLASSIFIER)?;
    let filter_report = if out.join(artifacts::FILTER_REPORT).exists() {
        Some(read_value(artifacts::FILTER_REPORT)?)
    } else {
        None
    };
    let rows: Vec<analysis::CorrelationRow> = serde_json::from_value(
        correlations.get("rows").cloned().unwrap_or(Value::Null),
    )
    .map_err(|e| read_context("correlation rows", &out.join(artifacts::CORRELATIONS_JSON), e))?;

    write_json(
        &out.join(artifacts::REPORT_JSON),
        &ReportArtifact {
            config_hash: hash.clone(),
            filter: filter_report,
            metrics,
            influence: influence_diag,
            labels,
            correlations,
            classifier,
        },
    )?;
    let tsv_path = out.join(artifacts::REPORT_TSV);
    write_atomic(&tsv_path, |w| {
        w.write_all(stamp_line(&hash).as_bytes()).map_err(|e| write_context(&tsv_path, e))?;
        analysis::write_rows_tsv(&rows, w).map_err(|e| write_context(&tsv_path, e))
    })
}

#[derive(Serialize)]
struct SynthRelationsArtifact {
    config_hash: String,
    planted: usize,
    kind_counts: BTreeMap<String, usize>,
    relations: Vec<taxonomy::PrecedentRelation>,
}

#[derive(Serialize)]
struct FilterReportArtifact {
    config_hash: String,
    cited_by: &'static str,
    rounds: usize,
    kept_train: usize,
    kept_test: usize,
    kept_validation: usize,
    removed_train: Vec<String>,
    removed_test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct PredictionsArtifact {
    pub config_hash: String,
    #[serde(flatten)]
    pub set: model::PredictionSet,
}

#[derive(Serialize)]
struct MetricsArtifact {
    config_hash: String,
    head: model::Head,
    threshold: f64,
    micro_f1: model::F1Score,
    macro_f1: model::MacroF1,
    stopped_early: bool,
    best_epoch: usize,
    epochs: usize,
}

#[derive(Serialize)]
struct InfluenceDiagArtifact {
    config_hash: String,
    matrix_file: String,
    diagnostics: influence::SolveDiagnostics,
}

#[derive(Serialize)]
struct LabelsArtifact {
    config_hash: String,
    scope: taxonomy::Scope,
    granularity: taxonomy::Granularity,
    claim_rule: taxonomy::ClaimRule,
    n_test: usize,
    n_train: usize,
    relation_count: usize,
    kind_pairs: BTreeMap<String, usize>,
    overall_pairs: usize,
    mixed_pairs: Vec<(String, String)>,
    relations: Vec<taxonomy::PrecedentRelation>,
}

#[derive(Serialize)]
struct CorrelationsArtifact {
    config_hash: String,
    orientation: analysis::ScoreOrientation,
    filter: analysis::Filter,
    correct_mode: analysis::CorrectMode,
    claim_rule: taxonomy::ClaimRule,
    rows: Vec<analysis::CorrelationRow>,
}

#[derive(Serialize)]
struct ClassifierArtifact {
    config_hash: String,
    kind: &'static str,
    scope: taxonomy::Scope,
    claim_rule: taxonomy::ClaimRule,
    orientation: analysis::ScoreOrientation,
    tiebreak: f64,
    pairs: usize,
    positives: usize,
    report: analysis::ClassifierReport,
}

#[derive(Serialize)]
struct ReportArtifact {
    config_hash: String,
    filter: Option<Value>,
    metrics: Value,
    influence: Value,
    labels: Value,
    correlations: Value,
    classifier: Value,
}
