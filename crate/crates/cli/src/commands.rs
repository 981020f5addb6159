//! Subcommand definitions and their implementations.
//!
//! Every run writes its artifacts plus a `manifest.json` (resolved config
//! and input hashes) into `--out`. Machine-readable results are JSON/JSONL
//! files or stdout lines; human summaries go to stderr.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bevtsr::align::{
    batch_forward, load_alignment, save_alignment, train_align, write_loss_log, AlignDims,
    AlignTrainConfig, BatchSample, DecoderParamIds, KgpResources, SceParamIds, SCE_PARAM_NAMES,
    TEXT_PARAM_NAMES,
};
use bevtsr::captions::{
    build_corpus_captions, read_annotations, write_caption_jsonl, CaptionLevel,
};
use bevtsr::kg::{
    evaluate_link_prediction, load_graph_file, load_kge_checkpoint, save_kge_checkpoint,
    train_kge, KgeTrainConfig, Scorer, SynonymMap,
};
use bevtsr::retrieval::{build_index, evaluate_bidirectional, query_topk, MetricsReport};
use bevtsr::scene::{
    companion_kg_triples, companion_synonyms, load_corpus, save_corpus, synth_corpus, SynthSpec,
};
use bevtsr::tensor::{grad_check, GradCheckOptions};
use bevtsr::text::{TextParamIds, RESERVED};
use bevtsr::{Error, Tensor};

use crate::support::{
    ensure_out_dir, hash_checkpoint_inputs, hash_corpus_inputs, print_json, read_config, resolve,
    resolve_seed, write_json, CliError, CmdResult, RunManifest,
};

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic paired corpus with a companion knowledge graph.
    SynthCorpus(SynthCorpusArgs),
    /// Train knowledge-graph embeddings from a triple file.
    TrainKge(TrainKgeArgs),
    /// Turn scene annotations into a caption JSONL file.
    BuildCaptions(BuildCaptionsArgs),
    /// Train the scene-text alignment model on a paired corpus.
    TrainAlign(TrainAlignArgs),
    /// Evaluate bidirectional retrieval recall on a corpus's validation split.
    Eval(EvalArgs),
    /// Rank a corpus's scenes against a free-text query.
    Query(QueryArgs),
    /// Compare a checkpoint's analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

pub fn run(command: Command) -> CmdResult<()> {
    match command {
        Command::SynthCorpus(args) => run_synth_corpus(args),
        Command::TrainKge(args) => run_train_kge(args),
        Command::BuildCaptions(args) => run_build_captions(args),
        Command::TrainAlign(args) => run_train_align(args),
        Command::Eval(args) => run_eval(args),
        Command::Query(args) => run_query(args),
        Command::GradCheck(args) => run_grad_check(args),
    }
}

fn parse_scorer(s: &str) -> Result<Scorer, String> {
    match s {
        "transe-l1" => Ok(Scorer::TranseL1),
        "transe-l2" => Ok(Scorer::TranseL2),
        "distmult" => Ok(Scorer::DistMult),
        other => Err(format!(
            "unknown scorer {other:?} (expected transe-l1, transe-l2, or distmult)"
        )),
    }
}

// ---------------------------------------------------------------- synth-corpus

#[derive(Args)]
pub struct SynthCorpusArgs {
    /// Output directory for the corpus files and run manifest.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of scene classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Samples generated per class.
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Feature rows per scene.
    #[arg(long)]
    rows: Option<usize>,
    /// Feature columns per scene.
    #[arg(long)]
    bev_dim: Option<usize>,
    /// Standard deviation of the per-sample noise.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// RNG seed; falls back to $BEVTSR_SEED, the config file, then 0.
    #[arg(long, env = "BEVTSR_SEED")]
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SynthFileConfig {
    classes: Option<usize>,
    samples_per_class: Option<usize>,
    rows: Option<usize>,
    bev_dim: Option<usize>,
    noise_sigma: Option<f64>,
    seed: Option<u64>,
}

fn run_synth_corpus(args: SynthCorpusArgs) -> CmdResult<()> {
    let file: SynthFileConfig = read_config(args.config.as_deref())?;
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        num_classes: resolve(args.classes, file.classes, defaults.num_classes),
        samples_per_class: resolve(
            args.samples_per_class,
            file.samples_per_class,
            defaults.samples_per_class,
        ),
        n: resolve(args.rows, file.rows, defaults.n),
        d_b: resolve(args.bev_dim, file.bev_dim, defaults.d_b),
        noise_sigma: resolve(args.noise_sigma, file.noise_sigma, defaults.noise_sigma),
        seed: resolve_seed(args.seed, file.seed, defaults.seed),
    };
    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new("synth-corpus");
    manifest.input_optional(args.config.as_deref())?;

    let corpus = synth_corpus(&spec)?;
    save_corpus(&args.out, &corpus, CaptionLevel::Easy)?;
    for name in crate::support::CORPUS_FILES {
        manifest.output(name);
    }

    let triples = companion_kg_triples();
    let mut tsv = String::new();
    for (h, r, t) in &triples {
        tsv.push_str(&format!("{h}\t{r}\t{t}\n"));
    }
    let triples_path = args.out.join("kg_triples.tsv");
    std::fs::write(&triples_path, tsv).map_err(|e| Error::io(&triples_path, e))?;
    manifest.output("kg_triples.tsv");

    let mut syn_tsv = String::new();
    for (surface, entity) in companion_synonyms().iter() {
        syn_tsv.push_str(&format!("{surface}\t{entity}\n"));
    }
    let syn_path = args.out.join("synonyms.tsv");
    std::fs::write(&syn_path, syn_tsv).map_err(|e| Error::io(&syn_path, e))?;
    manifest.output("synonyms.tsv");

    manifest.write(&args.out, &spec)?;
    eprintln!(
        "wrote {} samples across {} classes to {} (validation {})",
        corpus.scenes.len(),
        spec.num_classes,
        args.out.display(),
        corpus.split.validation.len()
    );
    Ok(())
}

// ------------------------------------------------------------------- train-kge

#[derive(Args)]
pub struct TrainKgeArgs {
    /// Triple file, one `head<TAB>relation<TAB>tail` per line.
    #[arg(long)]
    triples: PathBuf,
    /// Output directory for the checkpoint and report.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scoring function: transe-l1, transe-l2, or distmult.
    #[arg(long, value_parser = parse_scorer)]
    scorer: Option<Scorer>,
    /// Embedding dimension.
    #[arg(long)]
    dimension: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Training iterations (one positive triple each).
    #[arg(long)]
    iterations: Option<usize>,
    /// Ranking margin (translation scorers only).
    #[arg(long)]
    margin: Option<f64>,
    /// Corrupted samples per positive.
    #[arg(long)]
    negatives: Option<usize>,
    /// RNG seed; falls back to $BEVTSR_SEED, the config file, then 0.
    #[arg(long, env = "BEVTSR_SEED")]
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct KgeFileConfig {
    scorer: Option<Scorer>,
    dimension: Option<usize>,
    learning_rate: Option<f64>,
    iterations: Option<usize>,
    margin: Option<f64>,
    negatives: Option<usize>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct KgeResolvedConfig {
    scorer: Scorer,
    dimension: usize,
    learning_rate: f64,
    iterations: usize,
    margin: f64,
    negatives_per_positive: usize,
    seed: u64,
}

fn run_train_kge(args: TrainKgeArgs) -> CmdResult<()> {
    let file: KgeFileConfig = read_config(args.config.as_deref())?;
    let defaults = KgeTrainConfig::default();
    let config = KgeTrainConfig {
        scorer: resolve(args.scorer, file.scorer, defaults.scorer),
        dimension: resolve(args.dimension, file.dimension, defaults.dimension),
        learning_rate: resolve(args.learning_rate, file.learning_rate, defaults.learning_rate),
        iterations: resolve(args.iterations, file.iterations, defaults.iterations),
        margin: resolve(args.margin, file.margin, defaults.margin),
        negatives_per_positive: resolve(
            args.negatives,
            file.negatives,
            defaults.negatives_per_positive,
        ),
        seed: resolve_seed(args.seed, file.seed, defaults.seed),
    };
    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new("train-kge");
    manifest.input_optional(args.config.as_deref())?;
    manifest.input(&args.triples)?;

    let (graph, dropped) = load_graph_file(&args.triples)?;
    if dropped > 0 {
        eprintln!("dropped {dropped} duplicate triples");
    }
    let result = train_kge(&graph, &config)?;
    save_kge_checkpoint(&args.out.join("kge"), &result.model, &graph)?;
    manifest.output("kge.tsr");
    manifest.output("kge.tsr.json");
    manifest.output("kge.json");

    let report = evaluate_link_prediction(&result.model, &graph, graph.triples())?;
    write_json(&args.out.join("link_prediction.json"), &report)?;
    manifest.output("link_prediction.json");

    manifest.write(
        &args.out,
        &KgeResolvedConfig {
            scorer: config.scorer,
            dimension: config.dimension,
            learning_rate: config.learning_rate,
            iterations: config.iterations,
            margin: config.margin,
            negatives_per_positive: config.negatives_per_positive,
            seed: config.seed,
        },
    )?;
    print_json(&report);
    eprintln!(
        "trained {} entities / {} relations: MRR {:.4}, Hits@1 {:.4}, Hits@10 {:.4}",
        graph.num_entities(),
        graph.num_relations(),
        report.mrr,
        report.hits_at_1,
        report.hits_at_10
    );
    Ok(())
}

// -------------------------------------------------------------- build-captions

#[derive(Args)]
pub struct BuildCaptionsArgs {
    /// Scene annotation JSON file (array of annotation objects).
    #[arg(long)]
    annotations: PathBuf,
    /// Output directory for the caption JSONL and run manifest.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Caption level: easy (count summaries) or hard (adds QA pairs).
    #[arg(long, value_parser = CaptionLevel::from_str)]
    level: Option<CaptionLevel>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CaptionsFileConfig {
    level: Option<CaptionLevel>,
}

#[derive(Serialize)]
struct CaptionsResolvedConfig {
    level: CaptionLevel,
}

fn run_build_captions(args: BuildCaptionsArgs) -> CmdResult<()> {
    let file: CaptionsFileConfig = read_config(args.config.as_deref())?;
    let level = resolve(args.level, file.level, CaptionLevel::Easy);
    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new("build-captions");
    manifest.input_optional(args.config.as_deref())?;
    manifest.input(&args.annotations)?;

    let annotations = read_annotations(&args.annotations)?;
    let built = build_corpus_captions(&annotations, level)?;
    write_caption_jsonl(&args.out.join("captions.jsonl"), &built.captions, level)?;
    manifest.output("captions.jsonl");
    manifest.write(&args.out, &CaptionsResolvedConfig { level })?;
    eprintln!(
        "wrote {} captions ({} distinct) at level {level}",
        built.captions.len(),
        built.distinct
    );
    Ok(())
}

// ----------------------------------------------------------------- train-align

#[derive(Args)]
pub struct TrainAlignArgs {
    /// Corpus directory (features.tsr, captions.jsonl, split.json).
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for the checkpoint, loss log, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding checkpoint base path (without extension) for knowledge
    /// prompting. Requires --triples and --synonyms.
    #[arg(long)]
    kge: Option<PathBuf>,
    /// Triple file matching the embedding checkpoint.
    #[arg(long)]
    triples: Option<PathBuf>,
    /// Synonym file, one `surface<TAB>entity` per line.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Caption-loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Shared codebook rows.
    #[arg(long)]
    codebook_size: Option<usize>,
    /// Shared embedding width.
    #[arg(long)]
    shared_dim: Option<usize>,
    /// Text token-embedding width.
    #[arg(long)]
    token_dim: Option<usize>,
    /// Text encoder output width.
    #[arg(long)]
    text_dim: Option<usize>,
    /// RNG seed; falls back to $BEVTSR_SEED, the config file, then 0.
    #[arg(long, env = "BEVTSR_SEED")]
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AlignFileConfig {
    batch_size: Option<usize>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    temperature: Option<f64>,
    lambda: Option<f64>,
    codebook_size: Option<usize>,
    shared_dim: Option<usize>,
    token_dim: Option<usize>,
    text_dim: Option<usize>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct AlignResolvedConfig {
    #[serde(flatten)]
    train: AlignTrainConfig,
    knowledge_prompting: bool,
}

fn load_kgp(
    kge: &Path,
    triples: &Path,
    synonyms: &Path,
) -> CmdResult<KgpResources> {
    let (model, entities, relations) = load_kge_checkpoint(kge)?;
    let (graph, _) = load_graph_file(triples)?;
    if graph.entity_names() != entities.as_slice()
        || graph.relation_names() != relations.as_slice()
    {
        return Err(Error::Data(format!(
            "triple file {} does not match the embedding checkpoint's vocabulary",
            triples.display()
        ))
        .into());
    }
    let synonyms = SynonymMap::read_file(synonyms)?;
    Ok(KgpResources {
        model,
        graph,
        synonyms,
    })
}

fn run_train_align(args: TrainAlignArgs) -> CmdResult<()> {
    let kgp_paths = match (&args.kge, &args.triples, &args.synonyms) {
        (Some(k), Some(t), Some(s)) => Some((k.clone(), t.clone(), s.clone())),
        (None, None, None) => None,
        _ => {
            return Err(CliError::Usage(
                "--kge, --triples, and --synonyms must be given together".into(),
            ))
        }
    };
    let file: AlignFileConfig = read_config(args.config.as_deref())?;
    let defaults = AlignTrainConfig::default();
    let config = AlignTrainConfig {
        batch_size: resolve(args.batch_size, file.batch_size, defaults.batch_size),
        epochs: resolve(args.epochs, file.epochs, defaults.epochs),
        learning_rate: resolve(args.learning_rate, file.learning_rate, defaults.learning_rate),
        seed: resolve_seed(args.seed, file.seed, defaults.seed),
        temperature: resolve(args.temperature, file.temperature, defaults.temperature),
        lambda: resolve(args.lambda, file.lambda, defaults.lambda),
        dims: AlignDims {
            k: resolve(args.codebook_size, file.codebook_size, defaults.dims.k),
            d_c: resolve(args.shared_dim, file.shared_dim, defaults.dims.d_c),
            d_tok: resolve(args.token_dim, file.token_dim, defaults.dims.d_tok),
            d_lang: resolve(args.text_dim, file.text_dim, defaults.dims.d_lang),
        },
    };
    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new("train-align");
    manifest.input_optional(args.config.as_deref())?;
    hash_corpus_inputs(&mut manifest, &args.corpus)?;
    if let Some((kge, triples, synonyms)) = &kgp_paths {
        hash_checkpoint_inputs(&mut manifest, kge)?;
        manifest.input(triples)?;
        manifest.input(synonyms)?;
    }

    let corpus = load_corpus(&args.corpus)?;
    let kgp = match &kgp_paths {
        Some((kge, triples, synonyms)) => Some(load_kgp(kge, triples, synonyms)?),
        None => None,
    };
    let trained = train_align(&corpus, kgp.as_ref(), &config)?;
    save_alignment(&args.out.join("align"), &trained)?;
    manifest.output("align.tsr");
    manifest.output("align.tsr.json");
    manifest.output("align.json");
    write_loss_log(&args.out.join("loss_log.jsonl"), &trained.log)?;
    manifest.output("loss_log.jsonl");
    manifest.write(
        &args.out,
        &AlignResolvedConfig {
            train: config.clone(),
            knowledge_prompting: kgp.is_some(),
        },
    )?;
    match trained.log.last() {
        Some(last) => eprintln!(
            "epoch {}: L_SCE {:.4}, L_CG {:.4}, total {:.4}",
            last.epoch, last.l_sce, last.l_cg, last.total
        ),
        None => eprintln!("saved untrained baseline (0 epochs)"),
    }
    Ok(())
}

// ------------------------------------------------------------------------ eval

#[derive(Args)]
pub struct EvalArgs {
    /// Alignment checkpoint base path (without extension).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory to evaluate on.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for metrics.json and the run manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct EvalResolvedConfig {
    checkpoint: String,
    corpus: String,
}

fn run_eval(args: EvalArgs) -> CmdResult<()> {
    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new("eval");
    hash_checkpoint_inputs(&mut manifest, &args.checkpoint)?;
    hash_corpus_inputs(&mut manifest, &args.corpus)?;

    let trained = load_alignment(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let recall = evaluate_bidirectional(&corpus, &trained)?;
    let checkpoint_hash = crate::support::sha256_file(&args.checkpoint.with_extension("tsr"))?;
    let report = MetricsReport::new(&recall, checkpoint_hash);
    write_json(&args.out.join("metrics.json"), &report)?;
    manifest.output("metrics.json");
    manifest.write(
        &args.out,
        &EvalResolvedConfig {
            checkpoint: args.checkpoint.display().to_string(),
            corpus: args.corpus.display().to_string(),
        },
    )?;
    print_json(&report);
    eprintln!(
        "pool {}: text R@1 {:.4}, scene R@1 {:.4}",
        report.pool_size, report.text_retrieval["R@1"], report.scene_retrieval["R@1"]
    );
    Ok(())
}

// ----------------------------------------------------------------------- query

#[derive(Args)]
pub struct QueryArgs {
    /// Alignment checkpoint base path (without extension).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory whose scenes form the candidate pool.
    #[arg(long)]
    corpus: PathBuf,
    /// Query text.
    #[arg(long)]
    text: String,
    /// Number of results.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Output directory for query_result.json and the run manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct QueryResolvedConfig {
    text: String,
    k: usize,
}

#[derive(Serialize)]
struct QueryResult {
    query_text: String,
    k: usize,
    pool_size: usize,
    results: Vec<QueryHit>,
}

#[derive(Serialize)]
struct QueryHit {
    sample_id: String,
    score: f64,
}

fn run_query(args: QueryArgs) -> CmdResult<()> {
    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new("query");
    hash_checkpoint_inputs(&mut manifest, &args.checkpoint)?;
    hash_corpus_inputs(&mut manifest, &args.corpus)?;

    let trained = load_alignment(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let mut entries = Vec::with_capacity(corpus.scenes.len());
    for scene in &corpus.scenes {
        entries.push((
            scene.sample_id.clone(),
            trained.embed_scene(&scene.bev_sequence)?,
        ));
    }
    let index = build_index(&entries)?;
    let query_vec = trained.embed_text(&args.text)?;
    let ranked = query_topk(&index, "query", &query_vec, args.k)?;
    let result = QueryResult {
        query_text: args.text.clone(),
        k: args.k,
        pool_size: index.len(),
        results: ranked
            .entries
            .into_iter()
            .map(|(sample_id, score)| QueryHit { sample_id, score })
            .collect(),
    };
    write_json(&args.out.join("query_result.json"), &result)?;
    manifest.output("query_result.json");
    manifest.write(
        &args.out,
        &QueryResolvedConfig {
            text: args.text.clone(),
            k: args.k,
        },
    )?;
    print_json(&result);
    eprintln!(
        "ranked {} of {} scenes for {:?}",
        result.results.len(),
        result.pool_size,
        args.text
    );
    Ok(())
}

// ------------------------------------------------------------------ grad-check

#[derive(Args)]
pub struct GradCheckArgs {
    /// Alignment checkpoint base path (without extension).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for grad_check.json and the run manifest.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Probe batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Central-difference step.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Components probed per parameter group; 0 checks every component.
    #[arg(long)]
    samples: Option<usize>,
    /// RNG seed; falls back to $BEVTSR_SEED, the config file, then 0.
    #[arg(long, env = "BEVTSR_SEED")]
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GradCheckFileConfig {
    batch: Option<usize>,
    epsilon: Option<f64>,
    samples: Option<usize>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct GradCheckResolvedConfig {
    batch: usize,
    epsilon: f64,
    samples: usize,
    seed: u64,
}

#[derive(Serialize)]
struct GradCheckResult {
    max_relative_error: f64,
    worst_group: String,
    worst_component: usize,
    components_checked: usize,
}

/// Splits the flat id slice back into the structured parameter handles,
/// mirroring the canonical registration order.
fn param_ids(ids: &[bevtsr::tensor::TensorId]) -> (SceParamIds, TextParamIds) {
    let sce = SceParamIds {
        shared_embeddings: ids[0],
        bev_projection: ids[1],
        text_projection: ids[2],
        decoder: DecoderParamIds {
            token_embedding: ids[3],
            position_embedding: ids[4],
            self_query: ids[5],
            self_key: ids[6],
            self_value: ids[7],
            cross_query: ids[8],
            cross_key: ids[9],
            cross_value: ids[10],
            ff_hidden: ids[11],
            ff_output: ids[12],
            output_projection: ids[13],
        },
    };
    let text = TextParamIds {
        token_embedding: ids[14],
        kge_projection: ids[15],
        output_projection: ids[16],
    };
    (sce, text)
}

fn run_grad_check(args: GradCheckArgs) -> CmdResult<()> {
    let file: GradCheckFileConfig = read_config(args.config.as_deref())?;
    let batch = resolve(args.batch, file.batch, 2);
    let epsilon = resolve(args.epsilon, file.epsilon, 1e-5);
    let samples = resolve(args.samples, file.samples, 8);
    let seed = resolve_seed(args.seed, file.seed, 0);
    if batch == 0 {
        return Err(CliError::Usage("--batch must be at least 1".into()));
    }
    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new("grad-check");
    manifest.input_optional(args.config.as_deref())?;
    hash_checkpoint_inputs(&mut manifest, &args.checkpoint)?;

    let trained = load_alignment(&args.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Probe batch: random feature grids plus captions sampled from the
    // checkpoint's own vocabulary, so any checkpoint can be checked without
    // shipping a corpus along.
    let regular_tokens: Vec<&str> = (RESERVED.len()..trained.vocab.len())
        .filter_map(|id| trained.vocab.token(id))
        .collect();
    if regular_tokens.is_empty() {
        return Err(Error::Data("checkpoint vocabulary has no regular tokens".into()).into());
    }
    let max_tokens = trained.sce.decoder.max_len().saturating_sub(1).max(1);
    let d_b = trained.sce.d_b();
    let mut bevs = Vec::with_capacity(batch);
    let mut captions = Vec::with_capacity(batch);
    for _ in 0..batch {
        let rows = 4;
        let data: Vec<f64> = (0..rows * d_b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        bevs.push(Tensor::new(vec![rows, d_b], data)?);
        let count = rng.gen_range(3..=6).min(max_tokens);
        let words: Vec<&str> = (0..count)
            .map(|_| regular_tokens[rng.gen_range(0..regular_tokens.len())])
            .collect();
        captions.push(words.join(" "));
    }
    let samples_vec: Vec<BatchSample> = bevs
        .iter()
        .zip(&captions)
        .map(|(bev, caption)| BatchSample {
            bev,
            caption: caption.as_str(),
        })
        .collect();

    let mut params: Vec<Tensor> = trained.sce.tensors().into_iter().cloned().collect();
    params.push(trained.text.token_embedding.clone());
    params.push(trained.text.kge_projection.clone());
    params.push(trained.text.output_projection.clone());

    let vocab = &trained.vocab;
    let kg = trained
        .kgp
        .as_ref()
        .map(|r| (&r.model, &r.graph, &r.synonyms));
    let temperature = trained.sce.temperature;
    let lambda = trained.sce.lambda;
    let opts = GradCheckOptions {
        epsilon,
        max_components_per_group: if samples == 0 { None } else { Some(samples) },
        seed,
    };
    let report = grad_check(&params, &opts, &mut |tape, ids| {
        let (sce_ids, text_ids) = param_ids(ids);
        let losses = batch_forward(
            tape,
            &samples_vec,
            &sce_ids,
            &text_ids,
            vocab,
            kg,
            temperature,
            lambda,
        )?;
        Ok(losses.total)
    })?;

    let group_names: Vec<&str> = SCE_PARAM_NAMES
        .iter()
        .chain(TEXT_PARAM_NAMES.iter())
        .copied()
        .collect();
    let result = GradCheckResult {
        max_relative_error: report.max_rel_error,
        worst_group: group_names[report.worst_group].to_string(),
        worst_component: report.worst_component,
        components_checked: report.components_checked,
    };
    write_json(&args.out.join("grad_check.json"), &result)?;
    manifest.output("grad_check.json");
    manifest.write(
        &args.out,
        &GradCheckResolvedConfig {
            batch,
            epsilon,
            samples,
            seed,
        },
    )?;
    print_json(&result);
    eprintln!(
        "max relative error {:.3e} ({} components, worst in {})",
        result.max_relative_error, result.components_checked, result.worst_group
    );
    Ok(())
}
