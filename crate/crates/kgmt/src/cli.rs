//! Subcommands of the `kgmt` binary. Every command writes a
//! `manifest.json` next to its outputs, or logs it when it has no output
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kgmt_core::datagen::generate_suite;
use kgmt_core::kg::{KnowledgeGraph, LanguageCode};
use kgmt_core::metrics::{evaluate_run, Aggregation, EvalReport, MatchOptions};
use kgmt_core::nn::Params;
use kgmt_core::records::BenchmarkInstance;
use kgmt_core::retriever::{build_index, retrieve, EntityIndex, NegativeSource, Retriever};
use kgmt_core::translator::{
    mixed_knowledge_pairs, train_translator_on_pairs, translate_with_pairs, EntityNamePair, IntegrationMode, KnowledgeContext, KnowledgeSource,
    Seq2SeqParams,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_index, load_retriever, load_translator, save_index, save_retriever, save_translator, INDEX_FILE, PARAMS_FILE};
use crate::experiment::{run_on_suite, train_retriever_stage, translator_vocab, ExperimentConfig};
use crate::io::{load_benchmark, load_suite, read_json, read_jsonl, require, write_json, write_jsonl, write_suite, SUITE_FILE};
use crate::manifest::{write_manifest, ManifestBuilder};

pub const TRAINING_FILE: &str = "training.json";
pub const TRANSLATIONS_FILE: &str = "translations.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RETRIEVALS_FILE: &str = "retrievals.jsonl";

#[derive(Debug, Parser)]
#[command(name = "kgmt", version, about = "Knowledge-graph-augmented machine translation")]
pub struct Cli {
    /// Seed for every random stage; overrides the seeds in `--config`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment configuration (JSON); defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic suite: KG, training data, benchmark, control set.
    Gen,
    /// Train the dense entity retriever on a suite.
    TrainRetriever(TrainRetrieverArgs),
    /// Encode every source-language entity with a trained retriever.
    Index(IndexArgs),
    /// Print the top-k entities for one or more queries.
    Retrieve(RetrieveArgs),
    /// Train a translator in one integration mode.
    TrainMt(TrainMtArgs),
    /// Translate a benchmark file or a single sentence.
    Translate(TranslateArgs),
    /// Score translations against a benchmark.
    Eval(EvalArgs),
    /// Run the full mode × knowledge matrix on a suite.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    None,
    Explicit,
    Implicit,
    Both,
}

impl From<ModeArg> for IntegrationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => IntegrationMode::None,
            ModeArg::Explicit => IntegrationMode::Explicit,
            ModeArg::Implicit => IntegrationMode::Implicit,
            ModeArg::Both => IntegrationMode::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KnowledgeArg {
    Retrieved,
    Gold,
}

impl From<KnowledgeArg> for KnowledgeSource {
    fn from(k: KnowledgeArg) -> Self {
        match k {
            KnowledgeArg::Retrieved => KnowledgeSource::Retrieved,
            KnowledgeArg::Gold => KnowledgeSource::Gold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NegativesArg {
    /// Negatives listed in the dataset (homonym-mined by `gen`).
    Dataset,
    /// Uniformly random entities.
    Random,
}

#[derive(Debug, Args)]
pub struct TrainRetrieverArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, value_enum, default_value = "dataset")]
    pub negatives: NegativesArg,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub suite: PathBuf,
    /// Directory written by `train-retriever`.
    #[arg(long)]
    pub retriever: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub retriever: PathBuf,
    /// Index file written by `index`.
    #[arg(long)]
    pub index: PathBuf,
    /// Suite whose KG supplies entity names for the output.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    #[arg(long = "query", required = true)]
    pub queries: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

/// Knowledge access shared by `train-mt` and `translate`.
#[derive(Debug, Args)]
pub struct KnowledgeArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    /// Entities retrieved per sentence [default: 3].
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub retriever: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainMtArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[command(flatten)]
    pub knowledge: KnowledgeArgs,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub suite: PathBuf,
    /// Directory written by `train-mt`.
    #[arg(long)]
    pub translator: PathBuf,
    #[command(flatten)]
    pub knowledge: KnowledgeArgs,
    #[arg(long = "knowledge", value_enum, default_value = "retrieved")]
    pub source: KnowledgeArg,
    /// Benchmark-format JSONL to translate.
    #[arg(long, conflicts_with = "text")]
    pub input: Option<PathBuf>,
    /// A single sentence to translate.
    #[arg(long)]
    pub text: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `translations.jsonl` written by `translate`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub benchmark: PathBuf,
    /// Match names on token boundaries only.
    #[arg(long)]
    pub strict: bool,
    /// Pool entity matches over the corpus instead of averaging instances.
    #[arg(long)]
    pub micro: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub suite: PathBuf,
}

/// What `train-mt` records next to the translator checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub mode: IntegrationMode,
    pub k: usize,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub pair_histogram: BTreeMap<usize, usize>,
}

/// One line of `translations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub source: String,
    pub translation: String,
    /// Knowledge handed to the translator, best first.
    #[serde(default, rename = "entities")]
    pub pairs: Vec<EntityNamePair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEntity {
    pub id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name_src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name_tgt: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub query: String,
    pub results: Vec<RetrievedEntity>,
}

/// Logger writing one JSON object per line to stderr. Verbosity comes from
/// `KGMT_LOG` (default `info`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("KGMT_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, record| {
            let line = serde_json::json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .try_init();
}

/// Reads `--config` (if any) and applies `--seed`.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let config = match &cli.config {
        Some(p) => {
            if !p.exists() {
                bail!("config file {} does not exist", p.display());
            }
            read_json(p)?
        }
        None => ExperimentConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn out_dir(cli: &Cli, command: &str) -> anyhow::Result<PathBuf> {
    let dir = cli.out.clone().with_context(|| format!("`kgmt {command}` needs --out <DIR>"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn finish(manifest: ManifestBuilder, dir: Option<&Path>) -> anyhow::Result<()> {
    let m = manifest.finish()?;
    match dir {
        Some(d) => {
            write_manifest(d, &m)?;
        }
        None => log::info!("manifest {}", serde_json::to_string(&m)?),
    }
    Ok(())
}

fn require_dir_file(dir: &Path, file: &str, producer: &str) -> anyhow::Result<()> {
    require(&dir.join(file), producer)?;
    Ok(())
}

/// Loads the retriever and its index, checking they belong together.
fn load_retrieval(retriever: &Path, index: &Path) -> anyhow::Result<(Retriever, EntityIndex)> {
    require_dir_file(retriever, PARAMS_FILE, "train-retriever")?;
    require(index, "index")?;
    let r = load_retriever(retriever)?;
    let idx = load_index(index)?;
    if idx.params_hash != r.params.fingerprint() {
        bail!("{} was built with a different retriever; rerun `kgmt index --retriever {}`", index.display(), retriever.display());
    }
    Ok((r, idx))
}

fn knowledge_for(args: &KnowledgeArgs, mode: IntegrationMode) -> anyhow::Result<Option<(Retriever, EntityIndex)>> {
    if !mode.uses_knowledge() {
        return Ok(None);
    }
    let (Some(r), Some(i)) = (&args.retriever, &args.index) else {
        bail!("--mode {mode} needs --retriever <DIR> (from `kgmt train-retriever`) and --index <FILE> (from `kgmt index`)");
    };
    Ok(Some(load_retrieval(r, i)?))
}

fn effective_k(args: &KnowledgeArgs, mode: IntegrationMode, config: &ExperimentConfig) -> usize {
    if !mode.uses_knowledge() {
        if args.k.is_some() {
            log::warn!("--k is ignored with --mode none");
        }
        return 0;
    }
    args.k.unwrap_or(config.translator.k_retrieve)
}

fn names_of(kg: &KnowledgeGraph, id: &str, src: &LanguageCode, tgt: &LanguageCode) -> (Option<String>, Option<String>) {
    kg.get(id).map_or((None, None), |e| (e.primary_name(src).map(String::from), e.primary_name(tgt).map(String::from)))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = resolve_config(&cli)?;
    if let Some(p) = &cli.config {
        log::info!("config {}", p.display());
    }
    match &cli.command {
        Command::Gen => cmd_gen(&cli, &config),
        Command::TrainRetriever(a) => cmd_train_retriever(&cli, &config, a),
        Command::Index(a) => cmd_index(&cli, &config, a),
        Command::Retrieve(a) => cmd_retrieve(&cli, &config, a),
        Command::TrainMt(a) => cmd_train_mt(&cli, &config, a),
        Command::Translate(a) => cmd_translate(&cli, &config, a),
        Command::Eval(a) => cmd_eval(&cli, &config, a),
        Command::Experiment(a) => cmd_experiment(&cli, &config, a),
    }
}

fn cmd_gen(cli: &Cli, config: &ExperimentConfig) -> anyhow::Result<()> {
    let dir = out_dir(cli, "gen")?;
    let mut m = ManifestBuilder::new("gen", config);
    cli.config.iter().for_each(|p| m.input(p));
    let suite = generate_suite(&config.synth)?;
    for f in write_suite(&dir, &suite, &config.synth)? {
        m.output(dir.join(f));
    }
    log::info!("wrote suite: {} entities, {} benchmark instances to {}", suite.kg.len(), suite.benchmark.len(), dir.display());
    finish(m, Some(&dir))
}

fn cmd_train_retriever(cli: &Cli, config: &ExperimentConfig, a: &TrainRetrieverArgs) -> anyhow::Result<()> {
    let dir = out_dir(cli, "train-retriever")?;
    let mut m = ManifestBuilder::new("train-retriever", config);
    let (_, suite) = load_suite(&a.suite)?;
    m.input(&a.suite);
    let negatives = match a.negatives {
        NegativesArg::Dataset => NegativeSource::Dataset,
        NegativesArg::Random => NegativeSource::Random,
    };
    let (r, log) = train_retriever_stage(&suite.kg, &suite.retriever_train, &suite.src, &config.encoder, &config.retriever, config.retriever_init_seed(), negatives)?;
    save_retriever(&dir, &r)?;
    write_json(&dir.join(TRAINING_FILE), &log.epoch_losses)?;
    for f in [PARAMS_FILE, crate::checkpoint::VOCAB_FILE, TRAINING_FILE] {
        m.output(dir.join(f));
    }
    finish(m, Some(&dir))
}

fn cmd_index(cli: &Cli, config: &ExperimentConfig, a: &IndexArgs) -> anyhow::Result<()> {
    let dir = out_dir(cli, "index")?;
    let mut m = ManifestBuilder::new("index", config);
    let (meta, suite) = load_suite(&a.suite)?;
    require_dir_file(&a.retriever, PARAMS_FILE, "train-retriever")?;
    let r = load_retriever(&a.retriever)?;
    m.input(a.suite.join(crate::io::KG_FILE));
    m.input(&a.retriever);
    let (index, excluded) = build_index(&suite.kg, &r, &meta.src)?;
    if excluded > 0 {
        log::warn!("{excluded} entities have no {} name and are not indexed", meta.src.as_str());
    }
    let path = dir.join(INDEX_FILE);
    save_index(&path, &index)?;
    m.output(path);
    finish(m, Some(&dir))
}

fn cmd_retrieve(cli: &Cli, config: &ExperimentConfig, a: &RetrieveArgs) -> anyhow::Result<()> {
    let mut m = ManifestBuilder::new("retrieve", config);
    let (r, index) = load_retrieval(&a.retriever, &a.index)?;
    m.input(&a.retriever);
    m.input(&a.index);
    let names = match &a.suite {
        Some(s) => {
            let (meta, suite) = load_suite(s)?;
            m.input(s.join(crate::io::KG_FILE));
            Some((suite.kg, meta.src, meta.tgt))
        }
        None => None,
    };
    let mut out = Vec::new();
    for q in &a.queries {
        let results = retrieve(&index, &r, q, a.k)?
            .into_iter()
            .map(|(id, score)| {
                let (name_src, name_tgt) = names.as_ref().map_or((None, None), |(kg, s, t)| names_of(kg, &id, s, t));
                RetrievedEntity { id, score, name_src, name_tgt }
            })
            .collect();
        let item = Retrieval { query: q.clone(), results };
        println!("{}", serde_json::to_string(&item)?);
        out.push(item);
    }
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(RETRIEVALS_FILE);
            write_jsonl(&path, &out)?;
            m.output(path);
            finish(m, Some(dir))
        }
        None => finish(m, None),
    }
}

fn cmd_train_mt(cli: &Cli, config: &ExperimentConfig, a: &TrainMtArgs) -> anyhow::Result<()> {
    let dir = out_dir(cli, "train-mt")?;
    let mut m = ManifestBuilder::new("train-mt", config);
    let mode: IntegrationMode = a.knowledge.mode.into();
    let k = effective_k(&a.knowledge, mode, config);
    let (_, suite) = load_suite(&a.suite)?;
    m.input(&a.suite);
    let knowledge = knowledge_for(&a.knowledge, mode)?;
    let vocab = translator_vocab(&suite.kg, &suite.translation_train);
    let (retriever_dim, pairs) = match &knowledge {
        Some((r, index)) => {
            a.knowledge.retriever.iter().chain(&a.knowledge.index).for_each(|p| m.input(p));
            let ctx = KnowledgeContext { kg: &suite.kg, retriever: r, index, src: &suite.src, tgt: &suite.tgt };
            (r.dim(), mixed_knowledge_pairs(&suite.translation_train, &ctx, k, config.translator.gold_fraction, config.translator.mix_seed())?)
        }
        None => (config.encoder.dim, vec![Vec::new(); suite.translation_train.len()]),
    };
    let mut params = Seq2SeqParams::init(config.model.config(vocab.len(), retriever_dim), config.translator_init_seed());
    let log = train_translator_on_pairs(&mut params, &vocab, &suite.translation_train, &pairs, mode, &suite.tgt, &config.translator)?;
    save_translator(&dir, &params, &vocab)?;
    let info = TrainingInfo { mode, k, epoch_losses: log.epoch_losses, steps: log.steps, pair_histogram: log.pair_histogram };
    write_json(&dir.join(TRAINING_FILE), &info)?;
    for f in [PARAMS_FILE, crate::checkpoint::VOCAB_FILE, TRAINING_FILE] {
        m.output(dir.join(f));
    }
    finish(m, Some(&dir))
}

fn cmd_translate(cli: &Cli, config: &ExperimentConfig, a: &TranslateArgs) -> anyhow::Result<()> {
    let mut m = ManifestBuilder::new("translate", config);
    let mode: IntegrationMode = a.knowledge.mode.into();
    let source: KnowledgeSource = a.source.into();
    let k = effective_k(&a.knowledge, mode, config);
    require_dir_file(&a.translator, PARAMS_FILE, "train-mt")?;
    let (params, vocab) = load_translator(&a.translator)?;
    m.input(&a.translator);
    if let Ok(info) = read_json::<TrainingInfo>(&a.translator.join(TRAINING_FILE)) {
        if info.mode != mode {
            log::warn!("translator was trained with --mode {}, translating with --mode {mode}", info.mode);
        }
    }
    let (_, suite) = load_suite(&a.suite)?;
    m.input(a.suite.join(SUITE_FILE));
    m.input(a.suite.join(crate::io::KG_FILE));
    let instances: Vec<BenchmarkInstance> = match (&a.input, &a.text) {
        (Some(p), _) => {
            require(p, "gen")?;
            m.input(p);
            load_benchmark(p, Some(&suite.kg))?
        }
        (None, Some(t)) => {
            if source == KnowledgeSource::Gold && mode.uses_knowledge() {
                bail!("--knowledge gold needs gold entities; pass a benchmark file with --input");
            }
            vec![BenchmarkInstance { source: t.clone(), references: vec![String::new()], entities: Vec::new() }]
        }
        (None, None) => bail!("nothing to translate; pass --input <FILE> or --text <SENTENCE>"),
    };
    let knowledge = knowledge_for(&a.knowledge, mode)?;
    let ctx = knowledge.as_ref().map(|(r, index)| KnowledgeContext { kg: &suite.kg, retriever: r, index, src: &suite.src, tgt: &suite.tgt });
    let mut predictions = Vec::with_capacity(instances.len());
    for inst in &instances {
        let pairs = match &ctx {
            Some(ctx) => {
                let gold: Vec<String> = inst.entities.iter().map(|g| g.id.clone()).collect();
                ctx.pairs(source, &inst.source, &gold, k)?
            }
            None => Vec::new(),
        };
        let t = translate_with_pairs(&params, &vocab, &inst.source, pairs, mode, &suite.tgt, config.strategy(), config.max_decode_len)?;
        predictions.push(Prediction { source: inst.source.clone(), translation: t.text, pairs: t.pairs });
    }
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(TRANSLATIONS_FILE);
            write_jsonl(&path, &predictions)?;
            m.output(path);
            log::info!("translated {} sentences", predictions.len());
            finish(m, Some(dir))
        }
        None => {
            for p in &predictions {
                println!("{}", serde_json::to_string(p)?);
            }
            finish(m, None)
        }
    }
}

/// hits@k over single-entity instances whose prediction carries retrieved
/// (scored) knowledge.
pub fn prediction_hits(predictions: &[Prediction], benchmark: &[BenchmarkInstance], ks: &[usize]) -> Option<BTreeMap<usize, f64>> {
    let scored: Vec<(&Prediction, &BenchmarkInstance)> =
        predictions.iter().zip(benchmark).filter(|(p, b)| b.entities.len() == 1 && p.pairs.iter().any(|x| x.score.is_some())).collect();
    if scored.is_empty() {
        return None;
    }
    Some(
        ks.iter()
            .map(|&k| {
                let hit = scored.iter().filter(|(p, b)| p.pairs.iter().take(k).any(|x| x.id == b.entities[0].id)).count();
                (k, hit as f64 / scored.len() as f64)
            })
            .collect(),
    )
}

fn cmd_eval(cli: &Cli, config: &ExperimentConfig, a: &EvalArgs) -> anyhow::Result<()> {
    let mut m = ManifestBuilder::new("eval", config);
    require(&a.predictions, "translate")?;
    require(&a.benchmark, "gen")?;
    let predictions: Vec<Prediction> = read_jsonl(&a.predictions)?.into_iter().map(|(_, p)| p).collect();
    let benchmark = load_benchmark(&a.benchmark, None)?;
    m.input(&a.predictions);
    m.input(&a.benchmark);
    if let Some((i, _)) = predictions.iter().zip(&benchmark).enumerate().find(|(_, (p, b))| p.source != b.source) {
        log::warn!("prediction {} has a different source sentence than benchmark instance {}", i + 1, i + 1);
    }
    let outputs: Vec<String> = predictions.iter().map(|p| p.translation.clone()).collect();
    let opts = MatchOptions { strict: a.strict, aggregation: if a.micro { Aggregation::Micro } else { Aggregation::Instance } };
    let mut report: EvalReport = evaluate_run(&outputs, &benchmark, opts)?;
    report.hits = prediction_hits(&predictions, &benchmark, &[1, 3]);
    let summary = serde_json::json!({ "m_eta": report.m_eta, "bleu": report.bleu, "hits": report.hits, "instances": report.n_instances });
    println!("{summary}");
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(REPORT_FILE);
            write_json(&path, &report)?;
            m.output(path);
            finish(m, Some(dir))
        }
        None => finish(m, None),
    }
}

fn cmd_experiment(cli: &Cli, config: &ExperimentConfig, a: &ExperimentArgs) -> anyhow::Result<()> {
    let dir = out_dir(cli, "experiment")?;
    let mut m = ManifestBuilder::new("experiment", config);
    let (_, suite) = load_suite(&a.suite)?;
    m.input(&a.suite);
    let report = run_on_suite(config, &suite, Some(&dir))?;
    print!("{}", report.to_markdown());
    m.output(&dir);
    finish(m, Some(&dir))
}
