//! Pipeline stages shared by the subcommands, and the full ablation
//! experiment: retriever training (hard vs random negatives), translators
//! for every integration mode, evaluation with retrieved and gold
//! knowledge, and the entity-free control set.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use kgmt_core::datagen::{generate_suite, name_divergence, GeneratedSuite, SynthConfig};
use kgmt_core::encoder::EncoderConfig;
use kgmt_core::kg::{homonyms_of, KnowledgeGraph, LanguageCode};
use kgmt_core::metrics::{evaluate_run, MatchOptions};
use kgmt_core::records::{BenchmarkInstance, RetrieverExample, TranslationExample};
use kgmt_core::retriever::{build_index, eval_hits, train_retriever, EntityIndex, NegativeSource, Retriever, RetrieverConfig, TrainLog};
use kgmt_core::translator::{
    mixed_knowledge_pairs, train_translator_on_pairs, translate_with_pairs, EntityNamePair, IntegrationMode, KnowledgeContext, KnowledgeSource,
    Seq2SeqConfig, Seq2SeqParams, Strategy, TranslatorConfig, TranslatorLog,
};
use kgmt_core::vocab::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_index, save_retriever, save_translator, INDEX_FILE};
use crate::io::{write_json, write_suite};

/// Retriever encoder shape; the vocabulary size comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderShape {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub embed_init: f64,
}

impl Default for EncoderShape {
    fn default() -> Self {
        let c = EncoderConfig::new(0);
        Self { dim: c.dim, layers: c.layers, heads: c.heads, ffn_dim: c.ffn_dim, max_len: c.max_len, embed_init: c.embed_init }
    }
}

impl EncoderShape {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            embed_init: self.embed_init,
        }
    }
}

/// Translator shape; vocabulary size and retriever width come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_input: usize,
    pub max_output: usize,
    pub embed_init: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = Seq2SeqConfig::new(0, 0);
        Self {
            dim: c.dim,
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            heads: c.heads,
            ffn_dim: c.ffn_dim,
            max_input: c.max_input,
            max_output: c.max_output,
            embed_init: c.embed_init,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, retriever_dim: usize) -> Seq2SeqConfig {
        Seq2SeqConfig {
            vocab_size,
            dim: self.dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_input: self.max_input,
            max_output: self.max_output,
            retriever_dim,
            embed_init: self.embed_init,
        }
    }
}

/// Everything a run needs. `seed` overrides the seeds of every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub encoder: EncoderShape,
    pub retriever: RetrieverConfig,
    pub model: ModelShape,
    pub translator: TranslatorConfig,
    pub modes: Vec<IntegrationMode>,
    /// 1 selects greedy decoding.
    pub beam: usize,
    pub max_decode_len: usize,
    /// Also train a retriever on uniformly random negatives.
    pub random_negative_ablation: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            synth: SynthConfig::default(),
            encoder: EncoderShape::default(),
            retriever: RetrieverConfig { lr: 2e-3, batch_size: 16, epochs: 3, ..RetrieverConfig::default() },
            model: ModelShape::default(),
            translator: TranslatorConfig { lr: 2e-3, batch_size: 8, gold_fraction: 0.2, ..TranslatorConfig::default() },
            modes: IntegrationMode::ALL.to_vec(),
            beam: 1,
            max_decode_len: 32,
            random_negative_ablation: true,
        }
    }
}

impl ExperimentConfig {
    /// Propagates `seed` to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.retriever.seed = seed;
        self.translator.seed = seed;
        self
    }

    pub fn strategy(&self) -> Strategy {
        if self.beam <= 1 {
            Strategy::Greedy
        } else {
            Strategy::Beam(self.beam)
        }
    }

    pub fn retriever_init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn translator_init_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
}

/// Vocabulary for the retriever: every KG text plus the training queries.
pub fn retriever_vocab(kg: &KnowledgeGraph, dataset: &[RetrieverExample]) -> Vocabulary {
    Vocabulary::from_kg(kg, dataset.iter().map(|e| e.query.as_str()))
}

/// Vocabulary for the translator: every KG text plus both sides of the
/// training pairs.
pub fn translator_vocab(kg: &KnowledgeGraph, dataset: &[TranslationExample]) -> Vocabulary {
    Vocabulary::from_kg(kg, dataset.iter().flat_map(|e| [e.source.as_str(), e.target.as_str()]))
}

pub fn train_retriever_stage(
    kg: &KnowledgeGraph,
    dataset: &[RetrieverExample],
    src: &LanguageCode,
    shape: &EncoderShape,
    config: &RetrieverConfig,
    init_seed: u64,
    negatives: NegativeSource,
) -> anyhow::Result<(Retriever, TrainLog)> {
    let vocab = retriever_vocab(kg, dataset);
    let mut r = Retriever::init(vocab.clone(), shape.config(vocab.len()), init_seed);
    let log = train_retriever(kg, &mut r, dataset, config, src, negatives)?;
    Ok((r, log))
}

/// Held-out retrieval quality, overall and on entities with homonyms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub queries: usize,
    pub hits: BTreeMap<usize, f64>,
    pub homonym_queries: usize,
    pub homonym_hits: BTreeMap<usize, f64>,
}

/// `(query, gold id)` for every single-entity benchmark instance.
pub fn labeled_queries(benchmark: &[BenchmarkInstance]) -> Vec<(String, String)> {
    benchmark.iter().filter(|b| b.entities.len() == 1).map(|b| (b.source.clone(), b.entities[0].id.clone())).collect()
}

pub fn retrieval_scores(index: &EntityIndex, r: &Retriever, kg: &KnowledgeGraph, src: &LanguageCode, benchmark: &[BenchmarkInstance]) -> anyhow::Result<RetrievalScores> {
    let labeled = labeled_queries(benchmark);
    let homonym: Vec<(String, String)> = labeled
        .iter()
        .filter(|(_, id)| kg.get(id).is_some_and(|e| !homonyms_of(kg, e, src).is_empty()))
        .cloned()
        .collect();
    let ks = [1, 3];
    let hits = eval_hits(index, r, &labeled, &ks)?;
    let homonym_hits = if homonym.is_empty() { BTreeMap::new() } else { eval_hits(index, r, &homonym, &ks)? };
    Ok(RetrievalScores { queries: labeled.len(), hits, homonym_queries: homonym.len(), homonym_hits })
}

/// Translates every instance with the given knowledge.
#[allow(clippy::too_many_arguments)]
pub fn translate_benchmark(
    params: &Seq2SeqParams,
    vocab: &Vocabulary,
    texts: &[String],
    pairs: &[Vec<EntityNamePair>],
    mode: IntegrationMode,
    tgt: &LanguageCode,
    strategy: Strategy,
    max_len: usize,
) -> anyhow::Result<Vec<String>> {
    texts
        .iter()
        .zip(pairs)
        .map(|(t, p)| Ok(translate_with_pairs(params, vocab, t, p.clone(), mode, tgt, strategy, max_len)?.text))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub entities: usize,
    pub divergent_entities: usize,
    pub homonym_entities: usize,
    pub test_entities: usize,
    pub retriever_examples: usize,
    pub translation_examples: usize,
    pub benchmark_instances: usize,
    pub control_instances: usize,
}

pub fn summarize_suite(s: &GeneratedSuite, threshold: f64) -> SuiteSummary {
    let divergent = s
        .kg
        .entities()
        .filter(|e| match (e.primary_name(&s.src), e.primary_name(&s.tgt)) {
            (Some(a), Some(b)) => name_divergence(a, b).is_ok_and(|d| d >= threshold),
            _ => false,
        })
        .count();
    SuiteSummary {
        entities: s.kg.len(),
        divergent_entities: divergent,
        homonym_entities: s.kg.entities().filter(|e| !homonyms_of(&s.kg, e, &s.src).is_empty()).count(),
        test_entities: s.test_entities.len(),
        retriever_examples: s.retriever_train.len(),
        translation_examples: s.translation_train.len(),
        benchmark_instances: s.benchmark.len(),
        control_instances: s.control.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverRun {
    pub negatives: NegativeSource,
    pub epoch_losses: Vec<f64>,
    pub held_out: RetrievalScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: IntegrationMode,
    pub knowledge: KnowledgeSource,
    pub m_eta: f64,
    pub bleu: f64,
    /// Retrieval quality feeding this row; absent when nothing is retrieved.
    pub hits_at_1: Option<f64>,
    pub hits_at_3: Option<f64>,
    pub control_bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub suite: SuiteSummary,
    pub untrained_retriever: RetrievalScores,
    pub retriever: RetrieverRun,
    pub random_negative_retriever: Option<RetrieverRun>,
    pub translator_losses: BTreeMap<IntegrationMode, Vec<f64>>,
    pub rows: Vec<ResultRow>,
}

impl ExperimentReport {
    pub fn row(&self, mode: IntegrationMode, knowledge: KnowledgeSource) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.mode == mode && r.knowledge == knowledge)
    }

    pub fn to_markdown(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(s, "| mode | knowledge | M-ETA | BLEU | hits@1 | hits@3 | control BLEU |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.mode,
                r.knowledge.as_str(),
                pct(Some(r.m_eta)),
                pct(Some(r.bleu)),
                pct(r.hits_at_1),
                pct(r.hits_at_3),
                pct(Some(r.control_bleu)),
            );
        }
        let h = &self.retriever.held_out;
        let _ = writeln!(s);
        let _ = writeln!(s, "retriever ({} held-out queries): hits@1 {} hits@3 {}", h.queries, pct(h.hits.get(&1).copied()), pct(h.hits.get(&3).copied()));
        let _ = writeln!(s, "homonym split ({} queries): hits@1 {}", h.homonym_queries, pct(h.homonym_hits.get(&1).copied()));
        if let Some(r) = &self.random_negative_retriever {
            let _ = writeln!(s, "random negatives, homonym split: hits@1 {}", pct(r.held_out.homonym_hits.get(&1).copied()));
        }
        let u = &self.untrained_retriever;
        let _ = writeln!(s, "untrained encoder: hits@1 {}", pct(u.hits.get(&1).copied()));
        s
    }
}

/// Wall-clock seconds per stage. Kept out of [`ExperimentReport`] so that
/// reports stay byte-identical across reruns.
pub type StageTimes = BTreeMap<String, f64>;

fn timed<T>(times: &RefCell<StageTimes>, label: &str, f: impl FnOnce() -> anyhow::Result<T>) -> anyhow::Result<T> {
    let t = Instant::now();
    let out = f()?;
    let secs = t.elapsed().as_secs_f64();
    log::info!("{label}: {secs:.1}s");
    *times.borrow_mut().entry(label.to_string()).or_insert(0.0) += secs;
    Ok(out)
}

/// Generates the suite and runs the full matrix on it. When `out` is
/// given, the suite, checkpoints and the report are written there.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> anyhow::Result<ExperimentReport> {
    let suite = generate_suite(&config.synth)?;
    if let Some(dir) = out {
        write_suite(&dir.join("suite"), &suite, &config.synth)?;
    }
    run_on_suite(config, &suite, out)
}

pub fn run_on_suite(config: &ExperimentConfig, suite: &GeneratedSuite, out: Option<&Path>) -> anyhow::Result<ExperimentReport> {
    Ok(run_on_suite_timed(config, suite, out)?.0)
}

/// Runs the full matrix on an existing suite. When `out` is given, the
/// checkpoints and the report are written there.
pub fn run_on_suite_timed(config: &ExperimentConfig, suite: &GeneratedSuite, out: Option<&Path>) -> anyhow::Result<(ExperimentReport, StageTimes)> {
    let times = RefCell::new(StageTimes::new());
    let (kg, src, tgt) = (&suite.kg, &suite.src, &suite.tgt);

    let untrained = {
        let vocab = retriever_vocab(kg, &suite.retriever_train);
        let r = Retriever::init(vocab.clone(), config.encoder.config(vocab.len()), config.retriever_init_seed());
        let (index, _) = build_index(kg, &r, src)?;
        retrieval_scores(&index, &r, kg, src, &suite.benchmark)?
    };

    let retriever_run = |negatives: NegativeSource| -> anyhow::Result<(Retriever, EntityIndex, RetrieverRun)> {
        let (r, log) = timed(&times, &format!("train retriever ({negatives:?} negatives)"), || {
            train_retriever_stage(kg, &suite.retriever_train, src, &config.encoder, &config.retriever, config.retriever_init_seed(), negatives)
        })?;
        let (index, _) = timed(&times, "build index", || Ok(build_index(kg, &r, src)?))?;
        let held_out = retrieval_scores(&index, &r, kg, src, &suite.benchmark)?;
        log::info!("{negatives:?} negatives: hits {:?}, homonym hits {:?}", held_out.hits, held_out.homonym_hits);
        Ok((r, index, RetrieverRun { negatives, epoch_losses: log.epoch_losses, held_out }))
    };
    let (retriever, index, hard) = retriever_run(NegativeSource::Dataset)?;
    let random = if config.random_negative_ablation { Some(retriever_run(NegativeSource::Random)?.2) } else { None };
    if let Some(dir) = out {
        save_retriever(&dir.join("retriever"), &retriever)?;
        save_index(&dir.join("retriever").join(INDEX_FILE), &index)?;
    }

    let ctx = KnowledgeContext { kg, retriever: &retriever, index: &index, src, tgt };
    let k = config.translator.k_retrieve;
    let vocab = translator_vocab(kg, &suite.translation_train);
    let train_pairs = timed(&times, "retrieve for training data", || {
        Ok(mixed_knowledge_pairs(&suite.translation_train, &ctx, k, config.translator.gold_fraction, config.translator.mix_seed())?)
    })?;

    let bench_texts: Vec<String> = suite.benchmark.iter().map(|b| b.source.clone()).collect();
    let control_texts: Vec<String> = suite.control.iter().map(|b| b.source.clone()).collect();
    let gold_ids = |b: &BenchmarkInstance| b.entities.iter().map(|g| g.id.clone()).collect::<Vec<_>>();
    let pairs_for = |insts: &[BenchmarkInstance], source: KnowledgeSource| -> anyhow::Result<Vec<Vec<EntityNamePair>>> {
        insts.iter().map(|b| Ok(ctx.pairs(source, &b.source, &gold_ids(b), k)?)).collect()
    };
    let bench_pairs: BTreeMap<KnowledgeSource, Vec<Vec<EntityNamePair>>> =
        [KnowledgeSource::Retrieved, KnowledgeSource::Gold].into_iter().map(|s| Ok((s, pairs_for(&suite.benchmark, s)?))).collect::<anyhow::Result<_>>()?;
    let control_pairs: BTreeMap<KnowledgeSource, Vec<Vec<EntityNamePair>>> =
        [KnowledgeSource::Retrieved, KnowledgeSource::Gold].into_iter().map(|s| Ok((s, pairs_for(&suite.control, s)?))).collect::<anyhow::Result<_>>()?;

    let strategy = config.strategy();
    let mut rows = Vec::new();
    let mut translator_losses = BTreeMap::new();
    for &mode in &config.modes {
        let mut params = Seq2SeqParams::init(config.model.config(vocab.len(), retriever.dim()), config.translator_init_seed());
        let log: TranslatorLog = timed(&times, &format!("train translator ({mode})"), || {
            Ok(train_translator_on_pairs(&mut params, &vocab, &suite.translation_train, &train_pairs, mode, tgt, &config.translator)?)
        })?;
        translator_losses.insert(mode, log.epoch_losses.clone());
        if let Some(dir) = out {
            save_translator(&dir.join(format!("translator-{mode}")), &params, &vocab)?;
        }
        for source in [KnowledgeSource::Retrieved, KnowledgeSource::Gold] {
            let row = timed(&times, &format!("evaluate {mode}/{}", source.as_str()), || {
                if !mode.uses_knowledge() && source == KnowledgeSource::Gold {
                    let base = rows.iter().find(|r: &&ResultRow| r.mode == mode).cloned().expect("retrieved row comes first");
                    return Ok(ResultRow { knowledge: source, ..base });
                }
                let outputs = translate_benchmark(&params, &vocab, &bench_texts, &bench_pairs[&source], mode, tgt, strategy, config.max_decode_len)?;
                for (o, b) in outputs.iter().zip(&suite.benchmark).take(3) {
                    log::debug!("{mode}/{}: {:?} -> {o:?} (reference {:?})", source.as_str(), b.source, b.references);
                }
                let report = evaluate_run(&outputs, &suite.benchmark, MatchOptions::default())?;
                let control = translate_benchmark(&params, &vocab, &control_texts, &control_pairs[&source], mode, tgt, strategy, config.max_decode_len)?;
                let control_report = evaluate_run(&control, &suite.control, MatchOptions::default())?;
                let retrieved = mode.uses_knowledge() && source == KnowledgeSource::Retrieved;
                let hit = |k: usize| if retrieved { hard.held_out.hits.get(&k).copied() } else { None };
                Ok(ResultRow {
                    mode,
                    knowledge: source,
                    m_eta: report.m_eta.unwrap_or(0.0),
                    bleu: report.bleu,
                    hits_at_1: hit(1),
                    hits_at_3: hit(3),
                    control_bleu: control_report.bleu,
                })
            })?;
            log::info!("{mode}/{}: M-ETA {:.3} BLEU {:.3} control BLEU {:.3}", source.as_str(), row.m_eta, row.bleu, row.control_bleu);
            rows.push(row);
        }
    }

    let report = ExperimentReport {
        seed: config.seed,
        suite: summarize_suite(suite, config.synth.divergence_threshold),
        untrained_retriever: untrained,
        retriever: hard,
        random_negative_retriever: random,
        translator_losses,
        rows,
    };
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &report)?;
        std::fs::write(dir.join("report.md"), report.to_markdown())?;
    }
    Ok((report, times.into_inner()))
}
