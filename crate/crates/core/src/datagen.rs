//! Seeded synthetic benchmark: a two-language knowledge graph with
//! transcreated and copied entity names, homonym clusters, short question
//! templates, and the datasets derived from them.
//!
//! Entity texts look like `"<name>: <type> <a> <b>"` where `a` and `b` are
//! two description attributes. A divergent entity's target name is the
//! translation of its attributes (`"T(a) T(b)"`), unrelated to its source
//! name; a copy-like entity keeps its source name. Whether an entity is
//! divergent is determined by its type, and every predicate belongs to one
//! type, so a question reveals which kind of entity it asks about.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Entity, KgError, KnowledgeGraph, LanguageCode};
use crate::records::{BenchmarkInstance, GoldEntity, RetrieverExample, TranslationExample};
use crate::retriever::{NegativeSampler, RetrieverError};
use crate::text::normalize_name;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatagenError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("both names are empty")]
    EmptyNames,
    #[error("could not find {0} after many attempts; enlarge the lexicon")]
    Exhausted(&'static str),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
}

/// Edit distance with unit insert, delete and substitute costs, over
/// Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between the normalized names divided by the longer
/// normalized length.
pub fn name_divergence(a: &str, b: &str) -> Result<f64, DatagenError> {
    let (a, b) = (normalize_name(a), normalize_name(b));
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return Err(DatagenError::EmptyNames);
    }
    Ok(levenshtein(&a, &b) as f64 / longest as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub entities: usize,
    /// Fraction of entities that belong to a homonym cluster.
    pub homonym_fraction: f64,
    pub cluster_size: usize,
    /// Fraction of entities whose target name diverges from the source.
    pub divergent_fraction: f64,
    pub divergence_threshold: f64,
    /// Fraction of divergent entities given a second target name.
    pub alias_fraction: f64,
    /// Number of question words; each forms a template with every predicate.
    pub templates: usize,
    pub types: usize,
    pub predicates_per_type: usize,
    pub name_words: usize,
    /// Size of each of the two attribute lexicons.
    pub attribute_words: usize,
    pub test_fraction: f64,
    pub dev_fraction: f64,
    pub train_examples: usize,
    pub entity_free_fraction: f64,
    /// Fraction of entity questions that also mention one description
    /// attribute after the name.
    pub context_fraction: f64,
    /// Extra retriever examples, as a fraction of the question examples,
    /// whose query is the entity's source description.
    pub description_queries: f64,
    pub negatives: usize,
    /// Cap on entity benchmark instances (one per held-out entity).
    pub benchmark_size: usize,
    pub control_size: usize,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            entities: 10_000,
            homonym_fraction: 0.2,
            cluster_size: 3,
            divergent_fraction: 0.5,
            divergence_threshold: 0.5,
            alias_fraction: 0.2,
            templates: 5,
            types: 10,
            predicates_per_type: 3,
            name_words: 800,
            attribute_words: 150,
            test_fraction: 0.1,
            dev_fraction: 0.0,
            train_examples: 5_000,
            entity_free_fraction: 0.1,
            context_fraction: 0.0,
            description_queries: 0.0,
            negatives: 8,
            benchmark_size: 1_000,
            control_size: 200,
            src_lang: "xx-src".into(),
            tgt_lang: "xx-tgt".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidConfig(m));
        for (name, v) in [
            ("homonym_fraction", self.homonym_fraction),
            ("divergent_fraction", self.divergent_fraction),
            ("divergence_threshold", self.divergence_threshold),
            ("alias_fraction", self.alias_fraction),
            ("test_fraction", self.test_fraction),
            ("dev_fraction", self.dev_fraction),
            ("entity_free_fraction", self.entity_free_fraction),
            ("context_fraction", self.context_fraction),
            ("description_queries", self.description_queries),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.entities < 2 {
            return bad("at least two entities are required".into());
        }
        if self.cluster_size < 2 {
            return bad("cluster_size must be at least 2".into());
        }
        if self.cluster_size > self.entities {
            return bad(format!("cluster_size {} exceeds entity count {}", self.cluster_size, self.entities));
        }
        if self.test_fraction + self.dev_fraction >= 1.0 {
            return bad("test and dev fractions leave no training entities".into());
        }
        if self.types < 2 || self.types % 2 != 0 {
            return bad("types must be an even number of at least 2".into());
        }
        if self.cluster_size - 1 > self.types / 2 {
            return bad(format!("clusters of {} need {} divergent types, only {} exist", self.cluster_size, self.cluster_size - 1, self.types / 2));
        }
        if self.templates == 0 || self.predicates_per_type == 0 || self.name_words < 4 || self.attribute_words < 2 {
            return bad("lexicon sizes too small".into());
        }
        if self.negatives == 0 {
            return bad("negatives must be at least 1".into());
        }
        LanguageCode::new(&self.src_lang)?;
        LanguageCode::new(&self.tgt_lang)?;
        if self.src_lang == self.tgt_lang {
            return bad("source and target languages must differ".into());
        }
        Ok(())
    }

    /// Number of divergent entities the generator will emit.
    pub fn divergent_count(&self) -> usize {
        libm::round(self.divergent_fraction * self.entities as f64) as usize
    }
}

/// Every generated artifact, mutually consistent.
#[derive(Clone, Debug)]
pub struct GeneratedSuite {
    pub src: LanguageCode,
    pub tgt: LanguageCode,
    pub kg: KnowledgeGraph,
    pub retriever_train: Vec<RetrieverExample>,
    pub translation_train: Vec<TranslationExample>,
    pub translation_dev: Vec<TranslationExample>,
    pub benchmark: Vec<BenchmarkInstance>,
    pub control: Vec<BenchmarkInstance>,
    pub train_entities: BTreeSet<String>,
    pub test_entities: BTreeSet<String>,
}

/// Source word with its fixed target translation.
#[derive(Clone, Debug)]
struct Term {
    src: String,
    tgt: String,
}

struct WordMaker {
    used: BTreeSet<String>,
}

const SRC_ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st"];
const SRC_VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const TGT_ONSETS: &[&str] = &["c", "h", "j", "q", "w", "x", "y", "ch", "sh", "th", "qu", "wh"];
const TGT_VOWELS: &[&str] = &["ai", "au", "ee", "oo", "ya", "yo", "ei", "ou"];

impl WordMaker {
    fn word<R: Rng>(&mut self, rng: &mut R, target: bool) -> Result<String, DatagenError> {
        let (onsets, vowels) = if target { (TGT_ONSETS, TGT_VOWELS) } else { (SRC_ONSETS, SRC_VOWELS) };
        for _ in 0..10_000 {
            let syllables = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(onsets.choose(rng).unwrap());
                w.push_str(vowels.choose(rng).unwrap());
            }
            if self.used.insert(w.clone()) {
                return Ok(w);
            }
        }
        Err(DatagenError::Exhausted("a fresh pseudo-word"))
    }

    fn terms<R: Rng>(&mut self, rng: &mut R, n: usize) -> Result<Vec<Term>, DatagenError> {
        (0..n).map(|_| Ok(Term { src: self.word(rng, false)?, tgt: self.word(rng, true)? })).collect()
    }
}

struct Lexicon {
    wh: Vec<Term>,
    dets: Vec<Term>,
    types: Vec<Term>,
    /// `predicates[t]` belong to type `t`.
    predicates: Vec<Vec<Term>>,
    attrs_a: Vec<Term>,
    attrs_b: Vec<Term>,
    names: Vec<String>,
}

impl Lexicon {
    fn new<R: Rng>(c: &SynthConfig, rng: &mut R) -> Result<Self, DatagenError> {
        let mut m = WordMaker { used: BTreeSet::new() };
        Ok(Self {
            wh: m.terms(rng, c.templates)?,
            dets: m.terms(rng, 4)?,
            types: m.terms(rng, c.types)?,
            predicates: (0..c.types).map(|_| m.terms(rng, c.predicates_per_type)).collect::<Result<_, _>>()?,
            attrs_a: m.terms(rng, c.attribute_words)?,
            attrs_b: m.terms(rng, c.attribute_words)?,
            names: (0..c.name_words).map(|_| m.word(rng, false)).collect::<Result<_, _>>()?,
        })
    }
}

/// Internal entity plan before serialization.
#[derive(Clone, Debug)]
struct Plan {
    id: String,
    ty: usize,
    a: usize,
    b: usize,
    src_name: String,
    tgt_names: Vec<String>,
}

fn is_divergent_type(c: &SynthConfig, ty: usize) -> bool {
    ty < c.types / 2
}

struct Planner<'a, R> {
    c: &'a SynthConfig,
    lex: &'a Lexicon,
    rng: &'a mut R,
    used_names: BTreeSet<String>,
    used_attrs: BTreeSet<(usize, usize)>,
}

impl<R: Rng> Planner<'_, R> {
    fn fresh_name(&mut self) -> Result<String, DatagenError> {
        for _ in 0..10_000 {
            let k = self.rng.random_range(2..=3);
            let words: Vec<&str> = (0..k).map(|_| self.lex.names.choose(self.rng).unwrap().as_str()).collect();
            let name = words.join(" ");
            if self.used_names.insert(name.clone()) {
                return Ok(name);
            }
        }
        Err(DatagenError::Exhausted("an unused entity name"))
    }

    fn target_of(&self, a: usize, b: usize) -> String {
        format!("{} {}", self.lex.attrs_a[a].tgt, self.lex.attrs_b[b].tgt)
    }

    /// Attributes not used by any other entity; for divergent entities the
    /// resulting target name must clear the divergence threshold.
    fn attrs(&mut self, src_name: &str, divergent: bool) -> Result<(usize, usize), DatagenError> {
        let n = self.c.attribute_words;
        for _ in 0..10_000 {
            let pair = (self.rng.random_range(0..n), self.rng.random_range(0..n));
            if self.used_attrs.contains(&pair) {
                continue;
            }
            if divergent && name_divergence(src_name, &self.target_of(pair.0, pair.1))? < self.c.divergence_threshold {
                continue;
            }
            self.used_attrs.insert(pair);
            return Ok(pair);
        }
        Err(DatagenError::Exhausted("an unused attribute pair"))
    }

    fn entity(&mut self, id: String, src_name: String, ty: usize) -> Result<Plan, DatagenError> {
        let divergent = is_divergent_type(self.c, ty);
        let (a, b) = self.attrs(&src_name, divergent)?;
        let tgt_names = if divergent {
            let mut names = vec![self.target_of(a, b)];
            if self.rng.random_bool(self.c.alias_fraction) {
                let alias = format!("{} {}", self.lex.attrs_b[b].tgt, self.lex.attrs_a[a].tgt);
                if name_divergence(&src_name, &alias)? >= self.c.divergence_threshold {
                    names.push(alias);
                }
            }
            names
        } else {
            vec![src_name.clone()]
        };
        Ok(Plan { id, ty, a, b, src_name, tgt_names })
    }
}

/// Entities grouped into split units: whole homonym clusters or singletons.
fn plan_entities<R: Rng>(c: &SynthConfig, lex: &Lexicon, rng: &mut R) -> Result<Vec<Vec<Plan>>, DatagenError> {
    let n = c.entities;
    let width = format!("{}", n).len().max(5);
    let id = |i: usize| format!("E{:0width$}", i + 1, width = width);
    let clusters = libm::floor(c.homonym_fraction * n as f64 / c.cluster_size as f64) as usize;
    let in_clusters = clusters * c.cluster_size;
    let divergent_total = c.divergent_count();
    // Every cluster has one copy-like member and cluster_size - 1 divergent.
    let cluster_divergent = clusters * (c.cluster_size - 1);
    let singles = n - in_clusters;
    if cluster_divergent > divergent_total || divergent_total - cluster_divergent > singles || clusters > n - divergent_total {
        return Err(DatagenError::InvalidConfig(format!(
            "{clusters} homonym clusters of size {} cannot coexist with {divergent_total} divergent entities out of {n}",
            c.cluster_size
        )));
    }
    let half = c.types / 2;
    let mut p = Planner { c, lex, rng, used_names: BTreeSet::new(), used_attrs: BTreeSet::new() };
    let mut units = Vec::with_capacity(clusters + singles);
    let mut next = 0;
    for _ in 0..clusters {
        let name = p.fresh_name()?;
        let mut div_types: Vec<usize> = (0..half).collect();
        div_types.shuffle(p.rng);
        let mut types = vec![half + p.rng.random_range(0..half)];
        types.extend_from_slice(&div_types[..c.cluster_size - 1]);
        let mut unit = Vec::with_capacity(c.cluster_size);
        for ty in types {
            unit.push(p.entity(id(next), name.clone(), ty)?);
            next += 1;
        }
        units.push(unit);
    }
    let mut single_div = vec![false; singles];
    single_div[..divergent_total - cluster_divergent].iter_mut().for_each(|d| *d = true);
    single_div.shuffle(p.rng);
    for div in single_div {
        let name = p.fresh_name()?;
        let ty = if div { p.rng.random_range(0..half) } else { half + p.rng.random_range(0..half) };
        units.push(vec![p.entity(id(next), name, ty)?]);
        next += 1;
    }
    Ok(units)
}

fn to_entity(plan: &Plan, lex: &Lexicon, src: &LanguageCode, tgt: &LanguageCode) -> Entity {
    let (ty, a, b) = (&lex.types[plan.ty], &lex.attrs_a[plan.a], &lex.attrs_b[plan.b]);
    Entity {
        id: plan.id.clone(),
        names: BTreeMap::from([(src.clone(), vec![plan.src_name.clone()]), (tgt.clone(), plan.tgt_names.clone())]),
        descriptions: BTreeMap::from([
            (src.clone(), format!("{} {} {}", ty.src, a.src, b.src)),
            (tgt.clone(), format!("{} {} {}", ty.tgt, a.tgt, b.tgt)),
        ]),
    }
}

fn question(wh: &Term, pred: &Term, src_obj: &str, tgt_obj: &str) -> (String, String) {
    (format!("{} {} {} ?", wh.src, pred.src, src_obj), format!("{} {} {} ?", wh.tgt, pred.tgt, tgt_obj))
}

/// Question about `p`: the source and one target per target name. With
/// probability `context_fraction` one description attribute follows the
/// name.
fn entity_question<R: Rng>(c: &SynthConfig, lex: &Lexicon, p: &Plan, rng: &mut R) -> (String, Vec<String>) {
    let (wh, pred) = (lex.wh.choose(rng).unwrap(), lex.predicates[p.ty].choose(rng).unwrap());
    let context = if rng.random_bool(c.context_fraction) {
        Some(if rng.random_bool(0.5) { &lex.attrs_a[p.a] } else { &lex.attrs_b[p.b] })
    } else {
        None
    };
    let with_context = |name: &str, target: bool| match context {
        Some(t) => format!("{name} {}", if target { &t.tgt } else { &t.src }),
        None => String::from(name),
    };
    let source = question(wh, pred, &with_context(&p.src_name, false), "").0;
    let targets = p.tgt_names.iter().map(|n| question(wh, pred, "", &with_context(n, true)).1).collect();
    (source, targets)
}

/// Entity-free question about a type, e.g. `"<wh> <pred> <det> <type> ?"`.
fn control_question<R: Rng>(lex: &Lexicon, rng: &mut R) -> (String, String) {
    let ty = rng.random_range(0..lex.types.len());
    let (wh, pred, det) = (lex.wh.choose(rng).unwrap(), lex.predicates[ty].choose(rng).unwrap(), lex.dets.choose(rng).unwrap());
    let t = &lex.types[ty];
    question(wh, pred, &format!("{} {}", det.src, t.src), &format!("{} {}", det.tgt, t.tgt))
}

/// Generates the full suite. Deterministic for a given configuration.
pub fn generate_suite(c: &SynthConfig) -> Result<GeneratedSuite, DatagenError> {
    c.validate()?;
    let src = LanguageCode::new(&c.src_lang)?;
    let tgt = LanguageCode::new(&c.tgt_lang)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let lex = Lexicon::new(c, &mut rng)?;
    let mut units = plan_entities(c, &lex, &mut rng)?;

    // Held-out split by unit, so homonyms never straddle splits.
    units.shuffle(&mut rng);
    let n_test = libm::ceil(c.test_fraction * c.entities as f64) as usize;
    let n_dev = libm::ceil(c.dev_fraction * c.entities as f64) as usize;
    let (mut test, mut dev, mut train): (Vec<&Plan>, Vec<&Plan>, Vec<&Plan>) = (Vec::new(), Vec::new(), Vec::new());
    for unit in &units {
        let bucket = if test.len() < n_test {
            &mut test
        } else if dev.len() < n_dev {
            &mut dev
        } else {
            &mut train
        };
        bucket.extend(unit.iter());
    }
    if train.is_empty() || test.is_empty() {
        return Err(DatagenError::InvalidConfig("split leaves the train or test set empty".into()));
    }
    for s in [&mut test, &mut dev, &mut train] {
        s.sort_by(|a, b| a.id.cmp(&b.id));
    }

    let mut all: Vec<&Plan> = units.iter().flatten().collect();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    let kg = KnowledgeGraph::from_entities(all.iter().map(|p| to_entity(p, &lex, &src, &tgt)))?;

    let examples = |pool: &[&Plan], count: usize, rng: &mut ChaCha8Rng| -> Vec<(TranslationExample, Option<String>)> {
        (0..count)
            .map(|_| {
                if pool.is_empty() || rng.random_bool(c.entity_free_fraction) {
                    let (s, t) = control_question(&lex, rng);
                    (TranslationExample { source: s, target: t, gold_entities: vec![] }, None)
                } else {
                    let p = pool.choose(rng).unwrap();
                    let (s, mut t) = entity_question(c, &lex, p, rng);
                    (TranslationExample { source: s, target: t.swap_remove(0), gold_entities: vec![p.id.clone()] }, Some(p.id.clone()))
                }
            })
            .collect()
    };
    let train_examples = examples(&train, c.train_examples, &mut rng);
    let n_dev_examples = libm::round(c.train_examples as f64 * c.dev_fraction) as usize;
    let translation_dev = if dev.is_empty() { Vec::new() } else { examples(&dev, n_dev_examples, &mut rng).into_iter().map(|e| e.0).collect() };

    let sampler = NegativeSampler::new(train.iter().map(|p| p.id.clone()).collect());
    let mut retriever_train = Vec::new();
    for (ex, id) in &train_examples {
        let Some(id) = id else { continue };
        let e = kg.get(id).expect("planned entity is in the graph");
        let negatives = sampler.mine_hard(&kg, e, c.negatives, &src, &mut rng)?;
        retriever_train.push(RetrieverExample { query: ex.source.clone(), positive: id.clone(), negatives });
    }
    let n_questions = retriever_train.len();
    let n_descriptions = libm::round(c.description_queries * n_questions as f64) as usize;
    for i in 0..n_descriptions {
        let id = retriever_train[i % n_questions].positive.clone();
        let e = kg.get(&id).expect("planned entity is in the graph");
        let query = e.descriptions[&src].clone();
        let negatives = sampler.mine_hard(&kg, e, c.negatives, &src, &mut rng)?;
        retriever_train.push(RetrieverExample { query, positive: id, negatives });
    }
    let translation_train = train_examples.into_iter().map(|e| e.0).collect();

    let mut bench_pool = test.clone();
    bench_pool.shuffle(&mut rng);
    bench_pool.truncate(c.benchmark_size);
    bench_pool.sort_by(|a, b| a.id.cmp(&b.id));
    let benchmark = bench_pool
        .iter()
        .map(|p| {
            let (source, references) = entity_question(c, &lex, p, &mut rng);
            BenchmarkInstance { source, references, entities: vec![GoldEntity { id: p.id.clone(), names_tgt: p.tgt_names.clone() }] }
        })
        .collect();
    let control = (0..c.control_size)
        .map(|_| {
            let (source, target) = control_question(&lex, &mut rng);
            BenchmarkInstance { source, references: vec![target], entities: vec![] }
        })
        .collect();

    Ok(GeneratedSuite {
        src,
        tgt,
        kg,
        retriever_train,
        translation_train,
        translation_dev,
        benchmark,
        control,
        train_entities: train.iter().map(|p| p.id.clone()).collect(),
        test_entities: test.iter().map(|p| p.id.clone()).collect(),
    })
}
