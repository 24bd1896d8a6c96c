//! JSONL datasets, the knowledge-graph file and generated suites on disk.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use kgmt_core::datagen::{GeneratedSuite, SynthConfig};
use kgmt_core::kg::{KgBuilder, KgError, KgRecord, KnowledgeGraph, LanguageCode, LoadStats};
use kgmt_core::records::{BenchmarkInstance, RecordError, RetrieverExample, TranslationExample};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KG_FILE: &str = "kg.jsonl";
pub const RETRIEVER_FILE: &str = "retriever_train.jsonl";
pub const TRANSLATION_FILE: &str = "translation_train.jsonl";
pub const DEV_FILE: &str = "translation_dev.jsonl";
pub const BENCHMARK_FILE: &str = "benchmark.jsonl";
pub const CONTROL_FILE: &str = "control.jsonl";
pub const SUITE_FILE: &str = "suite.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}:{line}: {source}")]
    Kg { path: PathBuf, line: usize, source: KgError },
    #[error("{path}:{line}: {source}")]
    Record { path: PathBuf, line: usize, source: RecordError },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        IoError::Format { path: path.to_path_buf(), message: message.into() }
    }
}

/// Parses one JSON value per non-blank line. Line numbers in errors are
/// 1-based.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| IoError::Parse { path: path.to_path_buf(), line: i + 1, source })?;
        out.push((i + 1, value));
    }
    if out.is_empty() {
        log::warn!("{} contains no records", path.display());
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| IoError::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| IoError::format(path, e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| IoError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let s = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&s).map_err(|source| IoError::Parse { path: path.to_path_buf(), line: source.line(), source })
}

/// Loads a knowledge graph, keeping only the languages in `filter` when
/// given. Entities left without any name are dropped and counted.
pub fn load_kg(path: &Path, filter: Option<BTreeSet<LanguageCode>>) -> Result<(KnowledgeGraph, LoadStats), IoError> {
    let mut b = KgBuilder::new(filter);
    for (line, rec) in read_jsonl::<KgRecord>(path)? {
        b.add(rec, line).map_err(|source| IoError::Kg { path: path.to_path_buf(), line, source })?;
    }
    let (kg, stats) = b.finish().map_err(|source| IoError::Kg { path: path.to_path_buf(), line: 0, source })?;
    if stats.dropped > 0 {
        log::info!("{}: dropped {} entities without a name in the selected languages", path.display(), stats.dropped);
    }
    Ok((kg, stats))
}

pub fn save_kg(path: &Path, kg: &KnowledgeGraph) -> Result<(), IoError> {
    write_jsonl(path, &kg.to_records())
}

fn load_records<T: DeserializeOwned>(path: &Path, check: impl Fn(&T) -> Result<(), RecordError>) -> Result<Vec<T>, IoError> {
    read_jsonl::<T>(path)?
        .into_iter()
        .map(|(line, r)| {
            check(&r).map_err(|source| IoError::Record { path: path.to_path_buf(), line, source })?;
            Ok(r)
        })
        .collect()
}

pub fn load_retriever_dataset(path: &Path, kg: Option<&KnowledgeGraph>) -> Result<Vec<RetrieverExample>, IoError> {
    load_records(path, |r: &RetrieverExample| r.validate(kg))
}

pub fn load_translation_dataset(path: &Path, kg: Option<&KnowledgeGraph>) -> Result<Vec<TranslationExample>, IoError> {
    load_records(path, |r: &TranslationExample| r.validate(kg))
}

pub fn load_benchmark(path: &Path, kg: Option<&KnowledgeGraph>) -> Result<Vec<BenchmarkInstance>, IoError> {
    let items = load_records(path, |r: &BenchmarkInstance| r.validate(kg))?;
    // Gold names must be names of the referenced entity.
    if let Some(kg) = kg {
        for (i, b) in items.iter().enumerate() {
            for g in &b.entities {
                let e = kg.get(&g.id).expect("validated above");
                let known: BTreeSet<&String> = e.names.values().flatten().collect();
                if let Some(n) = g.names_tgt.iter().find(|n| !known.contains(n)) {
                    return Err(IoError::format(path, format!("instance {}: {n:?} is not a name of {}", i + 1, g.id)));
                }
            }
        }
    }
    Ok(items)
}

/// Languages and generator settings of a suite directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteMeta {
    pub src: LanguageCode,
    pub tgt: LanguageCode,
    pub synth: SynthConfig,
}

/// Writes the suite files and returns their names in write order.
pub fn write_suite(dir: &Path, suite: &GeneratedSuite, synth: &SynthConfig) -> Result<Vec<&'static str>, IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    write_json(&dir.join(SUITE_FILE), &SuiteMeta { src: suite.src.clone(), tgt: suite.tgt.clone(), synth: synth.clone() })?;
    save_kg(&dir.join(KG_FILE), &suite.kg)?;
    write_jsonl(&dir.join(RETRIEVER_FILE), &suite.retriever_train)?;
    write_jsonl(&dir.join(TRANSLATION_FILE), &suite.translation_train)?;
    write_jsonl(&dir.join(BENCHMARK_FILE), &suite.benchmark)?;
    write_jsonl(&dir.join(CONTROL_FILE), &suite.control)?;
    let mut files = vec![SUITE_FILE, KG_FILE, RETRIEVER_FILE, TRANSLATION_FILE, BENCHMARK_FILE, CONTROL_FILE];
    if !suite.translation_dev.is_empty() {
        write_jsonl(&dir.join(DEV_FILE), &suite.translation_dev)?;
        files.push(DEV_FILE);
    }
    Ok(files)
}

pub fn load_suite_meta(dir: &Path) -> Result<SuiteMeta, IoError> {
    let path = dir.join(SUITE_FILE);
    require(&path, "gen")?;
    read_json(&path)
}

/// Reads a suite written by [`write_suite`]. Train entities are the
/// retriever positives; test entities are the benchmark gold entities.
pub fn load_suite(dir: &Path) -> Result<(SuiteMeta, GeneratedSuite), IoError> {
    let meta = load_suite_meta(dir)?;
    let file = |name: &str| -> Result<PathBuf, IoError> {
        let p = dir.join(name);
        require(&p, "gen")?;
        Ok(p)
    };
    let langs = BTreeSet::from([meta.src.clone(), meta.tgt.clone()]);
    let (kg, _) = load_kg(&file(KG_FILE)?, Some(langs))?;
    let retriever_train = load_retriever_dataset(&file(RETRIEVER_FILE)?, Some(&kg))?;
    let translation_train = load_translation_dataset(&file(TRANSLATION_FILE)?, Some(&kg))?;
    let dev = dir.join(DEV_FILE);
    let translation_dev = if dev.exists() { load_translation_dataset(&dev, Some(&kg))? } else { Vec::new() };
    let benchmark = load_benchmark(&file(BENCHMARK_FILE)?, Some(&kg))?;
    let control = load_benchmark(&file(CONTROL_FILE)?, Some(&kg))?;
    let train_entities = retriever_train.iter().map(|r| r.positive.clone()).collect();
    let test_entities = benchmark.iter().flat_map(|b| b.entities.iter().map(|g| g.id.clone())).collect();
    let suite = GeneratedSuite {
        src: meta.src.clone(),
        tgt: meta.tgt.clone(),
        kg,
        retriever_train,
        translation_train,
        translation_dev,
        benchmark,
        control,
        train_entities,
        test_entities,
    };
    Ok((meta, suite))
}

/// Error message for a missing upstream artifact.
pub fn require(path: &Path, producer: &str) -> Result<(), IoError> {
    if path.exists() {
        Ok(())
    } else {
        Err(IoError::format(path, format!("not found; run `kgmt {producer}` first")))
    }
}
