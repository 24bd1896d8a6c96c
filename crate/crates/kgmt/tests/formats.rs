//! On-disk formats: JSONL datasets, knowledge graphs, checkpoints and
//! indexes.

use std::fs;
use std::path::Path;

use kgmt::checkpoint::{index_from_bytes, index_to_bytes, load_index, load_params, load_retriever, load_translator, params_from_bytes, params_to_bytes, save_index, save_params, save_retriever, save_translator};
use kgmt::core::datagen::{generate_suite, SynthConfig};
use kgmt::core::encoder::{EncoderConfig, EncoderParams};
use kgmt::core::nn::Params;
use kgmt::core::retriever::{build_index, Retriever};
use kgmt::core::translator::{Seq2SeqConfig, Seq2SeqParams};
use kgmt::core::vocab::Vocabulary;
use kgmt::io::{load_benchmark, load_kg, load_retriever_dataset, load_suite, load_translation_dataset, save_kg, write_jsonl, write_suite, IoError, BENCHMARK_FILE, KG_FILE, RETRIEVER_FILE, TRANSLATION_FILE};
use proptest::prelude::*;
use tempfile::tempdir;

fn small() -> SynthConfig {
    SynthConfig { entities: 200, train_examples: 120, benchmark_size: 30, control_size: 5, ..SynthConfig::default() }
}

fn bits<P: Params>(p: &P) -> Vec<u64> {
    p.tensors().iter().flat_map(|t| t.data.iter().map(|x| x.to_bits())).collect()
}

#[test]
fn suite_round_trips_through_disk() {
    let dir = tempdir().unwrap();
    let c = small();
    let s = generate_suite(&c).unwrap();
    write_suite(dir.path(), &s, &c).unwrap();
    let (meta, back) = load_suite(dir.path()).unwrap();
    assert_eq!(meta.synth, c);
    assert_eq!(back.kg.to_records(), s.kg.to_records());
    assert_eq!(back.retriever_train, s.retriever_train);
    assert_eq!(back.translation_train, s.translation_train);
    assert_eq!(back.benchmark, s.benchmark);
    assert_eq!(back.control, s.control);
    assert_eq!(back.test_entities, s.test_entities);

    // load → save → load is the identity.
    let again = dir.path().join("again.jsonl");
    save_kg(&again, &back.kg).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fs::read(dir.path().join(KG_FILE)).unwrap());
    let bench = load_benchmark(&dir.path().join(BENCHMARK_FILE), Some(&back.kg)).unwrap();
    let path = dir.path().join("bench2.jsonl");
    write_jsonl(&path, &bench).unwrap();
    assert_eq!(load_benchmark(&path, Some(&back.kg)).unwrap(), bench);
}

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const KG: &str = r#"{"id":"Q1","names":{"en":["The Catcher in the Rye"],"it":["Il Giovane Holden"]},"descriptions":{"en":"novel"}}
{"id":"Q2","names":{"en":["Mercury"],"it":["Mercurio"]}}
"#;

#[test]
fn loader_errors_name_the_line() {
    let dir = tempdir().unwrap();
    let kg_path = write(dir.path(), "kg.jsonl", KG);
    let (kg, stats) = load_kg(&kg_path, None).unwrap();
    assert_eq!((kg.len(), stats.entities), (2, 2));

    let dup = write(dir.path(), "dup.jsonl", &format!("{KG}{}\n", r#"{"id":"Q1","names":{"en":["x"]}}"#));
    let err = load_kg(&dup, None).unwrap_err().to_string();
    assert!(err.contains("Q1") && err.contains('3'), "{err}");

    let bad = write(dir.path(), "bad.jsonl", "{\"query\":\"a\",\"positive\":\"Q1\",\"negatives\":[]}\n{oops\n");
    match load_retriever_dataset(&bad, None) {
        Err(IoError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }

    let dangling = write(dir.path(), "dangling.jsonl", "{\"source\":\"s\",\"target\":\"t\",\"gold_entities\":[\"Q9\"]}\n");
    let err = load_translation_dataset(&dangling, Some(&kg)).unwrap_err().to_string();
    assert!(err.contains("Q9"), "{err}");

    let wrong_name = write(dir.path(), "b.jsonl", "{\"source\":\"s\",\"references\":[\"r\"],\"entities\":[{\"id\":\"Q2\",\"names_tgt\":[\"Venus\"]}]}\n");
    assert!(load_benchmark(&wrong_name, Some(&kg)).is_err());

    let empty = write(dir.path(), "empty.jsonl", "");
    assert!(load_benchmark(&empty, None).unwrap().is_empty());
}

#[test]
fn missing_suite_files_point_at_gen() {
    let dir = tempdir().unwrap();
    let err = load_suite(dir.path()).unwrap_err().to_string();
    assert!(err.contains("kgmt gen"), "{err}");
    let c = small();
    write_suite(dir.path(), &generate_suite(&c).unwrap(), &c).unwrap();
    fs::remove_file(dir.path().join(RETRIEVER_FILE)).unwrap();
    assert!(load_suite(dir.path()).unwrap_err().to_string().contains("kgmt gen"));
    assert!(dir.path().join(TRANSLATION_FILE).exists());
}

fn encoder_config(vocab_size: usize, dim: usize) -> EncoderConfig {
    EncoderConfig { vocab_size, dim, layers: 1, heads: 2, ffn_dim: 2 * dim, max_len: 16, embed_init: 0.3 }
}

fn seq2seq_config(vocab_size: usize, dim: usize) -> Seq2SeqConfig {
    Seq2SeqConfig { vocab_size, dim, enc_layers: 1, dec_layers: 1, heads: 2, ffn_dim: 2 * dim, max_input: 24, max_output: 12, retriever_dim: 6, embed_init: 0.3 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoder_checkpoints_are_bit_exact(seed in any::<u64>(), vocab in 8usize..40, half in 1usize..5) {
        let p = EncoderParams::init(encoder_config(vocab, 2 * half), seed);
        let back: EncoderParams = params_from_bytes(&params_to_bytes(&p), Path::new("mem")).unwrap();
        prop_assert_eq!(bits(&back), bits(&p));
        prop_assert_eq!(back.config, p.config);
        prop_assert_eq!(back.fingerprint(), p.fingerprint());
    }

    #[test]
    fn translator_checkpoints_are_bit_exact(seed in any::<u64>(), vocab in 8usize..40, half in 1usize..5) {
        let p = Seq2SeqParams::init(seq2seq_config(vocab, 2 * half), seed);
        let back: Seq2SeqParams = params_from_bytes(&params_to_bytes(&p), Path::new("mem")).unwrap();
        prop_assert_eq!(bits(&back), bits(&p));
    }

    #[test]
    fn truncated_checkpoints_are_rejected(seed in any::<u64>(), cut in 1usize..200) {
        let bytes = params_to_bytes(&EncoderParams::init(encoder_config(10, 4), seed));
        let cut = cut.min(bytes.len());
        prop_assert!(params_from_bytes::<EncoderParams>(&bytes[..bytes.len() - cut], Path::new("mem")).is_err());
    }
}

#[test]
fn checkpoint_kinds_are_checked() {
    let bytes = params_to_bytes(&EncoderParams::init(encoder_config(10, 4), 1));
    let err = params_from_bytes::<Seq2SeqParams>(&bytes, Path::new("x")).unwrap_err().to_string();
    assert!(err.contains("encoder"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(params_from_bytes::<EncoderParams>(&bad, Path::new("x")).is_err());
}

#[test]
fn retriever_translator_and_index_survive_disk() {
    let dir = tempdir().unwrap();
    let c = small();
    let s = generate_suite(&c).unwrap();
    let vocab = Vocabulary::from_kg(&s.kg, s.retriever_train.iter().map(|r| r.query.as_str()));
    let r = Retriever::init(vocab.clone(), encoder_config(0, 8), 5);
    save_retriever(&dir.path().join("r"), &r).unwrap();
    let back = load_retriever(&dir.path().join("r")).unwrap();
    assert_eq!(bits(&back.params), bits(&r.params));
    assert_eq!(back.vocab, r.vocab);

    let (index, _) = build_index(&s.kg, &r, &s.src).unwrap();
    let path = dir.path().join("index.bin");
    save_index(&path, &index).unwrap();
    let loaded = load_index(&path).unwrap();
    assert_eq!(loaded.ids, index.ids);
    assert_eq!(loaded.params_hash, r.params.fingerprint());
    assert!(loaded.vectors.data.iter().zip(&index.vectors.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(index_to_bytes(&loaded), fs::read(&path).unwrap());
    assert!(index_from_bytes(&fs::read(&path).unwrap()[..40], &path).is_err());

    let t = Seq2SeqParams::init(seq2seq_config(vocab.len(), 8), 9);
    save_translator(&dir.path().join("t"), &t, &vocab).unwrap();
    let (tb, vb) = load_translator(&dir.path().join("t")).unwrap();
    assert_eq!(bits(&tb), bits(&t));
    assert_eq!(vb, vocab);
    // A translator checkpoint is not a retriever.
    assert!(load_retriever(&dir.path().join("t")).is_err());

    let p = dir.path().join("p.bin");
    save_params(&p, &t).unwrap();
    let again: Seq2SeqParams = load_params(&p).unwrap();
    assert_eq!(params_to_bytes(&again), fs::read(&p).unwrap());
}
