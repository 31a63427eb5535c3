use std::fs;
use std::path::{Path, PathBuf};

use forestnmt::corpus::{load_bitext, LoadOptions, Split};
use forestnmt::decoder::greedy_decode;
use forestnmt::eval::{bucket_bleu, corpus_bleu, corpus_nll, perplexity};
use forestnmt::train::{train, Checkpoint, TrainConfig};
use forestnmt::{Error, Mode};

fn toy(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy32").join(name)
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig { mode, hidden: 8, embed: 8, batch_size: 8, max_epochs: 3, min_freq: 1, seed: 5, ..Default::default() }
}

#[test]
fn toy_files_load_with_forests() {
    let (b, stats) = load_bitext(
        Split::Train,
        &toy("train.en"),
        &toy("train.fr"),
        Some(&toy("train.forest")),
        LoadOptions::default(),
    )
    .unwrap();
    assert_eq!((stats.read, stats.kept, stats.dropped_long), (32, 32, 0));
    for p in &b.pairs {
        let f = p.forest.as_ref().unwrap();
        assert_eq!(f.sentence_len(), p.src.len());
        assert!(f.tree_count() >= 1);
    }
}

#[test]
fn every_mode_trains_saves_and_translates() {
    let (b, _) = load_bitext(
        Split::Train,
        &toy("train.en"),
        &toy("train.fr"),
        Some(&toy("train.forest")),
        LoadOptions::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    for mode in Mode::ALL {
        let out = train(&b, &b, &small_config(mode)).unwrap();
        assert_eq!(out.metrics.len(), 3);
        assert!(out.metrics.iter().all(|m| m.train_loss.is_finite() && m.dev_perplexity > 1.0));

        let path = dir.path().join(format!("{mode}.json"));
        out.best.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.mode, mode);
        let model = loaded.model().unwrap();
        let examples = b.numericalize(&loaded.src_vocab, &loaded.tgt_vocab);
        let ppl = perplexity(&model, &examples).unwrap();
        assert!((ppl - out.best.dev_perplexity).abs() < 1e-9, "{ppl} vs {}", out.best.dev_perplexity);

        let mut hyps = Vec::new();
        for e in &examples {
            let (ids, rec) = greedy_decode(&model, e.input(), None).unwrap();
            assert!(ids.len() <= 2 * e.src.len() + 5);
            assert_eq!(rec.mode, mode);
            hyps.push(loaded.tgt_vocab.decode(&ids).into_iter().map(str::to_string).collect::<Vec<_>>());
        }
        let refs: Vec<Vec<String>> = b.targets().map(|t| t.to_vec()).collect();
        let bleu = corpus_bleu(&hyps, &refs).unwrap();
        assert!((0.0..=100.0).contains(&bleu.bleu));
        let lens: Vec<usize> = b.sources().map(<[String]>::len).collect();
        let buckets = bucket_bleu(&lens, &hyps, &refs).unwrap();
        assert_eq!(buckets.buckets[0].0, 32);
        assert!(buckets.buckets[1].1.is_none() && buckets.buckets[2].1.is_none());
    }
}

#[test]
fn checkpoint_mode_is_enforced() {
    let (b, _) = load_bitext(
        Split::Train,
        &toy("train.en"),
        &toy("train.fr"),
        Some(&toy("train.forest")),
        LoadOptions::default(),
    )
    .unwrap();
    let out = train(&b, &b, &TrainConfig { max_epochs: 1, ..small_config(Mode::Tree) }).unwrap();
    assert!(matches!(out.best.model_as(Mode::Forest), Err(Error::Config(_))));
    let examples = b.numericalize(&out.best.src_vocab, &out.best.tgt_vocab);
    let (nll, tokens) = corpus_nll(&out.best.model_as(Mode::Tree).unwrap(), &examples).unwrap();
    assert!(nll > 0.0 && tokens == examples.iter().map(|e| e.tgt.len()).sum::<usize>());
}

#[test]
fn structure_modes_refuse_missing_forests() {
    let (b, _) = load_bitext(Split::Train, &toy("train.en"), &toy("train.fr"), None, LoadOptions::default()).unwrap();
    assert!(matches!(train(&b, &b, &small_config(Mode::Forest)), Err(Error::Config(_))));
    assert!(matches!(train(&b, &b, &small_config(Mode::Tree)), Err(Error::Config(_))));
    assert!(train(&b, &b, &TrainConfig { max_epochs: 1, ..small_config(Mode::Vanilla) }).is_ok());
}

#[test]
fn misaligned_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    let tgt = dir.path().join("tgt");
    let forests = dir.path().join("forest");
    fs::write(&src, "a b\nc\n").unwrap();
    fs::write(&tgt, "x\n").unwrap();
    let err = load_bitext(Split::Dev, &src, &tgt, None, LoadOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Alignment { source_lines: 2, target_lines: 1, .. }), "{err}");

    fs::write(&tgt, "x\ny\n").unwrap();
    fs::write(&forests, "sent 3\nnode 3 0 3\nedge 3 1 0 1 2\n\nsent 1\n").unwrap();
    let err = load_bitext(Split::Dev, &src, &tgt, Some(&forests), LoadOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Data(ref m) if m.contains("line 1")), "{err}");

    let missing = dir.path().join("nope");
    assert!(matches!(load_bitext(Split::Dev, &missing, &tgt, None, LoadOptions::default()), Err(Error::Data(_))));
}
