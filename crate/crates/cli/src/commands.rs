use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use forestnmt::check::{run_checks, CheckConfig, CheckFailure};
use forestnmt::corpus::{load_bitext, LoadOptions, Split, Vocabulary};
use forestnmt::decoder::greedy_decode;
use forestnmt::eval::{
    attention_ratio, bleu_csv, bucket_bleu, bucket_csv, bucket_of, corpus_bleu, read_attention_dumps,
    write_attention_dumps, AttentionDump, BUCKET_LABELS,
};
use forestnmt::forest::parse_forests;
use forestnmt::synth::{bracketing_corpus, SynthConfig};
use forestnmt::train::{metrics_csv, train, Checkpoint, TrainConfig};
use forestnmt::{Error, Mode, PackedForest, Result, SourceInput};

use crate::args::{CheckArgs, EvalArgs, SynthArgs, TrainArgs, TranslateArgs, VocabArgs};
use crate::manifest::{InputDigest, RunManifest, RunStatus};

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Success,
    CheckFailed,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn tokenized_lines(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        mode: a.mode,
        hidden: a.hidden,
        embed: a.embed.unwrap_or(a.hidden),
        lr: a.lr,
        lr_decay: a.lr_decay,
        batch_size: a.batch,
        max_epochs: a.epochs,
        patience: (a.patience > 0).then_some(a.patience),
        clip_norm: a.clip,
        init_scale: a.init_scale,
        min_freq: a.min_freq,
        max_len: a.max_len,
        seed: a.seed,
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let started = Instant::now();
    let config = train_config(a);
    config.validate()?;
    let (forests, dev_forests) = if a.mode.uses_structure() {
        match (&a.forests, &a.dev_forests) {
            (Some(f), Some(d)) => (Some(f.as_path()), Some(d.as_path())),
            _ => return Err(Error::Config(format!("{} mode needs --forests and --dev-forests", a.mode))),
        }
    } else {
        if a.forests.is_some() || a.dev_forests.is_some() {
            warn!("vanilla mode ignores --forests and --dev-forests");
        }
        (None, None)
    };

    let mut inputs = vec![InputDigest::of("src", &a.src)?, InputDigest::of("tgt", &a.tgt)?];
    if let Some(f) = forests {
        inputs.push(InputDigest::of("forests", f)?);
    }
    inputs.push(InputDigest::of("dev_src", &a.dev_src)?);
    inputs.push(InputDigest::of("dev_tgt", &a.dev_tgt)?);
    if let Some(f) = dev_forests {
        inputs.push(InputDigest::of("dev_forests", f)?);
    }

    fs::create_dir_all(&a.out)?;
    let paths: BTreeMap<String, _> = [
        ("checkpoint", "model.json"),
        ("metrics", "metrics.csv"),
        ("manifest", "manifest.json"),
        ("src_vocab", "src.vocab"),
        ("tgt_vocab", "tgt.vocab"),
    ]
    .into_iter()
    .map(|(k, f)| (k.to_string(), a.out.join(f)))
    .collect();
    let manifest_path = paths["manifest"].clone();
    let mut manifest = RunManifest {
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        status: RunStatus::Running,
        config: config.clone(),
        seed: a.seed,
        threads: rayon::current_num_threads(),
        inputs,
        outputs: paths.clone(),
        timings: BTreeMap::new(),
        best_epoch: None,
        best_dev_perplexity: None,
        error: None,
    };
    manifest.write(&manifest_path)?;

    let result = (|| -> Result<()> {
        let t = Instant::now();
        let opts = LoadOptions { max_len: a.max_len, ..Default::default() };
        let (train_set, stats) = load_bitext(Split::Train, &a.src, &a.tgt, forests, opts)?;
        let dev_opts = LoadOptions { max_len: usize::MAX, ..Default::default() };
        let (dev_set, _) = load_bitext(Split::Dev, &a.dev_src, &a.dev_tgt, dev_forests, dev_opts)?;
        if train_set.is_empty() || dev_set.is_empty() {
            return Err(Error::Data("training and dev sets must be non-empty".into()));
        }
        info!(
            "loaded {} training pairs ({} dropped as too long), {} dev pairs",
            stats.kept,
            stats.dropped_long,
            dev_set.len()
        );
        manifest.timings.insert("load".into(), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let out = train(&train_set, &dev_set, &config)?;
        manifest.timings.insert("train".into(), t.elapsed().as_secs_f64());
        for m in &out.metrics {
            manifest.timings.insert(format!("epoch_{:03}", m.epoch), m.seconds);
        }

        out.best.save(&paths["checkpoint"])?;
        fs::write(&paths["metrics"], metrics_csv(&out.metrics))?;
        fs::write(&paths["src_vocab"], out.best.src_vocab.to_text())?;
        fs::write(&paths["tgt_vocab"], out.best.tgt_vocab.to_text())?;
        manifest.best_epoch = Some(out.best.epoch);
        manifest.best_dev_perplexity = Some(out.best.dev_perplexity);
        info!(
            "best dev perplexity {:.4} at epoch {}{}",
            out.best.dev_perplexity,
            out.best.epoch,
            if out.stopped_early { " (stopped early)" } else { "" }
        );
        Ok(())
    })();

    manifest.timings.insert("total".into(), started.elapsed().as_secs_f64());
    match result {
        Ok(()) => {
            manifest.status = RunStatus::Completed;
            manifest.write(&manifest_path)?;
            println!("{}", paths["checkpoint"].display());
            Ok(Outcome::Success)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            if let Err(w) = manifest.write(&manifest_path) {
                warn!("could not update {}: {w}", manifest_path.display());
            }
            Err(e)
        }
    }
}

pub fn cmd_translate(a: &TranslateArgs) -> Result<Outcome> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let model = checkpoint.model()?;
    let mode = checkpoint.mode;
    match (mode.uses_structure(), &a.forests) {
        (true, None) => return Err(Error::Config(format!("{mode} checkpoint needs --forests"))),
        (false, Some(_)) => return Err(Error::Config("vanilla checkpoint does not take --forests".into())),
        _ => {}
    }
    if a.max_len == Some(0) {
        return Err(Error::Config("--max-len must be at least 1".into()));
    }

    let sources = tokenized_lines(&read_text(&a.src)?);
    if let Some(i) = sources.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("{} line {}: empty source sentence", a.src.display(), i + 1)));
    }
    let forests: Option<Vec<PackedForest>> = match &a.forests {
        Some(p) => {
            let fs = parse_forests(&read_text(p)?)?;
            if fs.len() != sources.len() {
                return Err(Error::Alignment {
                    source_lines: sources.len(),
                    target_lines: sources.len(),
                    forest_blocks: fs.len(),
                });
            }
            for (i, (f, s)) in fs.iter().zip(&sources).enumerate() {
                if f.sentence_len() != s.len() {
                    return Err(Error::Data(format!(
                        "line {}: forest covers {} words, sentence has {}",
                        i + 1,
                        f.sentence_len(),
                        s.len()
                    )));
                }
            }
            Some(fs)
        }
        None => None,
    };

    let ids: Vec<Vec<usize>> = sources.iter().map(|s| checkpoint.src_vocab.encode(s)).collect();
    let decoded: Vec<_> = (0..sources.len())
        .into_par_iter()
        .map(|i| {
            let input = match &forests {
                Some(fs) => SourceInput::with_forest(&ids[i], &fs[i]),
                None => SourceInput::words(&ids[i]),
            };
            greedy_decode(&model, input, a.max_len)
        })
        .collect::<Result<_>>()?;

    let mut hyps = Vec::with_capacity(decoded.len());
    let mut dumps = Vec::new();
    let mut truncated = 0;
    for (i, (tokens, record)) in decoded.into_iter().enumerate() {
        let words: Vec<String> = checkpoint.tgt_vocab.decode(&tokens).into_iter().map(str::to_string).collect();
        hyps.push(words.join(" "));
        truncated += usize::from(record.truncated);
        if a.dump_attention.is_some() {
            dumps.push(AttentionDump { sentence: i, source: sources[i].clone(), translation: words, record });
        }
    }
    write_lines(&a.out, &hyps)?;
    if let Some(p) = &a.dump_attention {
        fs::write(p, write_attention_dumps(&dumps)?)?;
    }
    info!("translated {} sentences in {mode} mode ({truncated} hit the length cap)", hyps.len());
    Ok(Outcome::Success)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let hyps = tokenized_lines(&read_text(&a.hyp)?);
    let refs = tokenized_lines(&read_text(&a.reference)?);
    let report = corpus_bleu(&hyps, &refs)?;
    if a.csv {
        print!("{}", bleu_csv(&report));
    } else {
        println!("{report}");
    }

    if a.buckets {
        let src = a.src.as_ref().ok_or_else(|| Error::Config("--buckets needs --src".into()))?;
        let lens: Vec<usize> = tokenized_lines(&read_text(src)?).iter().map(Vec::len).collect();
        let buckets = bucket_bleu(&lens, &hyps, &refs)?;
        if a.csv {
            print!("{}", bucket_csv(&buckets));
        } else {
            print!("{buckets}");
        }
    }

    if let Some(p) = &a.attention {
        let dumps = read_attention_dumps(&read_text(p)?)?;
        if dumps.iter().any(|d| d.record.mode == Mode::Vanilla) {
            return Err(Error::Config("attention dumps from vanilla mode have no phrase attention".into()));
        }
        let records: Vec<_> = dumps.iter().map(|d| d.record.clone()).collect();
        let ratios = attention_ratio(&records)?;
        let mut per_bucket = [(0usize, 0.0f64); 3];
        for (d, r) in dumps.iter().zip(&ratios.per_sentence) {
            let b = &mut per_bucket[bucket_of(d.source.len())];
            b.0 += 1;
            b.1 += r;
        }
        if a.csv {
            println!("bucket,sentences,phrase_word_ratio");
            for (label, (n, sum)) in BUCKET_LABELS.iter().zip(per_bucket) {
                let ratio = if n > 0 { (sum / n as f64).to_string() } else { String::new() };
                println!("{label},{n},{ratio}");
            }
            println!("all,{},{}", dumps.len(), ratios.mean);
        } else {
            println!("attention ratio (phrase mass / word mass)");
            for (label, (n, sum)) in BUCKET_LABELS.iter().zip(per_bucket) {
                if n > 0 {
                    println!("{label:>6} n={n:<6} {:.4}", sum / n as f64);
                } else {
                    println!("{label:>6} n={n:<6} absent");
                }
            }
            println!("{:>6} n={:<6} {:.4}", "all", dumps.len(), ratios.mean);
        }
    }
    Ok(Outcome::Success)
}

pub fn cmd_check(a: &CheckArgs) -> Result<Outcome> {
    let cfg =
        CheckConfig { seed: a.seed, grad_trials: a.trials, forest_trials: a.forest_trials, corrupt: a.corrupt.clone() };
    let started = Instant::now();
    let summary = run_checks(&cfg)?;
    let secs = started.elapsed().as_secs_f64();
    match &summary.failure {
        None => {
            println!(
                "ok: {} gradient checks (max rel err {:.2e}), {} forests ({} trees enumerated) in {secs:.1}s",
                summary.grad_trials, summary.max_rel_err, summary.forest_trials, summary.trees_enumerated
            );
            Ok(Outcome::Success)
        }
        Some(failure) => {
            match failure {
                CheckFailure::Gradient(o) => match &o.worst {
                    Some(m) => eprintln!(
                        "gradient check failed in {} mode: {}[{}] analytic {:e}, numeric {:e}, rel err {:.2e}",
                        o.case.mode, m.param, m.index, m.analytic, m.numeric, m.rel_err
                    ),
                    None => eprintln!("gradient check failed in {} mode", o.case.mode),
                },
                CheckFailure::Forest(o) => eprintln!(
                    "forest oracle failed: {} trees counted, {} enumerated, {} attendable-state mismatches",
                    o.tree_count, o.enumerated, o.attendable_mismatches
                ),
            }
            println!("{}", serde_json::to_string(failure).map_err(|e| Error::Data(e.to_string()))?);
            Ok(Outcome::CheckFailed)
        }
    }
}

pub fn cmd_vocab(a: &VocabArgs) -> Result<Outcome> {
    let lines = tokenized_lines(&read_text(&a.input)?);
    let vocab = Vocabulary::build(lines.iter().map(Vec::as_slice), a.min_freq)?;
    fs::write(&a.out, vocab.to_text())?;
    info!("{} entries written to {}", vocab.len(), a.out.display());
    Ok(Outcome::Success)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Outcome> {
    if a.min_len < 3 || a.max_len < a.min_len || a.vocab == 0 {
        return Err(Error::Config("synthetic corpus needs 3 <= --min-len <= --max-len and --vocab >= 1".into()));
    }
    let cfg = SynthConfig { pairs: a.pairs, vocab: a.vocab, min_len: a.min_len, max_len: a.max_len, seed: a.seed };
    let corpus = bracketing_corpus(cfg);
    let prefix = a.out_prefix.display().to_string();
    for (ext, text) in [("src", &corpus.src), ("tgt", &corpus.tgt), ("forest", &corpus.forests), ("gold", &corpus.gold)]
    {
        fs::write(format!("{prefix}.{ext}"), text)?;
    }
    info!("{} pairs, {} with a misleading 1-best tree", a.pairs, corpus.misleading);
    Ok(Outcome::Success)
}
