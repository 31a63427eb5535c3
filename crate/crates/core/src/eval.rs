//! BLEU, perplexity, length buckets and the phrase/word attention ratio.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::decoder::{sentence_loss, AttentionRecord};
use crate::model::{Mode, ModelParams};
use crate::numcore::Tape;
use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus BLEU with the arithmetic of Moses' `multi-bleu.perl` (single
/// reference, no smoothing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Score on the 0–100 scale.
    pub bleu: f64,
    /// Modified n-gram precisions for n = 1..4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn ratio(&self) -> f64 {
        self.hyp_len as f64 / self.ref_len as f64
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|x| 100.0 * x);
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.ratio(),
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[Vec<H>], references: &[Vec<R>]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!("{} hypotheses but {} references", hypotheses.len(), references.len())));
    }
    if hypotheses.is_empty() {
        return Err(Error::Data("cannot score an empty corpus".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &c) in &hc {
                totals[n - 1] += c;
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if ref_len == 0 {
        return Err(Error::Data("references are all empty".into()));
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if totals[n] > 0 { matches[n] as f64 / totals[n] as f64 } else { 0.0 };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        log::warn!("an n-gram precision is zero; BLEU is 0");
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport { bleu, precisions, matches, totals, brevity_penalty, hyp_len, ref_len })
}

/// Source-length buckets: `≤ 10`, `(10, 20]` and `> 20` words.
pub const BUCKET_LABELS: [&str; 3] = ["<=10", "11-20", ">20"];

pub fn bucket_of(source_len: usize) -> usize {
    match source_len {
        0..=10 => 0,
        11..=20 => 1,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    /// Per bucket: number of sentences and BLEU, `None` when the bucket is empty.
    pub buckets: [(usize, Option<BleuReport>); 3],
}

impl fmt::Display for BucketReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (label, (n, report)) in BUCKET_LABELS.iter().zip(&self.buckets) {
            match report {
                Some(r) => writeln!(f, "{label:>6} n={n:<6} {r}")?,
                None => writeln!(f, "{label:>6} n={n:<6} absent")?,
            }
        }
        Ok(())
    }
}

pub fn bucket_bleu<H: AsRef<str>, R: AsRef<str>>(
    source_lens: &[usize],
    hypotheses: &[Vec<H>],
    references: &[Vec<R>],
) -> Result<BucketReport> {
    if source_lens.len() != hypotheses.len() || hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "bucket inputs differ in length: {} sources, {} hypotheses, {} references",
            source_lens.len(),
            hypotheses.len(),
            references.len()
        )));
    }
    type Part<'a, H, R> = (Vec<&'a Vec<H>>, Vec<&'a Vec<R>>);
    let mut parts: [Part<'_, H, R>; 3] = Default::default();
    for ((&len, h), r) in source_lens.iter().zip(hypotheses).zip(references) {
        let b = bucket_of(len);
        parts[b].0.push(h);
        parts[b].1.push(r);
    }
    let mut buckets: [(usize, Option<BleuReport>); 3] = Default::default();
    for (slot, (hs, rs)) in buckets.iter_mut().zip(parts) {
        slot.0 = hs.len();
        if !hs.is_empty() {
            let hs: Vec<&[H]> = hs.into_iter().map(Vec::as_slice).collect();
            let rs: Vec<&[R]> = rs.into_iter().map(Vec::as_slice).collect();
            slot.1 = Some(corpus_bleu_slices(&hs, &rs)?);
        }
    }
    Ok(BucketReport { buckets })
}

fn corpus_bleu_slices<H: AsRef<str>, R: AsRef<str>>(hs: &[&[H]], rs: &[&[R]]) -> Result<BleuReport> {
    let hs: Vec<Vec<&str>> = hs.iter().map(|s| s.iter().map(AsRef::as_ref).collect()).collect();
    let rs: Vec<Vec<&str>> = rs.iter().map(|s| s.iter().map(AsRef::as_ref).collect()).collect();
    corpus_bleu(&hs, &rs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRatios {
    /// Phrase mass over word mass, summed over the steps of each sentence.
    pub per_sentence: Vec<f64>,
    pub mean: f64,
}

/// Ratio of attention mass on phrases to attention mass on words.
pub fn attention_ratio(records: &[AttentionRecord]) -> Result<AttentionRatios> {
    if records.is_empty() {
        return Err(Error::Contract("no attention records".into()));
    }
    let mut per_sentence = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.mode == Mode::Vanilla {
            return Err(Error::Contract(format!("record {i} comes from vanilla mode and has no phrase attention")));
        }
        let words: f64 = r.steps.iter().map(|s| s.word_mass()).sum();
        let phrases: f64 = r.steps.iter().map(|s| s.phrase_mass()).sum();
        per_sentence.push(phrases / words);
    }
    let mean = per_sentence.iter().sum::<f64>() / per_sentence.len() as f64;
    Ok(AttentionRatios { per_sentence, mean })
}

/// Mean attention ratio per source-length bucket.
pub fn bucket_attention_ratio(records: &[AttentionRecord], source_lens: &[usize]) -> Result<[Option<f64>; 3]> {
    if records.len() != source_lens.len() {
        return Err(Error::Data(format!("{} records but {} sources", records.len(), source_lens.len())));
    }
    let ratios = attention_ratio(records)?;
    let mut sums = [(0.0, 0usize); 3];
    for (r, &len) in ratios.per_sentence.iter().zip(source_lens) {
        let b = &mut sums[bucket_of(len)];
        b.0 += r;
        b.1 += 1;
    }
    Ok(sums.map(|(s, n)| (n > 0).then(|| s / n as f64)))
}

/// One line of an attention dump file (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    /// 0-based position in the translated file.
    pub sentence: usize,
    pub source: Vec<String>,
    pub translation: Vec<String>,
    #[serde(flatten)]
    pub record: AttentionRecord,
}

pub fn write_attention_dumps(dumps: &[AttentionDump]) -> Result<String> {
    let mut out = String::new();
    for d in dumps {
        out.push_str(&serde_json::to_string(d).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_attention_dumps(text: &str) -> Result<Vec<AttentionDump>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("attention dump line {}: {e}", i + 1))))
        .collect()
}

/// Total teacher-forced negative log-likelihood and target token count
/// (EOS included). Sums in input order.
pub fn corpus_nll(params: &ModelParams, examples: &[Example]) -> Result<(f64, usize)> {
    let losses: Vec<Result<f64>> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::with_params(&params.store);
            let loss = sentence_loss(&mut tape, params, ex.input(), &ex.tgt)?;
            Ok(tape.value(loss).item())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok((total, examples.iter().map(|e| e.tgt.len()).sum()))
}

/// `exp(total NLL / total target tokens)`.
pub fn perplexity(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract("perplexity of an empty split".into()));
    }
    let (nll, tokens) = corpus_nll(params, examples)?;
    Ok((nll / tokens as f64).exp())
}

pub fn bleu_csv(r: &BleuReport) -> String {
    let p = r.precisions;
    format!(
        "bleu,p1,p2,p3,p4,bp,ratio,hyp_len,ref_len\n{},{},{},{},{},{},{},{},{}\n",
        r.bleu,
        p[0],
        p[1],
        p[2],
        p[3],
        r.brevity_penalty,
        r.ratio(),
        r.hyp_len,
        r.ref_len
    )
}

pub fn bucket_csv(r: &BucketReport) -> String {
    let mut out = String::from("bucket,sentences,bleu\n");
    for (label, (n, b)) in BUCKET_LABELS.iter().zip(&r.buckets) {
        let score = b.as_ref().map_or(String::new(), |b| b.bleu.to_string());
        out.push_str(&format!("{label},{n},{score}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::AttentionStep;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn lines(xs: &[&str]) -> Vec<Vec<String>> {
        xs.iter().map(|s| toks(s)).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let c = lines(&["the cat sat on the mat", "a b c d"]);
        let r = corpus_bleu(&c, &c).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-12);
        assert_eq!(
            r.to_string(),
            "BLEU = 100.00, 100.0/100.0/100.0/100.0 (BP=1.000, ratio=1.000, hyp_len=10, ref_len=10)"
        );
    }

    #[test]
    fn clipped_unigram_precision() {
        let r = corpus_bleu(&lines(&["the the the the"]), &lines(&["the cat sat down"])).unwrap();
        assert_eq!((r.matches[0], r.totals[0]), (1, 4));
        assert_eq!(r.precisions[0], 0.25);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn brevity_penalty_closed_form() {
        // 4 of 6 reference words, every n-gram correct: BLEU = exp(1 - 6/4).
        let r = corpus_bleu(&lines(&["a b c d"]), &lines(&["a b c d e f"])).unwrap();
        assert!((r.bleu - 100.0 * (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn short_sentences_have_zero_higher_orders() {
        let c = lines(&["a b c"]);
        let r = corpus_bleu(&c, &c).unwrap();
        assert_eq!(r.totals[3], 0);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn order_does_not_matter() {
        let h = lines(&["a b c d e", "x y z w", "p q r s t u"]);
        let r = lines(&["a b c e d", "x y w z", "p q r s u t"]);
        let a = corpus_bleu(&h, &r).unwrap();
        let rev_h: Vec<_> = h.iter().rev().cloned().collect();
        let rev_r: Vec<_> = r.iter().rev().cloned().collect();
        assert_eq!(a, corpus_bleu(&rev_h, &rev_r).unwrap());
    }

    #[test]
    fn errors() {
        assert!(corpus_bleu::<String, String>(&[], &[]).is_err());
        assert!(corpus_bleu(&lines(&["a"]), &lines(&["a", "b"])).is_err());
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!((bucket_of(10), bucket_of(11), bucket_of(20), bucket_of(21)), (0, 1, 1, 2));
        let c = lines(&["a b c d e", "f g h i j"]);
        let r = bucket_bleu(&[5, 5], &c, &c).unwrap();
        assert_eq!(r.buckets[0].1, Some(corpus_bleu(&c, &c).unwrap()));
        assert!(r.buckets[1].1.is_none() && r.buckets[2].1.is_none());
        assert!(r.to_string().contains("absent"));
    }

    fn record(mode: Mode, steps: &[(&[f64], &[f64])]) -> AttentionRecord {
        AttentionRecord {
            mode,
            phrase_spans: Vec::new(),
            steps: steps.iter().map(|(w, p)| AttentionStep { words: w.to_vec(), phrases: p.to_vec() }).collect(),
            truncated: false,
        }
    }

    #[test]
    fn ratio_cases() {
        let n = 4;
        let u = 1.0 / (2 * n - 1) as f64;
        let uniform = record(Mode::Tree, &[(&[u; 4], &[u; 3]), (&[u; 4], &[u; 3])]);
        let r = attention_ratio(&[uniform]).unwrap();
        assert!((r.mean - 3.0 / 4.0).abs() < 1e-12);

        let words_only = record(Mode::Forest, &[(&[0.5, 0.5], &[0.0])]);
        assert_eq!(attention_ratio(&[words_only]).unwrap().mean, 0.0);

        let vanilla = record(Mode::Vanilla, &[(&[1.0], &[])]);
        assert!(matches!(attention_ratio(&[vanilla]), Err(Error::Contract(_))));
    }

    #[test]
    fn dump_round_trip() {
        let d = AttentionDump {
            sentence: 0,
            source: toks("a b"),
            translation: toks("x"),
            record: record(Mode::Forest, &[(&[0.25, 0.25], &[0.5])]),
        };
        let text = write_attention_dumps(std::slice::from_ref(&d)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(read_attention_dumps(&text).unwrap(), vec![d]);
        assert!(read_attention_dumps("{").is_err());
    }
}
