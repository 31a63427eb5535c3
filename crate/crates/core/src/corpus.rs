//! Parallel corpus loading, length filtering and vocabularies.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::forest::{split_blocks, PackedForest, Tree};
use crate::model::SourceInput;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const DEFAULT_MIN_FREQ: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 50;

/// Token ↔ id map with the four reserved entries first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary must start with <pad> <s> </s> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry '{t}'")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times, most frequent first,
    /// ties broken by first occurrence.
    pub fn build<'a, I, S>(sentences: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        for sent in sentences {
            for tok in sent {
                let next = counts.len();
                counts.entry(tok.as_ref()).or_insert((0, next)).0 += 1;
                seen += 1;
            }
        }
        if seen == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&str, usize, usize)> = counts
            .into_iter()
            .filter(|(tok, (n, _))| *n >= min_freq.max(1) && !RESERVED.contains(tok))
            .map(|(tok, (n, first))| (tok, n, first))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, ..)| t.to_string()));
        Vocabulary::try_from(tokens.collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Target-side ids with the closing EOS appended.
    pub fn encode_target<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<usize> {
        let mut ids = self.encode(sentence);
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocabulary::try_from(text.lines().map(str::to_string).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// One aligned sentence pair, with its forest when one was supplied.
#[derive(Debug, Clone)]
pub struct SentencePair {
    /// 1-based line number in the input files.
    pub line: usize,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub forest: Option<PackedForest>,
}

#[derive(Debug, Clone)]
pub struct Bitext {
    pub split: Split,
    pub pairs: Vec<SentencePair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LoadStats {
    pub read: usize,
    pub kept: usize,
    pub dropped_long: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Pairs with either side longer than this are dropped.
    pub max_len: usize,
    pub lowercase: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { max_len: DEFAULT_MAX_LEN, lowercase: false }
    }
}

fn tokenize(line: &str, lowercase: bool) -> Vec<String> {
    line.split_whitespace().map(|t| if lowercase { t.to_lowercase() } else { t.to_string() }).collect()
}

impl Bitext {
    /// Builds a bitext from in-memory file contents.
    pub fn from_texts(
        split: Split,
        src: &str,
        tgt: &str,
        forests: Option<&str>,
        opts: LoadOptions,
    ) -> Result<(Bitext, LoadStats)> {
        let src_lines: Vec<&str> = src.lines().collect();
        let tgt_lines: Vec<&str> = tgt.lines().collect();
        let blocks = forests.map(split_blocks);
        let n_blocks = blocks.as_ref().map_or(src_lines.len(), Vec::len);
        if src_lines.len() != tgt_lines.len() || n_blocks != src_lines.len() {
            return Err(Error::Alignment {
                source_lines: src_lines.len(),
                target_lines: tgt_lines.len(),
                forest_blocks: n_blocks,
            });
        }
        let mut stats = LoadStats { read: src_lines.len(), ..Default::default() };
        let mut pairs = Vec::with_capacity(src_lines.len());
        for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
            let line = i + 1;
            let s = tokenize(s, opts.lowercase);
            let t = tokenize(t, opts.lowercase);
            if s.is_empty() {
                return Err(Error::Data(format!("line {line}: empty source sentence")));
            }
            if s.len() > opts.max_len || t.len() > opts.max_len {
                stats.dropped_long += 1;
                continue;
            }
            let forest = match &blocks {
                None => None,
                Some(b) => {
                    let f = b[i].parse()?;
                    if f.sentence_len() != s.len() {
                        return Err(Error::Data(format!(
                            "line {line}: forest covers {} words but the source has {}",
                            f.sentence_len(),
                            s.len()
                        )));
                    }
                    Some(f)
                }
            };
            pairs.push(SentencePair { line, src: s, tgt: t, forest });
        }
        stats.kept = pairs.len();
        if stats.dropped_long > 0 {
            log::info!("{split}: dropped {} of {} pairs longer than {}", stats.dropped_long, stats.read, opts.max_len);
        }
        Ok((Bitext { split, pairs }, stats))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn has_forests(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.forest.is_some())
    }

    pub fn sources(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.src.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.tgt.as_slice())
    }

    /// Maps every pair to ids. Tree-mode structure is the 1-best tree of
    /// each forest.
    pub fn numericalize(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Vec<Example> {
        self.pairs
            .iter()
            .map(|p| Example {
                src: src_vocab.encode(&p.src),
                tgt: tgt_vocab.encode_target(&p.tgt),
                tree: p.forest.as_ref().map(PackedForest::best_tree),
                forest: p.forest.clone(),
            })
            .collect()
    }
}

/// Reads a source, target and optional forest file.
pub fn load_bitext(
    split: Split,
    src_path: &Path,
    tgt_path: &Path,
    forest_path: Option<&Path>,
    opts: LoadOptions,
) -> Result<(Bitext, LoadStats)> {
    let read =
        |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())));
    let src = read(src_path)?;
    let tgt = read(tgt_path)?;
    let forests = forest_path.map(read).transpose()?;
    Bitext::from_texts(split, &src, &tgt, forests.as_deref(), opts)
}

/// Numericalized training or evaluation example. `tgt` ends with EOS.
#[derive(Debug, Clone)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub forest: Option<PackedForest>,
    pub tree: Option<Tree>,
}

impl Example {
    pub fn input(&self) -> SourceInput<'_> {
        SourceInput { words: &self.src, forest: self.forest.as_ref(), tree: self.tree.as_ref() }
    }
}
