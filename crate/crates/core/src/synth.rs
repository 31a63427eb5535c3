//! Random trees, random forests and the synthetic bracketing corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::forest::{ForestBuilder, ForestError, PackedForest, Span, Tree};

/// Uniformly random split points, recursively, over words `start..end`.
pub fn random_tree<R: Rng + ?Sized>(start: usize, end: usize, rng: &mut R) -> Tree {
    if end - start == 1 {
        return Tree::Leaf(start);
    }
    let k = rng.gen_range(start + 1..end);
    let left = random_tree(start, k, rng);
    let right = random_tree(k, end, rng);
    Tree::Node { span: Span::new(start, end), children: vec![left, right] }
}

/// Packs weighted trees over the same sentence into one forest with one node
/// per span. An edge's probability is the total weight of the trees using it,
/// normalized per head.
pub fn forest_from_trees(sentence_len: usize, trees: &[(Tree, f64)]) -> Result<PackedForest, ForestError> {
    let mut ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut edges: BTreeMap<(usize, Vec<usize>), f64> = BTreeMap::new();

    fn visit(
        t: &Tree,
        weight: f64,
        n: usize,
        ids: &mut BTreeMap<(usize, usize), usize>,
        edges: &mut BTreeMap<(usize, Vec<usize>), f64>,
    ) -> usize {
        match t {
            Tree::Leaf(i) => *i,
            Tree::Node { span, children } => {
                let tails: Vec<usize> = children.iter().map(|c| visit(c, weight, n, ids, edges)).collect();
                let next = n + ids.len();
                let head = *ids.entry((span.start, span.end)).or_insert(next);
                *edges.entry((head, tails)).or_insert(0.0) += weight;
                head
            }
        }
    }
    for (t, w) in trees {
        if t.span() != Span::new(0, sentence_len) {
            return Err(ForestError::Tree(format!("tree spans {:?}, expected 0..{sentence_len}", t.span())));
        }
        visit(t, *w, sentence_len, &mut ids, &mut edges);
    }
    let mut b = ForestBuilder::new(sentence_len);
    let mut by_id: Vec<_> = ids.into_iter().collect();
    by_id.sort_by_key(|(_, id)| *id);
    for ((s, e), id) in by_id {
        b.add_phrase(id, s, e, 0)?;
    }
    for ((head, tails), w) in edges {
        b.add_edge(head, tails, w, 0)?;
    }
    b.finish()
}

/// A forest over `n` words merging between 1 and `max_trees` random trees
/// with random weights.
pub fn random_forest<R: Rng + ?Sized>(n: usize, max_trees: usize, rng: &mut R) -> PackedForest {
    let k = rng.gen_range(1..=max_trees.max(1));
    let trees: Vec<(Tree, f64)> = (0..k).map(|_| (random_tree(0, n, rng), rng.gen_range(0.1..1.0))).collect();
    forest_from_trees(n, &trees).expect("random trees always pack")
}

/// Plain-text parallel corpus with one forest block per pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthCorpus {
    pub src: String,
    pub tgt: String,
    pub forests: String,
    /// Gold bracketing of each source in bracket notation.
    pub gold: String,
    /// Number of pairs whose 1-best tree differs from the gold tree at the root.
    pub misleading: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub pairs: usize,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { pairs: 500, vocab: 8, min_len: 3, max_len: 7, seed: 7 }
    }
}

/// Fraction of sentences whose 1-best tree is the distractor.
pub const MISLEADING_RATE: f64 = 0.25;

/// Corpus whose target is a deterministic function of a hidden source
/// bracketing.
///
/// Each source sentence `w_0 … w_{n-1}` has two candidate root derivations,
/// `[w_0, (w_1 … w_{n-1})]` and `[(w_0 … w_{n-2}), w_{n-1}]`, each over a
/// random inner bracketing. One of them is gold and the target says which
/// word stands alone at the gold root (`left` or `right`). The forest packs
/// both. Usually the gold derivation gets probability near 0.8, but for a
/// `MISLEADING_RATE` share of sentences it gets about 0.4, so the 1-best
/// tree is the distractor. The probabilities still identify the gold
/// derivation, but only a model that sees both alternatives can use that.
pub fn bracketing_corpus(cfg: SynthConfig) -> SynthCorpus {
    assert!(cfg.min_len >= 3 && cfg.max_len >= cfg.min_len && cfg.vocab >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SynthCorpus::default();
    for i in 0..cfg.pairs {
        let n = rng.gen_range(cfg.min_len..=cfg.max_len);
        let words: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        let misleading = rng.gen_bool(MISLEADING_RATE);
        let gold_prob: f64 = if misleading { rng.gen_range(0.35..0.45) } else { rng.gen_range(0.7..0.9) };
        let gold_is_left = rng.gen_bool(0.5);
        let q = if gold_is_left { gold_prob } else { 1.0 - gold_prob };
        let left_alone =
            Tree::Node { span: Span::new(0, n), children: vec![Tree::Leaf(0), random_tree(1, n, &mut rng)] };
        let right_alone =
            Tree::Node { span: Span::new(0, n), children: vec![random_tree(0, n - 1, &mut rng), Tree::Leaf(n - 1)] };
        out.misleading += usize::from(misleading);
        let forest = forest_from_trees(n, &[(left_alone.clone(), q), (right_alone.clone(), 1.0 - q)])
            .expect("two trees over one sentence pack");
        let (gold, label) = if gold_is_left { (&left_alone, "left") } else { (&right_alone, "right") };

        let src: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
        writeln!(out.src, "{}", src.join(" ")).unwrap();
        writeln!(out.tgt, "{label}").unwrap();
        writeln!(out.gold, "{}", gold.to_bracketed(&src)).unwrap();
        if i > 0 {
            out.forests.push('\n');
        }
        out.forests.push_str(&forest.to_text());
    }
    out
}
