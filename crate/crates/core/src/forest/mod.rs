//! Packed parse forests.
//!
//! A forest is a hypergraph over word spans. Leaves are the words
//! (ids `0..n`), phrase nodes carry a span, and each hyperedge is one way of
//! building its head phrase from an ordered list of tail nodes, weighted by
//! the rule probability. Exponentially many trees share structure here;
//! everything downstream walks the forest bottom-up in [`PackedForest::topo_order`].

mod format;
mod tree;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use format::{parse_forest, parse_forests, split_blocks, ForestBlock};
pub use tree::Tree;

pub type NodeId = usize;

/// Half-open word interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    Leaf,
    Phrase,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForestNode {
    pub id: NodeId,
    pub span: Span,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperedge {
    pub head: NodeId,
    pub tails: Vec<NodeId>,
    /// Probability of this derivation of `head`; normalized per head.
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForestError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("bracketed tree: {0}")]
    Tree(String),
    #[error("forest has {count} trees, more than the limit of {limit}")]
    Capacity { count: u128, limit: u128 },
}

fn format_err(line: usize, msg: impl Into<String>) -> ForestError {
    ForestError::Format { line, msg: msg.into() }
}

/// Validated, immutable packed forest.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedForest {
    sentence_len: usize,
    nodes: Vec<ForestNode>,
    edges: Vec<Hyperedge>,
    root: NodeId,
    index: HashMap<NodeId, usize>,
    incoming: HashMap<NodeId, Vec<usize>>,
    topo: Vec<NodeId>,
}

/// Accumulates nodes and edges, then validates them into a [`PackedForest`].
/// Line numbers, when given, are reported in errors.
#[derive(Debug, Clone)]
pub struct ForestBuilder {
    sentence_len: usize,
    phrases: Vec<(ForestNode, usize)>,
    edges: Vec<(Hyperedge, usize)>,
    seen: HashSet<NodeId>,
}

impl ForestBuilder {
    pub fn new(sentence_len: usize) -> Self {
        ForestBuilder { sentence_len, phrases: Vec::new(), edges: Vec::new(), seen: HashSet::new() }
    }

    pub fn sentence_len(&self) -> usize {
        self.sentence_len
    }

    pub fn add_phrase(&mut self, id: NodeId, start: usize, end: usize, line: usize) -> Result<(), ForestError> {
        let n = self.sentence_len;
        if id < n {
            return Err(format_err(line, format!("node id {id} is reserved for leaf {id}")));
        }
        if !self.seen.insert(id) {
            return Err(format_err(line, format!("duplicate node id {id}")));
        }
        if start >= end || end > n {
            return Err(format_err(line, format!("span ({start}, {end}) invalid for a {n}-word sentence")));
        }
        self.phrases.push((ForestNode { id, span: Span::new(start, end), kind: NodeKind::Phrase }, line));
        Ok(())
    }

    /// `prob` is on the linear scale and must be positive and finite.
    pub fn add_edge(&mut self, head: NodeId, tails: Vec<NodeId>, prob: f64, line: usize) -> Result<(), ForestError> {
        if !(prob > 0.0 && prob.is_finite()) {
            return Err(format_err(line, format!("edge probability must be positive and finite, got {prob}")));
        }
        if tails.is_empty() {
            return Err(format_err(line, "edge has no tail nodes"));
        }
        self.edges.push((Hyperedge { head, tails, prob }, line));
        Ok(())
    }

    pub fn finish(self) -> Result<PackedForest, ForestError> {
        let n = self.sentence_len;
        if n == 0 {
            return Err(format_err(0, "sentence length must be positive"));
        }
        let mut nodes: Vec<ForestNode> =
            (0..n).map(|i| ForestNode { id: i, span: Span::new(i, i + 1), kind: NodeKind::Leaf }).collect();
        let mut node_line: HashMap<NodeId, usize> = HashMap::new();
        for (node, line) in self.phrases {
            node_line.insert(node.id, line);
            nodes.push(node);
        }
        nodes.sort_by_key(|nd| nd.id);
        let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, nd)| (nd.id, i)).collect();
        let span_of = |id: NodeId| nodes[index[&id]].span;

        // Edge-local checks.
        let mut dedup = HashSet::new();
        for (e, line) in &self.edges {
            let Some(&hi) = index.get(&e.head) else {
                return Err(format_err(*line, format!("edge head {} is not a declared node", e.head)));
            };
            if nodes[hi].kind == NodeKind::Leaf {
                return Err(format_err(*line, format!("leaf {} cannot head an edge", e.head)));
            }
            let head_span = nodes[hi].span;
            let mut cursor = head_span.start;
            for t in &e.tails {
                if !index.contains_key(t) {
                    return Err(format_err(*line, format!("edge tail {t} is not a declared node")));
                }
                let s = span_of(*t);
                if s.start != cursor {
                    return Err(format_err(
                        *line,
                        format!("tail spans do not tile head span ({}, {})", head_span.start, head_span.end),
                    ));
                }
                cursor = s.end;
            }
            if cursor != head_span.end {
                return Err(format_err(
                    *line,
                    format!("tail spans do not cover head span ({}, {})", head_span.start, head_span.end),
                ));
            }
            if !dedup.insert((e.head, e.tails.clone())) {
                return Err(format_err(*line, "duplicate hyperedge"));
            }
        }

        // Root: the unique whole-sentence node that is nobody's tail.
        let is_tail: HashSet<NodeId> = self.edges.iter().flat_map(|(e, _)| e.tails.iter().copied()).collect();
        let roots: Vec<NodeId> =
            nodes.iter().filter(|nd| nd.span == Span::new(0, n) && !is_tail.contains(&nd.id)).map(|nd| nd.id).collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => return Err(format_err(0, format!("missing root node spanning (0, {n})"))),
            [_, second, ..] => {
                let line = node_line.get(second).copied().unwrap_or(0);
                return Err(format_err(line, format!("more than one root node spanning (0, {n})")));
            }
        };

        // Cycle detection with Kahn's algorithm over the full graph.
        let mut indegree: HashMap<NodeId, usize> = nodes.iter().map(|nd| (nd.id, 0)).collect();
        let mut consumers: HashMap<NodeId, Vec<usize>> = HashMap::new();
        for (k, (e, _)) in self.edges.iter().enumerate() {
            *indegree.get_mut(&e.head).expect("checked") += e.tails.len();
            for t in &e.tails {
                consumers.entry(*t).or_default().push(k);
            }
        }
        let mut queue: Vec<NodeId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut done = 0;
        while let Some(id) = queue.pop() {
            done += 1;
            for &k in consumers.get(&id).into_iter().flatten() {
                let head = self.edges[k].0.head;
                let d = indegree.get_mut(&head).expect("checked");
                *d -= 1;
                if *d == 0 {
                    queue.push(head);
                }
            }
        }
        if done != nodes.len() {
            let (bad, _) = indegree.iter().filter(|(_, d)| **d > 0).min_by_key(|(id, _)| **id).expect("cycle");
            let line = self.edges.iter().find(|(e, _)| e.head == *bad).map_or(0, |(_, l)| *l);
            return Err(format_err(line, format!("cycle through node {bad}")));
        }

        // Prune everything the root cannot reach.
        let mut incoming_all: HashMap<NodeId, Vec<usize>> = HashMap::new();
        for (k, (e, _)) in self.edges.iter().enumerate() {
            incoming_all.entry(e.head).or_default().push(k);
        }
        let mut reachable = HashSet::from([root]);
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            for &k in incoming_all.get(&id).into_iter().flatten() {
                for &t in &self.edges[k].0.tails {
                    if reachable.insert(t) {
                        stack.push(t);
                    }
                }
            }
        }
        for nd in &nodes {
            if nd.kind == NodeKind::Phrase && reachable.contains(&nd.id) && !incoming_all.contains_key(&nd.id) {
                let line = node_line.get(&nd.id).copied().unwrap_or(0);
                return Err(format_err(line, format!("phrase node {} has no incoming hyperedge", nd.id)));
            }
        }
        let nodes: Vec<ForestNode> =
            nodes.into_iter().filter(|nd| nd.kind == NodeKind::Leaf || reachable.contains(&nd.id)).collect();
        let mut edges: Vec<Hyperedge> =
            self.edges.into_iter().map(|(e, _)| e).filter(|e| reachable.contains(&e.head)).collect();

        // Normalize probabilities per head. Heads that already sum to 1 up to
        // rounding are left alone so that written forests read back exactly.
        let mut totals: HashMap<NodeId, f64> = HashMap::new();
        for e in &edges {
            *totals.entry(e.head).or_insert(0.0) += e.prob;
        }
        for e in &mut edges {
            let total = totals[&e.head];
            if (total - 1.0).abs() > 1e-12 {
                e.prob /= total;
            }
        }

        let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, nd)| (nd.id, i)).collect();
        let mut incoming: HashMap<NodeId, Vec<usize>> = HashMap::new();
        for (k, e) in edges.iter().enumerate() {
            incoming.entry(e.head).or_default().push(k);
        }
        let mut forest = PackedForest { sentence_len: n, nodes, edges, root, index, incoming, topo: Vec::new() };
        forest.topo = forest.compute_topo();
        Ok(forest)
    }
}

impl PackedForest {
    pub fn sentence_len(&self) -> usize {
        self.sentence_len
    }

    /// Nodes sorted by id.
    pub fn nodes(&self) -> &[ForestNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Hyperedge] {
        &self.edges
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &ForestNode {
        &self.nodes[self.index[&id]]
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    /// Indices (into [`PackedForest::edges`]) of the edges deriving `id`.
    pub fn incoming(&self, id: NodeId) -> &[usize] {
        self.incoming.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn num_phrases(&self) -> usize {
        self.nodes.len() - self.sentence_len
    }

    /// Bottom-up order: leaves first, then phrase nodes such that every tail
    /// precedes its head. Ties go to the smallest (width, start, id).
    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    /// Phrase nodes in [`PackedForest::topo_order`].
    pub fn phrase_order(&self) -> &[NodeId] {
        &self.topo[self.sentence_len..]
    }

    fn compute_topo(&self) -> Vec<NodeId> {
        let key = |id: NodeId| {
            let nd = self.node(id);
            Reverse((nd.kind, nd.span.width(), nd.span.start, id))
        };
        let mut pending: HashMap<NodeId, usize> = HashMap::new();
        let mut consumers: HashMap<NodeId, Vec<usize>> = HashMap::new();
        for (k, e) in self.edges.iter().enumerate() {
            *pending.entry(e.head).or_insert(0) += e.tails.len();
            for t in &e.tails {
                consumers.entry(*t).or_default().push(k);
            }
        }
        let mut heap: BinaryHeap<_> =
            self.nodes.iter().filter(|nd| !pending.contains_key(&nd.id)).map(|nd| key(nd.id)).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse((_, _, _, id))) = heap.pop() {
            order.push(id);
            for &k in consumers.get(&id).into_iter().flatten() {
                let head = self.edges[k].head;
                let d = pending.get_mut(&head).expect("head has pending tails");
                *d -= 1;
                if *d == 0 {
                    heap.push(key(head));
                }
            }
        }
        debug_assert_eq!(order.len(), self.nodes.len());
        order
    }

    /// Number of distinct derivations of the root, by the inside-style DP
    /// `count(leaf) = 1`, `count(v) = Σ_e Π_tails count(tail)`. Saturates at
    /// `u128::MAX`.
    pub fn tree_count(&self) -> u128 {
        let mut count: HashMap<NodeId, u128> = HashMap::with_capacity(self.nodes.len());
        for &id in &self.topo {
            let c = if self.node(id).kind == NodeKind::Leaf {
                1
            } else {
                self.incoming(id).iter().fold(0u128, |acc, &k| {
                    let prod = self.edges[k].tails.iter().fold(1u128, |p, t| p.saturating_mul(count[t]));
                    acc.saturating_add(prod)
                })
            };
            count.insert(id, c);
        }
        count[&self.root]
    }

    /// Every tree in the forest. Fails when there are more than `limit`.
    pub fn enumerate_trees(&self, limit: u128) -> Result<Vec<Tree>, ForestError> {
        let count = self.tree_count();
        if count > limit {
            return Err(ForestError::Capacity { count, limit });
        }
        let mut memo: HashMap<NodeId, Vec<Tree>> = HashMap::new();
        for &id in &self.topo {
            let trees = if self.node(id).kind == NodeKind::Leaf {
                vec![Tree::Leaf(id)]
            } else {
                let mut all = Vec::new();
                for &k in self.incoming(id) {
                    let mut partial: Vec<Vec<Tree>> = vec![Vec::new()];
                    for t in &self.edges[k].tails {
                        let options = &memo[t];
                        partial = partial
                            .into_iter()
                            .flat_map(|prefix| {
                                options.iter().map(move |opt| {
                                    let mut p = prefix.clone();
                                    p.push(opt.clone());
                                    p
                                })
                            })
                            .collect();
                    }
                    let span = self.node(id).span;
                    all.extend(partial.into_iter().map(|children| Tree::Node { span, children }));
                }
                all
            };
            memo.insert(id, trees);
        }
        Ok(memo.remove(&self.root).expect("root visited"))
    }

    /// Highest-probability derivation (product of edge probabilities).
    /// Ties go to the earliest edge.
    pub fn best_tree(&self) -> Tree {
        let mut best: HashMap<NodeId, (f64, Option<usize>)> = HashMap::new();
        for &id in &self.topo {
            if self.node(id).kind == NodeKind::Leaf {
                best.insert(id, (0.0, None));
                continue;
            }
            let mut top: Option<(f64, usize)> = None;
            for &k in self.incoming(id) {
                let e = &self.edges[k];
                let score = e.prob.ln() + e.tails.iter().map(|t| best[t].0).sum::<f64>();
                if top.is_none_or(|(s, _)| score > s) {
                    top = Some((score, k));
                }
            }
            let (s, k) = top.expect("phrase nodes have incoming edges");
            best.insert(id, (s, Some(k)));
        }
        fn build(f: &PackedForest, best: &HashMap<NodeId, (f64, Option<usize>)>, id: NodeId) -> Tree {
            match best[&id].1 {
                None => Tree::Leaf(id),
                Some(k) => Tree::Node {
                    span: f.node(id).span,
                    children: f.edges[k].tails.iter().map(|&t| build(f, best, t)).collect(),
                },
            }
        }
        build(self, &best, self.root)
    }

    /// The one-derivation forest of a tree: one phrase node per internal
    /// node (ids assigned in post-order from `n`), every edge with probability 1.
    pub fn from_tree(tree: &Tree) -> Result<PackedForest, ForestError> {
        let n = tree.span().end;
        if tree.span().start != 0 {
            return Err(ForestError::Tree("tree does not start at word 0".into()));
        }
        let mut b = ForestBuilder::new(n);
        fn walk(t: &Tree, b: &mut ForestBuilder, next: &mut NodeId) -> Result<NodeId, ForestError> {
            match t {
                Tree::Leaf(i) => Ok(*i),
                Tree::Node { span, children } => {
                    let tails = children.iter().map(|c| walk(c, b, next)).collect::<Result<Vec<_>, _>>()?;
                    let id = *next;
                    *next += 1;
                    b.add_phrase(id, span.start, span.end, 0)?;
                    b.add_edge(id, tails, 1.0, 0)?;
                    Ok(id)
                }
            }
        }
        let mut next = n;
        walk(tree, &mut b, &mut next)?;
        b.finish()
    }

    /// [`PackedForest::from_tree`] over bracketed text; `expected_len`, when
    /// given, must equal the number of words.
    pub fn from_bracketed(text: &str, expected_len: Option<usize>) -> Result<PackedForest, ForestError> {
        let (tree, words) = Tree::parse_bracketed(text)?;
        if let Some(k) = expected_len {
            if k != words.len() {
                return Err(ForestError::Tree(format!("tree has {} words, expected {k}", words.len())));
            }
        }
        PackedForest::from_tree(&tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_derivation_forest() -> PackedForest {
        parse_forest(
            "sent 3\n\
             node 3 0 2\n\
             node 4 1 3\n\
             node 5 0 3\n\
             edge 3 1 0 1\n\
             edge 4 1 1 2\n\
             edge 5 0.6 3 2\n\
             edge 5 0.4 0 4\n",
        )
        .unwrap()
    }

    #[test]
    fn single_binary_tree() {
        let f = parse_forest("sent 3\nnode 3 0 2\nnode 4 0 3\nedge 3 1.0 0 1\nedge 4 1.0 3 2\n").unwrap();
        assert_eq!(f.num_phrases(), 2);
        assert_eq!(f.edges().len(), 2);
        assert_eq!(f.tree_count(), 1);
        assert_eq!(f.topo_order(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn shared_leaves_two_derivations() {
        let f = two_derivation_forest();
        assert_eq!(f.incoming(5).len(), 2);
        assert_eq!(f.tree_count(), 2);
        let probs: Vec<f64> = f.incoming(5).iter().map(|&k| f.edges()[k].prob).collect();
        assert!((probs[0] - 0.6).abs() < 1e-15 && (probs[1] - 0.4).abs() < 1e-15);
        // Each node exactly once.
        assert_eq!(f.topo_order(), &[0, 1, 2, 3, 4, 5]);
        let trees = f.enumerate_trees(10).unwrap();
        assert_eq!(trees.len(), 2);
        assert_ne!(trees[0], trees[1]);
        assert_eq!(f.best_tree().to_string(), "((w0 w1) w2)");
    }

    pub(crate) fn nested_ambiguity_forest() -> PackedForest {
        // Root (0,4) = [w0, P(1,4)] | [Q(0,3), w3]; P and Q are each ambiguous.
        parse_forest(
            "sent 4\n\
             node 4 1 3\nnode 5 2 4\nnode 6 0 2\nnode 7 1 4\nnode 8 0 3\nnode 9 0 4\n\
             edge 4 1 1 2\nedge 5 1 2 3\nedge 6 1 0 1\n\
             edge 7 0.5 4 3\nedge 7 0.5 1 5\n\
             edge 8 0.9 6 2\nedge 8 0.1 0 4\n\
             edge 9 0.7 0 7\nedge 9 0.3 8 3\n",
        )
        .unwrap()
    }

    #[test]
    fn nested_ambiguity_counts_four() {
        let f = nested_ambiguity_forest();
        assert_eq!(f.tree_count(), 4);
        let trees = f.enumerate_trees(100).unwrap();
        assert_eq!(trees.len(), 4);
        let distinct: HashSet<_> = trees.iter().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn capacity_error() {
        let f = two_derivation_forest();
        assert!(matches!(f.enumerate_trees(1), Err(ForestError::Capacity { count: 2, limit: 1 })));
    }

    #[test]
    fn from_tree_round_trips() {
        for text in ["((w0 w1) w2)", "(w0 (w1 (w2 w3)))", "(w0 w1 w2)", "w0", "((w0) w1)"] {
            let (tree, _) = Tree::parse_bracketed(text).unwrap();
            let f = PackedForest::from_tree(&tree).unwrap();
            assert_eq!(f.tree_count(), 1);
            assert!(f.edges().iter().all(|e| e.prob == 1.0));
            assert_eq!(f.enumerate_trees(1).unwrap(), vec![tree.clone()]);
            assert_eq!(f.best_tree(), tree);
            let again = parse_forest(&f.to_text()).unwrap();
            assert_eq!(again, f);
        }
        let f = PackedForest::from_bracketed("((w0 w1) w2)", Some(3)).unwrap();
        assert_eq!(f.nodes().len(), 5);
        assert_eq!(f.edges().len(), 2);
        assert!(PackedForest::from_bracketed("((w0 w1) w2)", Some(4)).is_err());
    }

    #[test]
    fn right_branching_chain() {
        let f = PackedForest::from_bracketed("(w0 (w1 (w2 w3)))", None).unwrap();
        let spans: Vec<Span> = f.phrase_order().iter().map(|&id| f.node(id).span).collect();
        assert_eq!(spans, vec![Span::new(2, 4), Span::new(1, 4), Span::new(0, 4)]);
    }
}
