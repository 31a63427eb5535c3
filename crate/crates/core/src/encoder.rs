//! Source encoders.
//!
//! Words are read left to right by an LSTM. Phrase embeddings are built on
//! top of the word states: a binary tree-LSTM cell composes children, and
//! in forest mode every alternative derivation of a phrase is composed
//! separately and then fused by the forest-LSTM cell into a single unified
//! `(h, c)` that higher phrases reuse.

use std::collections::HashMap;

use crate::forest::{NodeId, NodeKind, PackedForest, Span, Tree};
use crate::model::{ForestCellIds, LstmIds, Mode, ModelParams, SourceInput, TreeCellIds};
use crate::numcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Tolerance on `Σ p = 1` for the derivations fused into one phrase.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Hidden state and memory cell of one LSTM unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct State {
    pub h: Var,
    pub c: Var,
}

/// Everything the decoder attends over for one source sentence.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    /// One state per word.
    pub word_states: Vec<State>,
    /// One unified state per phrase node, in bottom-up order. Empty in
    /// vanilla mode.
    pub phrase_states: Vec<State>,
    /// Spans of `phrase_states`, index-aligned.
    pub phrase_spans: Vec<Span>,
    /// State of the node covering the whole sentence (a word state when the
    /// sentence has a single word and no phrase above it).
    pub root: Option<State>,
}

impl EncodedSource {
    pub fn num_words(&self) -> usize {
        self.word_states.len()
    }

    pub fn num_attendable(&self) -> usize {
        self.word_states.len() + self.phrase_states.len()
    }

    pub fn final_word_state(&self) -> State {
        *self.word_states.last().expect("non-empty sentence")
    }
}

fn zero_state(tape: &mut Tape<'_>, hidden: usize) -> State {
    let h = tape.leaf(Tensor::zeros(&[hidden]));
    State { h, c: h }
}

/// Runs the one-directional LSTM over `words`, starting from `h = c = 0`.
pub fn encode_sequence(tape: &mut Tape<'_>, lstm: &LstmIds, hidden: usize, words: &[usize]) -> Result<Vec<State>> {
    if words.is_empty() {
        return Err(Error::Contract("cannot encode an empty sentence".into()));
    }
    let table = tape.param(lstm.embed);
    let w = lstm.w.map(|id| tape.param(id));
    let u = lstm.u.map(|id| tape.param(id));
    let b = lstm.b.map(|id| tape.param(id));
    let mut prev = zero_state(tape, hidden);
    let mut states = Vec::with_capacity(words.len());
    for &word in words {
        let x = tape.lookup(table, word)?;
        let mut pre = [prev.h; 4];
        for g in 0..4 {
            pre[g] = tape.linear(&[(w[g], x), (u[g], prev.h)], Some(b[g]))?;
        }
        let i = tape.sigmoid(pre[0])?;
        let f = tape.sigmoid(pre[1])?;
        let o = tape.sigmoid(pre[2])?;
        let cand = tape.tanh(pre[3])?;
        let keep = tape.mul(f, prev.c)?;
        let write = tape.mul(i, cand)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        prev = State { h, c };
        states.push(prev);
    }
    Ok(states)
}

/// Binary tree-LSTM composition of a left and a right child:
///
/// ```text
/// g    = σ/tanh(U_l^g h_l + U_r^g h_r + b^g)   for g in i, f_l, f_r, o, c̃
/// c    = i ⊙ c̃ + f_l ⊙ c_l + f_r ⊙ c_r
/// h    = o ⊙ tanh(c)
/// ```
pub fn tree_lstm_combine(tape: &mut Tape<'_>, cell: &TreeCellIds, left: State, right: State) -> Result<State> {
    let gate = |tape: &mut Tape<'_>, g: usize| {
        let (ul, ur, b) = (tape.param(cell.u_left[g]), tape.param(cell.u_right[g]), tape.param(cell.b[g]));
        tape.linear(&[(ul, left.h), (ur, right.h)], Some(b))
    };
    let pre: Vec<Var> = (0..5).map(|g| gate(tape, g)).collect::<Result<_, _>>()?;
    let i = tape.sigmoid(pre[0])?;
    let fl = tape.sigmoid(pre[1])?;
    let fr = tape.sigmoid(pre[2])?;
    let o = tape.sigmoid(pre[3])?;
    let cand = tape.tanh(pre[4])?;
    let write = tape.mul(i, cand)?;
    let keep_l = tape.mul(fl, left.c)?;
    let keep_r = tape.mul(fr, right.c)?;
    let c = tape.add_n(&[write, keep_l, keep_r])?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(State { h, c })
}

/// Embedding of one derivation (hyperedge) of a phrase from its tails'
/// unified states. Unary edges combine with a zero right child; edges with
/// more than two tails are folded left to right.
pub fn derive_edge_embedding(tape: &mut Tape<'_>, cell: &TreeCellIds, tails: &[State], hidden: usize) -> Result<State> {
    match tails {
        [] => Err(Error::Contract("hyperedge without tails".into())),
        [only] => {
            let zero = zero_state(tape, hidden);
            tree_lstm_combine(tape, cell, *only, zero)
        }
        [first, rest @ ..] => {
            let mut acc = *first;
            for t in rest {
                acc = tree_lstm_combine(tape, cell, acc, *t)?;
            }
            Ok(acc)
        }
    }
}

/// Forest-LSTM: fuses the `N` derivation embeddings of one phrase, with
/// their probabilities `p^l`, into a single state.
///
/// ```text
/// γ^l = tanh(U^γ Σ_{l'≠l} h^{l'} + W^γ h^l + v^γ p^l + b^γ)
/// x^l = [h^l; γ^l],  X = Σ_l x^l
/// i   = σ(U^i X + b^i)     o = σ(U^o X + b^o)     c̃ = tanh(U^c X + b^c)
/// f^l = σ(U^f (X − x^l) + W^f x^l + b^f)
/// c   = i ⊙ c̃ + Σ_l f^l ⊙ c^l
/// h   = o ⊙ tanh(c)
/// ```
pub fn forest_lstm_fuse(tape: &mut Tape<'_>, cell: &ForestCellIds, children: &[(State, f64)]) -> Result<State> {
    if children.is_empty() {
        return Err(Error::Contract("forest fusion needs at least one derivation".into()));
    }
    let total: f64 = children.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::Contract(format!("derivation probabilities sum to {total}, not 1")));
    }
    let [u_gamma, w_gamma, v_gamma, b_gamma, u_i, b_i, u_f, w_f, b_f, u_o, b_o, u_c, b_c] = [
        cell.u_gamma,
        cell.w_gamma,
        cell.v_gamma,
        cell.b_gamma,
        cell.u_i,
        cell.b_i,
        cell.u_f,
        cell.w_f,
        cell.b_f,
        cell.u_o,
        cell.b_o,
        cell.u_c,
        cell.b_c,
    ]
    .map(|id| tape.param(id));

    let hs: Vec<Var> = children.iter().map(|(s, _)| s.h).collect();
    let sum_h = tape.add_n(&hs)?;
    let mut xs = Vec::with_capacity(children.len());
    for &(state, p) in children {
        let others = tape.sub(sum_h, state.h)?;
        let pre = tape.linear(&[(u_gamma, others), (w_gamma, state.h)], Some(b_gamma))?;
        let prob_term = tape.scale(v_gamma, p)?;
        let pre = tape.add(pre, prob_term)?;
        let gamma = tape.tanh(pre)?;
        xs.push(tape.concat(&[state.h, gamma])?);
    }
    let sum_x = tape.add_n(&xs)?;

    let pre_i = tape.linear(&[(u_i, sum_x)], Some(b_i))?;
    let i = tape.sigmoid(pre_i)?;
    let pre_o = tape.linear(&[(u_o, sum_x)], Some(b_o))?;
    let o = tape.sigmoid(pre_o)?;
    let pre_c = tape.linear(&[(u_c, sum_x)], Some(b_c))?;
    let cand = tape.tanh(pre_c)?;

    let mut cell_terms = Vec::with_capacity(children.len() + 1);
    cell_terms.push(tape.mul(i, cand)?);
    for (&(state, _), &x) in children.iter().zip(&xs) {
        let others = tape.sub(sum_x, x)?;
        let pre_f = tape.linear(&[(u_f, others), (w_f, x)], Some(b_f))?;
        let f = tape.sigmoid(pre_f)?;
        cell_terms.push(tape.mul(f, state.c)?);
    }
    let c = tape.add_n(&cell_terms)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(State { h, c })
}

fn check_words(params: &ModelParams, words: &[usize]) -> Result<()> {
    if let Some(&bad) = words.iter().find(|&&w| w >= params.dims.src_vocab) {
        return Err(Error::Contract(format!("source id {bad} outside vocabulary of {}", params.dims.src_vocab)));
    }
    Ok(())
}

/// Word states plus one unified state per forest phrase node.
pub fn encode_forest(
    tape: &mut Tape<'_>,
    params: &ModelParams,
    words: &[usize],
    forest: &PackedForest,
) -> Result<EncodedSource> {
    let (tree_cell, forest_cell) = match (&params.ids.tree, &params.ids.forest) {
        (Some(t), Some(f)) => (t, f),
        _ => return Err(Error::Config("forest encoding needs forest-mode parameters".into())),
    };
    if forest.sentence_len() != words.len() {
        return Err(Error::Contract(format!(
            "forest covers {} words but the sentence has {}",
            forest.sentence_len(),
            words.len()
        )));
    }
    check_words(params, words)?;
    let hidden = params.dims.hidden;
    let word_states = encode_sequence(tape, &params.ids.lstm, hidden, words)?;

    let mut unified: HashMap<NodeId, State> = HashMap::with_capacity(forest.nodes().len());
    for (i, s) in word_states.iter().enumerate() {
        unified.insert(i, *s);
    }
    let mut phrase_states = Vec::with_capacity(forest.num_phrases());
    let mut phrase_spans = Vec::with_capacity(forest.num_phrases());
    for &id in forest.phrase_order() {
        debug_assert_eq!(forest.node(id).kind, NodeKind::Phrase);
        let mut derivations = Vec::with_capacity(forest.incoming(id).len());
        for &k in forest.incoming(id) {
            let edge = &forest.edges()[k];
            let tails: Vec<State> = edge.tails.iter().map(|t| unified[t]).collect();
            let s = derive_edge_embedding(tape, tree_cell, &tails, hidden)?;
            derivations.push((s, edge.prob));
        }
        let fused = forest_lstm_fuse(tape, forest_cell, &derivations)?;
        unified.insert(id, fused);
        phrase_states.push(fused);
        phrase_spans.push(forest.node(id).span);
    }
    let root = unified.get(&forest.root()).copied();
    Ok(EncodedSource { word_states, phrase_states, phrase_spans, root })
}

/// Baseline tree encoding: phrase states from binary tree-LSTM composition
/// only, ordered by (width, start).
pub fn encode_tree(tape: &mut Tape<'_>, params: &ModelParams, words: &[usize], tree: &Tree) -> Result<EncodedSource> {
    let cell =
        params.ids.tree.as_ref().ok_or_else(|| Error::Config("tree encoding needs tree-mode parameters".into()))?;
    if !tree.is_binary() {
        return Err(Error::Contract("tree encoder needs a binary tree".into()));
    }
    if tree.span() != Span::new(0, words.len()) {
        return Err(Error::Contract(format!(
            "tree spans {:?} but the sentence has {} words",
            tree.span(),
            words.len()
        )));
    }
    check_words(params, words)?;
    let word_states = encode_sequence(tape, &params.ids.lstm, params.dims.hidden, words)?;

    fn walk(
        tape: &mut Tape<'_>,
        cell: &TreeCellIds,
        t: &Tree,
        words: &[State],
        out: &mut Vec<(Span, State)>,
    ) -> Result<State> {
        match t {
            Tree::Leaf(i) => Ok(words[*i]),
            Tree::Node { span, children } => {
                let left = walk(tape, cell, &children[0], words, out)?;
                let right = walk(tape, cell, &children[1], words, out)?;
                let s = tree_lstm_combine(tape, cell, left, right)?;
                out.push((*span, s));
                Ok(s)
            }
        }
    }
    let mut phrases = Vec::with_capacity(words.len().saturating_sub(1));
    let root = walk(tape, cell, tree, &word_states, &mut phrases)?;
    phrases.sort_by_key(|(span, _)| (span.width(), span.start));
    let (phrase_spans, phrase_states) = phrases.into_iter().unzip();
    Ok(EncodedSource { word_states, phrase_states, phrase_spans, root: Some(root) })
}

/// Encodes a source sentence the way `params.mode` requires.
pub fn encode(tape: &mut Tape<'_>, params: &ModelParams, src: SourceInput<'_>) -> Result<EncodedSource> {
    match params.mode {
        Mode::Vanilla => {
            check_words(params, src.words)?;
            let word_states = encode_sequence(tape, &params.ids.lstm, params.dims.hidden, src.words)?;
            Ok(EncodedSource { word_states, phrase_states: Vec::new(), phrase_spans: Vec::new(), root: None })
        }
        Mode::Tree => match (src.tree, src.forest) {
            (Some(t), _) => encode_tree(tape, params, src.words, t),
            (None, Some(f)) => encode_tree(tape, params, src.words, &f.best_tree()),
            (None, None) => Err(Error::Config("tree mode needs a tree or a forest per sentence".into())),
        },
        Mode::Forest => {
            let f = src.forest.ok_or_else(|| Error::Config("forest mode needs a forest per sentence".into()))?;
            encode_forest(tape, params, src.words, f)
        }
    }
}
