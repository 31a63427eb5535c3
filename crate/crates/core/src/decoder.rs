//! Attentional decoder with input feeding.
//!
//! ```text
//! a_i = vᵀ tanh(W^ae e_i + W^ag g_{j-1})      over words, then phrases
//! α   = softmax(a)                             one softmax over both
//! c_j = Σ α_i e_i
//! g_j = tanh(W^gh g_{j-1} + W^gi E_y[y_{j-1}] + W^ga c_j + W^gu u_{j-1})
//! u_j = tanh(W^uc c_j + W^ui E_y[y_{j-1}] + g_j)
//! p(y_j | ·) = softmax(W^ou u_j + b^o)
//! ```
//!
//! The first step uses `u_0 = 0` and `y_0 = BOS`.

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::encoder::{encode, tree_lstm_combine, EncodedSource};
use crate::forest::Span;
use crate::model::{Mode, ModelParams, SourceInput};
use crate::numcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Attention weights of one decoding step, split into word and phrase parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStep {
    pub words: Vec<f64>,
    pub phrases: Vec<f64>,
}

impl AttentionStep {
    pub fn word_mass(&self) -> f64 {
        self.words.iter().sum()
    }

    pub fn phrase_mass(&self) -> f64 {
        self.phrases.iter().sum()
    }
}

/// Attention over one translated sentence, one entry per decoding step
/// (including the step that produced EOS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub mode: Mode,
    /// Spans of the attended phrases, aligned with every step's `phrases`.
    pub phrase_spans: Vec<Span>,
    pub steps: Vec<AttentionStep>,
    /// True when decoding stopped at the length cap instead of at EOS.
    pub truncated: bool,
}

/// Encoder-side attention inputs shared by every decoding step.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMemory {
    /// Attendable states as columns: `[H, N]`.
    states_t: Var,
    /// `W^ae e_i` for every state, as rows: `[N, H]`.
    keys: Var,
    num_words: usize,
    num_total: usize,
}

impl AttentionMemory {
    pub fn new(tape: &mut Tape<'_>, params: &ModelParams, enc: &EncodedSource) -> Result<Self> {
        let hs: Vec<Var> = enc.word_states.iter().chain(&enc.phrase_states).map(|s| s.h).collect();
        if hs.is_empty() {
            return Err(Error::Contract("nothing to attend over".into()));
        }
        let stacked = tape.stack_rows(&hs)?;
        let states_t = tape.transpose(stacked)?;
        let w_ae = tape.param(params.ids.decoder.w_ae);
        let w_ae_t = tape.transpose(w_ae)?;
        let keys = tape.matmul(stacked, w_ae_t)?;
        Ok(AttentionMemory { states_t, keys, num_words: enc.num_words(), num_total: hs.len() })
    }

    pub fn num_words(&self) -> usize {
        self.num_words
    }

    pub fn len(&self) -> usize {
        self.num_total
    }

    pub fn is_empty(&self) -> bool {
        self.num_total == 0
    }
}

/// Decoder recurrence state carried between steps.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub g: Var,
    pub u: Var,
    pub prev_token: usize,
}

/// Output of one decoding step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub state: DecoderState,
    /// Unnormalized scores over the target vocabulary.
    pub logits: Var,
    /// Attention weights, words first.
    pub alpha: Var,
}

/// Initial decoder state `g`: the final word state in vanilla mode,
/// otherwise the `g_tree` combination of the final word state and the
/// root phrase state.
pub fn init_state(tape: &mut Tape<'_>, params: &ModelParams, enc: &EncodedSource) -> Result<Var> {
    let last = enc.final_word_state();
    match params.mode {
        Mode::Vanilla => Ok(last.h),
        Mode::Tree | Mode::Forest => {
            let root =
                enc.root.ok_or_else(|| Error::Contract(format!("{} mode needs a root phrase state", params.mode)))?;
            let cell = params.ids.decoder.init.as_ref().expect("structured modes have an init cell");
            Ok(tree_lstm_combine(tape, cell, last, root)?.h)
        }
    }
}

/// Attention weights and context vector for decoder state `g_prev`.
pub fn attention_context(
    tape: &mut Tape<'_>,
    params: &ModelParams,
    memory: &AttentionMemory,
    g_prev: Var,
) -> Result<(Var, Var)> {
    let ids = &params.ids.decoder;
    let (w_ag, v) = (tape.param(ids.w_ag), tape.param(ids.att_v));
    let query = tape.matmul(w_ag, g_prev)?;
    let pre = tape.add_row(memory.keys, query)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(act, v)?;
    let alpha = tape.softmax(scores)?;
    let context = tape.matmul(memory.states_t, alpha)?;
    Ok((context, alpha))
}

/// First decoder state for a sentence.
pub fn start_state(tape: &mut Tape<'_>, params: &ModelParams, enc: &EncodedSource) -> Result<DecoderState> {
    let g = init_state(tape, params, enc)?;
    let u = tape.leaf(Tensor::zeros(&[params.dims.hidden]));
    Ok(DecoderState { g, u, prev_token: BOS })
}

pub fn decode_step(
    tape: &mut Tape<'_>,
    params: &ModelParams,
    memory: &AttentionMemory,
    prev: DecoderState,
) -> Result<StepOutput> {
    let ids = &params.ids.decoder;
    if prev.prev_token >= params.dims.tgt_vocab {
        return Err(Error::Contract(format!(
            "target id {} outside vocabulary of {}",
            prev.prev_token, params.dims.tgt_vocab
        )));
    }
    let (context, alpha) = attention_context(tape, params, memory, prev.g)?;
    let table = tape.param(ids.embed);
    let y = tape.lookup(table, prev.prev_token)?;
    let [w_gh, w_gi, w_ga, w_gu, w_uc, w_ui, w_ou, b_o] =
        [ids.w_gh, ids.w_gi, ids.w_ga, ids.w_gu, ids.w_uc, ids.w_ui, ids.w_ou, ids.b_o].map(|id| tape.param(id));
    let pre_g = tape.linear(&[(w_gh, prev.g), (w_gi, y), (w_ga, context), (w_gu, prev.u)], None)?;
    let g = tape.tanh(pre_g)?;
    let pre_u = tape.linear(&[(w_uc, context), (w_ui, y)], None)?;
    let pre_u = tape.add(pre_u, g)?;
    let u = tape.tanh(pre_u)?;
    let logits = tape.linear(&[(w_ou, u)], Some(b_o))?;
    Ok(StepOutput { state: DecoderState { g, u, prev_token: prev.prev_token }, logits, alpha })
}

/// Teacher-forced loss `−Σ_j log p(y_j | y_<j, x)` of an already encoded
/// source. `target` must end with EOS.
pub fn encoded_loss(tape: &mut Tape<'_>, params: &ModelParams, enc: &EncodedSource, target: &[usize]) -> Result<Var> {
    if target.last() != Some(&EOS) {
        return Err(Error::Contract("target must end with EOS".into()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= params.dims.tgt_vocab) {
        return Err(Error::Contract(format!("target id {bad} outside vocabulary of {}", params.dims.tgt_vocab)));
    }
    let memory = AttentionMemory::new(tape, params, enc)?;
    let mut state = start_state(tape, params, enc)?;
    let mut losses = Vec::with_capacity(target.len());
    for &gold in target {
        let out = decode_step(tape, params, &memory, state)?;
        losses.push(tape.cross_entropy(out.logits, gold)?);
        state = DecoderState { prev_token: gold, ..out.state };
    }
    Ok(tape.add_n(&losses)?)
}

/// Encodes `src` and returns the teacher-forced loss of `target`.
pub fn sentence_loss(tape: &mut Tape<'_>, params: &ModelParams, src: SourceInput<'_>, target: &[usize]) -> Result<Var> {
    let enc = encode(tape, params, src)?;
    encoded_loss(tape, params, &enc, target)
}

/// Default decoding length cap for an `n`-word source.
pub fn default_max_len(n: usize) -> usize {
    2 * n + 5
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy translation. Returns target ids without BOS/EOS and the
/// attention of every step taken.
pub fn greedy_decode(
    params: &ModelParams,
    src: SourceInput<'_>,
    max_len: Option<usize>,
) -> Result<(Vec<usize>, AttentionRecord)> {
    let max_len = max_len.unwrap_or_else(|| default_max_len(src.words.len()));
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut tape = Tape::with_params(&params.store);
    let enc = encode(&mut tape, params, src)?;
    let memory = AttentionMemory::new(&mut tape, params, &enc)?;
    let mut state = start_state(&mut tape, params, &enc)?;
    let mut tokens = Vec::new();
    let mut record = AttentionRecord {
        mode: params.mode,
        phrase_spans: enc.phrase_spans.clone(),
        steps: Vec::new(),
        truncated: true,
    };
    for _ in 0..max_len {
        let out = decode_step(&mut tape, params, &memory, state)?;
        let alpha = tape.value(out.alpha).data();
        record.steps.push(AttentionStep {
            words: alpha[..memory.num_words].to_vec(),
            phrases: alpha[memory.num_words..].to_vec(),
        });
        let next = argmax(tape.value(out.logits).data());
        if next == EOS {
            record.truncated = false;
            break;
        }
        tokens.push(next);
        state = DecoderState { prev_token: next, ..out.state };
    }
    Ok((tokens, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode_forest;
    use crate::forest::{parse_forest, PackedForest, Tree};
    use crate::model::Dims;
    use crate::numcore::{grad_check, GradCheckOptions, NumError};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> Dims {
        Dims { src_vocab: 8, tgt_vocab: 6, embed: 3, hidden: 4 }
    }

    fn model(mode: Mode, seed: u64, scale: f64) -> ModelParams {
        ModelParams::init_uniform(mode, dims(), scale, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn forest() -> PackedForest {
        parse_forest(
            "sent 3\nnode 3 0 2\nnode 4 1 3\nnode 5 0 3\nedge 3 1 0 1\nedge 4 1 1 2\nedge 5 0.6 3 2\nedge 5 0.4 0 4\n",
        )
        .unwrap()
    }

    fn to_num(e: Error) -> NumError {
        match e {
            Error::Num(n) => n,
            other => NumError::Contract(other.to_string()),
        }
    }

    #[test]
    fn vanilla_init_is_last_word_state() {
        let p = model(Mode::Vanilla, 1, 0.5);
        let mut tape = Tape::with_params(&p.store);
        let enc = encode(&mut tape, &p, SourceInput::words(&[4, 5, 6])).unwrap();
        let g = init_state(&mut tape, &p, &enc).unwrap();
        assert_eq!(g, enc.final_word_state().h);
    }

    #[test]
    fn zero_init_cell_closed_form() {
        let mut p = model(Mode::Forest, 2, 0.5);
        let init = p.ids.decoder.init.clone().unwrap();
        for id in init.u_left.iter().chain(&init.u_right).chain(&init.b) {
            p.store.get_mut(*id).fill(0.0);
        }
        let f = forest();
        let mut tape = Tape::with_params(&p.store);
        let enc = encode_forest(&mut tape, &p, &[1, 2, 3], &f).unwrap();
        let g = init_state(&mut tape, &p, &enc).unwrap();
        let cn = tape.value(enc.final_word_state().c).data().to_vec();
        let cr = tape.value(enc.root.unwrap().c).data().to_vec();
        for k in 0..4 {
            let expect = 0.5 * (0.5 * (cn[k] + cr[k])).tanh();
            assert!((tape.value(g).data()[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_attention_vector_gives_uniform_weights() {
        for (mode, total) in [(Mode::Vanilla, 3), (Mode::Forest, 6)] {
            let mut p = model(mode, 3, 0.5);
            p.store.get_mut(p.ids.decoder.att_v).fill(0.0);
            let f = forest();
            let mut tape = Tape::with_params(&p.store);
            let enc = encode(&mut tape, &p, SourceInput::with_forest(&[1, 2, 3], &f)).unwrap();
            let memory = AttentionMemory::new(&mut tape, &p, &enc).unwrap();
            let g = init_state(&mut tape, &p, &enc).unwrap();
            let (_, alpha) = attention_context(&mut tape, &p, &memory, g).unwrap();
            assert_eq!(tape.value(alpha).numel(), total);
            for &a in tape.value(alpha).data() {
                assert!((a - 1.0 / total as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_word_attention_is_one() {
        let p = model(Mode::Vanilla, 4, 0.5);
        let mut tape = Tape::with_params(&p.store);
        let enc = encode(&mut tape, &p, SourceInput::words(&[2])).unwrap();
        let memory = AttentionMemory::new(&mut tape, &p, &enc).unwrap();
        let (c, alpha) = attention_context(&mut tape, &p, &memory, enc.word_states[0].h).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0]);
        assert_eq!(tape.value(c).data(), tape.value(enc.word_states[0].h).data());
    }

    #[test]
    fn context_matches_straight_line_oracle() {
        let p = model(Mode::Forest, 5, 0.9);
        let f = forest();
        let mut tape = Tape::with_params(&p.store);
        let enc = encode(&mut tape, &p, SourceInput::with_forest(&[1, 2, 3], &f)).unwrap();
        let memory = AttentionMemory::new(&mut tape, &p, &enc).unwrap();
        let g = init_state(&mut tape, &p, &enc).unwrap();
        let (c, _) = attention_context(&mut tape, &p, &memory, g).unwrap();

        let store = &p.store;
        let ids = &p.ids.decoder;
        let mv = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            let (r, cols) = w.rows_cols();
            (0..r).map(|i| (0..cols).map(|j| w.get2(i, j) * x[j]).sum()).collect()
        };
        let gv = tape.value(g).data().to_vec();
        let q = mv(store.get(ids.w_ag), &gv);
        let states: Vec<Vec<f64>> =
            enc.word_states.iter().chain(&enc.phrase_states).map(|s| tape.value(s.h).data().to_vec()).collect();
        let scores: Vec<f64> = states
            .iter()
            .map(|e| {
                let k = mv(store.get(ids.w_ae), e);
                (0..4).map(|i| store.get(ids.att_v).data()[i] * (k[i] + q[i]).tanh()).sum()
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for i in 0..4 {
            let expect: f64 = states.iter().zip(&scores).map(|(e, s)| s.exp() / z * e[i]).sum();
            assert!((tape.value(c).data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn output_bias_only_model() {
        let mut p = model(Mode::Tree, 6, 0.5);
        p.zero_all();
        let bias = vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.4];
        p.set("dec.b_o", Tensor::vector(bias.clone())).unwrap();
        let z: f64 = bias.iter().map(|b| b.exp()).sum();
        let (t, _) = Tree::parse_bracketed("((a b) c)").unwrap();
        let mut tape = Tape::with_params(&p.store);
        let loss = sentence_loss(&mut tape, &p, SourceInput::with_tree(&[1, 2, 3], &t), &[4, 2]).unwrap();
        let expect = -(bias[4].exp() / z).ln() - (bias[2].exp() / z).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);

        let (tokens, record) = greedy_decode(&p, SourceInput::with_tree(&[1, 2, 3], &t), None).unwrap();
        assert!(tokens.is_empty());
        assert_eq!(record.steps.len(), 1);
        assert!(!record.truncated);
    }

    #[test]
    fn uniform_model_eos_loss_is_log_vocab() {
        let mut p = model(Mode::Vanilla, 7, 0.5);
        p.zero_all();
        let mut tape = Tape::with_params(&p.store);
        let loss = sentence_loss(&mut tape, &p, SourceInput::words(&[1, 2]), &[EOS]).unwrap();
        assert!((tape.value(loss).item() - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_depends_on_derivation_probabilities() {
        let p = model(Mode::Forest, 8, 0.5);
        let other = parse_forest(
            "sent 3\nnode 3 0 2\nnode 4 1 3\nnode 5 0 3\nedge 3 1 0 1\nedge 4 1 1 2\nedge 5 0.1 3 2\nedge 5 0.9 0 4\n",
        )
        .unwrap();
        let loss_of = |f: &PackedForest| {
            let mut tape = Tape::with_params(&p.store);
            let l = sentence_loss(&mut tape, &p, SourceInput::with_forest(&[1, 2, 3], f), &[4, 5, 2]).unwrap();
            tape.value(l).item()
        };
        assert_ne!(loss_of(&forest()), loss_of(&other));
    }

    #[test]
    fn target_contract() {
        let p = model(Mode::Vanilla, 9, 0.5);
        let mut tape = Tape::with_params(&p.store);
        assert!(matches!(sentence_loss(&mut tape, &p, SourceInput::words(&[1]), &[9, 2]), Err(Error::Contract(_))));
        assert!(matches!(sentence_loss(&mut tape, &p, SourceInput::words(&[1]), &[4]), Err(Error::Contract(_))));
    }

    #[test]
    fn full_model_gradients() {
        let f = forest();
        for mode in Mode::ALL {
            let mut p = model(mode, 10, 0.5);
            let pm = p.clone();
            let report = grad_check(
                &mut p.store,
                |tape| {
                    let enc = encode(tape, &pm, SourceInput::with_forest(&[1, 2, 3], &f)).map_err(to_num)?;
                    encoded_loss(tape, &pm, &enc, &[4, 3, 2]).map_err(to_num)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(1e-4), "{mode}: {report:?}");
        }
    }

    #[test]
    fn greedy_records_normalized_attention() {
        let p = model(Mode::Forest, 11, 1.0);
        let f = forest();
        let src = SourceInput::with_forest(&[1, 2, 3], &f);
        let (a, ra) = greedy_decode(&p, src, None).unwrap();
        let (b, rb) = greedy_decode(&p, src, None).unwrap();
        assert_eq!((a.clone(), &ra), (b, &rb));
        assert!(ra.steps.len() <= default_max_len(3));
        assert_eq!(ra.steps.len(), a.len() + usize::from(!ra.truncated));
        for s in &ra.steps {
            assert_eq!((s.words.len(), s.phrases.len()), (3, 3));
            assert!((s.word_mass() + s.phrase_mass() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
