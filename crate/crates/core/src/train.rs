//! Minibatch SGD with validation-based early stopping and checkpoints.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Bitext, Example, Vocabulary, DEFAULT_MAX_LEN, DEFAULT_MIN_FREQ};
use crate::decoder::sentence_loss;
use crate::eval::corpus_nll;
use crate::model::{Dims, Mode, ModelParams, INIT_SCALE};
use crate::numcore::{Gradients, NumError, ParamStore, Tape};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub hidden: usize,
    pub embed: usize,
    pub lr: f64,
    /// Factor applied to the learning rate after an epoch without dev
    /// improvement.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping; `None` never stops early.
    pub patience: Option<usize>,
    pub clip_norm: f64,
    /// Weights start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub min_freq: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Forest,
            hidden: 256,
            embed: 256,
            lr: 0.1,
            lr_decay: 0.5,
            batch_size: 128,
            max_epochs: 20,
            patience: Some(3),
            clip_norm: 5.0,
            init_scale: INIT_SCALE,
            min_freq: DEFAULT_MIN_FREQ,
            max_len: DEFAULT_MAX_LEN,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("init_scale must be positive, got {}", self.init_scale)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }
}

/// `θ ← θ − lr·∇`, then clears `grads`.
pub fn sgd_step(params: &mut ParamStore, grads: &mut Gradients, lr: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(NumError::NonFinite { op: "sgd_step" }.into());
    }
    params.apply_sgd(grads, lr);
    grads.clear();
    Ok(())
}

/// Loss and parameter gradients of one example.
pub fn example_gradients(params: &ModelParams, ex: &Example) -> Result<(f64, Gradients)> {
    let mut tape = Tape::with_params(&params.store);
    let loss = sentence_loss(&mut tape, params, ex.input(), &ex.tgt)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item();
    Ok((value, tape.param_grads()))
}

/// Summed loss and gradients over `batch`, reduced in input order so the
/// result does not depend on the thread count.
pub fn batch_gradients(params: &ModelParams, batch: &[&Example]) -> Result<(f64, Gradients)> {
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(&params.store);
    let chunk = rayon::current_num_threads().max(1);
    for part in batch.chunks(chunk) {
        let results: Vec<Result<(f64, Gradients)>> = part.par_iter().map(|ex| example_gradients(params, ex)).collect();
        for r in results {
            let (loss, g) = r?;
            total += loss;
            grads.merge(&g, 1.0);
        }
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sentence loss over the epoch, measured before each update.
    pub train_loss: f64,
    pub dev_perplexity: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Wall-clock time; excluded from the CSV so that reruns match byte for byte.
    pub seconds: f64,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,dev_perplexity,lr\n");
    for m in metrics {
        writeln!(out, "{},{},{},{}", m.epoch, m.train_loss, m.dev_perplexity, m.lr).unwrap();
    }
    out
}

/// Serialized model plus what is needed to use and reproduce it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: Mode,
    pub dims: Dims,
    pub config: TrainConfig,
    pub epoch: usize,
    pub dev_perplexity: f64,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &ModelParams, config: &TrainConfig, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            mode: model.mode,
            dims: model.dims,
            config: config.clone(),
            epoch: 0,
            dev_perplexity: f64::INFINITY,
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            params: model.store.clone(),
        }
    }

    /// Model parameters, checked against the stored mode and dimensions.
    pub fn model(&self) -> Result<ModelParams> {
        self.model_as(self.mode)
    }

    /// Like [`Checkpoint::model`] but for an explicitly requested mode;
    /// fails with a config error if the stored parameters do not fit it.
    pub fn model_as(&self, mode: Mode) -> Result<ModelParams> {
        if mode != self.mode {
            return Err(Error::Config(format!("checkpoint was trained in {} mode, not {mode}", self.mode)));
        }
        ModelParams::from_store(mode, self.dims, self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint file: {e}")))?;
        match probe.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {v} (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("corrupt checkpoint file: no version field".into())),
        }
        let mut ck: Checkpoint =
            serde_json::from_value(probe).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint file: {e}")))?;
        ck.params.reindex();
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_json(&text)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest dev perplexity.
    pub best: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

/// Builds vocabularies from the training split and trains.
pub fn train(train_set: &Bitext, dev_set: &Bitext, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let src_vocab = Vocabulary::build(train_set.sources(), config.min_freq)?;
    let tgt_vocab = Vocabulary::build(train_set.targets(), config.min_freq)?;
    let train_ex = train_set.numericalize(&src_vocab, &tgt_vocab);
    let dev_ex = dev_set.numericalize(&src_vocab, &tgt_vocab);
    train_examples(&train_ex, &dev_ex, &src_vocab, &tgt_vocab, config)
}

fn check_structure(mode: Mode, examples: &[Example], what: &str) -> Result<()> {
    if mode.uses_structure() && examples.iter().any(|e| e.forest.is_none() && e.tree.is_none()) {
        return Err(Error::Config(format!("{mode} mode needs a forest for every {what} sentence")));
    }
    Ok(())
}

fn diverged(err: Error, epoch: usize, batch: usize, grad_norm: f64) -> Error {
    match err {
        Error::Num(NumError::NonFinite { op }) => {
            Error::Diverged { epoch, batch, grad_norm, detail: format!("non-finite value in {op}") }
        }
        other => other,
    }
}

pub fn train_examples(
    train_ex: &[Example],
    dev_ex: &[Example],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_ex.is_empty() || dev_ex.is_empty() {
        return Err(Error::Data("training needs non-empty train and dev splits".into()));
    }
    check_structure(config.mode, train_ex, "training")?;
    check_structure(config.mode, dev_ex, "dev")?;

    let dims =
        Dims { src_vocab: src_vocab.len(), tgt_vocab: tgt_vocab.len(), embed: config.embed, hidden: config.hidden };
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ModelParams::init_uniform(config.mode, dims, config.init_scale, &mut init_rng)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);

    let mut best = Checkpoint::new(&model, config, src_vocab, tgt_vocab);
    let mut metrics = Vec::new();
    let mut lr = config.lr;
    let mut bad_epochs = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_ex.len()).collect();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_ex[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch).map_err(|e| diverged(e, epoch, b, f64::NAN))?;
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.clip_norm(config.clip_norm);
            if !norm.is_finite() || !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, grad_norm: norm, detail: format!("batch loss {loss}") });
            }
            sgd_step(&mut model.store, &mut grads, lr).map_err(|e| diverged(e, epoch, b, norm))?;
            epoch_loss += loss;
        }
        let (nll, tokens) = corpus_nll(&model, dev_ex).map_err(|e| diverged(e, epoch, 0, f64::NAN))?;
        let dev_perplexity = (nll / tokens as f64).exp();
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / train_ex.len() as f64,
            dev_perplexity,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train loss {:.4}, dev perplexity {dev_perplexity:.4}, lr {lr}",
            epoch_loss / train_ex.len() as f64
        );

        if dev_perplexity < best.dev_perplexity {
            best.params = model.store.clone();
            best.epoch = epoch;
            best.dev_perplexity = dev_perplexity;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            lr *= config.lr_decay;
            if config.patience.is_some_and(|p| bad_epochs >= p) {
                stopped_early = true;
                break;
            }
        }
    }
    if best.epoch == 0 {
        return Err(Error::Diverged {
            epoch: metrics.len(),
            batch: 0,
            grad_norm: f64::NAN,
            detail: "dev perplexity never became finite".into(),
        });
    }
    Ok(TrainOutcome { best, metrics, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LoadOptions, Split};
    use crate::numcore::Tensor;

    fn toy() -> (Bitext, Bitext) {
        let src = "a b\nb a\na a b\nb\n";
        let tgt = "x y\ny x\nx x y\ny\n";
        let forests = "sent 2\nnode 2 0 2\nedge 2 1 0 1\n\nsent 2\nnode 2 0 2\nedge 2 1 0 1\n\n\
                       sent 3\nnode 3 0 2\nnode 4 1 3\nnode 5 0 3\nedge 3 1 0 1\nedge 4 1 1 2\n\
                       edge 5 0.5 3 2\nedge 5 0.5 0 4\n\nsent 1\n";
        let (t, _) = Bitext::from_texts(Split::Train, src, tgt, Some(forests), LoadOptions::default()).unwrap();
        let (d, _) = Bitext::from_texts(Split::Dev, src, tgt, Some(forests), LoadOptions::default()).unwrap();
        (t, d)
    }

    fn small(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            hidden: 6,
            embed: 4,
            batch_size: 2,
            max_epochs: 3,
            min_freq: 1,
            patience: None,
            ..Default::default()
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut ps = ParamStore::new();
        let w = ps.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut g = Gradients::zeros_like(&ps);
        g.add(w, &[2.0], 1.0);
        sgd_step(&mut ps, &mut g.clone(), 0.0).unwrap();
        assert_eq!(ps.get(w).item(), 1.0);
        sgd_step(&mut ps, &mut g, 0.1).unwrap();
        assert!((ps.get(w).item() - 0.8).abs() < 1e-15);
        assert!(g.get(w).is_none());
        let mut bad = Gradients::zeros_like(&ps);
        bad.add(w, &[f64::NAN], 1.0);
        assert!(sgd_step(&mut ps, &mut bad, 0.1).is_err());
    }

    #[test]
    fn small_step_decreases_loss() {
        let (t, _) = toy();
        let sv = Vocabulary::build(t.sources(), 1).unwrap();
        let tv = Vocabulary::build(t.targets(), 1).unwrap();
        let ex = t.numericalize(&sv, &tv);
        let batch: Vec<&Example> = ex.iter().collect();
        let dims = Dims { src_vocab: sv.len(), tgt_vocab: tv.len(), embed: 4, hidden: 5 };
        let mut model = ModelParams::init(Mode::Forest, dims, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (before, mut g) = batch_gradients(&model, &batch).unwrap();
        sgd_step(&mut model.store, &mut g, 1e-4).unwrap();
        let (after, _) = batch_gradients(&model, &batch).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (t, d) = toy();
        let out = train(&t, &d, &TrainConfig { lr: 0.0, ..small(Mode::Tree) }).unwrap();
        let first = out.metrics[0].train_loss;
        assert!(out.metrics.iter().all(|m| m.train_loss == first));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (t, d) = toy();
        let a = train(&t, &d, &small(Mode::Forest)).unwrap();
        let b = train(&t, &d, &small(Mode::Forest)).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.best.params.iter().count(), b.best.params.iter().count());
        for ((_, _, x), (_, _, y)) in a.best.params.iter().zip(b.best.params.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn structure_is_required() {
        let (t, d) = toy();
        let (plain, _) = Bitext::from_texts(Split::Train, "a\n", "x\n", None, LoadOptions::default()).unwrap();
        assert!(matches!(train(&plain, &d, &small(Mode::Forest)), Err(Error::Config(_))));
        assert!(train(&plain, &plain, &small(Mode::Vanilla)).is_ok());
        assert!(matches!(train(&t, &d, &TrainConfig { hidden: 0, ..small(Mode::Vanilla) }), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let (t, d) = toy();
        let out = train(&t, &d, &TrainConfig { max_epochs: 1, ..small(Mode::Forest) }).unwrap();
        let json = out.best.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        let ex = t.numericalize(&back.src_vocab, &back.tgt_vocab);
        let batch: Vec<&Example> = ex.iter().collect();
        let (a, _) = batch_gradients(&out.best.model().unwrap(), &batch).unwrap();
        let (b, _) = batch_gradients(&back.model().unwrap(), &batch).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());

        assert!(matches!(back.model_as(Mode::Vanilla), Err(Error::Config(_))));
        assert!(matches!(Checkpoint::from_json(&json[..json.len() / 2]), Err(Error::Checkpoint(_))));
        let bumped = json.replacen("\"version\":1", "\"version\":99", 1);
        assert!(Checkpoint::from_json(&bumped).unwrap_err().to_string().contains("version"));
    }
}
