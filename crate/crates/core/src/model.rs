//! Parameter layout of the three model variants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::forest::{PackedForest, Tree};
use crate::numcore::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Initialization range for every weight: uniform in `[-INIT_SCALE, INIT_SCALE]`.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Attention over words only.
    Vanilla,
    /// Words plus the phrases of one binary tree.
    Tree,
    /// Words plus every phrase of a packed forest.
    Forest,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Vanilla, Mode::Tree, Mode::Forest];

    pub fn uses_structure(self) -> bool {
        self != Mode::Vanilla
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::Tree => "tree",
            Mode::Forest => "forest",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "tree" => Ok(Mode::Tree),
            "forest" => Ok(Mode::Forest),
            other => Err(Error::Config(format!("unknown mode '{other}' (vanilla | tree | forest)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Word embedding size (source and target).
    pub embed: usize,
    /// Hidden size of every recurrent cell and of the attention layer.
    pub hidden: usize,
}

/// Sequential LSTM; gate order i, f, o, c̃.
#[derive(Debug, Clone)]
pub struct LstmIds {
    pub embed: ParamId,
    pub w: [ParamId; 4],
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
}

/// Binary tree-LSTM cell; gate order i, f_l, f_r, o, c̃.
#[derive(Debug, Clone)]
pub struct TreeCellIds {
    pub u_left: [ParamId; 5],
    pub u_right: [ParamId; 5],
    pub b: [ParamId; 5],
}

/// Forest-LSTM cell that fuses alternative derivations of one phrase.
#[derive(Debug, Clone)]
pub struct ForestCellIds {
    pub u_gamma: ParamId,
    pub w_gamma: ParamId,
    pub v_gamma: ParamId,
    pub b_gamma: ParamId,
    pub u_i: ParamId,
    pub b_i: ParamId,
    pub u_f: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub u_o: ParamId,
    pub b_o: ParamId,
    pub u_c: ParamId,
    pub b_c: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderIds {
    pub embed: ParamId,
    pub w_gh: ParamId,
    pub w_gi: ParamId,
    pub w_ga: ParamId,
    pub w_gu: ParamId,
    pub w_uc: ParamId,
    pub w_ui: ParamId,
    pub w_ou: ParamId,
    pub b_o: ParamId,
    pub att_v: ParamId,
    pub w_ae: ParamId,
    pub w_ag: ParamId,
    /// Combiner of the final word state and the root phrase state
    /// (tree and forest modes only).
    pub init: Option<TreeCellIds>,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub lstm: LstmIds,
    pub tree: Option<TreeCellIds>,
    pub forest: Option<ForestCellIds>,
    pub decoder: DecoderIds,
}

const LSTM_GATES: [&str; 4] = ["i", "f", "o", "c"];
const TREE_GATES: [&str; 5] = ["i", "fl", "fr", "o", "c"];

type Getter<'a> = dyn FnMut(&str, &[usize]) -> Result<ParamId> + 'a;

fn tree_cell(prefix: &str, h: usize, get: &mut Getter<'_>) -> Result<TreeCellIds> {
    let mut ids = |kind: &str, shape: &[usize]| -> Result<[ParamId; 5]> {
        let mut out = Vec::with_capacity(5);
        for g in TREE_GATES {
            out.push(get(&format!("{prefix}.{kind}.{g}"), shape)?);
        }
        Ok(out.try_into().expect("five gates"))
    };
    Ok(TreeCellIds { u_left: ids("U_l", &[h, h])?, u_right: ids("U_r", &[h, h])?, b: ids("b", &[h])? })
}

fn layout(mode: Mode, d: Dims, get: &mut Getter<'_>) -> Result<ModelIds> {
    let (e, h) = (d.embed, d.hidden);
    let embed = get("enc.embed", &[d.src_vocab, e])?;
    let mut gates = |kind: &str, shape: &[usize]| -> Result<[ParamId; 4]> {
        let mut out = Vec::with_capacity(4);
        for g in LSTM_GATES {
            out.push(get(&format!("enc.lstm.{kind}.{g}"), shape)?);
        }
        Ok(out.try_into().expect("four gates"))
    };
    let lstm = LstmIds { embed, w: gates("W", &[h, e])?, u: gates("U", &[h, h])?, b: gates("b", &[h])? };

    let tree = if mode.uses_structure() { Some(tree_cell("enc.tree", h, get)?) } else { None };
    let forest = if mode == Mode::Forest {
        Some(ForestCellIds {
            u_gamma: get("enc.forest.U_gamma", &[h, h])?,
            w_gamma: get("enc.forest.W_gamma", &[h, h])?,
            v_gamma: get("enc.forest.v_gamma", &[h])?,
            b_gamma: get("enc.forest.b_gamma", &[h])?,
            u_i: get("enc.forest.U_i", &[h, 2 * h])?,
            b_i: get("enc.forest.b_i", &[h])?,
            u_f: get("enc.forest.U_f", &[h, 2 * h])?,
            w_f: get("enc.forest.W_f", &[h, 2 * h])?,
            b_f: get("enc.forest.b_f", &[h])?,
            u_o: get("enc.forest.U_o", &[h, 2 * h])?,
            b_o: get("enc.forest.b_o", &[h])?,
            u_c: get("enc.forest.U_c", &[h, 2 * h])?,
            b_c: get("enc.forest.b_c", &[h])?,
        })
    } else {
        None
    };

    let decoder = DecoderIds {
        embed: get("dec.embed", &[d.tgt_vocab, e])?,
        w_gh: get("dec.W_gh", &[h, h])?,
        w_gi: get("dec.W_gi", &[h, e])?,
        w_ga: get("dec.W_ga", &[h, h])?,
        w_gu: get("dec.W_gu", &[h, h])?,
        w_uc: get("dec.W_uc", &[h, h])?,
        w_ui: get("dec.W_ui", &[h, e])?,
        w_ou: get("dec.W_ou", &[d.tgt_vocab, h])?,
        b_o: get("dec.b_o", &[d.tgt_vocab])?,
        att_v: get("dec.att.v", &[h])?,
        w_ae: get("dec.att.W_ae", &[h, h])?,
        w_ag: get("dec.att.W_ag", &[h, h])?,
        init: if mode.uses_structure() { Some(tree_cell("dec.init", h, get)?) } else { None },
    };
    Ok(ModelIds { lstm, tree, forest, decoder })
}

/// All trainable weights of one model, addressable by name.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub mode: Mode,
    pub dims: Dims,
    pub store: ParamStore,
    pub ids: ModelIds,
}

impl ModelParams {
    /// Fresh parameters, uniform in `[-INIT_SCALE, INIT_SCALE]`.
    pub fn init<R: Rng + ?Sized>(mode: Mode, dims: Dims, rng: &mut R) -> Result<Self> {
        Self::init_uniform(mode, dims, INIT_SCALE, rng)
    }

    pub fn init_uniform<R: Rng + ?Sized>(mode: Mode, dims: Dims, scale: f64, rng: &mut R) -> Result<Self> {
        if dims.embed == 0 || dims.hidden == 0 || dims.src_vocab == 0 || dims.tgt_vocab == 0 {
            return Err(Error::Config(format!("all dimensions must be positive: {dims:?}")));
        }
        let mut store = ParamStore::new();
        let ids = layout(mode, dims, &mut |name, shape| Ok(store.insert_uniform(name, shape, scale, rng)?))?;
        Ok(ModelParams { mode, dims, store, ids })
    }

    /// Attaches a stored parameter set, checking every expected name and shape.
    pub fn from_store(mode: Mode, dims: Dims, store: ParamStore) -> Result<Self> {
        let ids = layout(mode, dims, &mut |name, shape| {
            let id =
                store.id(name).ok_or_else(|| Error::Config(format!("parameter {name} missing for {mode} mode")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        })?;
        let expected = store.len();
        let mut used = 0;
        let _ = layout(mode, dims, &mut |_, _| {
            used += 1;
            Ok(ParamId(0))
        });
        if used != expected {
            return Err(Error::Config(format!("checkpoint holds {expected} parameters but {mode} mode uses {used}")));
        }
        Ok(ModelParams { mode, dims, store, ids })
    }

    pub fn zero_all(&mut self) {
        self.store.zero_all();
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self.store.id(name).ok_or_else(|| Error::Config(format!("no parameter {name}")))?;
        if self.store.get(id).shape() != t.shape() {
            return Err(Error::Config(format!("shape mismatch setting {name}")));
        }
        *self.store.get_mut(id) = t;
        Ok(())
    }
}

/// Source-side input for one sentence: word ids plus whatever syntactic
/// structure the mode needs.
#[derive(Debug, Clone, Copy)]
pub struct SourceInput<'a> {
    pub words: &'a [usize],
    pub forest: Option<&'a PackedForest>,
    /// Tree-mode structure; when absent the forest's best derivation is used.
    pub tree: Option<&'a Tree>,
}

impl<'a> SourceInput<'a> {
    pub fn words(words: &'a [usize]) -> Self {
        SourceInput { words, forest: None, tree: None }
    }

    pub fn with_forest(words: &'a [usize], forest: &'a PackedForest) -> Self {
        SourceInput { words, forest: Some(forest), tree: None }
    }

    pub fn with_tree(words: &'a [usize], tree: &'a Tree) -> Self {
        SourceInput { words, forest: None, tree: Some(tree) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> Dims {
        Dims { src_vocab: 7, tgt_vocab: 6, embed: 3, hidden: 4 }
    }

    #[test]
    fn modes_register_their_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = ModelParams::init(Mode::Vanilla, dims(), &mut rng).unwrap();
        let t = ModelParams::init(Mode::Tree, dims(), &mut rng).unwrap();
        let f = ModelParams::init(Mode::Forest, dims(), &mut rng).unwrap();
        assert!(v.ids.tree.is_none() && v.ids.decoder.init.is_none());
        assert!(t.ids.tree.is_some() && t.ids.forest.is_none());
        assert!(f.ids.forest.is_some());
        assert!(v.store.len() < t.store.len() && t.store.len() < f.store.len());
        assert!(f.store.iter().all(|(_, _, t)| t.data().iter().all(|x| x.abs() <= INIT_SCALE)));
    }

    #[test]
    fn from_store_rejects_other_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = ModelParams::init(Mode::Vanilla, dims(), &mut rng).unwrap();
        assert!(matches!(ModelParams::from_store(Mode::Forest, dims(), v.store.clone()), Err(Error::Config(_))));
        let f = ModelParams::init(Mode::Forest, dims(), &mut rng).unwrap();
        assert!(matches!(ModelParams::from_store(Mode::Vanilla, dims(), f.store.clone()), Err(Error::Config(_))));
        assert!(ModelParams::from_store(Mode::Forest, dims(), f.store).is_ok());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("forest".parse::<Mode>().unwrap(), Mode::Forest);
        assert!("trees".parse::<Mode>().is_err());
    }
}
