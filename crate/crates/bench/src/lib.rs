//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forestnmt::corpus::{Example, EOS};
use forestnmt::synth::random_forest;
use forestnmt::{Dims, Mode, ModelParams, PackedForest};

pub struct Fixture {
    pub model: ModelParams,
    pub examples: Vec<Example>,
}

/// A randomly initialized model with `count` random sentences of `len`
/// words, each with a forest packing up to 8 trees and a target of `len`
/// tokens plus EOS.
pub fn fixture(mode: Mode, hidden: usize, len: usize, count: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims { src_vocab: 200, tgt_vocab: 200, embed: hidden, hidden };
    let model = ModelParams::init(mode, dims, &mut rng).expect("valid dims");
    let examples = (0..count)
        .map(|_| {
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(4..dims.src_vocab)).collect();
            let mut tgt: Vec<usize> = (0..len).map(|_| rng.gen_range(4..dims.tgt_vocab)).collect();
            tgt.push(EOS);
            let forest: PackedForest = random_forest(len, 8, &mut rng);
            let tree = Some(forest.best_tree());
            Example { src, tgt, forest: Some(forest), tree }
        })
        .collect();
    Fixture { model, examples }
}
