//! Masked-language-model batch corruption: select 15% of non-special
//! positions; of those, 80% become [MASK], 10% a random vocabulary token,
//! 10% stay unchanged. Labels carry the original id at selected positions
//! and the ignore index everywhere else.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::vocab::{MASK_ID, NUM_RESERVED};

/// Label value for positions that do not contribute to the loss.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Corrupt a batch of token sequences for MLM training. Deterministic for
/// a given rng state. Sequences made only of special tokens yield zero
/// selections, which the loss treats as a zero-loss batch.
pub fn mlm_mask_batch(
    batch: &[Vec<usize>],
    mask_prob: f64,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut inputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for seq in batch {
        let mut corrupted = seq.clone();
        let mut lab = vec![IGNORE_INDEX; seq.len()];
        for (i, &tok) in seq.iter().enumerate() {
            if tok < NUM_RESERVED {
                continue;
            }
            if rng.random::<f64>() >= mask_prob {
                continue;
            }
            lab[i] = tok;
            let roll: f64 = rng.random();
            if roll < 0.8 {
                corrupted[i] = MASK_ID;
            } else if roll < 0.9 && vocab_size > NUM_RESERVED {
                corrupted[i] = rng.random_range(NUM_RESERVED..vocab_size);
            }
            // else: token left unchanged, still predicted.
        }
        inputs.push(corrupted);
        labels.push(lab);
    }
    (inputs, labels)
}
