//! Synthetic multimodal counting task.
//!
//! Each example is one sequence with three regions:
//!
//! ```text
//! [BOS] v1 .. v32 [SEP] [QUERY_r] [GO] a1 .. ar [SEP]
//! ```
//!
//! The visual span is 32 draws from a 16-symbol alphabet. The instruction
//! asks for the r most frequent symbols (r in 1..=4), most frequent first,
//! ties broken toward the lower symbol id. Answer tokens live in a separate
//! id range from the visual symbols, so the model has to bind the two
//! vocabularies, not just copy.

use crate::error::{Error, Result};
use crate::model::FlatBatch;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const GO: u32 = 3;
/// First visual symbol id; symbols occupy VIS_BASE..VIS_BASE+N_SYMBOLS.
pub const VIS_BASE: u32 = 8;
pub const N_SYMBOLS: u32 = 16;
/// QUERY_r token id is QUERY_BASE + r - 1.
pub const QUERY_BASE: u32 = 32;
pub const MAX_QUERY: u32 = 4;
/// Answer token for symbol s is ANS_BASE + s.
pub const ANS_BASE: u32 = 40;
pub const VOCAB: usize = 256;
pub const VISUAL_LEN: usize = 32;
/// Longest possible sequence: 1 + 32 + 3 + MAX_QUERY + 1.
pub const MAX_LEN: usize = 37 + MAX_QUERY as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Instruction,
    Response,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub modality: Vec<Modality>,
    /// r: how many symbols the instruction asks for.
    pub query: u32,
    /// The answer token ids, most frequent symbol first.
    pub answer: Vec<u32>,
}

/// Symbol indices (0..N_SYMBOLS) ordered by count descending, id ascending.
pub fn top_r_symbols(counts: &[u32], r: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..counts.len() as u32).collect();
    order.sort_by_key(|&s| (std::cmp::Reverse(counts[s as usize]), s));
    order.truncate(r);
    order
}

pub fn gen_example(rng: &mut ChaCha8Rng) -> Example {
    let r = rng.gen_range(1..=MAX_QUERY);
    let mut counts = vec![0u32; N_SYMBOLS as usize];
    let mut ids = Vec::with_capacity(MAX_LEN);
    let mut modality = Vec::with_capacity(MAX_LEN);
    ids.push(BOS);
    modality.push(Modality::Instruction);
    for _ in 0..VISUAL_LEN {
        let s = rng.gen_range(0..N_SYMBOLS);
        counts[s as usize] += 1;
        ids.push(VIS_BASE + s);
        modality.push(Modality::Visual);
    }
    ids.extend([SEP, QUERY_BASE + r - 1, GO]);
    modality.extend([Modality::Instruction; 3]);
    let answer: Vec<u32> = top_r_symbols(&counts, r as usize)
        .into_iter()
        .map(|s| ANS_BASE + s)
        .collect();
    for &a in &answer {
        ids.push(a);
        modality.push(Modality::Response);
    }
    ids.push(SEP);
    modality.push(Modality::Response);
    Example {
        ids,
        modality,
        query: r,
        answer,
    }
}

/// Disjoint train/eval sets from one seed. Duplicate sequences are redrawn;
/// the attempt budget keeps a pathological request from spinning forever.
pub fn gen_split(seed: u64, n_train: usize, n_eval: usize) -> Result<(Vec<Example>, Vec<Example>)> {
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let total = n_train + n_eval;
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(total);
    let mut all = Vec::with_capacity(total);
    let budget = 50 * total + 1000;
    for _ in 0..budget {
        if all.len() == total {
            break;
        }
        let ex = gen_example(&mut rng);
        if seen.insert(ex.ids.clone()) {
            all.push(ex);
        }
    }
    if all.len() < total {
        return Err(Error::Config(format!(
            "could only generate {} of {total} distinct examples",
            all.len()
        )));
    }
    let eval = all.split_off(n_train);
    Ok((all, eval))
}

/// A batch ready for the model: flattened ids plus per-token modality.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub batch: FlatBatch,
    pub modality: Vec<Modality>,
}

pub fn encode_batch(examples: &[&Example]) -> EncodedBatch {
    let seqs: Vec<Vec<u32>> = examples.iter().map(|e| e.ids.clone()).collect();
    let batch = FlatBatch::from_sequences(&seqs);
    let modality = examples
        .iter()
        .flat_map(|e| e.modality.iter().copied())
        .collect();
    EncodedBatch { batch, modality }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn token_ranges_do_not_collide() {
        assert!(GO < VIS_BASE);
        assert!(VIS_BASE + N_SYMBOLS <= QUERY_BASE);
        assert!(QUERY_BASE + MAX_QUERY <= ANS_BASE);
        assert!(((ANS_BASE + N_SYMBOLS) as usize) <= VOCAB);
        assert_eq!(PAD, 0);
    }

    #[test]
    fn top_r_orders_by_count_then_id() {
        let mut counts = vec![0u32; 16];
        counts[2] = 5;
        counts[0] = 3;
        counts[9] = 3;
        counts[4] = 1;
        assert_eq!(top_r_symbols(&counts, 1), vec![2]);
        assert_eq!(top_r_symbols(&counts, 3), vec![2, 0, 9]);
        assert_eq!(top_r_symbols(&counts, 4), vec![2, 0, 9, 4]);
    }

    #[test]
    fn example_layout_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let ex = gen_example(&mut rng);
            let r = ex.query as usize;
            assert_eq!(ex.ids.len(), 37 + r);
            assert_eq!(ex.ids.len(), ex.modality.len());
            assert!(ex.ids.len() <= MAX_LEN);
            assert_eq!(ex.ids[0], BOS);
            let mut counts = vec![0u32; N_SYMBOLS as usize];
            for p in 1..=VISUAL_LEN {
                let id = ex.ids[p];
                assert!((VIS_BASE..VIS_BASE + N_SYMBOLS).contains(&id));
                assert_eq!(ex.modality[p], Modality::Visual);
                counts[(id - VIS_BASE) as usize] += 1;
            }
            assert_eq!(ex.ids[33], SEP);
            assert_eq!(ex.ids[34], QUERY_BASE + ex.query - 1);
            assert_eq!(ex.ids[35], GO);
            assert_eq!(&ex.modality[33..36], [Modality::Instruction; 3]);
            let expect: Vec<u32> = top_r_symbols(&counts, r)
                .into_iter()
                .map(|s| ANS_BASE + s)
                .collect();
            assert_eq!(ex.answer, expect);
            assert_eq!(&ex.ids[36..36 + r], &expect[..]);
            assert_eq!(*ex.ids.last().unwrap(), SEP);
            assert!(ex.modality[36..].iter().all(|&m| m == Modality::Response));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            assert_eq!(gen_example(&mut a), gen_example(&mut b));
        }
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let (train, eval) = gen_split(42, 300, 60).unwrap();
        assert_eq!(train.len(), 300);
        assert_eq!(eval.len(), 60);
        let train_ids: HashSet<&Vec<u32>> = train.iter().map(|e| &e.ids).collect();
        assert_eq!(train_ids.len(), 300);
        for e in &eval {
            assert!(!train_ids.contains(&e.ids));
        }
        let (train2, eval2) = gen_split(42, 300, 60).unwrap();
        assert_eq!(train, train2);
        assert_eq!(eval, eval2);
        let (train3, _) = gen_split(43, 300, 60).unwrap();
        assert_ne!(train, train3);
    }

    #[test]
    fn encode_batch_flattens_in_order() {
        let (train, _) = gen_split(1, 3, 0).unwrap();
        let refs: Vec<&Example> = train.iter().collect();
        let enc = encode_batch(&refs);
        assert_eq!(enc.batch.n_seqs(), 3);
        assert_eq!(enc.batch.n_tokens(), enc.modality.len());
        let r = enc.batch.seq_range(1);
        assert_eq!(&enc.batch.ids[r.clone()], &train[1].ids[..]);
        assert_eq!(&enc.modality[r], &train[1].modality[..]);
    }
}
