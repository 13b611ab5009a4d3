use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Split, Triple, TripleStore};
use crate::error::{Error, Result};

/// Shuffles `triples` with `seed` and cuts them into batches of `batch_size`;
/// the last batch may be shorter.
pub fn batches(triples: &[Triple], batch_size: usize, seed: u64) -> Result<Vec<Vec<Triple>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2 for in-batch negatives, got {batch_size}"
        )));
    }
    let mut order = triples.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[Triple]>::to_vec).collect())
}

pub fn batch_iter(
    store: &TripleStore,
    split: Split,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Vec<Triple>>> {
    batches(store.split(split), batch_size, shuffle_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triples(n: usize) -> Vec<Triple> {
        (0..n).map(|i| Triple::new(i, 0, i + 1)).collect()
    }

    #[test]
    fn sizes_with_short_tail() {
        let b = batches(&triples(10), 4, 1).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn every_triple_once() {
        let ts = triples(37);
        let mut seen: Vec<Triple> = batches(&ts, 5, 9).unwrap().concat();
        seen.sort();
        assert_eq!(seen, ts);
    }

    #[test]
    fn seed_controls_order() {
        let ts = triples(100);
        assert_eq!(batches(&ts, 8, 3).unwrap(), batches(&ts, 8, 3).unwrap());
        // 100! orderings: two seeds colliding is vanishingly unlikely.
        assert_ne!(batches(&ts, 8, 3).unwrap(), batches(&ts, 8, 4).unwrap());
    }

    #[test]
    fn batch_of_one_rejected() {
        assert!(matches!(batches(&triples(3), 1, 0), Err(Error::Config(_))));
    }
}
