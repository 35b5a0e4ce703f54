//! Seeded shuffling and batching of training examples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, EOS_ID, PAD_ID};
use super::TrainingExample;
use crate::error::{Error, Result};

/// A group of examples with decoder targets padded to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// Sketch ids followed by `<eos>`, then `<pad>`.
    pub targets: Vec<Vec<usize>>,
    /// Node labels aligned with `targets`.
    pub labels: Vec<Vec<Option<usize>>>,
    /// `true` at real (non-pad) steps.
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }
}

/// Decoder target ids and labels for one example, `<eos>` appended.
pub fn target_ids(ex: &TrainingExample, vocab: &Vocabulary) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut ids = vocab.encode(&ex.sketch);
    ids.push(EOS_ID);
    let mut labels = ex.labels.clone();
    labels.push(None);
    (ids, labels)
}

/// Shuffles with `seed` (or keeps order when `shuffle` is false) and cuts
/// into batches of at most `batch_size`.
pub fn make_batches(
    examples: &[TrainingExample],
    vocab: &Vocabulary,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let encoded: Vec<_> = chunk.iter().map(|&i| target_ids(&examples[i], vocab)).collect();
            let max_len = encoded.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
            let mut b = Batch {
                indices: chunk.to_vec(),
                targets: Vec::new(),
                labels: Vec::new(),
                mask: Vec::new(),
            };
            for (mut t, mut l) in encoded {
                let real = t.len();
                t.resize(max_len, PAD_ID);
                l.resize(max_len, None);
                b.mask.push((0..max_len).map(|i| i < real).collect());
                b.targets.push(t);
                b.labels.push(l);
            }
            b
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::toy_corpus;
    use crate::corpus::{build_vocab, make_examples};

    #[test]
    fn batches_cover_every_example_once() {
        let (dialogues, ontology) = toy_corpus(7);
        let ex = make_examples(&dialogues, &ontology).unwrap();
        let v = build_vocab(&ex, &ontology);
        let batches = make_batches(&ex, &v, 3, true, 11).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..ex.len()).collect::<Vec<_>>());
        for b in &batches {
            for (row, &i) in b.indices.iter().enumerate() {
                let real = ex[i].sketch.len() + 1;
                assert_eq!(b.mask[row].iter().filter(|&&m| m).count(), real);
                assert_eq!(b.targets[row][real - 1], EOS_ID);
                assert!(b.targets[row][real..].iter().all(|&t| t == PAD_ID));
            }
        }
        assert_eq!(batches, make_batches(&ex, &v, 3, true, 11).unwrap());
        assert_ne!(
            batches.iter().map(|b| b.indices.clone()).collect::<Vec<_>>(),
            make_batches(&ex, &v, 3, true, 12).unwrap().iter().map(|b| b.indices.clone()).collect::<Vec<_>>()
        );
        assert!(make_batches(&ex, &v, 0, false, 0).is_err());
    }
}
