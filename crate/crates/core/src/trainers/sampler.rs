//! Uniform batch sampling without replacement within an epoch.

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Walks a shuffled permutation in consecutive batches. A tail shorter than
/// the batch size is dropped and the permutation is reshuffled.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSampler {
    pub n: usize,
    pub batch: usize,
    pub perm: Vec<usize>,
    pub pos: usize,
    pub epoch: u64,
    pub rng: Rng,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize, mut rng: Rng) -> Result<Self> {
        if batch < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if batch > n {
            return Err(Error::config("batch_size", format!("{batch} exceeds dataset size {n}")));
        }
        let perm = rng.permutation(n);
        Ok(EpochSampler {
            n,
            batch,
            perm,
            pos: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.perm = self.rng.permutation(self.n);
            self.pos = 0;
            self.epoch += 1;
        }
        let b = self.perm[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_epoch_visits_distinct_samples() {
        let mut s = EpochSampler::new(10, 3, Rng::new(4)).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(s.epoch, 0);
        s.next_batch();
        assert_eq!(s.epoch, 1);
    }

    #[test]
    fn full_batch_is_whole_dataset() {
        let mut s = EpochSampler::new(5, 5, Rng::new(1)).unwrap();
        for _ in 0..3 {
            let mut b = s.next_batch();
            b.sort();
            assert_eq!(b, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(EpochSampler::new(5, 1, Rng::new(0)).is_err());
        assert!(EpochSampler::new(5, 6, Rng::new(0)).is_err());
    }
}
