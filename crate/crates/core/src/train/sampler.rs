use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic epoch-shuffled batches. The batch for a step is a pure
/// function of `(seed, stream, step)`, so resuming needs no sampler state.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
    stream: u64,
}

impl BatchSampler {
    /// `stream` separates independent samplers sharing a seed.
    pub fn new(len: usize, batch_size: usize, seed: u64, stream: u64) -> Self {
        Self {
            len,
            batch_size,
            seed,
            stream,
        }
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.stream << 40) ^ epoch);
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Dataset indices of the batch drawn at `step`; the dataset wraps
    /// around (with a fresh shuffle) when exhausted.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        let first = step as usize * self.batch_size;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (first..first + self.batch_size)
            .map(|pos| {
                let epoch = (pos / self.len) as u64;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    cached = Some((epoch, self.permutation(epoch)));
                }
                cached.as_ref().expect("set above").1[pos % self.len]
            })
            .collect()
    }
}
