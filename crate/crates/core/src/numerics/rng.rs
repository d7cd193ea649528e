use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Counter-based random stream. The generator for draw number `counter` is
/// keyed by `(seed, label, counter)` alone, so a draw never depends on what
/// other streams did before it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    label: String,
    counter: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        Self {
            seed,
            label: label.into(),
            counter: 0,
        }
    }

    /// Child stream with label `"{label}/{sub}"`, counter reset.
    pub fn derive(&self, sub: &str) -> Self {
        Self::new(self.seed, format!("{}/{sub}", self.label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Generator for a specific counter value; does not advance the stream.
    pub fn rng_at(&self, counter: u64) -> ChaCha8Rng {
        let label_key = fnv1a(self.label.as_bytes());
        let words = [
            splitmix(self.seed),
            splitmix(label_key),
            splitmix(counter),
            splitmix(self.seed ^ label_key.rotate_left(17) ^ counter.rotate_left(41)),
        ];
        let mut key = [0u8; 32];
        for (chunk, w) in key.chunks_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// Generator for the current counter; advances the stream by one.
    pub fn next_rng(&mut self) -> ChaCha8Rng {
        let rng = self.rng_at(self.counter);
        self.counter += 1;
        rng
    }

    /// I.i.d. standard-normal tensor. Advances the stream by one.
    pub fn draw_gaussian(&mut self, shape: &[usize]) -> Tensor {
        let mut rng = self.next_rng();
        gaussian(&mut rng, shape)
    }

    /// Uniform index in `0..n`. Advances the stream by one.
    pub fn draw_index(&mut self, n: usize) -> usize {
        self.next_rng().random_range(0..n)
    }
}

pub fn gaussian(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
