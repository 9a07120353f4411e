//! Seeded, splittable randomness. Every consumer derives its own stream
//! from the run seed and a label, so adding a consumer never shifts the
//! draws seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree {
            seed: splitmix(self.seed ^ splitmix(fnv1a(label))),
        }
    }

    pub fn rng(&self, label: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.child(label).seed)
    }
}

/// Normal draw with standard deviation `std`, redrawn until it falls
/// within two standard deviations.
pub fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_give_independent_streams() {
        let t = SeedTree::new(5);
        let a: u64 = t.rng("a").gen();
        let b: u64 = t.rng("b").gen();
        assert_ne!(a, b);
        assert_eq!(a, SeedTree::new(5).rng("a").gen::<u64>());
    }

    #[test]
    fn truncation_bound() {
        let mut rng = SeedTree::new(1).rng("t");
        assert!((0..10_000).all(|_| trunc_normal(&mut rng, 0.02).abs() <= 0.04));
    }
}
