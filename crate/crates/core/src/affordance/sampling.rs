use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kinematics::KinematicChain;

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in `base`.
pub fn halton(mut index: u64, base: u32) -> f64 {
    let b = base as u64;
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % b) as f64;
        index /= b;
    }
    r
}

/// `count` joint configurations from a seeded, randomly shifted Halton
/// sequence, scaled into the chain's joint limits.
pub fn joint_samples(chain: &KinematicChain, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let dof = chain.dof();
    assert!(dof <= PRIMES.len(), "at most {} joints supported", PRIMES.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dof).map(|_| rng.gen::<f64>()).collect();
    (0..count)
        .map(|i| {
            (0..dof)
                .map(|d| {
                    let u = (halton(i as u64 + 1, PRIMES[d]) + shift[d]).fract();
                    let [lo, hi] = chain.limits()[d];
                    lo + u * (hi - lo)
                })
                .collect()
        })
        .collect()
}
