//! Small numeric and RNG helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby integer seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes two seed words into one; used to derive independent substreams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// Deterministic RNG for stream `stream` of a master seed.
///
/// Substreams derived from the same seed with different stream indices are
/// independent, so batch elements can be stepped in any order (or in
/// parallel) and still reproduce the serial result bit-exactly.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

/// Pairwise (cascade) summation: order-robust to ~1e-16 relative error.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Arithmetic mean via pairwise summation; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|&x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (n - 1) as f64
}

/// Squared Euclidean norm.
pub fn norm_sq(xs: &[f64]) -> f64 {
    xs.iter().map(|&x| x * x).sum()
}

/// Euclidean distance between two equal-length vectors.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(pairwise_sum(&xs), 15.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[7.5]), 7.5);
    }

    #[test]
    fn pairwise_sum_is_permutation_stable() {
        // A shuffled copy of the same values must agree far tighter than 1e-12.
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37 % 101) as f64).sin()).collect();
        let mut ys = xs.clone();
        ys.reverse();
        ys.swap(3, 700);
        let a = pairwise_sum(&xs);
        let b = pairwise_sum(&ys);
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn stream_rngs_differ_across_streams_and_repeat_within() {
        use rand::RngCore;
        let mut a = stream_rng(42, 0);
        let mut b = stream_rng(42, 1);
        let mut a2 = stream_rng(42, 0);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut a = stream_rng(42, 0);
        assert_eq!(a.next_u64(), a2.next_u64());
    }

    #[test]
    fn variance_of_constant_is_zero() {
        assert_eq!(sample_variance(&[3.0, 3.0, 3.0, 3.0]), 0.0);
        let v = sample_variance(&[1.0, 2.0, 3.0]);
        assert!((v - 1.0).abs() < 1e-15);
    }
}
