//! Deterministic randomness: seed derivation, a small value-stable PRNG,
//! 4-universal polynomial hashing over a Mersenne prime, and 64-bit
//! fingerprints of encoded sub-values.
//!
//! Every random decision in the crate descends from one master seed through
//! [`derive_seed`] with a fixed word path, so runs are reproducible across
//! platforms, thread counts, and releases. The derivation path, the draw
//! order, and the hash construction are frozen format contracts: changing
//! any of them invalidates serialized sketches and golden tests.

use crate::{Error, Result};
use std::hash::Hasher;

/// Modulus of the 4-universal hash family: the Mersenne prime 2^61 - 1.
pub const MERSENNE_P61: u64 = (1 << 61) - 1;

/// Domain tags for [`derive_seed`]; first word of every derivation path.
pub mod domain {
    /// Sketch row hash seeds (bucket and sign).
    pub const HASH: u64 = 1;
    /// Sub-value fingerprinting.
    pub const FINGERPRINT: u64 = 2;
    /// Per-record projection sampling.
    pub const SAMPLE: u64 = 3;
    /// Reservoir sampling baseline.
    pub const RESERVOIR: u64 = 4;
    /// Synthetic data generation.
    pub const GENERATOR: u64 = 5;
    /// Per-trial seeds in repeated-trial harnesses.
    pub const TRIAL: u64 = 6;
}

/// Golden-ratio increment used by the SplitMix64 stream.
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer: a bijective mix of the full 64-bit space.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Counter-mode seed derivation: folds `words` into `master` one mix round
/// per word, with a position salt so permuted paths diverge.
pub fn derive_seed(master: u64, words: &[u64]) -> u64 {
    let mut acc = mix64(master ^ GOLDEN_GAMMA);
    for (i, &w) in words.iter().enumerate() {
        let salt = (i as u64 + 1).wrapping_mul(GOLDEN_GAMMA);
        acc = mix64(acc ^ w.wrapping_add(salt));
    }
    acc
}

/// SplitMix64 stream. Value-stable by construction; used for every sampling
/// decision instead of an external PRNG so that draw sequences never shift
/// under dependency upgrades.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw from `0..n` via multiply-shift with rejection (unbiased).
    /// `n` must be nonzero. Consumes at least one draw.
    #[inline]
    pub fn uniform_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            let lo = m as u64;
            if lo >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
            // Rejected draw: retry keeps the distribution exactly uniform.
        }
    }

    /// Bernoulli draw with success probability `p` (quantized to 2^-64).
    /// Consumes one draw for 0 < p < 1, none otherwise.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        let threshold = (p * 18_446_744_073_709_551_616.0) as u64;
        self.next_u64() < threshold
    }
}

/// Purpose of a sketch hash seed; keeps bucket and sign streams from being
/// swapped accidentally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Bucket,
    Sign,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Bucket => 0,
            Purpose::Sign => 1,
        }
    }
}

/// Seed of one degree-3 polynomial over Z_p (4-universal family), bound to
/// the sketch level and purpose it serves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hash4Seed {
    /// Polynomial coefficients, each uniform in `0..MERSENNE_P61`.
    pub coefficients: [u64; 4],
    pub purpose: Purpose,
    pub level_k: u32,
}

impl Hash4Seed {
    /// Derives the seed for `(level_k, row, purpose)` from the master seed.
    pub fn derive(master_seed: u64, level_k: u32, row: u32, purpose: Purpose) -> Self {
        let seed = derive_seed(
            master_seed,
            &[domain::HASH, level_k as u64, row as u64, purpose.tag()],
        );
        let mut rng = SplitMix64::new(seed);
        let mut coefficients = [0u64; 4];
        for c in &mut coefficients {
            // 61-bit draws; the single value p is rejected so the result is
            // uniform over Z_p.
            *c = loop {
                let v = rng.next_u64() & MERSENNE_P61;
                if v != MERSENNE_P61 {
                    break v;
                }
            };
        }
        Hash4Seed {
            coefficients,
            purpose,
            level_k,
        }
    }
}

/// `a * b mod p` for `a, b < p = 2^61 - 1`, via one 128-bit product and a
/// Mersenne fold.
#[inline]
fn mulmod_p61(a: u64, b: u64) -> u64 {
    let prod = (a as u128) * (b as u128);
    let lo = (prod as u64) & MERSENNE_P61;
    let hi = (prod >> 61) as u64;
    let mut s = lo + hi; // < 2^62: two conditional subtractions suffice
    if s >= MERSENNE_P61 {
        s -= MERSENNE_P61;
    }
    if s >= MERSENNE_P61 {
        s -= MERSENNE_P61;
    }
    s
}

/// Degree-3 polynomial evaluation over Z_p at the fingerprint, Horner form.
#[inline]
fn poly4(seed: &Hash4Seed, fingerprint: u64) -> u64 {
    // Fold the 64-bit fingerprint into Z_p first.
    let mut x = (fingerprint & MERSENNE_P61) + (fingerprint >> 61);
    if x >= MERSENNE_P61 {
        x -= MERSENNE_P61;
    }
    if x >= MERSENNE_P61 {
        x -= MERSENNE_P61;
    }
    let [a0, a1, a2, a3] = seed.coefficients;
    let mut acc = a3;
    for &a in &[a2, a1, a0] {
        acc = mulmod_p61(acc, x);
        acc += a; // both < p, one subtraction folds
        if acc >= MERSENNE_P61 {
            acc -= MERSENNE_P61;
        }
    }
    acc
}

/// Bucket index in `0..width` for a fingerprint. The final modulo introduces
/// a bias of at most `width / 2^61`, which is negligible for any practical
/// width. Expects a `Purpose::Bucket` seed.
#[inline]
pub fn hash4_bucket(seed: &Hash4Seed, fingerprint: u64, width: u32) -> u32 {
    debug_assert!(seed.purpose == Purpose::Bucket);
    debug_assert!(width > 0);
    (poly4(seed, fingerprint) % width as u64) as u32
}

/// Sign in {-1, +1} from the designated low bit of the polynomial value.
/// Expects a `Purpose::Sign` seed.
#[inline]
pub fn hash4_sign(seed: &Hash4Seed, fingerprint: u64) -> i64 {
    debug_assert!(seed.purpose == Purpose::Sign);
    if poly4(seed, fingerprint) & 1 == 1 {
        1
    } else {
        -1
    }
}

/// Seeded 64-bit fingerprint of an encoded sub-value. All sketch and exact
/// stores key on this; a collision would merge two sub-values, with
/// probability about `m^2 / 2^65` over `m` distinct sub-values.
#[inline]
pub fn fingerprint(seed: u64, data: &[u8]) -> u64 {
    let mut h = twox_hash::XxHash64::with_seed(seed);
    h.write(data);
    h.finish()
}

/// Validates a sampling-ratio parameter: finite, `0 < r <= 1`.
pub fn validate_ratio(r: f64) -> Result<()> {
    if !(r.is_finite() && r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidParameter {
            param: "r",
            value: r.to_string(),
            constraint: "sampling ratio must satisfy 0 < r <= 1",
        });
    }
    Ok(())
}
