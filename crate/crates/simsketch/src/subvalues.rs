//! Records, projection sampling, and sub-value encoding.
//!
//! A sub-value of a record is its projection onto one column combination,
//! tagged with the combination's level and rank. Per record and level `k`,
//! the sampler draws a subset of the `C(d, k)` combinations without
//! replacement such that every combination is included with probability
//! exactly `r`: the subset size is `floor(r * C(d, k))` plus a Bernoulli
//! draw on the fractional part, and the members come from a partial
//! Fisher-Yates pass over the combination ranks.
//!
//! The byte encoding of a sub-value and the per-record draw order (rounding
//! draw first, then one uniform draw per selected combination, levels
//! ascending) are frozen format contracts.

use crate::combinatorics::MAX_ENUMERATED_COMBINATIONS;
use crate::combinatorics::{
    choose, unrank_combination, unrank_combination_into, ColumnCombination,
};
use crate::hashing::{validate_ratio, SplitMix64};
use crate::{Error, Result};
use std::collections::BTreeMap;

/// Maximum record arity; keeps the encoded level tag in 16 bits.
pub const MAX_ARITY: u32 = u16::MAX as u32;

/// One record: an ordered list of byte-string field values.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    pub values: Vec<Vec<u8>>,
}

impl Record {
    pub fn new(values: Vec<Vec<u8>>) -> Self {
        Record { values }
    }

    /// Convenience constructor from string literals.
    pub fn from_strs(values: &[&str]) -> Self {
        Record {
            values: values.iter().map(|v| v.as_bytes().to_vec()).collect(),
        }
    }

    pub fn arity(&self) -> usize {
        self.values.len()
    }
}

/// One emitted sub-value: the level, the combination rank within the level,
/// and the canonical byte encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubValue {
    pub level_k: u32,
    pub rank: u64,
    pub encoded: Vec<u8>,
}

/// The sampling ratio with the expected combination count per level,
/// `l_k = r * C(d, k)` for `k` in `s..=d`.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub d: u32,
    pub s: u32,
    pub r: f64,
    pub expected_per_level: BTreeMap<u32, f64>,
}

impl SamplingPlan {
    pub fn new(d: u32, s: u32, r: f64) -> Result<Self> {
        validate_ratio(r)?;
        validate_levels(d, s)?;
        let mut expected_per_level = BTreeMap::new();
        for k in s..=d {
            let total = choose(d as u64, k as u64)?;
            expected_per_level.insert(k, r * total as f64);
        }
        Ok(SamplingPlan {
            d,
            s,
            r,
            expected_per_level,
        })
    }
}

/// Validates `1 <= s <= d <= MAX_ARITY`.
pub(crate) fn validate_levels(d: u32, s: u32) -> Result<()> {
    if d == 0 || d > MAX_ARITY {
        return Err(Error::InvalidParameter {
            param: "d",
            value: d.to_string(),
            constraint: "record arity must be in 1..=65535",
        });
    }
    if s == 0 || s > d {
        return Err(Error::InvalidParameter {
            param: "s",
            value: s.to_string(),
            constraint: "similarity threshold must satisfy 1 <= s <= d",
        });
    }
    Ok(())
}

fn split_expected(total: u64, r: f64) -> (u64, f64) {
    let l = r * total as f64;
    let floor = l.floor();
    (floor as u64, l - floor)
}

fn realize_size(floor_l: u64, frac: f64, rng: &mut SplitMix64) -> u64 {
    floor_l + rng.bernoulli(frac) as u64
}

/// Draws the realized number of level-`k` combinations to sample: the
/// expectation `r * C(d, k)` is met exactly by rounding the fractional part
/// with one Bernoulli draw.
pub fn sample_level_size(d: u32, k: u32, r: f64, rng: &mut SplitMix64) -> Result<u64> {
    validate_ratio(r)?;
    let total = choose(d as u64, k as u64)?;
    let total = u64::try_from(total).map_err(|_| Error::Overflow {
        what: format!("C({d}, {k}) as a sample-size base"),
    })?;
    let (floor_l, frac) = split_expected(total, r);
    Ok(realize_size(floor_l, frac, rng))
}

/// Appends the canonical encoding of one sub-value to `out`:
/// `[level u16 LE][rank u64 LE]` then `[len u32 LE][bytes]` per selected
/// field. Length prefixes make the encoding injective for arbitrary field
/// bytes.
pub(crate) fn encode_subvalue_into<F: AsRef<[u8]>>(
    out: &mut Vec<u8>,
    level_k: u32,
    rank: u64,
    indices: &[u32],
    fields: &[F],
) -> Result<()> {
    out.extend_from_slice(&(level_k as u16).to_le_bytes());
    out.extend_from_slice(&rank.to_le_bytes());
    for &ix in indices {
        let field = fields
            .get(ix as usize)
            .map(F::as_ref)
            .ok_or(Error::InvalidParameter {
                param: "combination",
                value: ix.to_string(),
                constraint: "combination index must be below the record arity",
            })?;
        let len = u32::try_from(field.len()).map_err(|_| Error::Overflow {
            what: "encoded field length".to_string(),
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(field);
    }
    Ok(())
}

/// Canonical byte encoding of `record` projected onto `combo`.
pub fn encode_subvalue(record: &Record, combo: &ColumnCombination) -> Result<Vec<u8>> {
    if combo.level_k > MAX_ARITY {
        return Err(Error::InvalidParameter {
            param: "level_k",
            value: combo.level_k.to_string(),
            constraint: "level must fit the 16-bit encoding tag",
        });
    }
    let mut out = Vec::new();
    encode_subvalue_into(
        &mut out,
        combo.level_k,
        combo.rank,
        &combo.indices,
        &record.values,
    )?;
    Ok(out)
}

/// Without-replacement combination sampler for one level, reusable across
/// records. Holds a persistent rank permutation that is restored to the
/// identity after every draw, so per-record cost is proportional to the
/// number of sampled combinations, not to `C(d, k)`.
#[derive(Debug, Clone)]
pub struct LevelSampler {
    pub level_k: u32,
    d: u32,
    total: u64,
    floor_l: u64,
    frac: f64,
    perm: Vec<u64>,
    swaps: Vec<usize>,
}

impl LevelSampler {
    pub fn new(d: u32, level_k: u32, r: f64) -> Result<Self> {
        validate_ratio(r)?;
        if level_k == 0 || level_k > d || d > MAX_ARITY {
            return Err(Error::InvalidParameter {
                param: "level_k",
                value: format!("{level_k} (d={d})"),
                constraint: "level must satisfy 1 <= k <= d <= 65535",
            });
        }
        let total = choose(d as u64, level_k as u64)?;
        if total > MAX_ENUMERATED_COMBINATIONS as u128 {
            return Err(Error::ResourceCap {
                what: "combinations per level",
                limit: MAX_ENUMERATED_COMBINATIONS,
                actual: u64::try_from(total).unwrap_or(u64::MAX),
            });
        }
        let total = total as u64;
        let (floor_l, frac) = split_expected(total, r);
        Ok(LevelSampler {
            level_k,
            d,
            total,
            floor_l,
            frac,
            perm: (0..total).collect(),
            swaps: Vec::new(),
        })
    }

    pub fn combination_count(&self) -> u64 {
        self.total
    }

    /// Draws this record's combination ranks into `out` (cleared first).
    /// Every rank is included with probability exactly `r`; ranks within one
    /// call are distinct. Draw order: the rounding Bernoulli (when the
    /// expected count is fractional), then one uniform draw per rank.
    pub fn sample_ranks_into(&mut self, rng: &mut SplitMix64, out: &mut Vec<u64>) {
        out.clear();
        let c = realize_size(self.floor_l, self.frac, rng);
        self.swaps.clear();
        for i in 0..c as usize {
            let j = i + rng.uniform_below(self.total - i as u64) as usize;
            self.perm.swap(i, j);
            self.swaps.push(j);
            out.push(self.perm[i]);
        }
        // Undo in reverse: the permutation must be the identity again before
        // the next record.
        for i in (0..self.swaps.len()).rev() {
            self.perm.swap(i, self.swaps[i]);
        }
    }

    /// The column indices of a combination rank at this level.
    pub fn unrank(&self, rank: u64) -> Result<Vec<u32>> {
        unrank_combination(self.d, self.level_k, rank)
    }

    /// [`unrank`](Self::unrank) into a caller-owned buffer (cleared first).
    pub fn unrank_into(&self, rank: u64, out: &mut Vec<u32>) -> Result<()> {
        unrank_combination_into(self.d, self.level_k, rank, out)
    }

    #[cfg(test)]
    pub(crate) fn perm_is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &v)| i as u64 == v)
    }
}

/// Samples and encodes the level-`k` sub-values of one record.
///
/// Convenience wrapper that builds a transient [`LevelSampler`]; streaming
/// paths should hold per-level samplers instead.
pub fn emit_subvalues(
    record: &Record,
    level_k: u32,
    r: f64,
    rng: &mut SplitMix64,
) -> Result<Vec<SubValue>> {
    let d = u32::try_from(record.arity()).map_err(|_| Error::InvalidParameter {
        param: "record",
        value: record.arity().to_string(),
        constraint: "record arity must be in 1..=65535",
    })?;
    let mut sampler = LevelSampler::new(d, level_k, r)?;
    let mut ranks = Vec::new();
    sampler.sample_ranks_into(rng, &mut ranks);
    let mut out = Vec::with_capacity(ranks.len());
    for rank in ranks {
        let indices = sampler.unrank(rank)?;
        let mut encoded = Vec::new();
        encode_subvalue_into(&mut encoded, level_k, rank, &indices, &record.values)?;
        out.push(SubValue {
            level_k,
            rank,
            encoded,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinatorics::enumerate_combinations;
    use crate::hashing::{derive_seed, domain};

    #[test]
    fn encode_golden_bytes() {
        let rec = Record::from_strs(&["a1", "b1", "c3"]);
        let combo = ColumnCombination {
            level_k: 2,
            indices: vec![0, 1],
            rank: 0,
        };
        let encoded = encode_subvalue(&rec, &combo).unwrap();
        // Format contract: little-endian level tag, rank, then
        // length-prefixed fields.
        let expect: Vec<u8> = vec![
            2, 0, // level 2
            0, 0, 0, 0, 0, 0, 0, 0, // rank 0
            2, 0, 0, 0, b'a', b'1', // field 0
            2, 0, 0, 0, b'b', b'1', // field 1
        ];
        assert_eq!(encoded, expect);
    }

    #[test]
    fn encoding_is_injective_on_adversarial_values() {
        // Same concatenation, different field split.
        let a = Record::new(vec![b"ab".to_vec(), b"".to_vec()]);
        let b = Record::new(vec![b"a".to_vec(), b"b".to_vec()]);
        let combo = ColumnCombination {
            level_k: 2,
            indices: vec![0, 1],
            rank: 0,
        };
        assert_ne!(
            encode_subvalue(&a, &combo).unwrap(),
            encode_subvalue(&b, &combo).unwrap()
        );

        // Same projected bytes, different combination rank.
        let rec = Record::new(vec![b"x".to_vec(), b"x".to_vec(), b"y".to_vec()]);
        let c01 = ColumnCombination {
            level_k: 2,
            indices: vec![0, 1],
            rank: 0,
        };
        let c02 = ColumnCombination {
            level_k: 2,
            indices: vec![0, 2],
            rank: 1,
        };
        let rec2 = Record::new(vec![b"x".to_vec(), b"z".to_vec(), b"x".to_vec()]);
        assert_ne!(
            encode_subvalue(&rec, &c01).unwrap(),
            encode_subvalue(&rec2, &c02).unwrap()
        );

        // Embedded length-prefix-like bytes cannot forge a boundary.
        let tricky1 = Record::new(vec![vec![1, 0, 0, 0, 7], vec![]]);
        let tricky2 = Record::new(vec![vec![1, 0, 0, 0], vec![7]]);
        assert_ne!(
            encode_subvalue(&tricky1, &c01).unwrap(),
            encode_subvalue(&tricky2, &c01).unwrap()
        );
    }

    /// Reference decoder: the encoding must parse back unambiguously.
    fn decode(encoded: &[u8], k: usize) -> (u16, u64, Vec<Vec<u8>>) {
        let level = u16::from_le_bytes(encoded[0..2].try_into().unwrap());
        let rank = u64::from_le_bytes(encoded[2..10].try_into().unwrap());
        let mut fields = Vec::new();
        let mut at = 10;
        for _ in 0..k {
            let len = u32::from_le_bytes(encoded[at..at + 4].try_into().unwrap()) as usize;
            at += 4;
            fields.push(encoded[at..at + len].to_vec());
            at += len;
        }
        assert_eq!(at, encoded.len(), "no trailing bytes");
        (level, rank, fields)
    }

    #[test]
    fn encoding_round_trips_through_reference_decoder() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let d = rng.gen_range(1..=6u32);
            let k = rng.gen_range(1..=d);
            let values: Vec<Vec<u8>> = (0..d)
                .map(|_| {
                    let len = rng.gen_range(0..12usize);
                    (0..len).map(|_| rng.gen::<u8>()).collect()
                })
                .collect();
            let rec = Record::new(values);
            let combos = enumerate_combinations(d, k).unwrap();
            let combo = &combos[rng.gen_range(0..combos.len())];
            let encoded = encode_subvalue(&rec, combo).unwrap();
            let (level, rank, fields) = decode(&encoded, k as usize);
            assert_eq!(level as u32, k);
            assert_eq!(rank, combo.rank);
            let expect: Vec<Vec<u8>> = combo
                .indices
                .iter()
                .map(|&ix| rec.values[ix as usize].clone())
                .collect();
            assert_eq!(fields, expect);
        }
    }

    #[test]
    fn sample_level_size_rounding() {
        let mut rng = SplitMix64::new(3);
        // r = 1 is exact.
        for _ in 0..10 {
            assert_eq!(sample_level_size(5, 4, 1.0, &mut rng).unwrap(), 5);
        }
        // r = 0.5 over C(5,4)=5: values in {2,3}, mean 2.5.
        let trials = 4000;
        let mut sum = 0u64;
        for _ in 0..trials {
            let v = sample_level_size(5, 4, 0.5, &mut rng).unwrap();
            assert!(v == 2 || v == 3);
            sum += v;
        }
        let mean = sum as f64 / trials as f64;
        // Bernoulli half: sd of the mean is 0.5 / sqrt(trials).
        assert!((mean - 2.5).abs() < 5.0 * 0.5 / (trials as f64).sqrt());
    }

    #[test]
    fn sampler_draws_distinct_ranks_and_restores_state() {
        let mut sampler = LevelSampler::new(6, 3, 0.7).unwrap();
        assert_eq!(sampler.combination_count(), 20);
        let mut rng = SplitMix64::new(8);
        let mut ranks = Vec::new();
        for _ in 0..500 {
            sampler.sample_ranks_into(&mut rng, &mut ranks);
            let mut sorted = ranks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), ranks.len(), "ranks must be distinct");
            assert!(ranks.iter().all(|&r| r < 20));
            assert!(sampler.perm_is_identity());
        }
    }

    #[test]
    fn inclusion_probability_is_exactly_r() {
        let d = 5;
        let k = 4;
        let r = 0.3;
        let records = 20_000u64;
        let mut counts = [0u64; 5];
        for i in 0..records {
            let mut rng = SplitMix64::new(derive_seed(1, &[domain::SAMPLE, 0, i]));
            let mut sampler = LevelSampler::new(d, k, r).unwrap();
            let mut ranks = Vec::new();
            sampler.sample_ranks_into(&mut rng, &mut ranks);
            for rank in ranks {
                counts[rank as usize] += 1;
            }
        }
        let sd = (r * (1.0 - r) / records as f64).sqrt();
        for (rank, &c) in counts.iter().enumerate() {
            let p = c as f64 / records as f64;
            assert!((p - r).abs() < 5.0 * sd, "rank {rank}: {p} vs {r}");
        }
    }

    #[test]
    fn emit_covers_all_combinations_at_full_ratio() {
        let rec = Record::from_strs(&["u", "v", "w"]);
        let mut rng = SplitMix64::new(4);
        let subs = emit_subvalues(&rec, 2, 1.0, &mut rng).unwrap();
        let mut ranks: Vec<u64> = subs.iter().map(|s| s.rank).collect();
        ranks.sort_unstable();
        assert_eq!(ranks, vec![0, 1, 2]);
        let combos = enumerate_combinations(3, 2).unwrap();
        for sub in &subs {
            let expect = encode_subvalue(&rec, &combos[sub.rank as usize]).unwrap();
            assert_eq!(sub.encoded, expect);
            assert_eq!(sub.level_k, 2);
        }
    }

    #[test]
    fn plan_and_parameter_validation() {
        let plan = SamplingPlan::new(5, 4, 0.5).unwrap();
        assert_eq!(plan.expected_per_level.len(), 2);
        assert_eq!(plan.expected_per_level[&4], 2.5);
        assert_eq!(plan.expected_per_level[&5], 0.5);
        assert!(SamplingPlan::new(5, 0, 0.5).is_err());
        assert!(SamplingPlan::new(5, 6, 0.5).is_err());
        assert!(SamplingPlan::new(5, 4, 0.0).is_err());
        assert!(LevelSampler::new(5, 0, 0.5).is_err());
        assert!(LevelSampler::new(0, 1, 0.5).is_err());
        assert!(matches!(
            LevelSampler::new(64, 32, 0.5),
            Err(Error::ResourceCap { .. })
        ));
    }
}
