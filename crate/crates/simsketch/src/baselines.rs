//! Ground truth and competitors: the brute-force pair-counting oracle, the
//! scaled random-sampling baseline, and the synthetic dataset generators
//! with analytically known counts.
//!
//! The oracle computes the exactly-`k`-similar pair counts `x_k` by direct
//! pairwise comparison and the per-level self-join sizes `y_k` by
//! independent per-level frequency maps, so the lattice identity
//! `x_k = y_k - C(d,k)*n - sum_{j>k} C(j,k)*x_j` is cross-checked by
//! construction rather than assumed. It exists to verify, not to scale:
//! the pair loop is quadratic and capped.

use crate::combinatorics::enumerate_combinations;
use crate::hashing::{derive_seed, domain, mix64, SplitMix64};
use crate::subvalues::{encode_subvalue, Record, MAX_ARITY};
use crate::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

/// Default record cap for the quadratic oracles.
pub const DEFAULT_ORACLE_CAP: u64 = 50_000;

/// Exact similarity structure of one dataset: `x[k]` counts ordered
/// exactly-`k`-similar pairs excluding self-pairs (every unordered pair
/// contributes twice), `y[k]` is the level-`k` sub-value self-join size at
/// full sampling, and `g[s] = sum_{k>=s} x[k] + n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactCounts {
    pub n: u64,
    pub d: u32,
    pub x: BTreeMap<u32, u64>,
    pub y: BTreeMap<u32, u64>,
    pub g: BTreeMap<u32, u64>,
}

fn field_match_count(a: &Record, b: &Record) -> u32 {
    a.values
        .iter()
        .zip(&b.values)
        .filter(|(x, y)| x == y)
        .count() as u32
}

fn check_uniform_arity(dataset: &[Record], d: u32) -> Result<()> {
    for (i, rec) in dataset.iter().enumerate() {
        if rec.arity() != d as usize {
            return Err(Error::Arity {
                expected: d as usize,
                got: rec.arity(),
                record_index: i as u64,
            });
        }
    }
    Ok(())
}

/// Brute-force exact counts with the default size cap.
pub fn exact_pair_counts(dataset: &[Record]) -> Result<ExactCounts> {
    exact_pair_counts_with_cap(dataset, DEFAULT_ORACLE_CAP)
}

/// Brute-force exact counts: O(n^2 d) pairwise agreement counting for `x`,
/// independent per-level frequency maps for `y`.
pub fn exact_pair_counts_with_cap(dataset: &[Record], cap: u64) -> Result<ExactCounts> {
    let n = dataset.len() as u64;
    if n > cap {
        return Err(Error::ResourceCap {
            what: "oracle dataset size",
            limit: cap,
            actual: n,
        });
    }
    let d = dataset.first().map(|r| r.arity() as u32).unwrap_or(0);
    if d > MAX_ARITY {
        return Err(Error::InvalidParameter {
            param: "d",
            value: d.to_string(),
            constraint: "record arity must be in 1..=65535",
        });
    }
    check_uniform_arity(dataset, d)?;

    let mut x: BTreeMap<u32, u64> = (1..=d).map(|k| (k, 0)).collect();
    for i in 0..dataset.len() {
        for j in i + 1..dataset.len() {
            let m = field_match_count(&dataset[i], &dataset[j]);
            if m >= 1 {
                *x.get_mut(&m).unwrap() += 2;
            }
        }
    }

    let mut y = BTreeMap::new();
    for k in 1..=d {
        // One frequency map over every (combination, projected value) of the
        // level, freed before the next level starts.
        let mut freq: HashMap<Vec<u8>, u64> = HashMap::new();
        for combo in enumerate_combinations(d, k)? {
            for rec in dataset {
                *freq.entry(encode_subvalue(rec, &combo)?).or_insert(0) += 1;
            }
        }
        let mut size: u128 = 0;
        for &c in freq.values() {
            size += c as u128 * c as u128;
        }
        let size = u64::try_from(size).map_err(|_| Error::Overflow {
            what: format!("level-{k} self-join size"),
        })?;
        y.insert(k, size);
    }

    let mut g = BTreeMap::new();
    let mut acc = n;
    for k in (1..=d).rev() {
        acc += x[&k];
        g.insert(k, acc);
    }
    Ok(ExactCounts { n, d, x, y, g })
}

/// Exact cross-stream similarity structure: `x[k]` counts (a, b) pairs
/// matching on exactly `k` columns (one direction, no doubling), and
/// `join[s] = sum_{k>=s} x[k]` is the similarity join size at threshold `s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossCounts {
    pub n_a: u64,
    pub n_b: u64,
    pub d: u32,
    pub x: BTreeMap<u32, u64>,
    pub join: BTreeMap<u32, u64>,
}

/// Brute-force cross pair counts with the default size cap.
pub fn exact_cross_pair_counts(a: &[Record], b: &[Record]) -> Result<CrossCounts> {
    exact_cross_pair_counts_with_cap(a, b, DEFAULT_ORACLE_CAP)
}

/// Brute-force cross pair counts: O(|a|·|b|·d).
pub fn exact_cross_pair_counts_with_cap(
    a: &[Record],
    b: &[Record],
    cap: u64,
) -> Result<CrossCounts> {
    for (name, len) in [("a", a.len()), ("b", b.len())] {
        if len as u64 > cap {
            return Err(Error::ResourceCap {
                what: match name {
                    "a" => "oracle left relation size",
                    _ => "oracle right relation size",
                },
                limit: cap,
                actual: len as u64,
            });
        }
    }
    let d = a
        .first()
        .or_else(|| b.first())
        .map(|r| r.arity() as u32)
        .unwrap_or(0);
    check_uniform_arity(a, d)?;
    check_uniform_arity(b, d)?;

    let mut x: BTreeMap<u32, u64> = (1..=d).map(|k| (k, 0)).collect();
    for ra in a {
        for rb in b {
            let m = field_match_count(ra, rb);
            if m >= 1 {
                *x.get_mut(&m).unwrap() += 1;
            }
        }
    }
    let mut join = BTreeMap::new();
    let mut acc = 0u64;
    for k in (1..=d).rev() {
        acc += x[&k];
        join.insert(k, acc);
    }
    Ok(CrossCounts {
        n_a: a.len() as u64,
        n_b: b.len() as u64,
        d,
        x,
        join,
    })
}

/// One-pass uniform without-replacement sample of a stream (algorithm R).
#[derive(Debug, Clone)]
pub struct Reservoir<T> {
    capacity: usize,
    seen: u64,
    sample: Vec<T>,
    rng: SplitMix64,
}

impl<T> Reservoir<T> {
    pub fn new(capacity: u64, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter {
                param: "capacity",
                value: capacity.to_string(),
                constraint: "reservoir capacity must be >= 1",
            });
        }
        let capacity = usize::try_from(capacity).map_err(|_| Error::Overflow {
            what: "reservoir capacity".to_string(),
        })?;
        Ok(Reservoir {
            capacity,
            seen: 0,
            sample: Vec::new(),
            rng: SplitMix64::new(derive_seed(seed, &[domain::RESERVOIR])),
        })
    }

    /// Offers the next stream item; the sample stays uniform over all items
    /// seen so far.
    pub fn offer(&mut self, item: T) {
        self.seen += 1;
        if self.sample.len() < self.capacity {
            self.sample.push(item);
        } else {
            let j = self.rng.uniform_below(self.seen);
            if (j as usize) < self.capacity {
                self.sample[j as usize] = item;
            }
        }
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn sample(&self) -> &[T] {
        &self.sample
    }

    pub fn into_sample(self) -> (Vec<T>, u64) {
        (self.sample, self.seen)
    }
}

/// Scaled pairwise estimate from a uniform record sample. `short_sample`
/// flags that the requested sample size exceeded the stream, making the
/// estimate exact rather than sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEstimate {
    pub n: u64,
    pub sample_size: u64,
    pub s: u32,
    pub x_hat: BTreeMap<u32, f64>,
    pub g_s: f64,
    pub short_sample: bool,
}

/// Pairwise exactly-`k`-similar counts on `sample`, scaled by
/// `n(n-1) / (R(R-1))`, summed into `g_s = sum_{k>=s} x_hat[k] + n`.
/// Unbiased for every `x_k` because the sample is uniform without
/// replacement. A single-record stream needs no pairs; otherwise the
/// sample must hold at least two records.
pub fn estimate_from_sample(sample: &[Record], n: u64, s: u32) -> Result<SampleEstimate> {
    let sample_size = sample.len() as u64;
    if sample_size > n {
        return Err(Error::InvalidParameter {
            param: "n",
            value: n.to_string(),
            constraint: "stream length cannot be below the sample size",
        });
    }
    let d = sample.first().map(|r| r.arity() as u32).unwrap_or(0);
    check_uniform_arity(sample, d)?;
    if n <= 1 {
        // No pairs exist at all; the estimate is exact.
        return Ok(SampleEstimate {
            n,
            sample_size,
            s,
            x_hat: BTreeMap::new(),
            g_s: n as f64,
            short_sample: false,
        });
    }
    if d == 0 || s == 0 || s > d {
        return Err(Error::InvalidParameter {
            param: "s",
            value: s.to_string(),
            constraint: "similarity threshold must satisfy 1 <= s <= d",
        });
    }
    if sample_size < 2 {
        return Err(Error::InvalidParameter {
            param: "sample",
            value: sample_size.to_string(),
            constraint: "pairwise estimation needs at least 2 sampled records",
        });
    }
    let scale = (n as f64 * (n - 1) as f64) / (sample_size as f64 * (sample_size - 1) as f64);
    let mut counts: BTreeMap<u32, u64> = (1..=d).map(|k| (k, 0)).collect();
    for i in 0..sample.len() {
        for j in i + 1..sample.len() {
            let m = field_match_count(&sample[i], &sample[j]);
            if m >= 1 {
                *counts.get_mut(&m).unwrap() += 2;
            }
        }
    }
    let x_hat: BTreeMap<u32, f64> = counts
        .iter()
        .map(|(&k, &c)| (k, c as f64 * scale))
        .collect();
    let g_s = x_hat
        .iter()
        .filter(|(&k, _)| k >= s)
        .map(|(_, &v)| v)
        .sum::<f64>()
        + n as f64;
    Ok(SampleEstimate {
        n,
        sample_size,
        s,
        x_hat,
        g_s,
        short_sample: false,
    })
}

/// The full baseline: reservoir-sample `capacity` records in one pass, then
/// estimate. When the stream is shorter than the requested capacity the
/// estimate runs over every record and is flagged `short_sample`.
pub fn random_sampling_estimate(
    records: &[Record],
    capacity: u64,
    s: u32,
    seed: u64,
) -> Result<SampleEstimate> {
    let mut reservoir = Reservoir::new(capacity, seed)?;
    for rec in records {
        reservoir.offer(rec.clone());
    }
    let (sample, n) = reservoir.into_sample();
    let mut estimate = estimate_from_sample(&sample, n, s)?;
    estimate.short_sample = capacity > n;
    Ok(estimate)
}

/// Synthetic stream families. Each plants groups of records that agree on
/// all but one column, so every in-group pair is exactly `(d-1)`-similar,
/// and pads with globally unique records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// 40% unique records; the rest form couples (one similar partner each).
    NearUniform4060,
    /// 20% unique; the rest in groups of 16 (15 similar partners each).
    Skewed2080,
    /// 10% unique; the rest in groups of 81 (80 similar partners each).
    Skewed1090,
    /// Adversarial all-couples stream that random sampling collapses on.
    PlantedCouples,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 4] = [
        SyntheticKind::NearUniform4060,
        SyntheticKind::Skewed2080,
        SyntheticKind::Skewed1090,
        SyntheticKind::PlantedCouples,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::NearUniform4060 => "near_uniform_40_60",
            SyntheticKind::Skewed2080 => "skewed_20_80",
            SyntheticKind::Skewed1090 => "skewed_10_90",
            SyntheticKind::PlantedCouples => "planted_lemma1",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::InvalidParameter {
                param: "kind",
                value: name.to_string(),
                constraint:
                    "known kinds: near_uniform_40_60, skewed_20_80, skewed_10_90, planted_lemma1",
            })
    }

    /// (group count, group size) for a stream of `n` records.
    fn grouping(self, n: u64) -> (u64, u64) {
        match self {
            SyntheticKind::NearUniform4060 => (n * 3 / 10, 2),
            SyntheticKind::Skewed2080 => (n / 20, 16),
            SyntheticKind::Skewed1090 => (n / 90, 81),
            SyntheticKind::PlantedCouples => (n / 2, 2),
        }
    }
}

/// Analytic ground truth of a generated stream, in the same shape the
/// oracle reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticTruth {
    pub kind: String,
    pub n: u64,
    pub d: u32,
    pub seed: u64,
    pub x: BTreeMap<u32, u64>,
    pub g: BTreeMap<u32, u64>,
}

fn truth_from_planted(
    kind: String,
    n: u64,
    d: u32,
    seed: u64,
    planted_pairs: u64,
) -> SyntheticTruth {
    let mut x: BTreeMap<u32, u64> = (1..=d).map(|k| (k, 0)).collect();
    if planted_pairs > 0 {
        x.insert(d - 1, planted_pairs);
    }
    let mut g = BTreeMap::new();
    let mut acc = n;
    for k in (1..=d).rev() {
        acc += x[&k];
        g.insert(k, acc);
    }
    SyntheticTruth {
        kind,
        n,
        d,
        seed,
        x,
        g,
    }
}

/// Distinct-value factory: a bijective mix over a counter keyed off the
/// seed, rendered as a fixed-width 20-digit string (two 10-digit halves of
/// one 64-bit value). Every emitted value in a stream is globally unique,
/// which keeps non-planted columns collision-free and the analytic truth
/// exact.
struct FieldFactory {
    base: u64,
    counter: u64,
}

impl FieldFactory {
    fn new(seed: u64) -> Self {
        FieldFactory {
            base: derive_seed(seed, &[domain::GENERATOR, 1]),
            counter: 0,
        }
    }

    fn fresh_into(&mut self, out: &mut Vec<u8>) {
        let v = mix64(self.base.wrapping_add(self.counter));
        self.counter += 1;
        out.clear();
        let mut s = String::with_capacity(20);
        let _ = write!(s, "{:010}{:010}", (v >> 32) as u32, v as u32);
        out.extend_from_slice(s.as_bytes());
    }
}

/// Callback receiving `(record_index, field_values)` for each record.
pub type RecordSink<'a> = dyn FnMut(u64, &[Vec<u8>]) -> Result<()> + 'a;

/// Streams the records of a synthetic dataset into `emit` without
/// materializing them, and returns the analytic truth. The field buffer
/// passed to `emit` is reused between calls.
pub fn for_each_synthetic_record(
    kind: SyntheticKind,
    n: u64,
    d: u32,
    seed: u64,
    emit: &mut RecordSink<'_>,
) -> Result<SyntheticTruth> {
    if n == 0 {
        return Err(Error::InvalidParameter {
            param: "n",
            value: n.to_string(),
            constraint: "synthetic streams need n >= 1",
        });
    }
    if !(2..=MAX_ARITY).contains(&d) {
        return Err(Error::InvalidParameter {
            param: "d",
            value: d.to_string(),
            constraint: "synthetic streams need 2 <= d <= 65535",
        });
    }
    let (groups, group_size) = kind.grouping(n);
    let uniques = n - groups * group_size;
    let planted_pairs = groups * group_size * (group_size - 1);

    let mut rng = SplitMix64::new(derive_seed(seed, &[domain::GENERATOR, 0]));
    let mut factory = FieldFactory::new(seed);
    let mut fields: Vec<Vec<u8>> = (0..d).map(|_| Vec::new()).collect();
    let mut index = 0u64;

    for _ in 0..groups {
        for slot in fields.iter_mut() {
            factory.fresh_into(slot);
        }
        // All group members agree everywhere except one uniformly chosen
        // column, where each member holds a distinct fresh value; in-group
        // pairs are therefore exactly (d-1)-similar.
        let vary_col = rng.uniform_below(d as u64) as usize;
        emit(index, &fields)?;
        index += 1;
        for _ in 1..group_size {
            factory.fresh_into(&mut fields[vary_col]);
            emit(index, &fields)?;
            index += 1;
        }
    }
    for _ in 0..uniques {
        for slot in fields.iter_mut() {
            factory.fresh_into(slot);
        }
        emit(index, &fields)?;
        index += 1;
    }
    debug_assert_eq!(index, n);

    Ok(truth_from_planted(
        kind.name().to_string(),
        n,
        d,
        seed,
        planted_pairs,
    ))
}

/// Materialized form of [`for_each_synthetic_record`].
pub fn generate_synthetic(
    kind: SyntheticKind,
    n: u64,
    d: u32,
    seed: u64,
) -> Result<(Vec<Record>, SyntheticTruth)> {
    let mut records = Vec::with_capacity(usize::try_from(n).unwrap_or(0));
    let truth = for_each_synthetic_record(kind, n, d, seed, &mut |_, fields| {
        records.push(Record::new(fields.to_vec()));
        Ok(())
    })?;
    Ok((records, truth))
}

/// Truth of a stream concatenated with itself `factor` times: counts below
/// the top level scale by `factor^2`; the top level additionally gains the
/// `n * factor * (factor - 1)` ordered pairs between copies of each record.
pub fn duplicate_expanded_truth(base: &SyntheticTruth, factor: u64) -> Result<SyntheticTruth> {
    if factor == 0 {
        return Err(Error::InvalidParameter {
            param: "factor",
            value: factor.to_string(),
            constraint: "expansion factor must be >= 1",
        });
    }
    let overflow = |what: &str| Error::Overflow {
        what: what.to_string(),
    };
    let n = base
        .n
        .checked_mul(factor)
        .ok_or_else(|| overflow("expanded n"))?;
    let sq = factor
        .checked_mul(factor)
        .ok_or_else(|| overflow("factor^2"))?;
    let mut x = BTreeMap::new();
    for (&k, &v) in &base.x {
        let mut scaled = v.checked_mul(sq).ok_or_else(|| overflow("expanded x"))?;
        if k == base.d {
            let copies = base
                .n
                .checked_mul(factor)
                .and_then(|v| v.checked_mul(factor - 1))
                .ok_or_else(|| overflow("copy pairs"))?;
            scaled = scaled
                .checked_add(copies)
                .ok_or_else(|| overflow("expanded x"))?;
        }
        x.insert(k, scaled);
    }
    let mut g = BTreeMap::new();
    let mut acc = n;
    for k in (1..=base.d).rev() {
        acc = acc
            .checked_add(x[&k])
            .ok_or_else(|| overflow("expanded g"))?;
        g.insert(k, acc);
    }
    Ok(SyntheticTruth {
        kind: format!("{}_dup{}", base.kind, factor),
        n,
        d: base.d,
        seed: base.seed,
        x,
        g,
    })
}

/// Renders a truth sidecar: `key=value` lines covering the generator
/// parameters and the exact per-level counts.
pub fn write_truth_sidecar(truth: &SyntheticTruth) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "kind={}", truth.kind);
    let _ = writeln!(out, "n={}", truth.n);
    let _ = writeln!(out, "d={}", truth.d);
    let _ = writeln!(out, "seed={}", truth.seed);
    for (k, v) in &truth.x {
        let _ = writeln!(out, "x.{k}={v}");
    }
    for (s, v) in &truth.g {
        let _ = writeln!(out, "g.{s}={v}");
    }
    out
}

/// Parses a truth sidecar produced by [`write_truth_sidecar`]. Strict:
/// every key must be known, present exactly once, and the per-level maps
/// must cover `1..=d` exactly.
pub fn parse_truth_sidecar(bytes: &[u8]) -> Result<SyntheticTruth> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Malformed {
        what: "truth sidecar",
        msg: format!("not UTF-8: {e}"),
    })?;
    let bad = |line_no: usize, msg: String| Error::Malformed {
        what: "truth sidecar",
        msg: format!("line {line_no}: {msg}"),
    };
    let mut kind: Option<String> = None;
    let mut n: Option<u64> = None;
    let mut d: Option<u32> = None;
    let mut seed: Option<u64> = None;
    let mut x: BTreeMap<u32, u64> = BTreeMap::new();
    let mut g: BTreeMap<u32, u64> = BTreeMap::new();

    for (ix, line) in text.lines().enumerate() {
        let line_no = ix + 1;
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(line_no, "expected key=value".to_string()))?;
        let parse_u64 = |line_no: usize| -> Result<u64> {
            value
                .parse::<u64>()
                .map_err(|_| bad(line_no, format!("invalid integer {value:?}")))
        };
        let set_level = |map: &mut BTreeMap<u32, u64>, level: &str| -> Result<()> {
            let level: u32 = level
                .parse()
                .map_err(|_| bad(line_no, format!("invalid level {level:?}")))?;
            if level == 0 || level > MAX_ARITY {
                return Err(bad(line_no, format!("level {level} out of range")));
            }
            if map.insert(level, parse_u64(line_no)?).is_some() {
                return Err(bad(line_no, format!("duplicate key {key:?}")));
            }
            Ok(())
        };
        match key {
            "kind" => {
                if kind.replace(value.to_string()).is_some() {
                    return Err(bad(line_no, "duplicate key \"kind\"".to_string()));
                }
            }
            "n" => {
                if n.replace(parse_u64(line_no)?).is_some() {
                    return Err(bad(line_no, "duplicate key \"n\"".to_string()));
                }
            }
            "d" => {
                let v = parse_u64(line_no)?;
                let v = u32::try_from(v)
                    .ok()
                    .filter(|&v| (1..=MAX_ARITY).contains(&v))
                    .ok_or_else(|| bad(line_no, format!("arity {v} out of range")))?;
                if d.replace(v).is_some() {
                    return Err(bad(line_no, "duplicate key \"d\"".to_string()));
                }
            }
            "seed" => {
                if seed.replace(parse_u64(line_no)?).is_some() {
                    return Err(bad(line_no, "duplicate key \"seed\"".to_string()));
                }
            }
            _ => {
                if let Some(level) = key.strip_prefix("x.") {
                    set_level(&mut x, level)?;
                } else if let Some(level) = key.strip_prefix("g.") {
                    set_level(&mut g, level)?;
                } else {
                    return Err(bad(line_no, format!("unknown key {key:?}")));
                }
            }
        }
    }

    let missing = |what: &str| Error::Malformed {
        what: "truth sidecar",
        msg: format!("missing key {what:?}"),
    };
    let kind = kind.ok_or_else(|| missing("kind"))?;
    let n = n.ok_or_else(|| missing("n"))?;
    let d = d.ok_or_else(|| missing("d"))?;
    let seed = seed.ok_or_else(|| missing("seed"))?;
    for (name, map) in [("x", &x), ("g", &g)] {
        for k in 1..=d {
            if !map.contains_key(&k) {
                return Err(missing(&format!("{name}.{k}")));
            }
        }
        if map.len() != d as usize {
            return Err(Error::Malformed {
                what: "truth sidecar",
                msg: format!("{name} holds levels outside 1..={d}"),
            });
        }
    }
    Ok(SyntheticTruth {
        kind,
        n,
        d,
        seed,
        x,
        g,
    })
}
