//! Exact integer combinatorics: binomial coefficients, lexicographic
//! combination unranking and enumeration, and the alternating binomial sum
//! used to validate the closed-form solver.
//!
//! All arithmetic is exact; any overflow of the 128-bit working type is
//! reported as an error, never wrapped.

use crate::{Error, Result};

/// Enumeration ceiling for [`enumerate_combinations`]: a level with more
/// combinations than this cannot be materialized.
pub const MAX_ENUMERATED_COMBINATIONS: u64 = 1 << 22;

/// One column combination: `indices` is strictly increasing, each `< d`,
/// with `indices.len() == level_k` and `rank` its position in lexicographic
/// order among all size-`level_k` combinations.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ColumnCombination {
    pub level_k: u32,
    pub indices: Vec<u32>,
    pub rank: u64,
}

/// Binomial coefficient C(n, k), exact. Returns 0 when `k > n`.
pub fn choose(n: u64, k: u64) -> Result<u128> {
    if k > n {
        return Ok(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k {
        // Exact at every step: acc = C(n-k+i-1, i-1), so after cancelling
        // gcd(num, i) the residual divisor divides acc. Dividing before
        // multiplying keeps the intermediate at exactly C(n-k+i, i), so the
        // overflow check fires only when the result itself cannot fit.
        let num = (n - k + i) as u128;
        let div = i as u128;
        let g = gcd(num, div);
        acc = (acc / (div / g))
            .checked_mul(num / g)
            .ok_or_else(|| Error::Overflow {
                what: format!("C({n}, {k})"),
            })?;
    }
    Ok(acc)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// The combination of size `k` over `0..d` at lexicographic `rank`.
///
/// Fails if `rank >= C(d, k)`.
pub fn unrank_combination(d: u32, k: u32, rank: u64) -> Result<Vec<u32>> {
    let mut indices = Vec::with_capacity(k as usize);
    unrank_combination_into(d, k, rank, &mut indices)?;
    Ok(indices)
}

/// [`unrank_combination`] into a caller-owned buffer (cleared first), for
/// per-record hot paths.
pub fn unrank_combination_into(d: u32, k: u32, rank: u64, out: &mut Vec<u32>) -> Result<()> {
    let total = choose(d as u64, k as u64)?;
    if (rank as u128) >= total {
        return Err(Error::InvalidParameter {
            param: "rank",
            value: rank.to_string(),
            constraint: "rank must be < C(d, k)",
        });
    }
    out.clear();
    let mut remaining = rank as u128;
    let mut next = 0u32;
    for slot in 0..k {
        // Combinations starting at `next` number C(d - next - 1, k - slot - 1).
        let tail = (k - slot - 1) as u64;
        loop {
            let here = choose((d - next - 1) as u64, tail)?;
            if remaining < here {
                out.push(next);
                next += 1;
                break;
            }
            remaining -= here;
            next += 1;
        }
    }
    Ok(())
}

/// All size-`k` combinations over `0..d` in lexicographic order; the `i`-th
/// element has `rank == i`.
pub fn enumerate_combinations(d: u32, k: u32) -> Result<Vec<ColumnCombination>> {
    let total = choose(d as u64, k as u64)?;
    if total > MAX_ENUMERATED_COMBINATIONS as u128 {
        return Err(Error::ResourceCap {
            what: "combinations per level",
            limit: MAX_ENUMERATED_COMBINATIONS,
            actual: u64::try_from(total).unwrap_or(u64::MAX),
        });
    }
    let total = total as u64;
    let mut out = Vec::with_capacity(total as usize);
    if total == 0 {
        return Ok(out);
    }
    let mut current: Vec<u32> = (0..k).collect();
    for rank in 0..total {
        out.push(ColumnCombination {
            level_k: k,
            indices: current.clone(),
            rank,
        });
        // Lexicographic successor: bump the rightmost index that has room.
        let mut i = k as usize;
        while i > 0 {
            i -= 1;
            if current[i] < d - (k - i as u32) {
                current[i] += 1;
                for j in i + 1..k as usize {
                    current[j] = current[j - 1] + 1;
                }
                break;
            }
        }
    }
    Ok(out)
}

/// `sum_{j=k}^{i} (-1)^(i-j) * C(i-k+1, j-k+1)`, exactly.
///
/// Equals `(-1)^(i-k)` for every `i >= k`; the solver correctness argument
/// rests on that identity and the test suite pins it.
pub fn alternating_binomial_sum(i: u32, k: u32) -> Result<i128> {
    if i < k {
        return Err(Error::InvalidParameter {
            param: "i",
            value: i.to_string(),
            constraint: "requires i >= k",
        });
    }
    let m = (i - k + 1) as u64;
    let mut acc: i128 = 0;
    for j in k..=i {
        let c = choose(m, (j - k + 1) as u64)?;
        let c = i128::try_from(c).map_err(|_| Error::Overflow {
            what: format!("alternating sum term C({m}, {})", j - k + 1),
        })?;
        if (i - j).is_multiple_of(2) {
            acc += c;
        } else {
            acc -= c;
        }
    }
    Ok(acc)
}
