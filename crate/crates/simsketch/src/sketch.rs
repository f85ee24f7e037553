//! Fast-AGMS sketch: `depth_t` rows of `width_w` signed 64-bit counters.
//!
//! Each inserted fingerprint updates one counter per row: the bucket comes
//! from a 4-universal hash, the added value from an independent 4-universal
//! sign hash. Row estimates of the second frequency moment (or of the inner
//! product of two streams) are combined across rows by the lower median, or
//! by the mean when configured. One row estimate has variance at most
//! `2 * F2^2 / width_w`.
//!
//! Sketches are linear: merging two sketches of disjoint substreams equals
//! the sketch of the concatenated stream, counter for counter. All row seeds
//! derive from `(master_seed, level_k, row, purpose)`, so two sketches built
//! from the same master seed, level, and shape are always mergeable and
//! comparable.

use crate::hashing::{hash4_bucket, hash4_sign, Hash4Seed, Purpose};
use crate::{Error, Result};

/// Hard cap on `width_w * depth_t`, bounding decode-time allocation.
pub const MAX_COUNTERS: u64 = 1 << 26;

const BLOB_MAGIC: [u8; 4] = *b"FAGS";
const BLOB_VERSION: u16 = 1;
/// magic + version + width + depth + level + aggregation + master + items.
const BLOB_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 1 + 8 + 8;

/// How row estimates are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Lower median across rows (default; robust to outlier rows).
    Median,
    /// Arithmetic mean across rows.
    Mean,
}

impl Aggregation {
    fn to_byte(self) -> u8 {
        match self {
            Aggregation::Median => 0,
            Aggregation::Mean => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Aggregation::Median),
            1 => Ok(Aggregation::Mean),
            other => Err(Error::Malformed {
                what: "sketch blob",
                msg: format!("unknown aggregation byte {other}"),
            }),
        }
    }
}

/// Lower median: for even length the smaller of the two middle elements.
pub(crate) fn lower_median(xs: &mut [f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    xs.sort_by(f64::total_cmp);
    xs[(xs.len() - 1) / 2]
}

#[derive(Debug, Clone)]
pub struct FastAgmsSketch {
    width_w: u32,
    depth_t: u32,
    level_k: u32,
    master_seed: u64,
    aggregation: Aggregation,
    items_inserted: u64,
    /// Row-major: `counters[row * width_w + bucket]`.
    counters: Vec<i64>,
    bucket_seeds: Vec<Hash4Seed>,
    sign_seeds: Vec<Hash4Seed>,
}

impl FastAgmsSketch {
    pub fn new(width_w: u32, depth_t: u32, level_k: u32, master_seed: u64) -> Result<Self> {
        if width_w == 0 {
            return Err(Error::InvalidParameter {
                param: "width_w",
                value: width_w.to_string(),
                constraint: "sketch width must be >= 1",
            });
        }
        if depth_t == 0 {
            return Err(Error::InvalidParameter {
                param: "depth_t",
                value: depth_t.to_string(),
                constraint: "sketch depth must be >= 1",
            });
        }
        let cells = width_w as u64 * depth_t as u64;
        if cells > MAX_COUNTERS {
            return Err(Error::ResourceCap {
                what: "sketch counters",
                limit: MAX_COUNTERS,
                actual: cells,
            });
        }
        let bucket_seeds = (0..depth_t)
            .map(|row| Hash4Seed::derive(master_seed, level_k, row, Purpose::Bucket))
            .collect();
        let sign_seeds = (0..depth_t)
            .map(|row| Hash4Seed::derive(master_seed, level_k, row, Purpose::Sign))
            .collect();
        Ok(FastAgmsSketch {
            width_w,
            depth_t,
            level_k,
            master_seed,
            aggregation: Aggregation::Median,
            items_inserted: 0,
            counters: vec![0i64; cells as usize],
            bucket_seeds,
            sign_seeds,
        })
    }

    pub fn width(&self) -> u32 {
        self.width_w
    }

    pub fn depth(&self) -> u32 {
        self.depth_t
    }

    pub fn level_k(&self) -> u32 {
        self.level_k
    }

    pub fn items_inserted(&self) -> u64 {
        self.items_inserted
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn set_aggregation(&mut self, aggregation: Aggregation) {
        self.aggregation = aggregation;
    }

    /// Adds one occurrence of `fingerprint`. Counters cannot overflow before
    /// 2^62 insertions, so the hot path is unchecked.
    #[inline]
    pub fn insert(&mut self, fingerprint: u64) {
        let w = self.width_w as usize;
        for row in 0..self.depth_t as usize {
            let b = hash4_bucket(&self.bucket_seeds[row], fingerprint, self.width_w) as usize;
            let s = hash4_sign(&self.sign_seeds[row], fingerprint);
            self.counters[row * w + b] += s;
        }
        self.items_inserted += 1;
    }

    fn row_f2s(&self) -> Vec<f64> {
        let w = self.width_w as usize;
        (0..self.depth_t as usize)
            .map(|row| {
                let mut acc: u128 = 0;
                for &c in &self.counters[row * w..(row + 1) * w] {
                    let c = c as i128;
                    acc += (c * c) as u128;
                }
                acc as f64
            })
            .collect()
    }

    fn aggregate(&self, mut rows: Vec<f64>) -> f64 {
        match self.aggregation {
            Aggregation::Median => lower_median(&mut rows),
            Aggregation::Mean => rows.iter().sum::<f64>() / rows.len() as f64,
        }
    }

    /// Estimate of the second frequency moment of the inserted stream.
    pub fn estimate_f2(&self) -> f64 {
        self.aggregate(self.row_f2s())
    }

    fn check_compatible(&self, other: &Self, op: &str) -> Result<()> {
        if self.width_w != other.width_w
            || self.depth_t != other.depth_t
            || self.level_k != other.level_k
            || self.master_seed != other.master_seed
            || self.aggregation != other.aggregation
        {
            return Err(Error::Incompatible {
                what: format!(
                    "{op} requires identical shape and seeds: \
                     ({}x{}, level {}, seed {}) vs ({}x{}, level {}, seed {})",
                    self.width_w,
                    self.depth_t,
                    self.level_k,
                    self.master_seed,
                    other.width_w,
                    other.depth_t,
                    other.level_k,
                    other.master_seed,
                ),
            });
        }
        Ok(())
    }

    /// Estimate of the inner product of the two sketched frequency vectors.
    pub fn inner_product(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other, "inner_product")?;
        let w = self.width_w as usize;
        let rows = (0..self.depth_t as usize)
            .map(|row| {
                let mut acc: i128 = 0;
                for (a, b) in self.counters[row * w..(row + 1) * w]
                    .iter()
                    .zip(&other.counters[row * w..(row + 1) * w])
                {
                    acc += *a as i128 * *b as i128;
                }
                acc as f64
            })
            .collect();
        Ok(self.aggregate(rows))
    }

    /// Adds `other` counter-wise; equivalent to having inserted both streams
    /// into one sketch.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        self.check_compatible(other, "merge")?;
        for (a, &b) in self.counters.iter_mut().zip(&other.counters) {
            *a = a.checked_add(b).ok_or_else(|| Error::Overflow {
                what: "merged sketch counter".to_string(),
            })?;
        }
        self.items_inserted = self
            .items_inserted
            .checked_add(other.items_inserted)
            .ok_or_else(|| Error::Overflow {
                what: "merged item count".to_string(),
            })?;
        Ok(())
    }

    /// Serializes to the versioned binary format: magic, version, width,
    /// depth, level, aggregation, master seed, item count, then counters
    /// row-major as little-endian 64-bit words.
    pub fn encode_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BLOB_HEADER_LEN + 8 * self.counters.len());
        out.extend_from_slice(&BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&self.width_w.to_le_bytes());
        out.extend_from_slice(&self.depth_t.to_le_bytes());
        out.extend_from_slice(&self.level_k.to_le_bytes());
        out.push(self.aggregation.to_byte());
        out.extend_from_slice(&self.master_seed.to_le_bytes());
        out.extend_from_slice(&self.items_inserted.to_le_bytes());
        for &c in &self.counters {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Decodes a blob produced by [`Self::encode_blob`]. Rejects unknown magic or
    /// version, oversized shapes, and any length mismatch; row seeds are
    /// rederived from the embedded master seed and level.
    pub fn decode_blob(blob: &[u8]) -> Result<Self> {
        let malformed = |msg: String| Error::Malformed {
            what: "sketch blob",
            msg,
        };
        if blob.len() < BLOB_HEADER_LEN {
            return Err(malformed(format!(
                "{} bytes is shorter than the {BLOB_HEADER_LEN}-byte header",
                blob.len()
            )));
        }
        if blob[0..4] != BLOB_MAGIC {
            return Err(malformed("bad magic".to_string()));
        }
        let version = u16::from_le_bytes(blob[4..6].try_into().unwrap());
        if version != BLOB_VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        let width_w = u32::from_le_bytes(blob[6..10].try_into().unwrap());
        let depth_t = u32::from_le_bytes(blob[10..14].try_into().unwrap());
        let level_k = u32::from_le_bytes(blob[14..18].try_into().unwrap());
        let aggregation = Aggregation::from_byte(blob[18])?;
        let master_seed = u64::from_le_bytes(blob[19..27].try_into().unwrap());
        let items_inserted = u64::from_le_bytes(blob[27..35].try_into().unwrap());
        let mut sketch = FastAgmsSketch::new(width_w, depth_t, level_k, master_seed)?;
        sketch.aggregation = aggregation;
        sketch.items_inserted = items_inserted;
        let cells = width_w as usize * depth_t as usize;
        let expect_len = BLOB_HEADER_LEN + 8 * cells;
        if blob.len() != expect_len {
            return Err(malformed(format!(
                "length {} does not match header shape (want {expect_len})",
                blob.len()
            )));
        }
        for (i, c) in sketch.counters.iter_mut().enumerate() {
            let at = BLOB_HEADER_LEN + 8 * i;
            *c = i64::from_le_bytes(blob[at..at + 8].try_into().unwrap());
        }
        Ok(sketch)
    }

    #[cfg(test)]
    pub(crate) fn counters(&self) -> &[i64] {
        &self.counters
    }
}
