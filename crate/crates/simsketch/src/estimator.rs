//! The one-pass pipeline: per-level stores over sampled sub-values, the
//! lattice-correction solvers recovering exactly-`k`-similar pair counts,
//! join estimation, theoretical variance bounds, and parameter suggestion.
//!
//! Per record and level `k` in `s..=d`, sampled sub-value fingerprints are
//! fed to the level's store: a Fast-AGMS sketch (online mode) or an exact
//! frequency map (offline mode). At any point the per-level self-join sizes
//! `Y_s..Y_d` can be read and the triangular system
//!
//! ```text
//! X_k = (Y_k - r * C(d,k) * n) / r^2  -  sum_{j=k+1}^{d} C(j,k) * X_j
//! ```
//!
//! solved downward from `k = d` recovers the ordered exactly-`k`-similar
//! pair counts. The self-join size estimate is `G_s = sum X_k + n`.
//!
//! The solver works in true scale throughout: each `X_k` is fully descaled
//! before lower levels consume it, and negative intermediate estimates are
//! clamped to zero immediately after computation when requested. Clamping
//! defaults on for reported estimates but biases the estimator, so
//! statistical verification runs switch it off.

use crate::combinatorics::choose;
use crate::hashing::{derive_seed, domain, fingerprint, validate_ratio, SplitMix64};
use crate::sketch::{Aggregation, FastAgmsSketch};
use crate::subvalues::{encode_subvalue_into, validate_levels, LevelSampler, Record};
use crate::{Error, Result};
use std::collections::{BTreeMap, HashMap};

/// How per-level self-join sizes are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Fast-AGMS sketches; memory independent of the stream.
    OnlineSketch,
    /// Exact fingerprint frequency maps; memory grows with distinct
    /// sub-values.
    OfflineExact,
}

/// Full estimator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SjpcConfig {
    /// Record arity.
    pub d: u32,
    /// Similarity threshold, `1 <= s <= d`.
    pub s: u32,
    /// Per-combination sampling ratio, `0 < r <= 1`.
    pub r: f64,
    /// Sketch width (online mode).
    pub w: u32,
    /// Sketch depth (online mode).
    pub t: u32,
    /// Root of every seed derivation in the run.
    pub master_seed: u64,
    /// Floor negative intermediate pair counts at zero.
    pub clamp_negative: bool,
    pub mode: Mode,
    /// Row aggregation of the sketch estimates.
    pub aggregation: Aggregation,
}

impl SjpcConfig {
    pub fn validate(&self) -> Result<()> {
        validate_levels(self.d, self.s)?;
        validate_ratio(self.r)?;
        if self.mode == Mode::OnlineSketch && (self.w == 0 || self.t == 0) {
            return Err(Error::InvalidParameter {
                param: "w",
                value: format!("w={} t={}", self.w, self.t),
                constraint: "online mode requires sketch width and depth >= 1",
            });
        }
        Ok(())
    }
}

/// Variance bounds evaluated at the estimated self-join size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceBounds {
    pub offline: f64,
    pub online: f64,
}

/// Finalized estimate. `pair_count` is the similar-pair total
/// `sum_{k=s}^{d} X_k`; `g_s = pair_count + n` adds the self-pairs.
/// For join estimates `n` is 0 and `g_s` equals the join size.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub y: BTreeMap<u32, f64>,
    pub x: BTreeMap<u32, f64>,
    pub pair_count: f64,
    pub g_s: f64,
    pub n: u64,
    /// Present when `g_s > 0`; bounds are undefined otherwise.
    pub bounds: Option<VarianceBounds>,
}

enum LevelStore {
    Sketch(FastAgmsSketch),
    Exact(HashMap<u64, u64>),
}

struct Level {
    sampler: LevelSampler,
    store: LevelStore,
}

/// Streaming estimator state: one sampler and one store per level `s..=d`.
pub struct SjpcState {
    config: SjpcConfig,
    /// Distinguishes the sampling streams of join operands; same-index
    /// records in different streams must sample independently.
    stream_tag: u64,
    n: u64,
    fingerprint_seed: u64,
    levels: Vec<Level>,
    ranks_buf: Vec<u64>,
    indices_buf: Vec<u32>,
    encode_buf: Vec<u8>,
}

impl SjpcState {
    pub fn new(config: SjpcConfig) -> Result<Self> {
        Self::with_stream_tag(config, 0)
    }

    /// A state for one operand of a join; operands must use distinct tags.
    pub fn with_stream_tag(config: SjpcConfig, stream_tag: u64) -> Result<Self> {
        config.validate()?;
        let mut levels = Vec::with_capacity((config.d - config.s + 1) as usize);
        for k in config.s..=config.d {
            let sampler = LevelSampler::new(config.d, k, config.r)?;
            let store = match config.mode {
                Mode::OnlineSketch => {
                    let mut sk = FastAgmsSketch::new(config.w, config.t, k, config.master_seed)?;
                    sk.set_aggregation(config.aggregation);
                    LevelStore::Sketch(sk)
                }
                Mode::OfflineExact => LevelStore::Exact(HashMap::new()),
            };
            levels.push(Level { sampler, store });
        }
        let fingerprint_seed = derive_seed(config.master_seed, &[domain::FINGERPRINT]);
        Ok(SjpcState {
            config,
            stream_tag,
            n: 0,
            fingerprint_seed,
            levels,
            ranks_buf: Vec::new(),
            indices_buf: Vec::new(),
            encode_buf: Vec::new(),
        })
    }

    pub fn config(&self) -> &SjpcConfig {
        &self.config
    }

    pub fn records_processed(&self) -> u64 {
        self.n
    }

    pub fn stream_tag(&self) -> u64 {
        self.stream_tag
    }

    /// Feeds one record. Strictly one-pass: per-record work is proportional
    /// to the number of sampled combinations.
    pub fn process_record(&mut self, rec: &Record) -> Result<()> {
        self.process_fields(&rec.values)
    }

    /// [`process_record`](Self::process_record) over borrowed field slices.
    pub fn process_fields<F: AsRef<[u8]>>(&mut self, fields: &[F]) -> Result<()> {
        self.process_fields_at(self.n, fields)
    }

    /// Processing with an explicit global record index, for partitioned
    /// input: the index alone determines the record's sampling randomness,
    /// so any partitioning of a stream reproduces the unpartitioned run.
    pub fn process_fields_at<F: AsRef<[u8]>>(&mut self, index: u64, fields: &[F]) -> Result<()> {
        if fields.len() != self.config.d as usize {
            return Err(Error::Arity {
                expected: self.config.d as usize,
                got: fields.len(),
                record_index: index,
            });
        }
        let mut rng = SplitMix64::new(derive_seed(
            self.config.master_seed,
            &[domain::SAMPLE, self.stream_tag, index],
        ));
        // Levels ascending; the per-level draw order is fixed by the sampler.
        for level in self.levels.iter_mut() {
            level
                .sampler
                .sample_ranks_into(&mut rng, &mut self.ranks_buf);
            for &rank in &self.ranks_buf {
                level.sampler.unrank_into(rank, &mut self.indices_buf)?;
                self.encode_buf.clear();
                encode_subvalue_into(
                    &mut self.encode_buf,
                    level.sampler.level_k,
                    rank,
                    &self.indices_buf,
                    fields,
                )?;
                let fp = fingerprint(self.fingerprint_seed, &self.encode_buf);
                match &mut level.store {
                    LevelStore::Sketch(sk) => sk.insert(fp),
                    LevelStore::Exact(map) => *map.entry(fp).or_insert(0) += 1,
                }
            }
        }
        self.n += 1;
        Ok(())
    }

    /// Current estimate of the level-`k` sub-value self-join size `Y_k`.
    pub fn estimate_level(&self, k: u32) -> Result<f64> {
        if k < self.config.s || k > self.config.d {
            return Err(Error::InvalidParameter {
                param: "k",
                value: k.to_string(),
                constraint: "level must lie in s..=d",
            });
        }
        let level = &self.levels[(k - self.config.s) as usize];
        Ok(match &level.store {
            LevelStore::Sketch(sk) => sk.estimate_f2(),
            LevelStore::Exact(map) => {
                let mut acc: u128 = 0;
                for &c in map.values() {
                    acc += (c as u128) * (c as u128);
                }
                acc as f64
            }
        })
    }

    /// Solves for the pair counts and assembles the report. The state stays
    /// usable: more records may be processed and finalize called again
    /// (continuous-query use).
    pub fn finalize(&self) -> Result<EstimateReport> {
        let cfg = &self.config;
        let mut y = BTreeMap::new();
        for k in cfg.s..=cfg.d {
            y.insert(k, self.estimate_level(k)?);
        }
        let x = solve_pair_counts(&y, cfg.d, cfg.s, self.n, cfg.r, cfg.clamp_negative)?;
        report_from_counts(y, x, self.n, cfg)
    }

    /// Merges a partition processed under an identical configuration and
    /// stream tag. Additive and order-independent.
    pub fn merge(&mut self, other: &SjpcState) -> Result<()> {
        if self.config != other.config || self.stream_tag != other.stream_tag {
            return Err(Error::Incompatible {
                what: "merge requires identical estimator configurations and stream tags"
                    .to_string(),
            });
        }
        for (mine, theirs) in self.levels.iter_mut().zip(&other.levels) {
            match (&mut mine.store, &theirs.store) {
                (LevelStore::Sketch(a), LevelStore::Sketch(b)) => a.merge(b)?,
                (LevelStore::Exact(a), LevelStore::Exact(b)) => {
                    for (&fp, &c) in b {
                        *a.entry(fp).or_insert(0) += c;
                    }
                }
                _ => unreachable!("mode equality is part of config equality"),
            }
        }
        self.n += other.n;
        Ok(())
    }

    /// Estimated count of counter cells held by the per-level stores
    /// (online mode); exact-map sizes are not included.
    pub fn counter_cells(&self) -> u64 {
        self.levels
            .iter()
            .map(|l| match &l.store {
                LevelStore::Sketch(sk) => sk.width() as u64 * sk.depth() as u64,
                LevelStore::Exact(_) => 0,
            })
            .sum()
    }
}

fn report_from_counts(
    y: BTreeMap<u32, f64>,
    x: BTreeMap<u32, f64>,
    n: u64,
    cfg: &SjpcConfig,
) -> Result<EstimateReport> {
    let pair_count: f64 = x.values().sum();
    let g_s = pair_count + n as f64;
    let bounds = if g_s > 0.0 {
        Some(VarianceBounds {
            offline: variance_bound_offline(cfg.d, cfg.s, cfg.r, g_s)?,
            online: variance_bound_online(cfg.d, cfg.s, cfg.r, cfg.w.max(1), n, g_s)?,
        })
    } else {
        None
    };
    Ok(EstimateReport {
        y,
        x,
        pair_count,
        g_s,
        n,
        bounds,
    })
}

/// Cross-stream join finalization: per-level `Y_k` comes from the inner
/// product of the two operands' level stores, and the solver variant without
/// the self-pair term recovers cross pair counts. The report's `n` is 0 and
/// `g_s` equals the join size `sum_{k=s}^{d} X_k`.
///
/// Operands must share the full configuration but carry distinct stream
/// tags, so that same-index records sampled their combinations
/// independently.
pub fn sjpc_join_finalize(a: &SjpcState, b: &SjpcState) -> Result<EstimateReport> {
    if a.config != b.config {
        return Err(Error::Incompatible {
            what: "join requires identical estimator configurations".to_string(),
        });
    }
    if a.stream_tag == b.stream_tag {
        return Err(Error::Incompatible {
            what: "join operands must be built with distinct stream tags".to_string(),
        });
    }
    let cfg = &a.config;
    let mut y = BTreeMap::new();
    for k in cfg.s..=cfg.d {
        let ix = (k - cfg.s) as usize;
        let yk = match (&a.levels[ix].store, &b.levels[ix].store) {
            (LevelStore::Sketch(sa), LevelStore::Sketch(sb)) => sa.inner_product(sb)?,
            (LevelStore::Exact(ma), LevelStore::Exact(mb)) => {
                let (small, large) = if ma.len() <= mb.len() {
                    (ma, mb)
                } else {
                    (mb, ma)
                };
                let mut acc: u128 = 0;
                for (fp, &c) in small {
                    if let Some(&c2) = large.get(fp) {
                        acc += c as u128 * c2 as u128;
                    }
                }
                acc as f64
            }
            _ => unreachable!("mode equality is part of config equality"),
        };
        y.insert(k, yk);
    }
    let x = join_solve_pair_counts(&y, cfg.d, cfg.s, cfg.r, cfg.clamp_negative)?;
    let pair_count: f64 = x.values().sum();
    Ok(EstimateReport {
        y,
        x,
        pair_count,
        g_s: pair_count,
        n: 0,
        bounds: None,
    })
}

/// Free-function form of [`SjpcState::process_record`].
pub fn sjpc_process_record(state: &mut SjpcState, rec: &Record) -> Result<()> {
    state.process_record(rec)
}

/// Free-function form of [`SjpcState::estimate_level`].
pub fn sketch_estimate_level(state: &SjpcState, k: u32) -> Result<f64> {
    state.estimate_level(k)
}

/// Free-function form of [`SjpcState::finalize`].
pub fn sjpc_finalize(state: &SjpcState) -> Result<EstimateReport> {
    state.finalize()
}

fn check_levels_present(y: &BTreeMap<u32, f64>, d: u32, s: u32) -> Result<()> {
    for k in s..=d {
        if !y.contains_key(&k) {
            return Err(Error::InvalidParameter {
                param: "y",
                value: k.to_string(),
                constraint: "y must be defined for every level in s..=d",
            });
        }
    }
    Ok(())
}

/// Downward triangular solve for the ordered exactly-`k`-similar pair
/// counts, in true scale:
/// `X_k = (Y_k - r*C(d,k)*n)/r^2 - sum_{j=k+1}^{d} C(j,k)*X_j`.
/// With `clamp_negative`, each `X_k` is floored at zero immediately after
/// computation, before lower levels consume it.
pub fn solve_pair_counts(
    y: &BTreeMap<u32, f64>,
    d: u32,
    s: u32,
    n: u64,
    r: f64,
    clamp_negative: bool,
) -> Result<BTreeMap<u32, f64>> {
    validate_levels(d, s)?;
    validate_ratio(r)?;
    check_levels_present(y, d, s)?;
    let mut x = BTreeMap::new();
    for k in (s..=d).rev() {
        let cdk = choose(d as u64, k as u64)? as f64;
        let mut v = (y[&k] - r * cdk * n as f64) / (r * r);
        for j in k + 1..=d {
            v -= choose(j as u64, k as u64)? as f64 * x[&j];
        }
        if clamp_negative && v < 0.0 {
            v = 0.0;
        }
        x.insert(k, v);
    }
    Ok(x)
}

/// Non-recursive alternating-sum form of the solver:
/// `X_k = (1/r^2) sum_{j=k}^{d} (-1)^(j-k) C(j,k) Y_j + C_k`, where the
/// constant is `C_d = -n/r` at the top level and zero below it. Equals the
/// unclamped recursion exactly (up to rounding).
pub fn solve_pair_counts_closed_form(
    y: &BTreeMap<u32, f64>,
    d: u32,
    s: u32,
    n: u64,
    r: f64,
) -> Result<BTreeMap<u32, f64>> {
    validate_levels(d, s)?;
    validate_ratio(r)?;
    check_levels_present(y, d, s)?;
    let mut x = BTreeMap::new();
    for k in s..=d {
        let mut acc = 0.0;
        for j in k..=d {
            let c = choose(j as u64, k as u64)? as f64;
            let term = c * y[&j];
            if (j - k) % 2 == 0 {
                acc += term;
            } else {
                acc -= term;
            }
        }
        let mut v = acc / (r * r);
        if k == d {
            v -= n as f64 / r;
        }
        x.insert(k, v);
    }
    Ok(x)
}

/// Join variant of the solver: no self-pair term,
/// `X_k = Y_k/r^2 - sum_{j=k+1}^{d} C(j,k)*X_j`.
pub fn join_solve_pair_counts(
    y: &BTreeMap<u32, f64>,
    d: u32,
    s: u32,
    r: f64,
    clamp_negative: bool,
) -> Result<BTreeMap<u32, f64>> {
    validate_levels(d, s)?;
    validate_ratio(r)?;
    check_levels_present(y, d, s)?;
    let mut x = BTreeMap::new();
    for k in (s..=d).rev() {
        let mut v = y[&k] / (r * r);
        for j in k + 1..=d {
            v -= choose(j as u64, k as u64)? as f64 * x[&j];
        }
        if clamp_negative && v < 0.0 {
            v = 0.0;
        }
        x.insert(k, v);
    }
    Ok(x)
}

fn validate_g(g_s: f64) -> Result<()> {
    if !(g_s.is_finite() && g_s > 0.0) {
        return Err(Error::InvalidParameter {
            param: "g_s",
            value: g_s.to_string(),
            constraint: "variance bounds require g_s > 0",
        });
    }
    Ok(())
}

/// Theoretical bound on `var[G_s/g_s]` with exact per-level `Y_k`
/// (offline): `C(d,s)^2 * (1/r) * C(2(d-s), d-s) / g_s`.
///
/// Caveat: the bound's derivation treats the contributions of distinct
/// similar pairs as uncorrelated. Data with large clusters of
/// near-duplicate records (many similar pairs sharing both a record and a
/// combination) correlates them positively, and the empirical variance can
/// then exceed this value at small `r`. Treat it as a scale indicator, not
/// a hard guarantee, on heavily clustered inputs.
pub fn variance_bound_offline(d: u32, s: u32, r: f64, g_s: f64) -> Result<f64> {
    validate_levels(d, s)?;
    validate_ratio(r)?;
    validate_g(g_s)?;
    let cds = choose(d as u64, s as u64)? as f64;
    let central = choose(2 * (d - s) as u64, (d - s) as u64)? as f64;
    Ok(cds * cds * central / (r * g_s))
}

/// Theoretical bound on `var[G_s/g_s]` with depth-1 sketched `Y_k`
/// (online):
/// `C(d,s)^2 * (1/r) * C(2(d-s), d-s) * ((1+2/w)/g_s + (2/w)(1 + n/(r*g_s))^2)`.
/// The same clustered-data caveat as [`variance_bound_offline`] applies.
pub fn variance_bound_online(d: u32, s: u32, r: f64, w: u32, n: u64, g_s: f64) -> Result<f64> {
    validate_levels(d, s)?;
    validate_ratio(r)?;
    validate_g(g_s)?;
    if w == 0 {
        return Err(Error::InvalidParameter {
            param: "w",
            value: w.to_string(),
            constraint: "sketch width must be >= 1",
        });
    }
    let cds = choose(d as u64, s as u64)? as f64;
    let central = choose(2 * (d - s) as u64, (d - s) as u64)? as f64;
    let w = w as f64;
    let tail = (1.0 + 2.0 / w) / g_s + (2.0 / w) * (1.0 + n as f64 / (r * g_s)).powi(2);
    Ok(cds * cds * central / r * tail)
}

/// Suggested `(r, t)` to keep the selectivity estimate within `epsilon` of
/// the truth with probability `1 - lambda`:
/// `r = min(1, 64/(epsilon^2 w) * C(d,s)^2 * C(2(d-s), d-s))` and
/// `t = max(1, ceil(2 ln(1/lambda)))` independent repetitions combined by
/// median. When `r` saturates at 1 the error target may additionally
/// require a larger sketch width.
pub fn suggest_parameters(epsilon: f64, lambda: f64, d: u32, s: u32, w: u32) -> Result<(f64, u32)> {
    validate_levels(d, s)?;
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParameter {
            param: "epsilon",
            value: epsilon.to_string(),
            constraint: "error target must be positive",
        });
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidParameter {
            param: "lambda",
            value: lambda.to_string(),
            constraint: "failure probability must lie in (0, 1)",
        });
    }
    if w == 0 {
        return Err(Error::InvalidParameter {
            param: "w",
            value: w.to_string(),
            constraint: "sketch width must be >= 1",
        });
    }
    let cds = choose(d as u64, s as u64)? as f64;
    let central = choose(2 * (d - s) as u64, (d - s) as u64)? as f64;
    let r = (64.0 / (epsilon * epsilon * w as f64) * cds * cds * central).min(1.0);
    let t = (2.0 * (1.0 / lambda).ln()).ceil().max(1.0) as u32;
    Ok((r, t))
}
