//! Command-line surface: delimited record-stream ingestion, the estimation
//! commands, the exact and sampling baselines, synthetic data generation,
//! and the Monte-Carlo harness.
//!
//! Reports are deterministic line-oriented `key=value` documents (CSV for
//! Monte-Carlo tables): a report plus the input file reproduces a run
//! bit-exactly. Warnings and memory statistics go to standard error so
//! standard output stays byte-stable. Exit codes: 0 success, 1 usage,
//! 2 input error, 3 resource cap.

use crate::baselines::{
    estimate_from_sample, exact_pair_counts_with_cap, for_each_synthetic_record,
    parse_truth_sidecar, random_sampling_estimate, write_truth_sidecar, Reservoir, SyntheticKind,
    SyntheticTruth, DEFAULT_ORACLE_CAP,
};
use crate::estimator::{
    sjpc_join_finalize, variance_bound_offline, variance_bound_online, EstimateReport, Mode,
    SjpcConfig, SjpcState,
};
use crate::hashing::{derive_seed, domain};
use crate::sketch::Aggregation;
use crate::subvalues::Record;
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

/// Shape of a record file: newline-terminated records, fields split on a
/// single delimiter byte, raw bytes otherwise (no quoting layer). Fields
/// must not contain the delimiter or newlines.
#[derive(Debug, Clone, Copy)]
pub struct RecordFileFormat {
    pub delimiter: u8,
    /// Expected column count; inferred from the first line when absent.
    pub d: Option<u32>,
}

/// Accepts `tab`, `\t`, `space`, or any single-byte character.
pub fn parse_delimiter(spec: &str) -> Result<u8> {
    match spec {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        "space" | " " => Ok(b' '),
        other if other.len() == 1 => Ok(other.as_bytes()[0]),
        other => Err(Error::InvalidParameter {
            param: "delimiter",
            value: other.to_string(),
            constraint: "delimiter must be a single byte (or the names tab/space)",
        }),
    }
}

/// Ingestion summary: record count, column count (0 when nothing fixed it),
/// and the SHA-256 of the raw input bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamStats {
    pub records: u64,
    pub d: u32,
    pub sha256_hex: String,
}

fn digest_hex(digest: &[u8]) -> String {
    let mut out = String::with_capacity(digest.len() * 2);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn arity_error(line_no: u64, expected: u32, got: usize) -> Error {
    Error::Malformed {
        what: "record line",
        msg: format!("line {line_no}: expected {expected} fields, got {got}"),
    }
}

/// Callback receiving `(record_index, borrowed_fields)` for each record.
pub type FieldSink<'a> = dyn FnMut(u64, &[&[u8]]) -> Result<()> + 'a;

/// Streams a record file in one pass: splits each newline-terminated line
/// on the delimiter, enforces a uniform column count, and hands
/// `(record_index, fields)` to `f`. Hashes the raw bytes along the way.
pub fn stream_records<R: BufRead>(
    mut reader: R,
    format: &RecordFileFormat,
    f: &mut FieldSink<'_>,
) -> Result<StreamStats> {
    let mut sha = Sha256::new();
    let mut line: Vec<u8> = Vec::new();
    let mut records = 0u64;
    let mut d = format.d;
    loop {
        line.clear();
        let got = reader.read_until(b'\n', &mut line)?;
        if got == 0 {
            break;
        }
        sha.update(&line);
        if line.last() == Some(&b'\n') {
            line.pop();
        }
        let line_no = records + 1;
        let fields: Vec<&[u8]> = line.split(|&b| b == format.delimiter).collect();
        let expected = match d {
            Some(v) => v,
            None => {
                let v = u32::try_from(fields.len()).map_err(|_| Error::Malformed {
                    what: "record line",
                    msg: format!("line {line_no}: too many fields"),
                })?;
                d = Some(v);
                v
            }
        };
        if fields.len() != expected as usize {
            return Err(arity_error(line_no, expected, fields.len()));
        }
        f(records, &fields)?;
        records += 1;
    }
    Ok(StreamStats {
        records,
        d: d.unwrap_or(0),
        sha256_hex: digest_hex(&sha.finalize()),
    })
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead>> {
    if path.as_os_str() == "-" {
        Ok(Box::new(BufReader::new(std::io::stdin())))
    } else {
        let file = File::open(path).map_err(|e| Error::Malformed {
            what: "input file",
            msg: format!("{}: {e}", path.display()),
        })?;
        Ok(Box::new(BufReader::new(file)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClampArg {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggregationArg {
    Median,
    Mean,
}

/// Estimator configuration flags shared by the estimating commands.
#[derive(Debug, Args, Clone)]
struct EstimatorFlags {
    /// Similarity threshold (count of agreeing columns).
    #[arg(long)]
    s: u32,
    /// Column count; inferred from the first line when omitted.
    #[arg(long)]
    d: Option<u32>,
    /// Per-combination sampling ratio in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    /// Sketch width (buckets per row).
    #[arg(long, default_value_t = 1000)]
    width: u32,
    /// Sketch depth (rows).
    #[arg(long, default_value_t = 3)]
    depth: u32,
    /// Master seed; every random choice in a run derives from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Online)]
    mode: ModeArg,
    /// Floor negative intermediate pair counts at zero.
    #[arg(long, value_enum, default_value_t = ClampArg::On)]
    clamp: ClampArg,
    /// Row aggregation of sketch estimates.
    #[arg(long, value_enum, default_value_t = AggregationArg::Median)]
    aggregation: AggregationArg,
}

#[derive(Debug, Args, Clone)]
struct InputFlags {
    /// Field delimiter: a single byte, or the names tab/space.
    #[arg(long, default_value = "\t")]
    delimiter: String,
}

impl EstimatorFlags {
    fn config(&self, d: u32) -> Result<SjpcConfig> {
        let cfg = SjpcConfig {
            d,
            s: self.s,
            r: self.r,
            w: self.width,
            t: self.depth,
            master_seed: self.seed,
            clamp_negative: self.clamp == ClampArg::On,
            mode: match self.mode {
                ModeArg::Online => Mode::OnlineSketch,
                ModeArg::Offline => Mode::OfflineExact,
            },
            aggregation: match self.aggregation {
                AggregationArg::Median => Aggregation::Median,
                AggregationArg::Mean => Aggregation::Mean,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn manifest(&self, out: &mut String, d: u32) {
        let _ = writeln!(out, "manifest.d={d}");
        let _ = writeln!(out, "manifest.s={}", self.s);
        let _ = writeln!(out, "manifest.r={}", self.r);
        let _ = writeln!(out, "manifest.w={}", self.width);
        let _ = writeln!(out, "manifest.t={}", self.depth);
        let _ = writeln!(out, "manifest.seed={}", self.seed);
        let _ = writeln!(
            out,
            "manifest.mode={}",
            match self.mode {
                ModeArg::Online => "online",
                ModeArg::Offline => "offline",
            }
        );
        let _ = writeln!(
            out,
            "manifest.clamp={}",
            match self.clamp {
                ClampArg::On => "on",
                ClampArg::Off => "off",
            }
        );
        let _ = writeln!(
            out,
            "manifest.aggregation={}",
            match self.aggregation {
                AggregationArg::Median => "median",
                AggregationArg::Mean => "mean",
            }
        );
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "simsketch",
    version,
    about = "One-pass similarity self-join and join size estimation over record streams"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Estimate the similarity self-join size of a record file in one pass.
    Estimate(EstimateArgs),
    /// Exact pair counts by brute force (verification-scale only).
    Exact(ExactArgs),
    /// Random-sampling baseline estimate.
    Sample(SampleArgs),
    /// Estimate the similarity join size of two record files.
    Join(JoinArgs),
    /// Generate a synthetic record file plus its truth sidecar.
    Gen(GenArgs),
    /// Repeated-trial statistics of the estimators against ground truth.
    Montecarlo(MonteArgs),
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Record file ('-' for standard input).
    input: PathBuf,
    #[command(flatten)]
    flags: EstimatorFlags,
    #[command(flatten)]
    io: InputFlags,
    /// Partition the input over worker threads (identical output).
    #[arg(long, default_value_t = 1)]
    threads: u32,
    /// Print peak allocation statistics to standard error.
    #[arg(long, default_value_t = false)]
    mem_stats: bool,
}

#[derive(Debug, Args)]
struct ExactArgs {
    /// Record file ('-' for standard input).
    input: PathBuf,
    #[command(flatten)]
    io: InputFlags,
    /// Column count; inferred from the first line when omitted.
    #[arg(long)]
    d: Option<u32>,
    /// Record cap for the quadratic oracle.
    #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
    cap: u64,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Record file ('-' for standard input).
    input: PathBuf,
    /// Similarity threshold.
    #[arg(long)]
    s: u32,
    /// Column count; inferred from the first line when omitted.
    #[arg(long)]
    d: Option<u32>,
    /// Reservoir capacity (records kept).
    #[arg(long)]
    sample_size: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    io: InputFlags,
}

#[derive(Debug, Args)]
struct JoinArgs {
    /// Left record file.
    input_a: PathBuf,
    /// Right record file.
    input_b: PathBuf,
    #[command(flatten)]
    flags: EstimatorFlags,
    #[command(flatten)]
    io: InputFlags,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Stream family: near_uniform_40_60, skewed_20_80, skewed_10_90, or
    /// planted_lemma1.
    #[arg(long)]
    kind: String,
    /// Record count.
    #[arg(long)]
    n: u64,
    /// Column count.
    #[arg(long, default_value_t = 5)]
    d: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output record file; the truth sidecar lands at '<out>.truth'.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    io: InputFlags,
}

#[derive(Debug, Args)]
struct MonteArgs {
    /// Record file to re-estimate per trial (alternative to --kind).
    #[arg(long, conflicts_with_all = ["kind", "n"])]
    input: Option<PathBuf>,
    /// Truth sidecar for --input runs (otherwise the oracle must fit).
    #[arg(long, requires = "input")]
    truth: Option<PathBuf>,
    /// Synthetic family to generate in memory (alternative to --input).
    #[arg(long, requires = "n")]
    kind: Option<String>,
    /// Synthetic record count.
    #[arg(long)]
    n: Option<u64>,
    /// Trial count (>= 2).
    #[arg(long)]
    trials: u64,
    /// Adds random-sampling baseline rows with this reservoir capacity.
    #[arg(long)]
    sample_size: Option<u64>,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: EstimatorFlags,
    #[command(flatten)]
    io: InputFlags,
}

/// Parses the process arguments and runs the selected command, mapping
/// errors to exit codes. `mem_peak` supplies the allocator's peak byte
/// counter when the binary wires one in.
pub fn run(mem_peak: Option<fn() -> u64>) -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, mem_peak) {
        Ok(doc) => {
            print!("{doc}");
            let _ = std::io::stdout().flush();
            0
        }
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(cli: Cli, mem_peak: Option<fn() -> u64>) -> Result<String> {
    match cli.cmd {
        Cmd::Estimate(args) => cmd_estimate(args, mem_peak),
        Cmd::Exact(args) => cmd_exact(args),
        Cmd::Sample(args) => cmd_sample(args),
        Cmd::Join(args) => cmd_join(args),
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Montecarlo(args) => cmd_montecarlo(args),
    }
}

fn manifest_header(out: &mut String, command: &str) {
    let _ = writeln!(out, "manifest.command={command}");
    let _ = writeln!(out, "manifest.version={}", env!("CARGO_PKG_VERSION"));
}

fn write_report(out: &mut String, report: &EstimateReport) {
    let _ = writeln!(out, "report.n={}", report.n);
    for (k, v) in &report.y {
        let _ = writeln!(out, "report.y.{k}={v}");
    }
    for (k, v) in &report.x {
        let _ = writeln!(out, "report.x.{k}={v}");
    }
    let _ = writeln!(out, "report.pair_count={}", report.pair_count);
    let _ = writeln!(out, "report.g_s={}", report.g_s);
    if let Some(bounds) = &report.bounds {
        let _ = writeln!(out, "report.bound_offline={}", bounds.offline);
        let _ = writeln!(out, "report.bound_online={}", bounds.online);
    }
}

/// Empty-stream stand-in when the column count never became known.
fn write_empty_report(out: &mut String) {
    let _ = writeln!(out, "report.n=0");
    let _ = writeln!(out, "report.pair_count=0");
    let _ = writeln!(out, "report.g_s=0");
}

fn cmd_estimate(args: EstimateArgs, mem_peak: Option<fn() -> u64>) -> Result<String> {
    let delimiter = parse_delimiter(&args.io.delimiter)?;
    if let Some(d) = args.flags.d {
        // Early usage validation when the shape is fully known.
        args.flags.config(d)?;
    }
    if args.threads == 0 {
        return Err(Error::InvalidParameter {
            param: "threads",
            value: args.threads.to_string(),
            constraint: "worker count must be >= 1",
        });
    }
    let format = RecordFileFormat {
        delimiter,
        d: args.flags.d,
    };
    let reader = open_input(&args.input)?;
    let (state, stats) = if args.threads == 1 {
        let mut state: Option<SjpcState> = None;
        let flags = &args.flags;
        let stats = stream_records(reader, &format, &mut |ix, fields| {
            if state.is_none() {
                state = Some(SjpcState::new(flags.config(fields.len() as u32)?)?);
            }
            state.as_mut().unwrap().process_fields_at(ix, fields)
        })?;
        (state, stats)
    } else {
        estimate_threaded(reader, &format, &args.flags, args.threads)?
    };

    let mut out = String::new();
    manifest_header(&mut out, "estimate");
    let _ = writeln!(out, "manifest.input.sha256={}", stats.sha256_hex);
    args.flags.manifest(&mut out, stats.d);
    match &state {
        Some(state) => write_report(&mut out, &state.finalize()?),
        None => write_empty_report(&mut out),
    }
    if args.mem_stats {
        let counter_bytes = state.as_ref().map_or(0, |s| s.counter_cells() * 8);
        eprintln!("mem.counter_bytes={counter_bytes}");
        if let Some(peak) = mem_peak {
            eprintln!("mem.peak_bytes={}", peak());
        }
    }
    Ok(out)
}

/// Partitioned ingestion: the reader splits and validates lines into
/// batches handed round-robin to workers holding identically configured
/// states; integer-additive merging makes the result byte-identical to the
/// single-threaded run.
fn estimate_threaded(
    reader: Box<dyn BufRead>,
    format: &RecordFileFormat,
    flags: &EstimatorFlags,
    threads: u32,
) -> Result<(Option<SjpcState>, StreamStats)> {
    const BATCH: usize = 1024;
    type Batch = Vec<(u64, Vec<Vec<u8>>)>;

    // A send can only fail when the worker already stopped on an error;
    // that error surfaces at join time.
    fn flush(batch: &mut Batch, next_worker: &mut usize, senders: &[mpsc::SyncSender<Batch>]) {
        if batch.is_empty() {
            return;
        }
        let _ = senders[*next_worker].send(std::mem::take(batch));
        *next_worker = (*next_worker + 1) % senders.len();
    }

    std::thread::scope(|scope| {
        let mut senders: Vec<mpsc::SyncSender<Batch>> = Vec::new();
        let mut handles = Vec::new();
        let mut batch: Batch = Vec::with_capacity(BATCH);
        let mut next_worker = 0usize;
        let stats = stream_records(reader, format, &mut |ix, fields| {
            if senders.is_empty() {
                // Worker states can only exist once the column count is
                // known, which the first record fixes.
                for _ in 0..threads {
                    let config = flags.config(fields.len() as u32)?;
                    let (tx, rx) = mpsc::sync_channel::<Batch>(2);
                    senders.push(tx);
                    handles.push(scope.spawn(move || -> Result<SjpcState> {
                        let mut state = SjpcState::new(config)?;
                        for batch in rx {
                            for (ix, fields) in &batch {
                                state.process_fields_at(*ix, fields)?;
                            }
                        }
                        Ok(state)
                    }));
                }
            }
            batch.push((ix, fields.iter().map(|f| f.to_vec()).collect()));
            if batch.len() >= BATCH {
                flush(&mut batch, &mut next_worker, &senders);
            }
            Ok(())
        })?;
        flush(&mut batch, &mut next_worker, &senders);
        drop(senders);

        let mut merged: Option<SjpcState> = None;
        let mut first_err: Option<Error> = None;
        for handle in handles {
            match handle.join().expect("worker panicked") {
                Ok(part) => match &mut merged {
                    Some(m) => m.merge(&part)?,
                    None => merged = Some(part),
                },
                Err(e) => {
                    if first_err.is_none() {
                        first_err = Some(e);
                    }
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok((merged, stats))
    })
}

fn read_all_records(
    path: &Path,
    delimiter: u8,
    d: Option<u32>,
) -> Result<(Vec<Record>, StreamStats)> {
    let reader = open_input(path)?;
    let format = RecordFileFormat { delimiter, d };
    let mut records = Vec::new();
    let stats = stream_records(reader, &format, &mut |_, fields| {
        records.push(Record::new(fields.iter().map(|f| f.to_vec()).collect()));
        Ok(())
    })?;
    Ok((records, stats))
}

fn cmd_exact(args: ExactArgs) -> Result<String> {
    let delimiter = parse_delimiter(&args.io.delimiter)?;
    let (records, stats) = read_all_records(&args.input, delimiter, args.d)?;
    let counts = exact_pair_counts_with_cap(&records, args.cap)?;
    let mut out = String::new();
    manifest_header(&mut out, "exact");
    let _ = writeln!(out, "manifest.input.sha256={}", stats.sha256_hex);
    let _ = writeln!(out, "manifest.d={}", counts.d);
    let _ = writeln!(out, "manifest.cap={}", args.cap);
    let _ = writeln!(out, "report.n={}", counts.n);
    for (k, v) in &counts.x {
        let _ = writeln!(out, "report.x.{k}={v}");
    }
    for (k, v) in &counts.y {
        let _ = writeln!(out, "report.y.{k}={v}");
    }
    for (k, v) in &counts.g {
        let _ = writeln!(out, "report.g.{k}={v}");
    }
    Ok(out)
}

fn cmd_sample(args: SampleArgs) -> Result<String> {
    let delimiter = parse_delimiter(&args.io.delimiter)?;
    if args.sample_size < 2 {
        return Err(Error::InvalidParameter {
            param: "sample_size",
            value: args.sample_size.to_string(),
            constraint: "pairwise estimation needs a sample of at least 2",
        });
    }
    let format = RecordFileFormat {
        delimiter,
        d: args.d,
    };
    let reader = open_input(&args.input)?;
    let mut reservoir: Reservoir<Record> = Reservoir::new(args.sample_size, args.seed)?;
    let stats = stream_records(reader, &format, &mut |_, fields| {
        reservoir.offer(Record::new(fields.iter().map(|f| f.to_vec()).collect()));
        Ok(())
    })?;
    let (sample, n) = reservoir.into_sample();
    let mut estimate = estimate_from_sample(&sample, n, args.s)?;
    estimate.short_sample = args.sample_size > n;
    if estimate.short_sample {
        eprintln!(
            "warning: requested sample of {} exceeds the {} available records; estimate is exact",
            args.sample_size, n
        );
    }
    let mut out = String::new();
    manifest_header(&mut out, "sample");
    let _ = writeln!(out, "manifest.input.sha256={}", stats.sha256_hex);
    let _ = writeln!(out, "manifest.d={}", stats.d);
    let _ = writeln!(out, "manifest.s={}", args.s);
    let _ = writeln!(out, "manifest.sample_size={}", args.sample_size);
    let _ = writeln!(out, "manifest.seed={}", args.seed);
    let _ = writeln!(out, "report.n={}", estimate.n);
    let _ = writeln!(out, "report.sample_size={}", estimate.sample_size);
    let _ = writeln!(out, "report.short_sample={}", estimate.short_sample);
    for (k, v) in &estimate.x_hat {
        let _ = writeln!(out, "report.x_hat.{k}={v}");
    }
    let _ = writeln!(out, "report.g_s={}", estimate.g_s);
    Ok(out)
}

fn cmd_join(args: JoinArgs) -> Result<String> {
    let delimiter = parse_delimiter(&args.io.delimiter)?;
    if args.input_a.as_os_str() == "-" && args.input_b.as_os_str() == "-" {
        return Err(Error::InvalidParameter {
            param: "input",
            value: "-".to_string(),
            constraint: "only one join input may be standard input",
        });
    }
    let format = RecordFileFormat {
        delimiter,
        d: args.flags.d,
    };
    let ingest =
        |path: &Path, tag: u64, d: Option<u32>| -> Result<(Option<SjpcState>, StreamStats)> {
            let mut format = format;
            if let Some(d) = d {
                format.d = Some(d);
            }
            let reader = open_input(path)?;
            let mut state: Option<SjpcState> = None;
            let flags = &args.flags;
            let stats = stream_records(reader, &format, &mut |ix, fields| {
                if state.is_none() {
                    state = Some(SjpcState::with_stream_tag(
                        flags.config(fields.len() as u32)?,
                        tag,
                    )?);
                }
                state.as_mut().unwrap().process_fields_at(ix, fields)
            })?;
            Ok((state, stats))
        };
    let (state_a, stats_a) = ingest(&args.input_a, 0, None)?;
    // The right stream must match the left stream's shape exactly.
    let d_a = state_a.as_ref().map(|s| s.config().d);
    let (state_b, stats_b) = match ingest(&args.input_b, 1, d_a) {
        Ok(v) => v,
        Err(Error::Malformed { msg, .. }) if d_a.is_some() && msg.contains("expected") => {
            return Err(Error::InvalidParameter {
                param: "input_b",
                value: msg,
                constraint: "join inputs must share one column count",
            })
        }
        Err(e) => return Err(e),
    };

    let mut out = String::new();
    manifest_header(&mut out, "join");
    let _ = writeln!(out, "manifest.input_a.sha256={}", stats_a.sha256_hex);
    let _ = writeln!(out, "manifest.input_b.sha256={}", stats_b.sha256_hex);
    args.flags.manifest(&mut out, stats_a.d.max(stats_b.d));
    match (&state_a, &state_b) {
        (Some(a), Some(b)) => {
            let report = sjpc_join_finalize(a, b)?;
            let _ = writeln!(out, "report.n_a={}", a.records_processed());
            let _ = writeln!(out, "report.n_b={}", b.records_processed());
            write_report(&mut out, &report);
        }
        _ => {
            // An empty operand joins to zero regardless of the other side.
            let _ = writeln!(
                out,
                "report.n_a={}",
                state_a.as_ref().map_or(0, |s| s.records_processed())
            );
            let _ = writeln!(
                out,
                "report.n_b={}",
                state_b.as_ref().map_or(0, |s| s.records_processed())
            );
            write_empty_report(&mut out);
        }
    }
    Ok(out)
}

fn cmd_gen(args: GenArgs) -> Result<String> {
    let delimiter = parse_delimiter(&args.io.delimiter)?;
    let kind = SyntheticKind::from_name(&args.kind)?;
    if args.out.as_os_str() == "-" {
        return Err(Error::InvalidParameter {
            param: "out",
            value: "-".to_string(),
            constraint: "generation needs a file path to write",
        });
    }
    let file = File::create(&args.out)?;
    let mut writer = std::io::BufWriter::new(file);
    let mut sha = Sha256::new();
    let mut line: Vec<u8> = Vec::new();
    let truth = for_each_synthetic_record(kind, args.n, args.d, args.seed, &mut |_, fields| {
        line.clear();
        for (i, field) in fields.iter().enumerate() {
            if i > 0 {
                line.push(delimiter);
            }
            line.extend_from_slice(field);
        }
        line.push(b'\n');
        sha.update(&line);
        writer.write_all(&line)?;
        Ok(())
    })?;
    writer.flush()?;

    let mut truth_path = args.out.clone().into_os_string();
    truth_path.push(".truth");
    let truth_path = PathBuf::from(truth_path);
    std::fs::write(&truth_path, write_truth_sidecar(&truth))?;

    let mut out = String::new();
    manifest_header(&mut out, "gen");
    let _ = writeln!(out, "gen.kind={}", truth.kind);
    let _ = writeln!(out, "gen.n={}", truth.n);
    let _ = writeln!(out, "gen.d={}", truth.d);
    let _ = writeln!(out, "gen.seed={}", truth.seed);
    let _ = writeln!(out, "gen.records_path={}", args.out.display());
    let _ = writeln!(out, "gen.truth_path={}", truth_path.display());
    let _ = writeln!(out, "gen.records_sha256={}", digest_hex(&sha.finalize()));
    let _ = writeln!(out, "gen.g_s.{}={}", truth.d - 1, truth.g[&(truth.d - 1)]);
    Ok(out)
}

struct TrialSeries {
    estimates: Vec<f64>,
}

impl TrialSeries {
    fn stats(&self, true_g: f64) -> (f64, f64, f64, f64) {
        let trials = self.estimates.len() as f64;
        let mean_est = self.estimates.iter().sum::<f64>() / trials;
        let rel: Vec<f64> = self
            .estimates
            .iter()
            .map(|e| (e - true_g) / true_g)
            .collect();
        let mean_rel = rel.iter().sum::<f64>() / trials;
        let var_rel = rel.iter().map(|v| (v - mean_rel).powi(2)).sum::<f64>() / (trials - 1.0);
        // var(G/g) around the mean ratio; equals var of the relative error.
        (mean_est, mean_rel, var_rel.sqrt(), var_rel)
    }
}

fn cmd_montecarlo(args: MonteArgs) -> Result<String> {
    let delimiter = parse_delimiter(&args.io.delimiter)?;
    if args.trials < 2 {
        return Err(Error::InvalidParameter {
            param: "trials",
            value: args.trials.to_string(),
            constraint: "statistics need at least 2 trials",
        });
    }

    // Load records plus the best available truth.
    let (records, truth, source): (Vec<Record>, Option<SyntheticTruth>, String) =
        match (&args.input, &args.kind) {
            (Some(path), None) => {
                let (records, stats) = read_all_records(path, delimiter, args.flags.d)?;
                let truth = match &args.truth {
                    Some(tp) => Some(parse_truth_sidecar(&std::fs::read(tp)?)?),
                    None => None,
                };
                (records, truth, format!("input.sha256={}", stats.sha256_hex))
            }
            (None, Some(kind)) => {
                let kind = SyntheticKind::from_name(kind)?;
                let n = args.n.ok_or(Error::InvalidParameter {
                    param: "n",
                    value: "missing".to_string(),
                    constraint: "--kind needs --n",
                })?;
                let d = args.flags.d.unwrap_or(5);
                let (records, truth) =
                    crate::baselines::generate_synthetic(kind, n, d, args.flags.seed)?;
                (records, Some(truth), format!("kind={}", kind.name()))
            }
            _ => {
                return Err(Error::InvalidParameter {
                    param: "input",
                    value: "missing".to_string(),
                    constraint: "exactly one of --input or --kind is required",
                })
            }
        };

    let d = records.first().map(|r| r.arity() as u32).unwrap_or(0);
    let s = args.flags.s;
    let config = args.flags.config(d)?;
    let true_g = match &truth {
        Some(t) => {
            if t.d != d || t.n != records.len() as u64 {
                return Err(Error::Incompatible {
                    what: format!(
                        "truth sidecar describes n={} d={}, input holds n={} d={}",
                        t.n,
                        t.d,
                        records.len(),
                        d
                    ),
                });
            }
            *t.g.get(&s).ok_or(Error::InvalidParameter {
                param: "s",
                value: s.to_string(),
                constraint: "truth sidecar must cover the requested threshold",
            })? as f64
        }
        None => {
            let counts = crate::baselines::exact_pair_counts(&records)?;
            *counts.g.get(&s).ok_or(Error::InvalidParameter {
                param: "s",
                value: s.to_string(),
                constraint: "threshold must lie in 1..=d",
            })? as f64
        }
    };
    if true_g <= 0.0 {
        return Err(Error::InvalidParameter {
            param: "g_s",
            value: true_g.to_string(),
            constraint: "relative error needs a positive true join size",
        });
    }
    let n = records.len() as u64;

    let mut sjpc = TrialSeries {
        estimates: Vec::with_capacity(args.trials as usize),
    };
    let mut sampling = args.sample_size.map(|_| TrialSeries {
        estimates: Vec::with_capacity(args.trials as usize),
    });
    for trial in 0..args.trials {
        let trial_seed = derive_seed(args.flags.seed, &[domain::TRIAL, trial]);
        let mut cfg = config.clone();
        cfg.master_seed = trial_seed;
        let mut state = SjpcState::new(cfg)?;
        for rec in &records {
            state.process_record(rec)?;
        }
        sjpc.estimates.push(state.finalize()?.g_s);
        if let (Some(series), Some(capacity)) = (&mut sampling, args.sample_size) {
            let est = random_sampling_estimate(&records, capacity, s, trial_seed)?;
            series.estimates.push(est.g_s);
        }
    }

    let bound_offline = variance_bound_offline(d, s, config.r, true_g)?;
    let bound_online = variance_bound_online(d, s, config.r, config.w, n, true_g)?;

    let mut out = String::new();
    manifest_header(&mut out, "montecarlo");
    let _ = writeln!(out, "# manifest.source.{source}");
    let _ = writeln!(out, "# manifest.trials={}", args.trials);
    let _ = writeln!(out, "# manifest.d={d}");
    let _ = writeln!(out, "# manifest.s={s}");
    let _ = writeln!(out, "# manifest.r={}", config.r);
    let _ = writeln!(out, "# manifest.w={}", config.w);
    let _ = writeln!(out, "# manifest.t={}", config.t);
    let _ = writeln!(out, "# manifest.seed={}", config.master_seed);
    let _ = writeln!(
        out,
        "s,estimator,trials,n,true_g,mean_est,mean_rel_err,std_rel_err,var_norm,bound_offline,bound_online"
    );
    let (mean_est, mean_rel, std_rel, var_norm) = sjpc.stats(true_g);
    let _ = writeln!(
        out,
        "{s},sjpc,{},{n},{true_g},{mean_est},{mean_rel},{std_rel},{var_norm},{bound_offline},{bound_online}",
        args.trials
    );
    if let Some(series) = &sampling {
        let (mean_est, mean_rel, std_rel, var_norm) = series.stats(true_g);
        let _ = writeln!(
            out,
            "{s},sampling,{},{n},{true_g},{mean_est},{mean_rel},{std_rel},{var_norm},,",
            args.trials
        );
    }
    // The leading manifest.command/version lines are key=value, the rest of
    // the document is CSV; comment out the former for CSV consumers.
    let out = out
        .lines()
        .map(|l| {
            if l.starts_with("manifest.") {
                format!("# {l}\n")
            } else {
                format!("{l}\n")
            }
        })
        .collect::<String>();

    if let Some(path) = &args.out {
        std::fs::write(path, &out)?;
        let mut done = String::new();
        let _ = writeln!(done, "montecarlo.out={}", path.display());
        Ok(done)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn delimiter_parsing() {
        assert_eq!(parse_delimiter("tab").unwrap(), b'\t');
        assert_eq!(parse_delimiter("\\t").unwrap(), b'\t');
        assert_eq!(parse_delimiter("\t").unwrap(), b'\t');
        assert_eq!(parse_delimiter("space").unwrap(), b' ');
        assert_eq!(parse_delimiter(",").unwrap(), b',');
        assert!(parse_delimiter("ab").is_err());
        assert!(parse_delimiter("").is_err());
    }

    fn collect(
        input: &[u8],
        format: &RecordFileFormat,
    ) -> Result<(Vec<Vec<Vec<u8>>>, StreamStats)> {
        let mut rows = Vec::new();
        let stats = stream_records(Cursor::new(input), format, &mut |ix, fields| {
            assert_eq!(ix as usize, rows.len());
            rows.push(fields.iter().map(|f| f.to_vec()).collect());
            Ok(())
        })?;
        Ok((rows, stats))
    }

    #[test]
    fn stream_splits_lines_and_infers_shape() {
        let fmt = RecordFileFormat {
            delimiter: b'\t',
            d: None,
        };
        let (rows, stats) = collect(b"a\tb\nc\td\n", &fmt).unwrap();
        assert_eq!(stats.records, 2);
        assert_eq!(stats.d, 2);
        assert_eq!(rows[1], vec![b"c".to_vec(), b"d".to_vec()]);

        // Missing trailing newline still yields the final record.
        let (rows, stats) = collect(b"a\tb\nc\td", &fmt).unwrap();
        assert_eq!(stats.records, 2);
        assert_eq!(rows.len(), 2);

        // Empty fields are legal; empty input has no records.
        let (rows, _) = collect(b"\t\n", &fmt).unwrap();
        assert_eq!(rows[0], vec![Vec::<u8>::new(), Vec::new()]);
        let (rows, stats) = collect(b"", &fmt).unwrap();
        assert!(rows.is_empty());
        assert_eq!(stats.d, 0);
    }

    #[test]
    fn stream_rejects_ragged_rows_with_line_numbers() {
        let fmt = RecordFileFormat {
            delimiter: b'\t',
            d: None,
        };
        let err = collect(b"a\tb\nc\n", &fmt).unwrap_err();
        match err {
            Error::Malformed { msg, .. } => {
                assert!(msg.contains("line 2"), "{msg}");
                assert!(msg.contains("expected 2"), "{msg}");
            }
            other => panic!("wrong error {other:?}"),
        }
        // Declared shape beats inference.
        let fmt = RecordFileFormat {
            delimiter: b'\t',
            d: Some(3),
        };
        let err = collect(b"a\tb\n", &fmt).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
    }

    #[test]
    fn stream_digest_covers_raw_bytes() {
        let fmt = RecordFileFormat {
            delimiter: b'\t',
            d: None,
        };
        let (_, stats) = collect(b"a\tb\n", &fmt).unwrap();
        // Independently computed SHA-256 of the exact bytes.
        let mut sha = Sha256::new();
        sha.update(b"a\tb\n");
        assert_eq!(stats.sha256_hex, digest_hex(&sha.finalize()));
        // Different delimiters do not change the digest, only the split.
        let fmt_comma = RecordFileFormat {
            delimiter: b',',
            d: None,
        };
        let (_, stats_comma) = collect(b"a\tb\n", &fmt_comma).unwrap();
        assert_eq!(stats.sha256_hex, stats_comma.sha256_hex);
    }

    #[test]
    fn trial_series_statistics() {
        let series = TrialSeries {
            estimates: vec![8.0, 12.0],
        };
        let (mean_est, mean_rel, std_rel, var_norm) = series.stats(10.0);
        assert_eq!(mean_est, 10.0);
        assert_eq!(mean_rel, 0.0);
        // Sample variance of {-0.2, +0.2} is 0.08.
        assert!((var_norm - 0.08).abs() < 1e-12);
        assert!((std_rel - 0.08f64.sqrt()).abs() < 1e-12);
    }
}
