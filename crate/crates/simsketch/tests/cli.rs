//! End-to-end tests of the command-line binary: every subcommand is spawned
//! as a real process and judged only by its exit code, stdout, and stderr.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simsketch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn binary")
}

fn run_stdin(args: &[&str], input: &[u8]) -> Output {
    let mut child = bin()
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn binary");
    child.stdin.take().unwrap().write_all(input).unwrap();
    child.wait_with_output().expect("wait for binary")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr_str(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is UTF-8")
}

/// Parses a flat `key=value` document, ignoring `# `-prefixed comment lines.
fn kv(doc: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in doc.lines() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').unwrap_or_else(|| {
            panic!("line without '=': {line:?}");
        });
        let prior = map.insert(k.to_string(), v.to_string());
        assert!(prior.is_none(), "duplicate key {k}");
    }
    map
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout_str(out),
        stderr_str(out)
    );
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout_str(out),
        stderr_str(out)
    );
}

const MICRO_DATASET: &str = "a1\tb1\tc1\na2\tb2\tc2\na1\tb1\tc3\na3\tb2\tc2\n";

fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

#[test]
fn estimate_offline_recovers_exact_counts() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_file(dir.path(), "t1.tsv", MICRO_DATASET);
    let out = run(&[
        "estimate",
        input.to_str().unwrap(),
        "--s",
        "2",
        "--r",
        "1",
        "--mode",
        "offline",
    ]);
    assert_ok(&out);
    let doc = kv(&stdout_str(&out));
    assert_eq!(doc["manifest.command"], "estimate");
    assert_eq!(doc["manifest.d"], "3");
    assert_eq!(doc["report.n"], "4");
    assert_eq!(doc["report.x.2"], "4");
    assert_eq!(doc["report.x.3"], "0");
    assert_eq!(doc["report.pair_count"], "4");
    assert_eq!(doc["report.g_s"], "8");
    assert!(doc.contains_key("report.bound_offline"));
    assert!(doc.contains_key("report.bound_online"));
}

#[test]
fn estimate_is_byte_reproducible_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    // A larger input so multiple worker batches actually happen.
    let gen_path = dir.path().join("data.tsv");
    let out = run(&[
        "gen",
        "--kind",
        "skewed_20_80",
        "--n",
        "5000",
        "--seed",
        "21",
        "--out",
        gen_path.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let args = |threads: &'static str| {
        vec![
            "estimate".to_string(),
            gen_path.to_str().unwrap().to_string(),
            "--s".into(),
            "4".into(),
            "--r".into(),
            "0.5".into(),
            "--seed".into(),
            "9".into(),
            "--threads".into(),
            threads.into(),
        ]
    };
    let a = bin().args(args("1")).output().unwrap();
    let b = bin().args(args("1")).output().unwrap();
    let c = bin().args(args("4")).output().unwrap();
    assert_ok(&a);
    // Same seed, same input: identical bytes, regardless of thread count.
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
}

#[test]
fn estimate_reads_stdin() {
    let out = run_stdin(
        &["estimate", "-", "--s", "2", "--r", "1", "--mode", "offline"],
        MICRO_DATASET.as_bytes(),
    );
    assert_ok(&out);
    let doc = kv(&stdout_str(&out));
    assert_eq!(doc["report.g_s"], "8");
}

#[cfg(unix)]
#[test]
fn estimate_reads_fifo_in_one_pass() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.fifo");
    let c_path = std::ffi::CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { libc::mkfifo(c_path.as_ptr(), 0o600) }, 0);

    // The writer blocks in open() until the binary opens the read end, so
    // spawn it first; success proves the reader never seeks.
    let writer_path = path.clone();
    let writer = std::thread::spawn(move || {
        let mut pipe = std::fs::OpenOptions::new()
            .write(true)
            .open(writer_path)
            .unwrap();
        pipe.write_all(MICRO_DATASET.as_bytes()).unwrap();
    });
    let out = run(&[
        "estimate",
        path.to_str().unwrap(),
        "--s",
        "2",
        "--r",
        "1",
        "--mode",
        "offline",
    ]);
    writer.join().unwrap();
    assert_ok(&out);
    let doc = kv(&stdout_str(&out));
    assert_eq!(doc["report.n"], "4");
    assert_eq!(doc["report.g_s"], "8");
}

#[test]
fn delimiter_flag_accepts_names_and_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let comma = write_file(dir.path(), "c.csv", &MICRO_DATASET.replace('\t', ","));
    let space = write_file(dir.path(), "s.txt", &MICRO_DATASET.replace('\t', " "));

    for (path, delim) in [(&comma, ","), (&space, "space")] {
        let out = run(&["exact", path.to_str().unwrap(), "--delimiter", delim]);
        assert_ok(&out);
        let doc = kv(&stdout_str(&out));
        assert_eq!(doc["report.x.2"], "4", "delimiter {delim}");
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_file(dir.path(), "t1.tsv", MICRO_DATASET);
    let ragged = write_file(dir.path(), "ragged.tsv", "a\tb\nc\n");

    // Usage errors: 1.
    let out = run(&["estimate", input.to_str().unwrap(), "--s", "9", "--r", "1"]);
    assert_code(&out, 1);
    assert!(stderr_str(&out).contains("s"));
    let out = run(&["no-such-command"]);
    assert_code(&out, 1);
    let out = run(&[
        "estimate",
        input.to_str().unwrap(),
        "--s",
        "2",
        "--r",
        "1.5",
    ]);
    assert_code(&out, 1);

    // Input errors: 2, with the offending line number.
    let out = run(&["estimate", ragged.to_str().unwrap(), "--s", "1"]);
    assert_code(&out, 2);
    assert!(
        stderr_str(&out).contains("line 2"),
        "stderr: {}",
        stderr_str(&out)
    );
    let out = run(&[
        "estimate",
        dir.path().join("missing.tsv").to_str().unwrap(),
        "--s",
        "1",
    ]);
    assert_code(&out, 2);

    // Resource caps: 3.
    let out = run(&["exact", input.to_str().unwrap(), "--cap", "2"]);
    assert_code(&out, 3);

    // Help and version are successes.
    assert_code(&run(&["--help"]), 0);
    assert_code(&run(&["--version"]), 0);
    assert_code(&run(&["estimate", "--help"]), 0);
}

#[test]
fn exact_reports_all_level_counts() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_file(dir.path(), "t1.tsv", MICRO_DATASET);
    let out = run(&["exact", input.to_str().unwrap()]);
    assert_ok(&out);
    let doc = kv(&stdout_str(&out));
    assert_eq!(doc["report.n"], "4");
    assert_eq!(doc["report.x.1"], "0");
    assert_eq!(doc["report.x.2"], "4");
    assert_eq!(doc["report.x.3"], "0");
    assert_eq!(doc["report.y.1"], "20");
    assert_eq!(doc["report.y.2"], "16");
    assert_eq!(doc["report.y.3"], "4");
    assert_eq!(doc["report.g.1"], "8");
    assert_eq!(doc["report.g.2"], "8");
    assert_eq!(doc["report.g.3"], "4");
}

#[test]
fn sample_covers_full_and_short_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_file(dir.path(), "t1.tsv", MICRO_DATASET);

    // Capacity = n: the scaling factor is 1 and the estimate is exact.
    let out = run(&[
        "sample",
        input.to_str().unwrap(),
        "--s",
        "2",
        "--sample-size",
        "4",
    ]);
    assert_ok(&out);
    let doc = kv(&stdout_str(&out));
    assert_eq!(doc["report.n"], "4");
    assert_eq!(doc["report.sample_size"], "4");
    assert_eq!(doc["report.short_sample"], "false");
    assert_eq!(doc["report.x_hat.2"], "4");
    assert_eq!(doc["report.g_s"], "8");

    // Capacity beyond n: still answers, but flags the short sample.
    let out = run(&[
        "sample",
        input.to_str().unwrap(),
        "--s",
        "2",
        "--sample-size",
        "10",
    ]);
    assert_ok(&out);
    let doc = kv(&stdout_str(&out));
    assert_eq!(doc["report.short_sample"], "true");
    assert!(!stderr_str(&out).is_empty(), "short sample warns on stderr");

    let out = run(&[
        "sample",
        input.to_str().unwrap(),
        "--s",
        "2",
        "--sample-size",
        "1",
    ]);
    assert_code(&out, 1);
}

#[test]
fn join_matches_both_counter_examples() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_file(dir.path(), "a.tsv", "a\tb\tc\td\n");
    // Two records each sharing two fields with A's record: join size 2 at
    // s=2 even though each self-join size is small.
    let b1 = write_file(dir.path(), "b1.tsv", "a\tb\tx1\tx2\ny1\ty2\tc\td\n");
    let out = run(&[
        "join",
        a.to_str().unwrap(),
        b1.to_str().unwrap(),
        "--s",
        "2",
        "--r",
        "1",
        "--mode",
        "offline",
    ]);
    assert_ok(&out);
    let doc = kv(&stdout_str(&out));
    assert_eq!(doc["report.n_a"], "1");
    assert_eq!(doc["report.n_b"], "2");
    assert_eq!(doc["report.g_s"], "2");

    // Three records each one substitution away: join size 3 at s=3.
    let b2 = write_file(
        dir.path(),
        "b2.tsv",
        "ax\tb\tc\td\na\tbx\tc\td\na\tb\tcx\td\n",
    );
    let out = run(&[
        "join",
        a.to_str().unwrap(),
        b2.to_str().unwrap(),
        "--s",
        "3",
        "--r",
        "1",
        "--mode",
        "offline",
    ]);
    assert_ok(&out);
    let doc = kv(&stdout_str(&out));
    assert_eq!(doc["report.g_s"], "3");

    // Mismatched column counts are a usage error, not a malformed stream.
    let bad = write_file(dir.path(), "bad.tsv", "a\tb\n");
    let out = run(&[
        "join",
        a.to_str().unwrap(),
        bad.to_str().unwrap(),
        "--s",
        "2",
    ]);
    assert_code(&out, 1);

    // An empty operand joins to zero.
    let empty = write_file(dir.path(), "empty.tsv", "");
    let out = run(&[
        "join",
        a.to_str().unwrap(),
        empty.to_str().unwrap(),
        "--s",
        "2",
    ]);
    assert_ok(&out);
    let doc = kv(&stdout_str(&out));
    assert_eq!(doc["report.g_s"], "0");
}

#[test]
fn gen_sidecar_agrees_with_exact_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.tsv");
    let out = run(&[
        "gen",
        "--kind",
        "near_uniform_40_60",
        "--n",
        "200",
        "--seed",
        "11",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let doc = kv(&stdout_str(&out));
    assert_eq!(doc["gen.kind"], "near_uniform_40_60");
    assert_eq!(doc["gen.n"], "200");
    assert_eq!(doc["gen.d"], "5");

    // The sidecar's per-level truth must match a brute-force recount of the
    // emitted file, and the advertised digest must match what readers see.
    let sidecar = std::fs::read_to_string(format!("{}.truth", data.display())).unwrap();
    let truth: BTreeMap<String, String> = sidecar
        .lines()
        .map(|l| l.split_once('=').unwrap())
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let out = run(&["exact", data.to_str().unwrap()]);
    assert_ok(&out);
    let exact = kv(&stdout_str(&out));
    for k in 1..=5u32 {
        assert_eq!(
            exact[&format!("report.x.{k}")],
            truth[&format!("x.{k}")],
            "level {k}"
        );
    }
    assert_eq!(exact["manifest.input.sha256"], doc["gen.records_sha256"]);

    // Re-running with the same seed regenerates identical bytes.
    let again = dir.path().join("synth2.tsv");
    let out = run(&[
        "gen",
        "--kind",
        "near_uniform_40_60",
        "--n",
        "200",
        "--seed",
        "11",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert_eq!(
        std::fs::read(&data).unwrap(),
        std::fs::read(&again).unwrap()
    );

    let out = run(&[
        "gen",
        "--kind",
        "no_such_kind",
        "--n",
        "10",
        "--out",
        dir.path().join("x.tsv").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
}

#[test]
fn montecarlo_emits_csv_with_exact_offline_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "montecarlo",
        "--kind",
        "near_uniform_40_60",
        "--n",
        "300",
        "--s",
        "4",
        "--r",
        "1",
        "--mode",
        "offline",
        "--trials",
        "3",
        "--sample-size",
        "50",
        "--seed",
        "5",
    ]);
    assert_ok(&out);
    let text = stdout_str(&out);
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "s,estimator,trials,n,true_g,mean_est,mean_rel_err,std_rel_err,var_norm,bound_offline,bound_online"
    );
    let sjpc: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&sjpc[..4], &["4", "sjpc", "3", "300"]);
    // r=1 offline replays the exact oracle, so every trial is error-free.
    assert_eq!(sjpc[6], "0");
    assert_eq!(sjpc[8], "0");
    let sampling: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(sampling[1], "sampling");
    assert_eq!(sampling[4], sjpc[4], "both rows show the same truth");
    assert!(sampling[9].is_empty() && sampling[10].is_empty());
    assert!(lines.next().is_none());

    // --out routes the document to a file.
    let csv = dir.path().join("trials.csv");
    let out = run(&[
        "montecarlo",
        "--kind",
        "near_uniform_40_60",
        "--n",
        "300",
        "--s",
        "4",
        "--r",
        "1",
        "--mode",
        "offline",
        "--trials",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(stdout_str(&out).contains("montecarlo.out="));
    assert!(std::fs::read_to_string(&csv)
        .unwrap()
        .contains("\n4,sjpc,2,300,"));

    // --kind and --input are mutually exclusive.
    let data = write_file(dir.path(), "t1.tsv", MICRO_DATASET);
    let out = run(&[
        "montecarlo",
        "--kind",
        "near_uniform_40_60",
        "--n",
        "10",
        "--input",
        data.to_str().unwrap(),
        "--s",
        "2",
        "--trials",
        "2",
    ]);
    assert_code(&out, 1);
}

#[test]
fn montecarlo_accepts_truth_sidecar_for_file_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.tsv");
    assert_ok(&run(&[
        "gen",
        "--kind",
        "skewed_20_80",
        "--n",
        "400",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]));
    let sidecar = format!("{}.truth", data.display());
    let out = run(&[
        "montecarlo",
        "--input",
        data.to_str().unwrap(),
        "--truth",
        &sidecar,
        "--s",
        "4",
        "--r",
        "1",
        "--mode",
        "offline",
        "--trials",
        "2",
    ]);
    assert_ok(&out);
    let text = stdout_str(&out);
    let row = text
        .lines()
        .find(|l| l.starts_with("4,sjpc,"))
        .expect("sjpc row");
    let fields: Vec<&str> = row.split(',').collect();
    // Sidecar truth plus exact replay: zero relative error.
    assert_eq!(fields[6], "0");
}

#[test]
fn mem_stats_go_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_file(dir.path(), "t1.tsv", MICRO_DATASET);
    let out = run(&[
        "estimate",
        input.to_str().unwrap(),
        "--s",
        "2",
        "--mem-stats",
    ]);
    assert_ok(&out);
    let err = stderr_str(&out);
    assert!(err.contains("mem.counter_bytes="), "stderr: {err}");
    assert!(err.contains("mem.peak_bytes="), "stderr: {err}");
    assert!(!stdout_str(&out).contains("mem."));
}
