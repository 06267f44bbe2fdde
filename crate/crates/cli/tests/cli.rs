use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mini")
}

fn fixture_manifest() -> PathBuf {
    fixture_dir().join("manifest.toml")
}

fn dupimage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dupimage"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn run_stage(stage: &str, out_dir: &Path, extra: &[&str]) -> Output {
    let manifest = fixture_manifest();
    let mut args = vec![
        stage,
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    dupimage(&args)
}

/// Manifest in `dir` that reads the fixture corpus, uses an empty cache and
/// points both providers at `endpoint`.
fn manifest_with_providers(dir: &Path, endpoint: &str, cache_only: bool) -> PathBuf {
    let fixture = fixture_dir().canonicalize().unwrap();
    std::fs::write(dir.join("cache.jsonl"), "").unwrap();
    let text = format!(
        r#"cache = "cache.jsonl"
output_dir = "out"
cache_only = {cache_only}

[corpus]
posts = "{posts}"
postlinks = "{links}"

[seeds]
pairing = 1
split = 2
training = 3

[providers.ocr]
id = "probe-ocr"
endpoint = "{endpoint}/ocr"
timeout_secs = 2.0
max_retries = 0

[providers.caption]
id = "probe-caption"
endpoint = "{endpoint}/caption"
timeout_secs = 2.0
max_retries = 0
"#,
        posts = fixture.join("Posts.xml").display(),
        links = fixture.join("PostLinks.xml").display(),
    );
    let path = dir.join("manifest.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_run_writes_eighteen_report_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage("run", dir.path(), &["--cache-only"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(dir.path().join("report.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["config", "k", "recall_rate_pct", "n_detected", "n_all"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 18);
    for row in &rows {
        let pct: f64 = row[2].parse().unwrap();
        let detected: f64 = row[3].parse().unwrap();
        let all: f64 = row[4].parse().unwrap();
        assert!(all > 0.0);
        assert!((pct - 100.0 * detected / all).abs() < 0.005 + 1e-9);
    }
    for name in [
        "report.json",
        "report.md",
        "delta_audit.csv",
        "rankings/dupe_text.jsonl",
        "models/ocr_only.json",
    ] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
}

#[test]
fn repeated_runs_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_stage("run", a.path(), &["--jobs", "1"])
        .status
        .success());
    assert!(run_stage("run", b.path(), &["--jobs", "4"])
        .status
        .success());
    for name in [
        "report.csv",
        "report.json",
        "rankings/combined_plus_text.jsonl",
        "models/dupe_text.json",
    ] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between sequential and parallel runs");
    }
}

#[test]
fn featurize_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["ingest", "pairs", "images", "featurize"] {
        let out = run_stage(stage, dir.path(), &[]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let path = dir.path().join("features/ocr_plus_text.csv");
    let first = std::fs::read(&path).unwrap();
    assert!(run_stage("featurize", dir.path(), &[]).status.success());
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn eval_without_models_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["ingest", "pairs", "images"] {
        assert!(run_stage(stage, dir.path(), &[]).status.success());
    }
    let out = run_stage("eval", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(
        msg.contains("dupe_text") && msg.contains("dupimage train"),
        "{msg}"
    );
}

#[test]
fn pairs_before_ingest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage("pairs", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dupimage ingest"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dupimage(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dupimage(&["eval", "--k", "five"]).status.code(), Some(1));
    assert_eq!(
        dupimage(&["eval", "--config", "no_such_config"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(dupimage(&[]).status.code(), Some(1));
    assert_eq!(dupimage(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_manifest_values_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run_stage("ingest", dir.path(), &["--threshold", "1.5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run_stage("ingest", dir.path(), &["--epochs", "0"])
            .status
            .code(),
        Some(2)
    );
    let missing = dir.path().join("absent.toml");
    assert_eq!(
        dupimage(&["ingest", "--manifest", missing.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn cache_only_never_contacts_providers() {
    let dir = tempfile::tempdir().unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let endpoint = format!("http://{}", listener.local_addr().unwrap());
    let manifest = manifest_with_providers(dir.path(), &endpoint, false);
    let m = manifest.to_str().unwrap();
    for stage in ["ingest", "pairs"] {
        assert!(dupimage(&[stage, "--manifest", m]).status.success());
    }
    let out = dupimage(&["images", "--manifest", m, "--cache-only"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for stage in ["featurize", "train", "eval", "audit-delta", "report"] {
        let out = dupimage(&[stage, "--manifest", m]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    match listener.accept() {
        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
        other => panic!("a provider connection was attempted: {other:?}"),
    }
}

#[test]
fn unreachable_provider_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let port = {
        let probe = TcpListener::bind("127.0.0.1:0").unwrap();
        probe.local_addr().unwrap().port()
    };
    let manifest = manifest_with_providers(dir.path(), &format!("http://127.0.0.1:{port}"), false);
    let m = manifest.to_str().unwrap();
    for stage in ["ingest", "pairs"] {
        assert!(dupimage(&[stage, "--manifest", m]).status.success());
    }
    let out = dupimage(&["images", "--manifest", m]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
