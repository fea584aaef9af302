use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use neurotouch::io::read_epochs;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neurotouch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small enough for a few seconds per invocation.
const SMALL: &str = "\
[protocol]
trials_per_class = 10

[cv]
n_repeats = 1

[train]
max_passes = 2
";

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_defaults_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = run(&["gen", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("Fabric=50 Glass=50 Paper=50 Fur=50"), "{stdout}");
    let bytes = fs::read(out.join("actual.epo")).unwrap();
    assert_eq!(&bytes[..8], b"NEUR0EPO");
    assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 200);
    assert_eq!(u16::from_le_bytes(bytes[14..16].try_into().unwrap()), 64);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 5000);
    assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1000.0);
    assert_eq!(read_epochs(out.join("imagery.epo")).unwrap().len(), 200);
}

#[test]
fn gen_same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut files = Vec::new();
    for (name, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let out = dir.path().join(name);
        let o = run(&["gen", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        files.push(fs::read(out.join("actual.epo")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_ne!(files[0], files[2]);
}

#[test]
fn three_classes_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[protocol]\nn_classes = 3\n");
    let o = run(&["gen", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_classes"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_flag_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[gen]\nsnr = 1.0\n");
    assert_eq!(run(&["gen", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(run(&["run", "--pipeline", "svm"]).status.code(), Some(1));
}

#[test]
fn missing_input_is_io_error_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = run(&["run", "--input", missing.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/actual.epo"), "{}", stderr(&o));
    let o = run(&["preprocess", "--input", "/does/not/exist.epo", "--out", "x.epo"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/does/not/exist.epo"));
}

#[test]
fn single_pipeline_gives_two_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = run(&["run", "--config", &cfg, "--pipeline", "csp-lda", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("report.txt")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("CSP-LDA") || l.starts_with("EEGNet")).collect();
    assert_eq!(rows.len(), 1, "{table}");
    assert_eq!(rows[0].matches('±').count(), 2);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    assert!(!out.join("INCOMPLETE").exists());

    // `report` rebuilds the same table from the CSV files.
    let o = run(&["report", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let reprinted = String::from_utf8_lossy(&o.stdout);
    let cell = |t: &str| t.lines().find(|l| l.starts_with("CSP-LDA")).unwrap().to_string();
    assert_eq!(cell(&reprinted), cell(&table));
}

#[test]
fn generated_files_feed_run_and_preprocess() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    assert!(run(&["gen", "--config", &cfg, "--out", data.to_str().unwrap()]).status.success());

    let filtered = dir.path().join("f.epo");
    let o = run(&[
        "preprocess",
        "--config",
        &cfg,
        "--input",
        data.join("actual.epo").to_str().unwrap(),
        "--out",
        filtered.to_str().unwrap(),
        "--downsample",
        "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = read_epochs(&filtered).unwrap();
    assert_eq!((e.len(), e[0].n_samples(), e[0].fs), (40, 625, 125.0));

    // Reading the generated files gives the same numbers as generating
    // in memory, up to f32 storage.
    let from_files = dir.path().join("a");
    let in_memory = dir.path().join("b");
    for (out, input) in [(&from_files, Some(&data)), (&in_memory, None)] {
        let mut args = vec!["run", "--config", &cfg, "--pipeline", "csp-lda", "--condition", "touch"];
        let out_s = out.to_str().unwrap().to_string();
        args.extend(["--out", &out_s]);
        let input_s;
        if let Some(i) = input {
            input_s = i.to_str().unwrap().to_string();
            args.extend(["--input", &input_s]);
        }
        let o = run(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let cells = |d: &Path| fs::read_to_string(d.join("report.txt")).unwrap();
    assert!(cells(&from_files).contains("Actual touch"));
    assert!(!cells(&from_files).contains("Touch imagery  "));
}

#[test]
fn bad_thread_count_rejected() {
    let o = bin().env("NEURO_THREADS", "zero").args(["report", "--out", "."]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
