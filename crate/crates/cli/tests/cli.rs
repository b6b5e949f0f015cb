mod common;

use common::{lucent, path_str, stderr, stdout, write_corpus};
use lucent_core::checkpoint::{Checkpoint, VERSION};
use lucent_core::imaging::load_image;
use lucent_core::network::{CurveNet, CurveNetConfig};

#[test]
fn train_writes_checkpoint_and_history_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus, 4, 20, 18, "ppm");
    let ck = dir.path().join("run.lvnc");
    let args = |steps: &str| {
        vec![
            "train", "--input", path_str(&corpus), "--checkpoint", path_str(&ck), "--steps", steps,
            "--width", "4", "--image-size", "16", "--lr", "1e-3",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    };
    let a = args("50");
    let out = lucent(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", stderr(&out));
    let history = std::fs::read_to_string(ck.with_extension("csv")).unwrap();
    assert_eq!(history.lines().count(), 51);
    assert!(history.starts_with("step,epoch,total"));
    let first = Checkpoint::load(&ck).unwrap();
    assert_eq!(first.optimizer.step, 50);
    assert_eq!(first.net.config().width, 4);

    let a = args("5");
    let out = lucent(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", stderr(&out));
    let resumed = Checkpoint::load(&ck).unwrap();
    assert_eq!(resumed.optimizer.step, 55);
    let history = std::fs::read_to_string(ck.with_extension("csv")).unwrap();
    assert!(history.lines().nth(1).unwrap().starts_with("51,"));
}

#[test]
fn missing_corpus_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let ck = dir.path().join("x.lvnc");
    let out = lucent(&["train", "--input", path_str(&missing), "--checkpoint", path_str(&ck)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("corpus not found"));
}

#[test]
fn config_file_is_used_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let ck = dir.path().join("c.lvnc");
    std::fs::write(&cfg, format!("# init settings\nwidth = 5\nbranch_layers=2\ncheckpoint={}\n", ck.display())).unwrap();
    let out = lucent(&["init", "--config", path_str(&cfg), "--width", "6"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.net.config().width, 6);
    assert_eq!(loaded.net.config().branch_layers, 2);

    std::fs::write(&cfg, "unknown_key=1\n").unwrap();
    let out = lucent(&["init", "--config", path_str(&cfg), "--checkpoint", path_str(&ck)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn enhance_directory_skips_undecodable_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    write_corpus(&input, 2, 12, 10, "png");
    std::fs::write(input.join("broken.png"), b"not a png").unwrap();
    std::fs::write(input.join("notes.txt"), b"ignored").unwrap();
    let ck = dir.path().join("c.lvnc");
    assert!(lucent(&["init", "--checkpoint", path_str(&ck), "--width", "4"]).status.success());
    let output = dir.path().join("out");
    let out = lucent(&[
        "enhance", "--checkpoint", path_str(&ck), "--input", path_str(&input), "--output", path_str(&output),
        "--curve-maps",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("broken.png"));
    assert!(stdout(&out).contains("ms)"));
    let mut names: Vec<String> = std::fs::read_dir(&output)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["img0.png", "img0_curve.png", "img1.png", "img1_curve.png"]);
    let enhanced = load_image(output.join("img0.png")).unwrap();
    assert_eq!((enhanced.width(), enhanced.height()), (12, 10));
}

#[test]
fn evaluate_identical_dirs_and_csv_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    write_corpus(&a, 3, 16, 16, "png");
    write_corpus(&b, 3, 16, 16, "png");
    let report = dir.path().join("report.csv");
    let out = lucent(&["evaluate", "--input", path_str(&a), "--reference", path_str(&b), "--output", path_str(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("mean"));
    let csv = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        assert_eq!(row[1], "inf");
        assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
        assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
    }

    let c = dir.path().join("c");
    write_corpus(&c, 3, 16, 16, "png");
    std::fs::write(c.join("img0.png"), std::fs::read(a.join("img1.png")).unwrap()).unwrap();
    let out = lucent(&["evaluate", "--input", path_str(&a), "--reference", path_str(&c), "--output", path_str(&report)]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&report).unwrap();
    let parsed: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let (mean, data) = parsed.split_last().unwrap();
    for col in 0..3 {
        let m = data.iter().map(|r| r[col]).sum::<f64>() / data.len() as f64;
        assert_eq!(m, mean[col], "column {col}");
    }
}

#[test]
fn evaluate_missing_reference_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    write_corpus(&a, 1, 16, 16, "png");
    let missing = dir.path().join("missing");
    let out = lucent(&["evaluate", "--input", path_str(&a), "--reference", path_str(&missing)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_reports_parameter_total() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("c.lvnc");
    assert!(lucent(&["init", "--checkpoint", path_str(&ck), "--width", "8", "--seed", "3"]).status.success());
    let out = lucent(&["inspect", "--checkpoint", path_str(&ck)]);
    assert!(out.status.success());
    let text = stdout(&out);
    let expected = CurveNet::build(CurveNetConfig { seed: 3, ..CurveNetConfig::with_width(8) }).unwrap();
    let total_line = text.lines().find(|l| l.starts_with("total")).unwrap();
    let total: usize = total_line.split_whitespace().last().unwrap().parse().unwrap();
    assert_eq!(total, expected.param_count());
    assert_eq!(total, expected.describe().total);
    assert!(text.contains("net.width = 8"));
}

#[test]
fn inspect_corrupt_and_version_mismatch_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("c.lvnc");
    assert!(lucent(&["init", "--checkpoint", path_str(&ck), "--width", "4"]).status.success());
    let bytes = std::fs::read(&ck).unwrap();

    let truncated = dir.path().join("t.lvnc");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let out = lucent(&["inspect", "--checkpoint", path_str(&truncated)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("corrupt checkpoint"));

    let mut other = bytes.clone();
    other[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let bumped = dir.path().join("v.lvnc");
    std::fs::write(&bumped, other).unwrap();
    let out = lucent(&["inspect", "--checkpoint", path_str(&bumped)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("version"));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_lucent"))
        .args(["inspect", "--checkpoint", "x"])
        .env("LUCENT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
