//! End-to-end runs of the `tsam` binary on a synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--train.epochs=2",
    "--model.dim=16",
    "--encoder.ffn_dim=16",
    "--decoder.ffn_dim=16",
    "--train.batch_size=64",
];

fn tsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsam"))
        .args(args)
        .env_remove("TSAM_SEED")
        .output()
        .expect("spawn tsam")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&tsam(&["synth", "--out", &s(&data)]));
    data
}

struct Run {
    _tmp: TempDir,
    dir: PathBuf,
    ckpt: PathBuf,
    log: PathBuf,
}

fn train(extra: &[&str]) -> Run {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().to_path_buf();
    let data = synth(&dir);
    let ckpt = dir.join("model.tsck");
    let log = dir.join("train.log");
    let mut args = vec![
        "train".to_string(),
        format!("--data.dir={}", s(&data)),
        format!("--train.checkpoint={}", s(&ckpt)),
        format!("--train.log={}", s(&log)),
    ];
    args.extend(SMALL.iter().map(|a| a.to_string()));
    args.extend(extra.iter().map(|a| a.to_string()));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&tsam(&argv));
    Run {
        _tmp: tmp,
        dir,
        ckpt,
        log,
    }
}

/// The numeric rows of a training log, one `Vec` per epoch.
fn log_rows(text: &str) -> Vec<Vec<f64>> {
    let mut lines = text.lines().skip_while(|l| l.starts_with("# "));
    assert_eq!(lines.next(), Some("epoch\tL_p\tL_SV\tL_ST\tL\tvalid_mrr"));
    lines
        .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn logged_config(text: &str, key: &str) -> Option<String> {
    text.lines()
        .filter_map(|l| l.strip_prefix("# "))
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
}

#[test]
fn missing_config_exits_with_config_error() {
    let out = tsam(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/run.cfg"), "{err}");
}

#[test]
fn unknown_override_is_a_config_error() {
    let out = tsam(&["train", "--sacl.temperature=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sacl.temperature"));
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    ok(&tsam(&["synth", "--out", &s(&a)]));
    ok(&tsam(&["synth", "--out", &s(&b)]));
    ok(&tsam(&["synth", "--out", &s(&c), "--seed", "8"]));
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.contains(&"train.txt".to_string()));
    assert!(names.iter().any(|n| n.ends_with(".mmtk")), "{names:?}");
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    assert_ne!(
        fs::read(a.join("train.txt")).unwrap(),
        fs::read(c.join("train.txt")).unwrap()
    );
}

#[test]
fn inspect_bank_and_corrupt_file() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let bank = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "mmtk"))
        .unwrap();
    let out = ok(&tsam(&["inspect", &s(&bank)]));
    assert!(out.contains("modality:"));
    assert!(out.contains("dim: 16"), "{out}");
    assert!(out.contains("entity_count: 50"), "{out}");

    let bad = tmp.path().join("bad.mmtk");
    fs::write(&bad, b"XXXXnot a bank").unwrap();
    let o = tsam(&["inspect", &s(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));

    let mut cut = fs::read(&bank).unwrap();
    cut.truncate(cut.len() / 2);
    fs::write(&bad, cut).unwrap();
    let o = tsam(&["inspect", &s(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let run = train(&["--sacl.tau=0.25", "--sacl.k=4", "--train.seed=11"]);
    assert!(run.ckpt.exists());
    let text = fs::read_to_string(&run.log).unwrap();
    assert_eq!(logged_config(&text, "sacl.tau").as_deref(), Some("0.25"));
    assert_eq!(logged_config(&text, "sacl.k").as_deref(), Some("4"));
    assert_eq!(logged_config(&text, "train.seed").as_deref(), Some("11"));
    assert_eq!(logged_config(&text, "train.epochs").as_deref(), Some("2"));
    assert!(logged_config(&text, "config_hash").is_some_and(|h| h.len() == 16));
    let rows = log_rows(&text);
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.len(), 6);
        assert!(r[1..].iter().all(|v| v.is_finite()));
    }

    let out = ok(&tsam(&["inspect", &s(&run.ckpt)]));
    assert!(out.contains("epoch:"));
    assert!(out.contains(&format!(
        "config_hash: {}",
        logged_config(&text, "config_hash").unwrap()
    )));
}

#[test]
fn disabled_visual_alignment_logs_zero() {
    let run = train(&["--sacl.enable_sv=false"]);
    let rows = log_rows(&fs::read_to_string(&run.log).unwrap());
    assert!(rows.iter().all(|r| r[2] == 0.0));
    assert!(rows.iter().all(|r| r[3] > 0.0));
}

#[test]
fn seed_env_overrides_config_seed() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let log = tmp.path().join("t.log");
    let out = Command::new(env!("CARGO_BIN_EXE_tsam"))
        .args([
            "train",
            &format!("--data.dir={}", s(&data)),
            &format!("--train.checkpoint={}", s(&tmp.path().join("m.tsck"))),
            &format!("--train.log={}", s(&log)),
            "--train.epochs=1",
            "--model.dim=8",
            "--encoder.ffn_dim=8",
            "--decoder.ffn_dim=8",
        ])
        .env("TSAM_SEED", "1234")
        .output()
        .unwrap();
    ok(&out);
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(logged_config(&text, "train.seed").as_deref(), Some("1234"));
}

#[test]
fn eval_is_repeatable_and_filtering_helps() {
    let run = train(&[]);
    let ck = s(&run.ckpt);
    let metrics = |split: &str, setting: &str| {
        fs::read_to_string(format!("{ck}.{split}.{setting}.metrics")).unwrap()
    };

    ok(&tsam(&["eval", "--checkpoint", &ck, "--split", "test"]));
    let first = metrics("test", "filtered");
    ok(&tsam(&["eval", "--checkpoint", &ck, "--split", "test"]));
    assert_eq!(first, metrics("test", "filtered"));
    assert!(first.contains("setting=filtered"));
    assert!(first.contains("queries=40"));

    ok(&tsam(&["eval", "--checkpoint", &ck, "--split", "valid"]));
    assert!(metrics("valid", "filtered").contains("split=valid"));
    assert_ne!(first, metrics("valid", "filtered"));

    let fdump = run.dir.join("f.tsv");
    let rdump = run.dir.join("r.tsv");
    ok(&tsam(&["eval", "--checkpoint", &ck, "--filtered", "--dump-scores", &s(&fdump)]));
    ok(&tsam(&["eval", "--checkpoint", &ck, "--raw", "--dump-scores", &s(&rdump)]));
    assert!(metrics("test", "raw").contains("setting=raw"));
    let rows = |p: &Path| -> Vec<Vec<String>> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split('\t').map(str::to_string).collect())
            .collect()
    };
    let (f, r) = (rows(&fdump), rows(&rdump));
    assert_eq!(f.len(), 40);
    assert_eq!(f.len(), r.len());
    for (a, b) in f.iter().zip(&r) {
        assert_eq!(a[..3], b[..3]);
        assert_eq!(a.len(), 4 + 50);
        assert_eq!(a[4..], b[4..]);
        let (fa, ra): (usize, usize) = (a[3].parse().unwrap(), b[3].parse().unwrap());
        assert!(fa <= ra, "filtered {fa} > raw {ra}");
    }
}

#[test]
fn checkpoint_with_other_version_is_rejected() {
    let run = train(&["--train.epochs=1"]);
    let mut bytes = fs::read(&run.ckpt).unwrap();
    bytes[4] = 9;
    bytes[5] = 0;
    let bad = run.dir.join("v9.tsck");
    fs::write(&bad, bytes).unwrap();
    for args in [
        vec!["inspect", bad.to_str().unwrap()],
        vec!["eval", "--checkpoint", bad.to_str().unwrap()],
    ] {
        let out = tsam(&args);
        assert_eq!(out.status.code(), Some(3));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("version 9"), "{err}");
    }
}

#[test]
fn ablate_reports_five_variants() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let out_dir = tmp.path().join("abl");
    let mut args = vec![
        "ablate".to_string(),
        format!("--data.dir={}", s(&data)),
        "--out-dir".to_string(),
        s(&out_dir),
        "--train.epochs=1".to_string(),
        "--model.dim=8".to_string(),
        "--encoder.ffn_dim=8".to_string(),
        "--decoder.ffn_dim=8".to_string(),
    ];
    args.push("--train.seed=5".to_string());
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&tsam(&argv));

    let report = fs::read_to_string(out_dir.join("ablation.txt")).unwrap();
    let labels = ["full", "w/o FgMAF", "w/o SaCL", "w/o L_ST", "w/o L_SV"];
    for l in labels {
        let row = report
            .lines()
            .find(|line| line.starts_with(l) && !line.contains('\t'))
            .unwrap_or_else(|| panic!("no row for {l}\n{report}"));
        let nums: Vec<f64> = row[l.len()..]
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(nums.len(), 4, "{row}");
        assert!(nums.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(report.contains(&format!("{l}\tseed=5\tconfig_hash=")));
    }

    let wo = fs::read_to_string(out_dir.join("wo_sacl.log")).unwrap();
    assert!(wo.contains("# seed = 5"));
    assert!(wo.contains("# config_hash = "));
    for r in log_rows(&wo) {
        assert_eq!((r[2], r[3]), (0.0, 0.0));
    }
    let full = log_rows(&fs::read_to_string(out_dir.join("full.log")).unwrap());
    assert!(full.iter().all(|r| r[2] > 0.0 && r[3] > 0.0));
}

#[test]
fn sweep_writes_report() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let out = tmp.path().join("sweep.txt");
    ok(&tsam(&[
        "sweep",
        &format!("--data.dir={}", s(&data)),
        "--taus",
        "0.1,0.5",
        "--ks",
        "4",
        "--out",
        &s(&out),
        "--train.epochs=1",
        "--model.dim=8",
        "--encoder.ffn_dim=8",
        "--decoder.ffn_dim=8",
    ]));
    let text = fs::read_to_string(out).unwrap();
    for label in ["tau=0.1", "tau=0.5", "K=4"] {
        assert!(text.lines().any(|l| l.starts_with(label)), "{label}\n{text}");
    }
}
