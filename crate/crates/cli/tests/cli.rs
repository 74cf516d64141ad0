use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[dataset]
source = "synthetic"
num_classes = 8
per_class = 12
input_dim = 6
intra_std = 1.0
inter_scale = 3.0
seed = 0
split_seed = 0

[teacher]
input = "vector:6"
layers = "affine:24,relu,affine:8"
embedding_dim = 8

[student]
input = "vector:6"
layers = "affine:6,relu,affine:8"
embedding_dim = 8

[train]
lr = 0.01
epochs = 3
batch_size = 16
classes_per_batch = 4
seed = 0
hint_pairs = [["affine2", "affine2"]]

[eval]
k = [1, 2, 4]
"#;

fn mdistill(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdistill"))
        .args(args)
        .env("MDISTILL_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn fields(line: &str) -> BTreeMap<&str, &str> {
    line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the shared teacher into `<root>/<stem>/teacher.ckpt`.
fn teacher(root: &Path) -> PathBuf {
    let config = write_config(root, "exp.toml", CONFIG);
    let o = mdistill(&["train-teacher", path_str(&config)], root);
    assert!(o.status.success(), "{}", stderr(&o));
    root.join("exp").join("teacher.ckpt")
}

#[test]
fn train_teacher_writes_artifacts_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let ckpt = teacher(root.path());
    let dir = ckpt.parent().unwrap();
    for f in ["teacher.ckpt", "teacher.ckpt.sha256", "metrics.log", "config.snapshot.toml"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let hash = std::fs::read_to_string(dir.join("teacher.ckpt.sha256")).unwrap();
    let log = std::fs::read(dir.join("metrics.log")).unwrap();
    assert_eq!(String::from_utf8_lossy(&log).lines().filter(|l| l.starts_with("epoch=")).count(), 3);

    let o = mdistill(&["train-teacher", path_str(&root.path().join("exp.toml"))], root.path());
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(dir.join("teacher.ckpt.sha256")).unwrap(), hash);
    assert_eq!(std::fs::read(dir.join("metrics.log")).unwrap(), log);
    assert!(stdout(&o).contains(hash.split_whitespace().next().unwrap()));
}

#[test]
fn missing_field_exits_2_and_names_it() {
    let root = tempfile::tempdir().unwrap();
    let config = write_config(root.path(), "bad.toml", &CONFIG.replace("batch_size = 16\n", ""));
    let o = mdistill(&["train-teacher", path_str(&config)], root.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
    assert!(!root.path().join("bad").exists());
}

#[test]
fn numeric_blow_up_exits_3_after_snapshot() {
    let root = tempfile::tempdir().unwrap();
    let config = write_config(root.path(), "hot.toml", &CONFIG.replace("lr = 0.01", "lr = 1e306"));
    let o = mdistill(&["train-teacher", path_str(&config)], root.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(root.path().join("hot").join("config.snapshot.toml").exists());
}

#[test]
fn distill_modes_flags_and_errors() {
    let root = tempfile::tempdir().unwrap();
    let ckpt = teacher(root.path());
    let config = path_str(&root.path().join("exp.toml")).to_string();
    let run = |extra: &[&str], out: &str| {
        let out_dir = root.path().join(out);
        let mut args = vec!["distill", &config, "--teacher", path_str(&ckpt), "--out", path_str(&out_dir)];
        args.extend_from_slice(extra);
        (mdistill(&args, root.path()), out_dir)
    };

    let (o, dir) = run(&["--mode", "rel"], "rel");
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.join("report.txt")).unwrap();
    let recalls: Vec<f64> = report.lines().map(|l| fields(l)["recall"].parse().unwrap()).collect();
    assert_eq!(recalls.len(), 3);
    assert!(recalls.windows(2).all(|w| w[0] <= w[1]));
    let snapshot = std::fs::read_to_string(dir.join("config.snapshot.toml")).unwrap();
    assert!(snapshot.contains("mode = \"rel\""), "{snapshot}");

    let (zero, zero_dir) = run(&["--mode", "rel", "--lambda", "0"], "zero");
    let (base, base_dir) = run(&["--mode", "baseline"], "base");
    assert!(zero.status.success() && base.status.success());
    let first_line = |d: &Path| std::fs::read_to_string(d.join("report.txt")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(first_line(&zero_dir), first_line(&base_dir));

    let (o, dir) = run(&["--semi", "0.5+unlabeled", "--cross-quality", "noise:0.3", "--hint"], "mixed");
    assert!(o.status.success(), "{}", stderr(&o));
    let snapshot = std::fs::read_to_string(dir.join("config.snapshot.toml")).unwrap();
    assert!(snapshot.contains("use_unlabeled = true") && snapshot.contains("noise:0.3") && snapshot.contains("hint = true"));

    let bad = write_config(root.path(), "taps.toml", &CONFIG.replace(r#"[["affine2", "affine2"]]"#, r#"[["affine0", "affine0"]]"#));
    let o = mdistill(&["distill", path_str(&bad), "--teacher", path_str(&ckpt), "--hint"], root.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("(affine0 <- affine0)"), "{}", stderr(&o));

    let o = mdistill(&["distill", &config, "--teacher", "/nonexistent/teacher.ckpt"], root.path());
    assert_eq!(o.status.code(), Some(2));
    let (o, _) = run(&["--semi", "most"], "x");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_reports_round_trip_and_reject_missing_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let ckpt = teacher(root.path());
    let config = root.path().join("exp.toml");
    let o = mdistill(
        &["eval", "--checkpoint", path_str(&ckpt), "--dataset", path_str(&config), "--k", "1,2,3,4,5,6,7,8"],
        root.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let written = std::fs::read_to_string(ckpt.with_file_name("eval_exp.txt")).unwrap();
    assert_eq!(written, stdout(&o));
    let mut previous = 0.0;
    for line in written.lines() {
        let f = fields(line);
        let r: f64 = f["recall"].parse().unwrap();
        assert!(r >= previous);
        previous = r;
        assert_eq!(f["num_queries"], "48");
    }

    let csv = root.path().join("d.csv");
    let mut text = String::new();
    for i in 0..12 {
        text.push_str(&format!("{},{}\n", i % 3, (0..6).map(|k| format!("{}", (i * 7 + k) % 5)).collect::<Vec<_>>().join(",")));
    }
    std::fs::write(&csv, text).unwrap();
    let o = mdistill(&["eval", "--checkpoint", path_str(&ckpt), "--dataset", path_str(&csv)], root.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 5);

    let o = mdistill(&["eval", "--checkpoint", "/nonexistent.ckpt", "--dataset", path_str(&csv)], root.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_rows_are_ordered_and_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let ckpt = teacher(root.path());
    let config = path_str(&root.path().join("exp.toml")).to_string();
    let sweep = |values: &str, jobs: &str, out: &str| {
        let out_dir = root.path().join(out);
        mdistill(
            &[
                "sweep-lambda", &config, "--values", values, "--seeds", "0,1", "--jobs", jobs,
                "--teacher", path_str(&ckpt), "--out", path_str(&out_dir),
            ],
            root.path(),
        )
    };
    let o = sweep("", "1", "empty");
    assert_eq!(o.status.code(), Some(2));

    let single = sweep("10", "1", "single");
    assert!(single.status.success(), "{}", stderr(&single));
    let lines: Vec<String> = stdout(&single).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(fields(&lines[0])["mode"], "abs");
    assert_eq!(fields(&lines[1])["mode"], "rel");
    assert_eq!(fields(&lines[1])["runs"], "2");

    let serial = sweep("1,10", "1", "serial");
    let parallel = sweep("1,10", "3", "parallel");
    assert!(serial.status.success() && parallel.status.success());
    assert_eq!(stdout(&serial), stdout(&parallel));
    assert_eq!(stdout(&serial).lines().count(), 4);
    assert_eq!(
        std::fs::read_to_string(root.path().join("parallel").join("sweep.txt")).unwrap(),
        stdout(&parallel)
    );
}

#[test]
fn gradcheck_passes_and_the_broken_fixture_fails() {
    let root = tempfile::tempdir().unwrap();
    let o = mdistill(&["gradcheck"], root.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    let rows: Vec<BTreeMap<&str, &str>> = out.lines().filter(|l| l.starts_with("kind=")).map(fields).collect();
    assert!(rows.len() > 20);
    for row in &rows {
        assert!(row["max_rel_error"].parse::<f64>().unwrap() < 1e-4);
        assert_eq!(row["status"], "pass");
    }
    for kind in ["primitive", "loss", "network"] {
        assert!(rows.iter().any(|r| r["kind"] == kind));
    }

    let o = mdistill(&["gradcheck", "--broken-fixture"], root.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("case=detached-square") && stdout(&o).contains("status=fail"));
}
