use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use metric_distill::data::{load_csv_dataset, Dataset};
use metric_distill::eval::{evaluate, RetrievalReport};
use metric_distill::loss::DistillMode;
use metric_distill::model::{load_checkpoint, save_checkpoint, EmbeddingNet};
use metric_distill::trainer::{distill_student, train_teacher, EpochRecord, EpochSink, MetricsLog, TrainConfig};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SemiSection};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.log";
pub const REPORT_FILE: &str = "report.txt";
pub const SWEEP_FILE: &str = "sweep.txt";

/// Streams epoch lines, with timings, to stderr.
struct Progress {
    label: String,
}

impl EpochSink for Progress {
    fn record(&mut self, record: &EpochRecord) -> metric_distill::Result<()> {
        eprintln!("{} {}", self.label, record.to_line(true));
        Ok(())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Saves a checkpoint plus a `<file>.sha256` line and returns the hash.
fn save_hashed(net: &EmbeddingNet, path: &Path) -> Result<String, CliError> {
    save_checkpoint(net, path)?;
    let hash = sha256_file(path)?;
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".sha256");
    write_file(Path::new(&sidecar), format!("{hash}  {name}\n"))?;
    Ok(hash)
}

fn write_log(dir: &Path, log: &MetricsLog) -> Result<(), CliError> {
    let mut text = log.deterministic_lines();
    if let Some(best) = log.best_epoch {
        text.push_str(&format!("best_epoch={best}\n"));
    }
    write_file(&dir.join(METRICS_FILE), text)
}

fn load_teacher(path: &Path) -> Result<EmbeddingNet, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("teacher checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

pub fn train_teacher_cmd(config: &ExperimentConfig) -> Result<(), CliError> {
    let net = config.teacher_net()?;
    let train = config.teacher_train()?;
    config.validate_eval()?;
    config.write_snapshot()?;
    let dataset = config.dataset()?;
    let dir = config.output_dir();
    let outcome = train_teacher(&dataset, &net, &train, &mut Progress { label: "teacher".into() })?;
    write_log(dir, &outcome.log)?;
    let path = dir.join("teacher.ckpt");
    let hash = save_hashed(&outcome.net, &path)?;
    println!("checkpoint={} sha256={hash}", path.display());
    if let Some(r) = outcome.log.final_val_recall() {
        println!("val_recall@1={r:?}");
    }
    Ok(())
}

/// Command-line overrides for a distillation run.
#[derive(Clone, Debug, Default)]
pub struct DistillFlags {
    pub mode: Option<DistillMode>,
    pub hint: bool,
    pub attention: bool,
    pub lambda: Option<f64>,
    pub semi: Option<SemiSection>,
    pub cross_quality: Option<String>,
}

impl DistillFlags {
    pub fn merge_into(&self, config: &mut ExperimentConfig) {
        let t = &mut config.train;
        if let Some(mode) = self.mode {
            t.mode = Some(mode.to_string());
        }
        t.hint |= self.hint;
        t.attention |= self.attention;
        if self.lambda.is_some() {
            t.lambda = self.lambda;
        }
        if self.semi.is_some() {
            t.semi = self.semi.clone();
        }
        if self.cross_quality.is_some() {
            t.cross_quality = self.cross_quality.clone();
        }
    }
}

/// `0.5`, `0.5+unlabeled` or `kd-only`.
pub fn parse_semi(s: &str) -> Result<SemiSection, String> {
    if s == "kd-only" {
        return Ok(SemiSection {
            labeled_fraction: 1.0,
            use_unlabeled: true,
            kd_only: true,
        });
    }
    let (fraction, use_unlabeled) = match s.strip_suffix("+unlabeled") {
        Some(f) => (f, true),
        None => (s, false),
    };
    let labeled_fraction: f64 = fraction
        .parse()
        .map_err(|_| format!("expected FRACTION, FRACTION+unlabeled or kd-only, got `{s}`"))?;
    Ok(SemiSection {
        labeled_fraction,
        use_unlabeled,
        kd_only: false,
    })
}

pub fn distill_cmd(config: &ExperimentConfig, teacher_path: &Path) -> Result<(), CliError> {
    let teacher = load_teacher(teacher_path)?;
    let (student, train) = config.validate_distill(teacher.config())?;
    let snapshot = config.write_snapshot()?;
    let dir = config.output_dir();
    let teacher_hash = sha256_file(teacher_path)?;
    write_file(&dir.join("teacher.sha256"), format!("{teacher_hash}  {}\n", teacher_path.display()))?;
    let dataset = config.dataset()?;

    let label = format!("student[{}]", train.mode);
    let outcome = distill_student(&teacher, &dataset, &student, &train, &mut Progress { label })?;
    if sha256_file(teacher_path)? != teacher_hash {
        return Err(CliError::Numeric(format!("teacher checkpoint {} changed during distillation", teacher_path.display())));
    }
    write_log(dir, &outcome.log)?;
    let path = dir.join("student.ckpt");
    let hash = save_hashed(&outcome.net, &path)?;
    let test = &dataset.split().expect("dataset is split").test;
    let report = evaluate(&outcome.net, &dataset, test, &config.eval.k)?;
    write_file(&dir.join(REPORT_FILE), report.to_lines())?;
    println!("snapshot={}", snapshot.display());
    println!("checkpoint={} sha256={hash}", path.display());
    print!("{}", report.to_lines());
    Ok(())
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| format!("cannot parse list element `{p}`")))
        .collect()
}

/// Evaluates on every sample of a CSV dataset, or on the test split of an
/// experiment config.
pub fn eval_cmd(checkpoint: &Path, dataset: &Path, k: &[usize], out: Option<&Path>) -> Result<RetrievalReport, CliError> {
    if k.is_empty() || k.contains(&0) {
        return Err(CliError::Config("--k must be a non-empty list of positive integers".into()));
    }
    if !checkpoint.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let net = load_checkpoint(checkpoint)?;
    let (data, indices): (Dataset, Vec<usize>) = if dataset.extension().is_some_and(|e| e == "toml") {
        let ds = ExperimentConfig::load(dataset)?.dataset()?;
        let test = ds.split().expect("dataset is split").test.clone();
        (ds, test)
    } else {
        let ds = load_csv_dataset(dataset)?;
        let all = (0..ds.len()).collect();
        (ds, all)
    };
    if data.sample_shape() != net.config().input.sample_shape().as_slice() {
        return Err(CliError::Config(format!(
            "dataset samples have shape {:?}, checkpoint expects {:?}",
            data.sample_shape(),
            net.config().input.sample_shape()
        )));
    }
    let report = evaluate(&net, &data, &indices, k)?;
    let out = out.map_or_else(
        || {
            let stem = dataset.file_stem().unwrap_or_default().to_string_lossy();
            checkpoint.with_file_name(format!("eval_{stem}.txt"))
        },
        Path::to_path_buf,
    );
    write_file(&out, report.to_lines())?;
    print!("{}", report.to_lines());
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct SweepRequest {
    pub values: Vec<f64>,
    pub modes: Vec<DistillMode>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub teacher: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub mode: DistillMode,
    pub lambda: f64,
    pub val_recall: Option<f64>,
    pub test_recall: Option<f64>,
    pub runs: usize,
    pub failed: usize,
}

impl SweepRow {
    pub fn to_line(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |r| format!("{r:?}"));
        format!(
            "mode={} lambda={:?} val_recall@1={} test_recall@1={} runs={} failed={}",
            self.mode,
            self.lambda,
            fmt(self.val_recall),
            fmt(self.test_recall),
            self.runs,
            self.failed
        )
    }
}

struct RunResult {
    mode: DistillMode,
    lambda: f64,
    seed: u64,
    outcome: Result<(Option<f64>, f64), String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn sweep_cmd(config: &ExperimentConfig, req: &SweepRequest) -> Result<Vec<SweepRow>, CliError> {
    if req.values.is_empty() {
        return Err(CliError::Config("--values must list at least one lambda".into()));
    }
    if let Some(v) = req.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(CliError::Config(format!("lambda values must be finite and >= 0, got {v}")));
    }
    if req.modes.is_empty() || req.modes.contains(&DistillMode::Baseline) {
        return Err(CliError::Config("--modes must list abs and/or rel".into()));
    }
    if req.seeds.is_empty() || req.jobs == 0 {
        return Err(CliError::Config("--seeds and --jobs must be non-empty and positive".into()));
    }
    let teacher_cfg = config.teacher_net()?;
    let mut configs = Vec::new();
    for &mode in &req.modes {
        for &lambda in &req.values {
            for &seed in &req.seeds {
                let mut c = config.clone();
                c.train.mode = Some(mode.to_string());
                c.train.lambda = Some(lambda);
                c.train.seed = seed;
                let (_, train) = c.validate_distill(&teacher_cfg)?;
                configs.push((mode, lambda, seed, train));
            }
        }
    }
    let student_cfg = config.student_net()?;
    config.write_snapshot()?;
    let dir = config.output_dir();
    let dataset = config.dataset()?;
    let teacher = match &req.teacher {
        Some(path) => load_teacher(path)?,
        None => {
            let outcome = train_teacher(&dataset, &teacher_cfg, &config.teacher_train()?, &mut Progress { label: "teacher".into() })?;
            save_hashed(&outcome.net, &dir.join("teacher.ckpt"))?;
            outcome.net
        }
    };
    if teacher.config().input != student_cfg.input {
        return Err(CliError::Config("teacher and student inputs differ".into()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    let test = dataset.split().expect("dataset is split").test.clone();
    let run = |(mode, lambda, seed, train): &(DistillMode, f64, u64, TrainConfig)| {
        let started = Instant::now();
        let outcome = distill_student(&teacher, &dataset, &student_cfg, train, &mut metric_distill::trainer::NoSink)
            .and_then(|out| {
                let r = evaluate(&out.net, &dataset, &test, &[1])?;
                Ok((out.log.final_val_recall(), r.recall(1).unwrap_or(f64::NAN)))
            })
            .map_err(|e| e.to_string());
        eprintln!("sweep mode={mode} lambda={lambda:?} seed={seed} done in {:.1}s", started.elapsed().as_secs_f64());
        RunResult {
            mode: *mode,
            lambda: *lambda,
            seed: *seed,
            outcome,
        }
    };
    let results: Vec<RunResult> = pool.install(|| configs.par_iter().map(run).collect());

    let mut rows = Vec::new();
    let mut failures = String::new();
    for &mode in &req.modes {
        for &lambda in &req.values {
            let group: Vec<&RunResult> = results.iter().filter(|r| r.mode == mode && r.lambda == lambda).collect();
            let ok: Vec<(Option<f64>, f64)> = group.iter().filter_map(|r| r.outcome.clone().ok()).collect();
            for r in &group {
                if let Err(e) = &r.outcome {
                    failures.push_str(&format!("mode={} lambda={:?} seed={} error={e:?}\n", r.mode, r.lambda, r.seed));
                }
            }
            rows.push(SweepRow {
                mode,
                lambda,
                val_recall: mean(ok.iter().filter_map(|o| o.0)),
                test_recall: mean(ok.iter().map(|o| o.1)),
                runs: group.len(),
                failed: group.len() - ok.len(),
            });
        }
    }
    let table: String = rows.iter().map(|r| r.to_line() + "\n").collect();
    write_file(&dir.join(SWEEP_FILE), &table)?;
    if !failures.is_empty() {
        write_file(&dir.join("sweep_failures.txt"), &failures)?;
        eprint!("{failures}");
    }
    print!("{table}");
    std::io::stdout().flush().ok();
    if rows.iter().all(|r| r.failed == r.runs) {
        return Err(CliError::Numeric("every sweep run failed".into()));
    }
    Ok(rows)
}
