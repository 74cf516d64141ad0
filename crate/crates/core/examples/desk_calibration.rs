//! Desk-scale comparison of baseline, absolute and relative students on the
//! synthetic cluster dataset. Knobs come from environment variables so the
//! same binary can scan settings:
//!
//! ```text
//! CAL_INTRA=0.5 CAL_EMB=64 CAL_LR=1e-3 CAL_TEACHER_EPOCHS=40 CAL_EPOCHS=60 \
//!     cargo run --release --example desk_calibration
//! ```

use std::time::Instant;

use metric_distill::data::{gen_synthetic_clusters, split_classes_half, SyntheticSpec};
use metric_distill::eval::{evaluate, recall_at_k};
use metric_distill::loss::DistillMode;
use metric_distill::model::{init_params, NetConfig};
use metric_distill::trainer::{distill_student, train_teacher, NoSink, SemiConfig, TrainConfig};

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> metric_distill::Result<()> {
    let spec = SyntheticSpec {
        intra_std: knob("CAL_INTRA", 0.5),
        inter_scale: knob("CAL_INTER", 5.0),
        input_dim: knob("CAL_DIM", 32),
        ..SyntheticSpec::default()
    };
    let emb: usize = knob("CAL_EMB", 64);
    let lr: f64 = knob("CAL_LR", 1e-3);
    let hidden: usize = knob("CAL_HIDDEN", 16);
    let teacher_lr: f64 = knob("CAL_TEACHER_LR", lr);
    let teacher_epochs: usize = knob("CAL_TEACHER_EPOCHS", 40);
    let epochs: usize = knob("CAL_EPOCHS", 60);
    let seeds: u64 = knob("CAL_SEEDS", 3);
    let semi: bool = knob("CAL_SEMI", 0u8) == 1;

    let lambda: Option<f64> = std::env::var("CAL_LAMBDA").ok().and_then(|v| v.parse().ok());
    let dataset = split_classes_half(&gen_synthetic_clusters(&spec)?, 0)?;
    let test = dataset.split().unwrap().test.clone();
    let raw = recall_at_k(&dataset.gather(&test)?, &dataset.labels_of(&test), &[1])?;
    println!("raw input test R@1 {:.4}", raw.recall(1).unwrap());
    let started = Instant::now();
    let teacher_cfg = NetConfig::teacher(spec.input_dim, emb);
    let teacher = train_teacher(
        &dataset,
        &teacher_cfg,
        &TrainConfig {
            lr: teacher_lr,
            epochs: teacher_epochs,
            ..TrainConfig::default()
        },
        &mut NoSink,
    )?
    .net;
    let r = |net: &metric_distill::model::EmbeddingNet| evaluate(net, &dataset, &test, &[1]).map(|r| r.recall(1).unwrap());
    println!("teacher test R@1 {:.4} ({:.1}s)", r(&teacher)?, started.elapsed().as_secs_f64());

    let student_cfg = NetConfig::mlp(spec.input_dim, &[hidden], emb);
    let mut untrained: Vec<f64> = (0..seeds)
        .map(|seed| r(&init_params(&student_cfg, seed)?))
        .collect::<metric_distill::Result<_>>()?;
    untrained.sort_by(f64::total_cmp);
    println!("untrained student median R@1 {:.4}  all {:?}", untrained[untrained.len() / 2], untrained);
    let mut runs: Vec<(&str, DistillMode, Option<SemiConfig>)> = vec![
        ("baseline", DistillMode::Baseline, None),
        ("abs", DistillMode::Absolute, None),
        ("rel", DistillMode::Relative, None),
    ];
    if semi {
        let half = |use_unlabeled, kd_only| SemiConfig {
            labeled_fraction: 0.5,
            use_unlabeled,
            kd_only,
        };
        runs = vec![
            ("rel-50%", DistillMode::Relative, Some(half(false, false))),
            ("rel-50%+unlabeled", DistillMode::Relative, Some(half(true, false))),
            ("rel-kd-only", DistillMode::Relative, Some(half(true, true))),
        ];
    }
    for (name, mode, semi) in runs {
        let mut scores = Vec::new();
        for seed in 0..seeds {
            let mut cfg = TrainConfig::for_mode(mode);
            cfg.lr = lr;
            if let (Some(l), true) = (lambda, mode != DistillMode::Baseline) {
                cfg.weights.lambda = l;
            }
            cfg.epochs = epochs;
            cfg.seed = seed;
            cfg.semi = semi;
            let t0 = Instant::now();
            let out = distill_student(&teacher, &dataset, &student_cfg, &cfg, &mut NoSink)?;
            scores.push(r(&out.net)?);
            eprintln!("  {name} seed {seed}: {:.4} ({:.1}s)", scores.last().unwrap(), t0.elapsed().as_secs_f64());
        }
        scores.sort_by(f64::total_cmp);
        println!("{name:>18} median R@1 {:.4}  all {:?}", scores[scores.len() / 2], scores);
    }
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
