use std::fs;

use gridrl::policy::data::heldout_set;
use gridrl::policy::{checkpoint, PolicyParams, PromptSet, SamplingOptions, Task};
use gridrl::trainer::metrics::METRICS_HEADER;
use gridrl::trainer::{
    compare_runs, evaluate, format_report, read_metrics, run_pretrain, run_rl, summarize, temperature_sweep, TrainConfig,
};
use gridrl::Error;

fn tiny() -> TrainConfig {
    TrainConfig {
        grid_h: 4,
        grid_w: 4,
        vocab: 16,
        code_dim: 8,
        categories: 4,
        hidden: 12,
        group_size: 4,
        batch_size: 2,
        learning_rate: 1e-3,
        total_steps: 6,
        eval_every: 3,
        eval_prompts: 4,
        eval_samples: 2,
        pretrain_steps: 5,
        pretrain_batch: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_step_pretrain_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        pretrain_steps: 0,
        ..tiny()
    };
    let path = dir.path().join("ref.stg");
    let rep = run_pretrain(&cfg, Some(&path)).unwrap();
    let init = PolicyParams::init(cfg.dims(), cfg.seed).unwrap();
    assert_eq!(rep.params, init);
    assert_eq!(checkpoint::load(&path).unwrap(), init);
    assert!(rep.losses.is_empty());
}

#[test]
fn pretraining_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (a, b) = (dir.path().join("a.stg"), dir.path().join("b.stg"));
    run_pretrain(&cfg, Some(&a)).unwrap();
    run_pretrain(&cfg, Some(&b)).unwrap();
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn pretrain_report_matches_evaluate() {
    let cfg = tiny();
    let rep = run_pretrain(&cfg, None).unwrap();
    let set = heldout_set(&[Task::Counting], cfg.eval_prompts, cfg.categories, cfg.grid(), cfg.eval_seed);
    let ev = evaluate(
        &rep.params,
        &cfg.codebook().unwrap(),
        &set,
        cfg.eval_samples,
        &SamplingOptions::default(),
        cfg.eval_seed,
        &cfg.reward_options(),
    )
    .unwrap();
    assert_eq!(ev.overall.mean_reward, rep.heldout_counting);
}

#[test]
fn unwritable_checkpoint_is_an_io_error() {
    let cfg = TrainConfig {
        pretrain_steps: 0,
        ..tiny()
    };
    let err = run_pretrain(&cfg, Some(std::path::Path::new("/nonexistent/dir/ref.stg"))).unwrap_err();
    assert!(matches!(err, Error::Io(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn rl_run_writes_one_metrics_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        render_every: 2,
        ..tiny()
    };
    let reference = PolicyParams::init(cfg.dims(), 1).unwrap();
    let out = run_rl(&cfg, &reference, Some(dir.path())).unwrap();
    assert_eq!(out.metrics.len(), cfg.total_steps);
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), cfg.total_steps);
    let back = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(back.len(), cfg.total_steps);
    assert!(back.iter().enumerate().all(|(i, r)| r.step == i));
    for m in &back {
        assert!((0.0..=1.0).contains(&m.mean_reward));
        assert!(m.kl >= 0.0);
    }
    // Evals at 0, 3 and 6; renders at 0, 2, 4.
    let evals = fs::read_to_string(dir.path().join("evals.csv")).unwrap();
    assert_eq!(evals.lines().filter(|l| l.contains(",overall,")).count(), 3);
    assert_eq!(fs::read_dir(dir.path().join("renders")).unwrap().count(), 3);
    assert_eq!(checkpoint::load(&dir.path().join("final.stg")).unwrap(), out.params);
    let cfg_back = TrainConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(cfg_back, cfg);
}

#[test]
fn rl_rejects_mismatched_reference() {
    let cfg = tiny();
    let other = PolicyParams::init(TrainConfig::default().dims(), 0).unwrap();
    assert!(matches!(run_rl(&cfg, &other, None), Err(Error::Argument(_))));
}

#[test]
fn entropy_mode_does_not_change_sampled_tokens() {
    use gridrl::rewards::EntropyRewardMode;
    use gridrl::trainer::collect_groups;
    let cfg = tiny();
    let cb = cfg.codebook().unwrap();
    let policy = PolicyParams::init(cfg.dims(), 4).unwrap();
    let reference = PolicyParams::init(cfg.dims(), 5).unwrap();
    let tokens = |mode| {
        let c = TrainConfig {
            entropy_reward_mode: mode,
            reweight_advantage: mode == EntropyRewardMode::Top,
            ..cfg.clone()
        };
        let b = collect_groups(&c, &cb, &policy, &reference, 3).unwrap();
        b.groups.iter().flat_map(|g| g.rollouts.iter().map(|r| r.tokens.clone())).collect::<Vec<_>>()
    };
    assert_eq!(tokens(EntropyRewardMode::Top), tokens(EntropyRewardMode::Off));
}

#[test]
fn nan_loss_aborts_with_a_group_dump() {
    use gridrl::numerics::Adam;
    use gridrl::trainer::{collect_groups, update};
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let cb = cfg.codebook().unwrap();
    let mut params = PolicyParams::init(cfg.dims(), 4).unwrap();
    let reference = PolicyParams::init(cfg.dims(), 5).unwrap();
    let mut batch = collect_groups(&cfg, &cb, &params, &reference, 0).unwrap();
    batch.ref_log[1][2][3][0] = f64::NAN;
    let mut adam = Adam::new(cfg.adam(), &params.sizes());
    let before = params.clone();
    let err = update(&cfg, &mut params, &mut adam, &batch, 0, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert_eq!(params, before);
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("nan_dump.json")).unwrap()).unwrap();
    assert_eq!(dump["group"], 1);
    for key in ["tokens", "base_reward", "advantages", "similarity", "mask", "kl_weights"] {
        assert!(dump.get(key).is_some(), "dump lacks {key}");
    }
}

#[test]
fn runaway_weights_abort_as_numerical() {
    let cfg = TrainConfig {
        learning_rate: 1e300,
        total_steps: 3,
        eval_every: 0,
        ..tiny()
    };
    let reference = PolicyParams::init(cfg.dims(), 1).unwrap();
    let err = run_rl(&cfg, &reference, None).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let cfg = tiny();
    let params = PolicyParams::init(cfg.dims(), 2).unwrap();
    let cb = cfg.codebook().unwrap();
    let set = heldout_set(&Task::ALL, 3, cfg.categories, cfg.grid(), 9);
    let run = || evaluate(&params, &cb, &set, 3, &SamplingOptions::default(), 17, &cfg.reward_options()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.per_task.len(), 4);
    assert_eq!(a.overall.samples, 36);
    for t in &a.per_task {
        assert!((0.0..=1.0).contains(&t.mean_reward));
    }
    let empty = evaluate(&params, &cb, &PromptSet::default(), 1, &SamplingOptions::default(), 0, &cfg.reward_options());
    assert!(matches!(empty, Err(Error::Argument(_))));
}

#[test]
fn temperature_sweep_edge_cases() {
    let cfg = tiny();
    let params = PolicyParams::init(cfg.dims(), 2).unwrap();
    let cb = cfg.codebook().unwrap();
    let set = heldout_set(&Task::ALL, 2, cfg.categories, cfg.grid(), 9);
    let ro = cfg.reward_options();
    let one = temperature_sweep(&params, &cb, &set, &[1.0], 2, 5, &ro).unwrap();
    assert_eq!(one.len(), 1);
    let ev = evaluate(&params, &cb, &set, 2, &SamplingOptions::default(), 5, &ro).unwrap();
    assert_eq!(one[0].mean_reward, ev.overall.mean_reward);
    assert_eq!(one[0].mean_entropy, ev.overall.mean_entropy);

    let rows = temperature_sweep(&params, &cb, &set, &[0.5, 1.0, 1.5], 2, 5, &ro).unwrap();
    assert!(rows.windows(2).all(|w| w[1].mean_entropy > w[0].mean_entropy));
    assert!(matches!(temperature_sweep(&params, &cb, &set, &[1.0, 0.5], 2, 5, &ro), Err(Error::Argument(_))));
    assert!(matches!(temperature_sweep(&params, &cb, &set, &[0.0, 1.0], 2, 5, &ro), Err(Error::Argument(_))));
}

#[test]
fn comparing_a_run_with_itself() {
    let cfg = TrainConfig {
        eval_every: 0,
        ..tiny()
    };
    let reference = PolicyParams::init(cfg.dims(), 1).unwrap();
    let m = run_rl(&cfg, &reference, None).unwrap().metrics;
    let rows = compare_runs(&[("a".into(), m.clone()), ("b".into(), m.clone())]).unwrap();
    assert_eq!(rows[0].final_reward, rows[1].final_reward);
    assert_eq!(rows[0].entropy_drift, rows[1].entropy_drift);
    assert_eq!(rows[0].mean_kl, rows[1].mean_kl);
    assert_eq!(rows[0].auc, rows[1].auc);
    let report = format_report(&rows);
    assert!(report.starts_with("run"));
    for col in ["final_reward", "entropy_drift", "mean_kl", "auc"] {
        assert!(report.lines().next().unwrap().contains(col));
    }
    assert_eq!(summarize("a", &m).unwrap(), rows[0]);

    let short = m[..3].to_vec();
    assert!(matches!(compare_runs(&[("a".into(), m), ("b".into(), short)]), Err(Error::Argument(_))));
}
