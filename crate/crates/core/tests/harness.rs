use std::path::PathBuf;

use dmc_core::dmc::DmcVariant;
use dmc_core::harness::analyze::{analyze, global_from_matrix};
use dmc_core::harness::bench::bench_decode;
use dmc_core::harness::checkpoint::{round_weights, AttentionSpec, Checkpoint, TrainingState};
use dmc_core::harness::config::{BaselineKind, BenchConfig, ExperimentConfig};
use dmc_core::harness::corpus::{ingest_corpus, Corpus};
use dmc_core::harness::eval::{eval_perplexity, measure_cr, EvalMode};
use dmc_core::harness::metrics::{MetricsLog, Phase, Record};
use dmc_core::harness::train::{pretrain, retrofit};
use dmc_core::model::{Model, ModelConfig};

fn corpus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus/sample.txt")
}

fn corpus() -> Corpus {
    ingest_corpus(&[corpus_path()], 0.1).unwrap()
}

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 3;
    cfg.model = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: 256,
        max_seq: 16,
        ..ModelConfig::default()
    };
    cfg.data.paths = vec![corpus_path()];
    cfg.data.seq_len = 16;
    cfg.data.batch_size = 4;
    cfg.data.eval_sequences = 8;
    cfg.pretrain.steps = 40;
    cfg.pretrain.warmup_steps = 5;
    cfg.pretrain.eval_every = 20;
    cfg.retrofit.anneal_steps = 6;
    cfg.dmc.schedule.ramp_steps = 12;
    cfg.dmc.schedule.solidify_steps = 4;
    cfg.bench = BenchConfig {
        batch: 2,
        prompt_len: 8,
        gen_len: 8,
    };
    cfg
}

fn training(phase: &str) -> TrainingState {
    TrainingState {
        phase: phase.into(),
        step: 0,
        seed: 0,
        target_cr: None,
        achieved_cr: None,
        val_loss: None,
    }
}

#[test]
fn pretrain_with_zero_lr_leaves_weights_unchanged() {
    let mut cfg = tiny();
    cfg.pretrain.steps = 1;
    cfg.optimizer.lr = 0.0;
    let out = pretrain(&cfg, &corpus(), None, &mut MetricsLog::in_memory()).unwrap();
    let mut init = Model::init(cfg.model.clone(), cfg.seed).unwrap();
    round_weights(&mut init);
    assert_eq!(out.checkpoint.model, init);
}

#[test]
fn pretrain_reduces_loss_and_is_deterministic() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let d = dir.path().join(sub);
        std::fs::create_dir_all(&d).unwrap();
        let mut metrics = MetricsLog::to_file(&d.join("metrics.jsonl")).unwrap();
        let out = pretrain(&cfg, &corpus(), Some(&d), &mut metrics).unwrap();
        drop(metrics);
        (out, d)
    };
    let (a, da) = run("a");
    let (b, db) = run("b");
    for f in ["metrics.jsonl", "pretrain.ckpt"] {
        assert_eq!(std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap(), "{f}");
    }
    assert_eq!(a.val_loss, b.val_loss);

    let mut metrics = MetricsLog::in_memory();
    pretrain(&cfg, &corpus(), None, &mut metrics).unwrap();
    let steps: Vec<f64> = metrics.steps(Phase::Pretrain).map(|s| s.lm).collect();
    let tail = steps[steps.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < steps[0] - 0.5, "loss {} -> {tail}", steps[0]);

    // Scoring the saved checkpoint reproduces the recorded loss exactly.
    let ck = Checkpoint::load(&da.join("pretrain.ckpt")).unwrap();
    let seqs = corpus().val_sequences(cfg.data.eval_sequences, cfg.data.seq_len).unwrap();
    let r = eval_perplexity(&ck, &seqs, EvalMode::Vanilla, 1.0).unwrap();
    assert_eq!(Some(r.loss), ck.manifest.training.val_loss);
}

#[test]
fn divergence_aborts_with_numerical_error() {
    let mut cfg = tiny();
    cfg.optimizer.lr = 1e30;
    cfg.optimizer.grad_clip = 0.0;
    cfg.pretrain.warmup_steps = 0;
    let err = pretrain(&cfg, &corpus(), None, &mut MetricsLog::in_memory()).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn uniform_model_has_perplexity_near_vocab_size() {
    let cfg = tiny();
    let model = Model::init(cfg.model.clone(), 1).unwrap();
    let ck = Checkpoint::new(model, AttentionSpec::Standard, training("init"));
    let seqs = corpus().val_sequences(8, 16).unwrap();
    let r = eval_perplexity(&ck, &seqs, EvalMode::Vanilla, 1.0).unwrap();
    assert!((r.perplexity / 256.0 - 1.0).abs() < 0.05, "{}", r.perplexity);
}

fn compressed_checkpoint(offset: f64, pool_width: Option<usize>, seed: u64) -> Checkpoint {
    let mut cfg = tiny().model;
    cfg.dmc_enabled = true;
    let model = Model::init(cfg, seed).unwrap();
    Checkpoint::new(
        model,
        AttentionSpec::Compressed {
            variant: if pool_width.is_some() { DmcVariant::UniformOmega } else { DmcVariant::Dmc },
            decision_offset: offset,
            window: 4,
            pool_width,
        },
        training("test"),
    )
}

#[test]
fn train_and_decode_paths_agree() {
    // Offset 0 on an untrained model gives a mix of merges and appends.
    let ck = compressed_checkpoint(0.0, None, 9);
    let seqs = corpus().val_sequences(6, 16).unwrap();
    let train = eval_perplexity(&ck, &seqs, EvalMode::DmcTrainPath, 1.0).unwrap();
    let infer = eval_perplexity(&ck, &seqs, EvalMode::DmcInferPath, 1.0).unwrap();
    assert!((train.loss - infer.loss).abs() / infer.loss < 1e-3, "{} vs {}", train.loss, infer.loss);
    let (a, b) = (train.compression_ratio.unwrap(), infer.compression_ratio.unwrap());
    assert!(a > 1.2, "decisions should merge sometimes, cr {a}");
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn eviction_eval_with_large_budget_matches_vanilla() {
    let cfg = tiny();
    let ck = Checkpoint::new(Model::init(cfg.model.clone(), 4).unwrap(), AttentionSpec::Standard, training("x"));
    let seqs = corpus().val_sequences(4, 16).unwrap();
    let v = eval_perplexity(&ck, &seqs, EvalMode::Vanilla, 1.0).unwrap();
    for mode in [EvalMode::H2o, EvalMode::Tova] {
        let e = eval_perplexity(&ck, &seqs, mode, 1.0).unwrap();
        assert!((e.loss - v.loss).abs() < 1e-12, "{mode:?}");
        let squeezed = eval_perplexity(&ck, &seqs, mode, 4.0).unwrap();
        assert_ne!(squeezed.loss, v.loss);
    }
}

#[test]
fn analysis_of_forced_and_alternating_decisions() {
    let seqs: Vec<Vec<usize>> = corpus().val_sequences(4, 16).unwrap().into_iter().map(|mut s| {
        s.pop();
        s
    }).collect();

    let never = compressed_checkpoint(1e9, None, 2);
    let r = analyze(&never, &seqs, 1).unwrap();
    assert!(r.compression.per_head.iter().flatten().all(|&x| x == 1.0));
    assert_eq!(r.trace_cr, 1.0);
    assert!(r.alpha_vs_position.iter().all(|p| p.mean_alpha == 0.0));

    let alternating = compressed_checkpoint(5.0, Some(2), 2);
    let r = analyze(&alternating, &seqs, 1).unwrap();
    assert!(r.compression.per_head.iter().flatten().all(|&x| x == 2.0));
    assert_eq!(r.cr_vs_length.last().unwrap().cr, 2.0);
    let seg = &r.segmentations[0];
    assert_eq!(seg.starts, (0..16).step_by(2).collect::<Vec<_>>());

    let mixed = compressed_checkpoint(0.0, None, 9);
    let r = analyze(&mixed, &seqs, 2).unwrap();
    assert!(r.compression.global > 1.2);
    assert!((r.matrix_cr - r.compression.global).abs() <= 1e-9);
    assert!((r.trace_cr - r.compression.global).abs() <= 1e-9);
    assert!((global_from_matrix(&r.compression.per_head) - r.compression.global).abs() <= 1e-9);
    assert_eq!(r.segmentations.len(), 2 * 2 * 2);

    let dir = tempfile::tempdir().unwrap();
    let files = r.write(dir.path()).unwrap();
    assert_eq!(files.len(), 6);
    let trace = std::fs::read_to_string(dir.path().join("decisions.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 4 * 16 * 2 * 2);
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    for key in ["sequence", "layer", "head", "t", "alpha", "omega"] {
        assert!(first.get(key).is_some(), "{key} missing");
    }
}

#[test]
fn bench_accounting() {
    let cfg = tiny();
    let prompts: Vec<Vec<usize>> = corpus().val_sequences(2, 8).unwrap().into_iter().map(|mut s| {
        s.truncate(8);
        s
    }).collect();
    let (l, h, total) = (2, 2, 16);

    let plain = Checkpoint::new(Model::init(cfg.model.clone(), 4).unwrap(), AttentionSpec::Standard, training("x"));
    let (report, timing) = bench_decode(&plain, &cfg.bench, &prompts, 4.0).unwrap();
    assert_eq!(timing.len(), 3);
    let vanilla = &report.systems[0];
    assert_eq!(vanilla.peak_slots_per_sequence, vec![l * h * total; 2]);
    assert_eq!(vanilla.peak_elements, 2 * l * h * total * 2 * 8);
    for s in &report.systems[1..] {
        let b = s.budget.unwrap();
        assert_eq!(b, 4);
        assert!(s.peak_slots_per_sequence.iter().all(|&p| p <= l * h * b), "{s:?}");
    }

    let ck = compressed_checkpoint(0.0, None, 9);
    let (report, _) = bench_decode(&ck, &cfg.bench, &prompts, 4.0).unwrap();
    let cr = report.measured_cr.unwrap();
    assert!(cr > 1.2);
    let dmc = &report.systems[1];
    assert_eq!(dmc.system, "dmc");
    let expected = report.systems[0].peak_elements as f64 / cr;
    assert!((dmc.peak_elements as f64 / expected - 1.0).abs() < 1e-12);
    let paged = report.paged.as_ref().unwrap();
    assert_eq!(paged.logical_slots, dmc.peak_slots);
    assert!(paged.allocated_slots >= paged.logical_slots);
    // Eviction budgets follow the measured ratio.
    assert_eq!(report.systems[2].budget, Some((total as f64 / cr).floor() as usize));

    let short = BenchConfig { gen_len: 100, ..cfg.bench };
    assert!(bench_decode(&ck, &short, &prompts, 4.0).is_err());
}

#[test]
fn retrofit_emits_monotone_checkpoints() {
    let mut cfg = tiny();
    cfg.pretrain.steps = 20;
    let corpus = corpus();
    let base = pretrain(&cfg, &corpus, None, &mut MetricsLog::in_memory()).unwrap().checkpoint;
    cfg.dmc.schedule.target_cr = 3.0;
    let mut metrics = MetricsLog::in_memory();
    let out = retrofit(&base, &cfg, &corpus, None, &mut metrics).unwrap();
    let labels: Vec<&str> = out.checkpoints.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["cr2", "cr3-ramp-end", "final"]);
    let targets: Vec<f64> = out
        .checkpoints
        .iter()
        .map(|c| c.checkpoint.manifest.training.target_cr.unwrap())
        .collect();
    assert!(targets.windows(2).all(|w| w[0] <= w[1]), "{targets:?}");
    assert_eq!(targets[1], 3.0);
    assert_eq!(metrics.steps(Phase::Anneal).count(), 6);
    assert_eq!(metrics.steps(Phase::Ramp).count(), 12);
    assert_eq!(metrics.steps(Phase::Solidify).count(), 4);
    let final_ck = out.final_checkpoint();
    assert!(final_ck.model.config.dmc_enabled);
    let seqs = corpus.val_sequences(8, 16).unwrap();
    let fresh = measure_cr(&final_ck.model, &final_ck.manifest.attention, &seqs).unwrap();
    assert_eq!(Some(fresh.global), final_ck.manifest.training.achieved_cr);
    let checkpoints = metrics.records().iter().filter(|r| matches!(r, Record::Checkpoint { .. })).count();
    assert_eq!(checkpoints, 3);
}

#[test]
fn retrofit_to_ratio_one_tracks_the_blind_baseline() {
    let mut cfg = tiny();
    cfg.pretrain.steps = 60;
    let corpus = corpus();
    let base = pretrain(&cfg, &corpus, None, &mut MetricsLog::in_memory()).unwrap().checkpoint;
    cfg.retrofit.anneal_steps = 10;
    cfg.dmc.schedule.ramp_steps = 30;
    cfg.dmc.schedule.solidify_steps = 10;
    cfg.dmc.schedule.target_cr = 1.0;
    let dmc = retrofit(&base, &cfg, &corpus, None, &mut MetricsLog::in_memory()).unwrap();
    cfg.baseline.kind = BaselineKind::Dim0Blind;
    let blind = retrofit(&base, &cfg, &corpus, None, &mut MetricsLog::in_memory()).unwrap();
    let a = dmc.final_checkpoint().manifest.training.val_loss.unwrap();
    let b = blind.final_checkpoint().manifest.training.val_loss.unwrap();
    assert!((a / b - 1.0).abs() < 0.02, "{a} vs {b}");
    assert_eq!(blind.final_checkpoint().manifest.attention, AttentionSpec::Dim0Blind);
}

#[test]
fn baselines_retrofit() {
    let mut cfg = tiny();
    cfg.pretrain.steps = 10;
    let corpus = corpus();
    let base = pretrain(&cfg, &corpus, None, &mut MetricsLog::in_memory()).unwrap().checkpoint;

    let mut pool = cfg.clone();
    pool.baseline.kind = BaselineKind::FixedPool;
    pool.dmc.variant = DmcVariant::UniformOmega;
    let out = retrofit(&base, &pool, &corpus, None, &mut MetricsLog::in_memory()).unwrap();
    let last = out.final_checkpoint();
    assert_eq!(last.manifest.training.achieved_cr, Some(2.0));
    assert_eq!(out.checkpoints.len(), 2);

    let mut gqa = cfg.clone();
    gqa.baseline.kind = BaselineKind::Gqa;
    let out = retrofit(&base, &gqa, &corpus, None, &mut MetricsLog::in_memory()).unwrap();
    assert_eq!(out.final_checkpoint().model.config.kv_heads(), 1);
    let mut mismatched = cfg.clone();
    mismatched.model.d_model = 32;
    assert_eq!(
        retrofit(&base, &mismatched, &corpus, None, &mut MetricsLog::in_memory()).unwrap_err().exit_code(),
        2
    );
}
