use std::collections::BTreeMap;

use super::*;
use crate::config::ModelConfig;
use crate::mamoe::{read_events, Variant};

fn tiny() -> ModelConfig {
    let mut c = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        n_experts: 4,
        k: 2,
        d_ff: 4,
        shared_d_ff: 4,
        v_text: 8,
        code_vocab: 8,
        d_feat: 4,
        max_pos: 8,
        audio_expert_indices: vec![2, 3],
        seed: 11,
        ..ModelConfig::default()
    };
    let t = &mut c.training;
    t.total_steps = 12;
    t.warmup_steps = 3;
    t.seq_len = 8;
    t.log_every = 4;
    t.ckpt_every = 5;
    t.eval_batch_size = 4;
    t.stage1.batch_size = 3;
    t.stage2.batch_size = 2;
    c
}

fn only(kind: TaskKind) -> BTreeMap<TaskKind, f64> {
    BTreeMap::from([(kind, 1.0)])
}

#[test]
fn single_task_mix_draws_only_that_task() {
    let mut cfg = tiny();
    cfg.training.stage1.mix = only(TaskKind::PseudoAsr);
    let mut t = Trainer::from_config(cfg, 1).unwrap();
    let history = t.run_stage(&mut NullSink).unwrap();
    assert_eq!(history.len(), 12);
    assert!(history.iter().all(|m| m.task == TaskKind::PseudoAsr));
    assert!(t.is_done());
    assert_eq!(t.run_stage(&mut NullSink).unwrap().len(), 0);
}

#[test]
fn task_frequencies_follow_the_mix() {
    let cfg = tiny();
    for stage in [1u8, 2] {
        let mix = cfg.training.stage(stage).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut counts: BTreeMap<TaskKind, usize> = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(sample_task(mix, &mut rng)).or_default() += 1;
        }
        for (kind, &ratio) in &mix.mix {
            let freq = counts.get(kind).copied().unwrap_or(0) as f64 / n as f64;
            assert!((freq - ratio).abs() < 0.02, "stage {stage} {kind}: {freq} vs {ratio}");
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut cfg = tiny();
    cfg.training.lr = 0.0;
    let mut t = Trainer::from_config(cfg, 1).unwrap();
    let before: Vec<Vec<f64>> = t.model.store.iter().map(|(_, p)| p.data().to_vec()).collect();
    for _ in 0..3 {
        let (m, _) = t.train_step(false).unwrap();
        assert_eq!(m.lr, 0.0);
        assert!(m.grad_norm > 0.0);
    }
    let after: Vec<Vec<f64>> = t.model.store.iter().map(|(_, p)| p.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn metrics_are_bit_identical_across_runs() {
    let run = || {
        let mut t = Trainer::from_config(tiny(), 1).unwrap();
        t.run_stage(&mut NullSink).unwrap()
    };
    let (a, b) = (run(), run());
    let mut sa = Vec::new();
    let mut sb = Vec::new();
    write_history(&mut sa, &a).unwrap();
    write_history(&mut sb, &b).unwrap();
    assert_eq!(sa, sb);
    assert!(a.iter().all(|m| m.loss.is_finite() && m.grad_norm.is_finite()));
    assert_eq!(read_history(sa.as_slice()).unwrap(), a);
}

#[test]
fn resume_matches_uninterrupted_run() {
    for variant in [Variant::Mamoe, Variant::Dense] {
        let cfg = tiny().with_variant(variant).unwrap();
        let mut full = Trainer::from_config(cfg.clone(), 1).unwrap();
        let whole = full.run_stage(&mut NullSink).unwrap();

        let mut first = Trainer::from_config(cfg, 1).unwrap();
        let mut head = Vec::new();
        for _ in 0..5 {
            head.push(first.train_step(false).unwrap().0);
        }
        let bytes = first.checkpoint().to_bytes().unwrap();
        drop(first);
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        head.extend(resumed.run_stage(&mut NullSink).unwrap());
        assert_eq!(head, whole, "{variant}");
        assert_eq!(resumed.checkpoint().to_bytes().unwrap(), full.checkpoint().to_bytes().unwrap());
    }
}

#[test]
fn checkpoint_save_load_save_is_identical() {
    let mut t = Trainer::from_config(tiny(), 1).unwrap();
    for _ in 0..2 {
        t.train_step(false).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    t.checkpoint().save(&a).unwrap();
    let back = Trainer::from_checkpoint(&Checkpoint::load(&a).unwrap()).unwrap();
    back.checkpoint().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn stage_two_starts_from_stage_one_weights() {
    let mut s1 = Trainer::from_config(tiny(), 1).unwrap();
    s1.run_stage(&mut NullSink).unwrap();
    let model = model_from_checkpoint(&s1.checkpoint()).unwrap();
    let mut s2 = Trainer::new(model, 2).unwrap();
    let h = s2.run_stage(&mut NullSink).unwrap();
    assert_eq!(h.len(), 12);
    let kinds: std::collections::BTreeSet<TaskKind> = h.iter().map(|m| m.task).collect();
    assert!(kinds.iter().all(|k| s2.stage_config().mix.contains_key(k)));
    assert!(Trainer::from_config(tiny(), 3).is_err());
}

#[test]
fn dir_sink_writes_history_events_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::from_config(tiny(), 1).unwrap();
    let mut sink = DirSink::create(dir.path()).unwrap();
    let history = t.run_stage(&mut sink).unwrap();
    drop(sink);

    let csv = std::fs::read(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(read_history(csv.as_slice()).unwrap(), history);

    let events = read_events(std::fs::File::open(dir.path().join(EVENTS_FILE)).unwrap()).unwrap();
    let steps: std::collections::BTreeSet<u64> = events.iter().map(|e| e.step).collect();
    assert_eq!(steps.into_iter().collect::<Vec<_>>(), vec![0, 4, 8, 11]);
    // 3 sequences of 8 tokens, one layer
    assert_eq!(events.len(), 4 * 3 * 8);

    for name in ["ckpt_5.bin", "ckpt_10.bin", "ckpt_12.bin", FINAL_CHECKPOINT] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let last = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(last.step, 12);
    assert_eq!(last.to_bytes().unwrap(), t.checkpoint().to_bytes().unwrap());
}

#[test]
fn non_finite_parameters_are_reported_by_name() {
    let mut t = Trainer::from_config(tiny(), 1).unwrap();
    let id = t.model.store.find("head.text").unwrap();
    t.model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let err = t.train_step(false).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}

#[test]
fn loss_falls_on_a_short_run() {
    let mut cfg = tiny();
    cfg.training.total_steps = 150;
    cfg.training.warmup_steps = 10;
    cfg.training.lr = 1e-2;
    cfg.training.stage1.mix = only(TaskKind::PseudoAsr);
    let mut t = Trainer::from_config(cfg, 1).unwrap();
    let before = eval_loss(&t.model, &t.tasks, TaskKind::PseudoAsr, 8).unwrap();
    t.run_stage(&mut NullSink).unwrap();
    let after = eval_loss(&t.model, &t.tasks, TaskKind::PseudoAsr, 8).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn resumed_directory_logs_match_uninterrupted_run() {
    let whole = tempfile::tempdir().unwrap();
    let mut t = Trainer::from_config(tiny(), 1).unwrap();
    t.run_stage(&mut DirSink::create(whole.path()).unwrap()).unwrap();

    // run to the end once, then resume from the step-5 checkpoint over the same directory
    let split = tempfile::tempdir().unwrap();
    let mut t = Trainer::from_config(tiny(), 1).unwrap();
    t.run_stage(&mut DirSink::create(split.path()).unwrap()).unwrap();
    let ckpt = Checkpoint::load(&split.path().join("ckpt_5.bin")).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
    resumed.run_stage(&mut DirSink::resume(split.path(), ckpt.step).unwrap()).unwrap();

    for name in [HISTORY_FILE, EVENTS_FILE, FINAL_CHECKPOINT, "ckpt_10.bin"] {
        let a = std::fs::read(whole.path().join(name)).unwrap();
        let b = std::fs::read(split.path().join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}
