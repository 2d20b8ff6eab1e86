use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mamoe_core::analytics::{ComparisonReport, MetricsReport};
use mamoe_core::config::ModelConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mamoe"));
    c.env_remove("MAMOE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ModelConfig {
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
        ..ModelConfig::default()
    };
    let t = &mut cfg.training;
    t.total_steps = 12;
    t.warmup_steps = 2;
    t.seq_len = 8;
    t.log_every = 4;
    t.ckpt_every = 6;
    t.eval_batch_size = 4;
    t.stage1.batch_size = 2;
    t.stage2.batch_size = 2;
    let path = dir.join("small.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg.to_json()).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["train", "--help"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["train", "--config", "x.json", "--out", "d"])), 1);
    assert_eq!(code(&run(&["train", "--config", "x.json", "--stage", "3", "--out", "d"])), 1);
    assert_eq!(code(&run(&["ablate", "--config", "x.json", "--variants", "bogus"])), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["train", "--config", "/nonexistent/cfg.json", "--stage", "1", "--out", s(dir.path())]);
    assert_eq!(code(&missing), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"hidden_size": 8, "mystery_knob": 1}"#).unwrap();
    let o = run(&["gradcheck", "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mystery_knob"), "{}", stderr(&o));

    let cfg = small_config(dir.path());
    let o = bin()
        .args(["train", "--config", s(&cfg), "--stage", "1", "--out", s(&dir.path().join("r"))])
        .env("MAMOE_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn empty_and_malformed_event_logs() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "step,layer,token_index,modality,selected_indices,weights\n").unwrap();
    let o = run(&["analyze", "--events", s(&empty), "--report", s(&report)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no events"), "{}", stderr(&o));
    let o = run(&["heatmap", "--events", s(&empty), "--out", s(&dir.path().join("h.csv"))]);
    assert_eq!(code(&o), 2);

    let bad = dir.path().join("bad.csv");
    std::fs::write(
        &bad,
        "step,layer,token_index,modality,selected_indices,weights\n0,0,0,1,2;3,0.4;0.3\n0,0,1,7,0;1,0.5;0.2\n",
    )
    .unwrap();
    let o = run(&["analyze", "--events", s(&bad), "--report", s(&report)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn train_analyze_heatmap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--stage", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["history.csv", "routing_events.csv", "ckpt_6.bin", "ckpt_12.bin", "final.bin"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 13);

    let events = out.join("routing_events.csv");
    let report = dir.path().join("report.json");
    let o = run(&["analyze", "--events", s(&events), "--report", s(&report), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = MetricsReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.n_experts, 4);
    assert_eq!(r.overall.violations, 0);
    assert_eq!(r.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 4, 8, 11]);

    let heat = dir.path().join("heat.csv");
    let o = run(&["heatmap", "--events", s(&events), "--out", s(&heat), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&heat).unwrap();
    assert_eq!(text.lines().next().unwrap(), "modality,0,1,2,3");
    assert!(dir.path().join("heat.counts.csv").exists());

    let again = dir.path().join("again.json");
    let o = run(&["analyze", "--events", s(&heat), "--report", s(&again), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h = MetricsReport::from_json(&std::fs::read_to_string(&again).unwrap()).unwrap();
    let counts = dir.path().join("heat.counts.csv");
    let o = run(&["analyze", "--events", s(&counts), "--report", s(&again), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = MetricsReport::from_json(&std::fs::read_to_string(&again).unwrap()).unwrap();
    assert_eq!(c.overall.entropy_text, r.overall.entropy_text);
    assert_eq!(c.overall.entropy_audio, r.overall.entropy_audio);
    for (a, b) in [
        (h.overall.entropy_text, r.overall.entropy_text),
        (h.overall.entropy_audio, r.overall.entropy_audio),
    ] {
        assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn seed_override_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let train = |out: &Path, seed: Option<&str>, resume: Option<&Path>| {
        let mut c = bin();
        c.args(["train", "--config", s(&cfg), "--stage", "1", "--out", s(out)]);
        if let Some(r) = resume {
            c.args(["--resume", s(r)]);
        }
        if let Some(v) = seed {
            c.env("MAMOE_SEED", v);
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(out.join("history.csv")).unwrap()
    };
    let a = train(&dir.path().join("a"), None, None);
    let b = train(&dir.path().join("b"), None, None);
    assert_eq!(a, b);
    let seeded = train(&dir.path().join("c"), Some("5"), None);
    assert_ne!(a, seeded);

    let resumed = train(&dir.path().join("a"), None, Some(&dir.path().join("a/ckpt_6.bin")));
    assert_eq!(resumed, a);
    assert_eq!(
        std::fs::read(dir.path().join("a/final.bin")).unwrap(),
        std::fs::read(dir.path().join("b/final.bin")).unwrap()
    );

    let stage2 = dir.path().join("s2");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--stage",
        "2",
        "--out",
        s(&stage2),
        "--resume",
        s(&dir.path().join("a/final.bin")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stage2.join("final.bin").exists());
}

#[test]
fn gradcheck_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = run(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max_rel_err"));

    let report = dir.path().join("ablate.json");
    let o = run(&[
        "ablate",
        "--config",
        s(&cfg),
        "--variants",
        "mamoe,vanilla,dense",
        "--seeds",
        "0,1",
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: ComparisonReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.runs.len(), 6);
    assert_eq!(r.checkpoint_steps, vec![3, 6, 12]);
    for run in &r.runs {
        let routed = run.variant != mamoe_core::mamoe::Variant::Dense;
        assert_eq!(run.metrics.len(), if routed { 3 } else { 0 });
    }
    assert!(!r.winners.is_empty());
}
