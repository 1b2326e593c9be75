use std::path::Path;
use std::process::Command;

const TINY: &str = r#"{
  "env": "pointmass",
  "dataset": {"recipe": "random", "size": 300, "seed": 1},
  "explorer": {"kind": "naive"},
  "seeds": [0, 1],
  "online_budget": 40,
  "eval_every": 20,
  "agent": {
    "sac": {"actor_hidden": [16], "critic_hidden": [16]},
    "model": {"members": 2, "hidden": [16], "train_steps": 5},
    "model_train_freq": 20, "imagination_freq": 20, "rollout_starts": 20,
    "batch_size": 12, "pretrain_steps": 20, "model_pretrain_steps": 10, "eval_episodes": 1
  }
}"#;

fn ptgood(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ptgood"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn exp_oto_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ptgood(&["exp-oto", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["naive_seed0.csv", "naive_seed1.csv", "naive_summary.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(ptgood(&["exp-oto", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let typo = write_config(dir.path(), "typo.json", &TINY.replace("\"seeds\"", "\"sedes\""));
    assert_eq!(ptgood(&["exp-oto", "--config", &typo, "--out", out]).status.code(), Some(2));
    assert_eq!(ptgood(&["no-such-command"]).status.code(), Some(2));
    // Fine-tuning without checkpoints fails at run time.
    let cfg = write_config(dir.path(), "c.json", TINY);
    assert_eq!(ptgood(&["finetune", "--config", &cfg, "--out", out]).status.code(), Some(3));
}

#[test]
fn pretrain_finetune_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let out = dir.path().join("o");
    let out_s = out.to_str().unwrap();
    for cmd in ["gen-data", "pretrain", "finetune", "eval"] {
        let o = ptgood(&[cmd, "--config", &cfg, "--out", out_s, "--seed", "1"]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(out.join("dataset.ptgd").is_file());
    assert!(out.join("naive_seed1.csv").is_file());
}
