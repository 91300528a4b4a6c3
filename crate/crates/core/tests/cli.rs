use std::path::Path;
use std::process::Command;

use flowrl::harness::io::CsvTable;
use flowrl::harness::stages::{
    EvalDocument, PsiDocument, CALIBRATION_HEADER, DENSE_REWARDS_HEADER, METRICS_HEADER, PRETRAIN_LOSS_HEADER,
};
use flowrl::harness::{load_checkpoint, run_command, RunConfig};

const SMALL: &str = r#"{
  "pretrain": {"steps": 150},
  "calibrate": {"iterations": 2, "samples": 8},
  "align": {"group_size": 6, "train_steps": 3, "eval_every": 3, "eval_samples_per_class": 4}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowrl"))
}

fn stage(name: &str, config: &Path, out: &Path) -> i32 {
    run_command(["flowrl", name, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn small_run(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.join("run");
    for s in ["pretrain", "calibrate", "align"] {
        assert_eq!(stage(s, &cfg, &out), 0, "{s}");
    }
    assert_eq!(run_command(["flowrl", "eval", "--out", out.to_str().unwrap()]), 0);
    out
}

#[test]
fn pipeline_artifacts_carry_headers_digests_and_constants() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path());

    for (file, header) in [
        ("pretrain_loss.csv", &PRETRAIN_LOSS_HEADER[..]),
        ("calibration.csv", &CALIBRATION_HEADER[..]),
        ("metrics.csv", &METRICS_HEADER[..]),
        ("dense_rewards.csv", &DENSE_REWARDS_HEADER[..]),
    ] {
        let t = CsvTable::read(&out.join(file)).unwrap();
        assert_eq!(t.header, header, "{file}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "step,epoch,mean_terminal_reward,eval_reward,mean_kl,clip_fraction,objective"
    );

    let persisted = RunConfig::load(&out.join("config.json")).unwrap();
    let digest = persisted.digest();
    let psi: PsiDocument = serde_json::from_str(&std::fs::read_to_string(out.join("psi.json")).unwrap()).unwrap();
    assert_eq!((psi.config.eps1, psi.config.eps2), (2, 0.01));
    assert_eq!(psi.psi.len(), 10);
    assert_eq!(psi.config_digest, digest);
    for ckpt in ["reference.ckpt.json", "aligned.ckpt.json"] {
        assert_eq!(load_checkpoint(&out.join(ckpt)).unwrap().provenance.config_digest, digest, "{ckpt}");
    }
    let eval: EvalDocument =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_aligned.json")).unwrap()).unwrap();
    assert_eq!(eval.config_digest, digest);
    assert_eq!(eval.per_class_reward.len(), 4);
    let aligned = load_checkpoint(&out.join("aligned.ckpt.json")).unwrap();
    assert_eq!(aligned.psi.as_deref(), Some(&psi.psi[..]));
    assert!(aligned.optimizer.is_some());
}

#[test]
fn report_depends_only_on_csv_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path());
    let copy = dir.path().join("csv_only");
    std::fs::create_dir_all(&copy).unwrap();
    for f in ["pretrain_loss.csv", "calibration.csv", "metrics.csv", "dense_rewards.csv"] {
        std::fs::copy(out.join(f), copy.join(f)).unwrap();
    }
    for d in [&out, &copy] {
        assert_eq!(run_command(["flowrl", "report", "--out", d.to_str().unwrap()]), 0);
    }
    let names: Vec<_> = std::fs::read_dir(out.join("report")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(names.len() >= 4);
    for n in names {
        let a = std::fs::read(out.join("report").join(&n)).unwrap();
        let b = std::fs::read(copy.join("report").join(&n)).unwrap();
        assert_eq!(a, b, "{n:?}");
    }
}

#[test]
fn errors_exit_nonzero_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"align\": {\"clip\": 0.2, \"gruop_size\": 4}\n}\n").unwrap();
    let o = bin()
        .args(["pretrain", "--config", bad.to_str().unwrap(), "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(2), "{err}");
    assert!(err.contains("bad.json:2:") && err.contains("gruop_size"), "{err}");

    let invalid = dir.path().join("invalid.json");
    std::fs::write(&invalid, r#"{"align": {"group_size": 1}}"#).unwrap();
    let o = bin().args(["pretrain", "--config", invalid.to_str().unwrap(), "--out", "unused"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("align"));

    let o = bin().args(["align", "--out"]).arg(dir.path().join("empty")).output().unwrap();
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(3), "{err}");
    assert!(err.contains("reference.ckpt.json") && err.contains("pretrain"), "{err}");

    let o = bin().arg("bogus").output().unwrap();
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let mut metrics = Vec::new();
    for (threads, name) in [("1", "one"), ("3", "three")] {
        let out = dir.path().join(name);
        for s in ["pretrain", "calibrate", "align"] {
            let o = bin()
                .env("FLOWRL_THREADS", threads)
                .args([s, "--config", cfg.to_str().unwrap(), "--seed", "7", "--out"])
                .arg(&out)
                .output()
                .unwrap();
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
        metrics.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    let o = bin().env("FLOWRL_THREADS", "zero").args(["report", "--out", "x"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn aligned_checkpoint_scores_at_least_the_reference_on_the_default_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default.json");
    std::fs::write(&cfg, "{}").unwrap();
    let out = dir.path().join("run");
    for s in ["pretrain", "calibrate", "align"] {
        assert_eq!(stage(s, &cfg, &out), 0, "{s}");
    }
    let reference = out.join("reference.ckpt.json");
    let args = ["flowrl", "eval", "--out", out.to_str().unwrap()];
    assert_eq!(run_command(args), 0);
    assert_eq!(run_command([&args[..], &["--checkpoint", reference.to_str().unwrap()]].concat()), 0);
    let read = |f: &str| -> EvalDocument { serde_json::from_str(&std::fs::read_to_string(out.join(f)).unwrap()).unwrap() };
    let (aligned, base) = (read("eval_aligned.json"), read("eval_reference.json"));
    assert!(
        aligned.mean_reward >= base.mean_reward,
        "aligned {} < reference {}",
        aligned.mean_reward,
        base.mean_reward
    );
}
