//! Black-box checks of the command-line interface: verbs, flags, file
//! formats, artifact-mixing refusals, and the thread cap.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SWEEP_HEADER: &str =
    "delta,mode,recall,per_instance_ap,per_instance_ac,per_class_ap,per_class_ac";

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_graphreason"));
    cmd.env_remove("GRAPHREASON_THREADS");
    cmd
}

fn dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    fs::create_dir_all(&d).expect("create test dir");
    d
}

/// A configuration small enough that every verb finishes in well under a
/// second.
fn tiny_config(dir: &Path) -> PathBuf {
    let text = "data.scenes = 24\n\
                data.grid_h = 8\n\
                data.grid_w = 8\n\
                data.channels = 4\n\
                data.regions_min = 4\n\
                data.regions_max = 6\n\
                model.mem_channels = 6\n\
                model.conv_channels = 6\n\
                model.fc_width = 10\n\
                model.crop = 3\n\
                model.iterations = 1\n\
                model.graph_dim = 6\n\
                model.graph_stacks = 2\n\
                train.steps = 8\n\
                train.log_every = 4\n\
                sweep.deltas = 0,0.5\n\
                sweep.proposals = 1\n\
                sweep.jitter = 0.3\n";
    let path = dir.join("tiny.cfg");
    fs::write(&path, text).expect("write config");
    path
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn binary");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout_of(&out),
        stderr_of(&out)
    );
    out
}

fn run_err(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn binary");
    assert!(
        !out.status.success(),
        "expected failure, got success\nstdout:\n{}",
        stdout_of(&out)
    );
    out
}

#[test]
fn gradcheck_prints_one_line_per_operation_and_succeeds() {
    let d = dir("gradcheck");
    let cfg = tiny_config(&d);
    let out = run_ok(bin().args(["gradcheck", "--config"]).arg(&cfg).args(["--seed", "3"]));
    let text = stdout_of(&out);
    let op_lines: Vec<&str> = text.lines().filter(|l| l.contains("coords")).collect();
    assert!(
        op_lines.len() >= 25,
        "expected a status line per checked operation, got {}:\n{text}",
        op_lines.len()
    );
    assert!(op_lines.iter().all(|l| l.ends_with("ok")), "{text}");
    assert!(text.contains("rollout_loss"), "{text}");
}

#[test]
fn a_corrupted_gradient_is_reported_and_fails_the_run() {
    let d = dir("gradcheck_corrupt");
    let cfg = tiny_config(&d);
    let mut text = fs::read_to_string(&cfg).unwrap();
    text.push_str("gradcheck.corrupt = true\n");
    let bad = d.join("corrupt.cfg");
    fs::write(&bad, text).unwrap();
    let out = run_err(bin().args(["gradcheck", "--config"]).arg(&bad).args(["--seed", "3"]));
    assert!(stdout_of(&out).contains("FAIL"), "{}", stdout_of(&out));
}

#[test]
fn gen_data_writes_the_dataset_package() {
    let d = dir("gen_data");
    let cfg = tiny_config(&d);
    run_ok(bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&d));
    for file in ["classes.txt", "kg.tsv", "scenes.txt", "manifest.tsv", "config.txt"] {
        assert!(d.join(file).exists(), "missing {file}");
    }
    let classes = fs::read_to_string(d.join("classes.txt")).unwrap();
    assert_eq!(classes.lines().count(), 8, "one line per class:\n{classes}");
}

#[test]
fn train_eval_sweep_report_roundtrip() {
    let d = dir("roundtrip");
    let cfg = tiny_config(&d);
    run_ok(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&d));
    let ckpt = d.join("checkpoint.json");
    assert!(ckpt.exists());
    let log = fs::read_to_string(d.join("train_log.tsv")).unwrap();
    assert!(log.starts_with("# config "), "log must carry the config digest");
    assert!(log.contains("step\tscene\tlr\ttotal"), "{log}");

    let out = run_ok(bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&d));
    let text = stdout_of(&out);
    for key in ["split\t", "per_instance_ap\t", "per_class_ac\t"] {
        assert!(text.contains(key), "eval output missing {key:?}:\n{text}");
    }
    assert!(d.join("metrics.tsv").exists());

    let out = run_ok(bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&d));
    let text = stdout_of(&out);
    let mut lines = text.lines();
    assert!(lines.next().unwrap_or_default().starts_with("# config "));
    assert_eq!(lines.next().unwrap_or_default(), SWEEP_HEADER);
    let csv = fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap_or_default(), SWEEP_HEADER);
    // One pre and one post row per threshold.
    assert_eq!(csv.lines().count(), 2 + 2 * 2);

    let out = run_ok(bin().args(["report", "--out"]).arg(&d));
    let text = stdout_of(&out);
    for key in [
        "digest = ",
        "variant = full",
        "train.final_loss = ",
        "eval.per_class_ac = ",
        "sweep.delta_0.5.post.recall = ",
    ] {
        assert!(text.contains(key), "report missing {key:?}:\n{text}");
    }
}

#[test]
fn artifacts_from_a_different_config_are_refused() {
    let d = dir("refusal");
    let cfg = tiny_config(&d);
    run_ok(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&d));
    // Same checkpoint, different seed: the config digest no longer matches.
    let out = run_err(bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--seed", "999", "--checkpoint"])
        .arg(d.join("checkpoint.json"))
        .arg("--out")
        .arg(&d));
    assert!(
        stderr_of(&out).contains("different configuration"),
        "{}",
        stderr_of(&out)
    );
    // Resuming training under the changed config must fail the same way.
    let out = run_err(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "999", "--checkpoint"])
        .arg(d.join("checkpoint.json"))
        .arg("--out")
        .arg(&d));
    assert!(
        stderr_of(&out).contains("different configuration"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let d = dir("unknown_key");
    let bad = d.join("bad.cfg");
    fs::write(&bad, "data.scense = 50\n").unwrap();
    let out = run_err(bin()
        .args(["train", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(&d));
    let err = stderr_of(&out);
    assert!(err.contains("unknown config keys"), "{err}");
    assert!(err.contains("data.scense"), "{err}");
}

#[test]
fn missing_required_flags_give_clear_errors() {
    let d = dir("missing_flags");
    let cfg = tiny_config(&d);
    let out = run_err(bin().args(["train", "--config"]).arg(&cfg));
    assert!(stderr_of(&out).contains("needs --out"), "{}", stderr_of(&out));
    let out = run_err(bin().args(["eval", "--config"]).arg(&cfg).arg("--out").arg(&d));
    assert!(
        stderr_of(&out).contains("needs --checkpoint"),
        "{}",
        stderr_of(&out)
    );
    let out = run_err(bin().args(["train", "--config", "/nonexistent.cfg", "--out"]).arg(&d));
    assert!(!stderr_of(&out).is_empty());
}

#[test]
fn the_thread_cap_is_validated_and_does_not_change_results() {
    let d = dir("threads");
    let cfg = tiny_config(&d);
    run_ok(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&d));
    let ckpt = d.join("checkpoint.json");

    for bad in ["0", "-3", "lots"] {
        let out = run_err(bin()
            .env("GRAPHREASON_THREADS", bad)
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--out")
            .arg(&d));
        assert!(
            stderr_of(&out).contains("GRAPHREASON_THREADS"),
            "for {bad:?}: {}",
            stderr_of(&out)
        );
    }

    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let sub = d.join(format!("t{threads}"));
        fs::create_dir_all(&sub).unwrap();
        run_ok(bin()
            .env("GRAPHREASON_THREADS", threads)
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--out")
            .arg(&sub));
        outputs.push(fs::read(sub.join("metrics.tsv")).unwrap());
    }
    assert_eq!(
        outputs[0], outputs[1],
        "metrics must not depend on the worker-thread count"
    );
}
