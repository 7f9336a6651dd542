use std::path::Path;
use std::process::{Command, Output};

fn normlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const SPEC: &str = "n = 64\nk = 8\nd_latent = 4\nd_raw_image = 6\nd_raw_text = 5\nsigma = 0.2\nseed = 3\n";

fn train_config(extra: &str) -> String {
    format!(
        "data.path = data.nckp
encoder.dim = 4
batch_size = 16
eval_every = 2
npn.m = 8
npn.t_r = 3
npn.t_u = 2
{extra}
"
    )
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.txt"), SPEC).unwrap();
    let out = normlab(&["gen-data", "spec.txt", "-o", "data.nckp"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(dir.path().join("run.cfg"), train_config(extra)).unwrap();
    dir
}

#[test]
fn train_then_eval_checkpoint() {
    let dir = setup("method = neuclip\nsteps = 6\noutput.dir = out");
    let out = normlab(&["train", "-c", "run.cfg"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, vec![0, 2, 4, 6]);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    for key in [
        "samples_seen",
        "gcl_value_on_eval_pool",
        "recall@1",
        "recall@5",
        "estimation_error",
        "tau",
        "wall_ms",
    ] {
        assert!(last.get(key).is_some(), "{key}");
    }

    let ev = normlab(&["eval", "-c", "run.cfg", "--ckpt", "out/checkpoint.nckp"], dir.path());
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let rec: serde_json::Value = serde_json::from_slice(&ev.stdout).unwrap();
    assert_eq!(rec, last);
}

#[test]
fn rerun_gives_identical_log() {
    let dir = setup("method = fastclip\nsteps = 6");
    for k in 0..2 {
        assert!(normlab(&["train", "-c", "run.cfg"], dir.path()).status.success());
        let log = dir.path().join("runs/run/metrics.jsonl");
        std::fs::rename(log, dir.path().join(format!("log{k}.jsonl"))).unwrap();
    }
    let a = std::fs::read(dir.path().join("log0.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("log1.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn zero_steps_logs_only_step_zero() {
    let dir = setup("steps = 0");
    assert!(normlab(&["train", "-c", "run.cfg"], dir.path()).status.success());
    let log = std::fs::read_to_string(dir.path().join("runs/run/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("{\"step\":0,"));
}

#[test]
fn config_errors_exit_with_two_and_name_the_field() {
    let dir = setup("steps = 6\nnpn.lr_typo = 0.1");
    let out = normlab(&["train", "-c", "run.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("npn.lr_typo"));

    std::fs::write(dir.path().join("bad.cfg"), train_config("fastclip.gamma = 2")).unwrap();
    let out = normlab(&["train", "-c", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fastclip.gamma"));

    let out = normlab(&["gradcheck", "--module", "everything"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = normlab(&["train", "-c", "absent.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_single_module() {
    let dir = tempfile::tempdir().unwrap();
    let out = normlab(&["gradcheck", "--module", "encoders", "--seeds", "2"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("all 6 gradient checks passed"), "{text}");
}

#[test]
fn sweep_writes_summary_csv() {
    let dir = setup("steps = 2");
    let out = normlab(
        &[
            "sweep",
            "-c",
            "run.cfg",
            "--vary",
            "method=minibatch,fastclip",
            "--vary",
            "seed=1,2",
            "--out",
            "sw",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sw/summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("run,method,seed,step,"));
    assert_eq!(String::from_utf8_lossy(&out.stdout), csv);
    assert!(dir.path().join("sw/run_3/metrics.jsonl").exists());
}
