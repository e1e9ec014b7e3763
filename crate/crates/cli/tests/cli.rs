use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stride(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stride")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = stride(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, env: &str, steps: &str, seed: &str) -> PathBuf {
    let out = p(dir, &format!("{env}-{seed}.jsonl"));
    ok(&["gen-data", "--env", env, "--steps", steps, "--seed", seed, "--out", s(&out)]);
    out
}

fn train(dir: &Path, model: &str, data: &Path) -> PathBuf {
    let out = p(dir, &format!("{model}.json"));
    ok(&[
        "train", "--model", model, "--data", s(data), "--steps", "20", "--batch-size", "32", "--out", s(&out),
    ]);
    out
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "bouncing-pendulum", "300", "4");
    let b = p(dir.path(), "again.jsonl");
    ok(&["gen-data", "--env", "bouncing-pendulum", "--steps", "300", "--seed", "4", "--out", s(&b)]);
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 301);
}

#[test]
fn train_eval_and_plan_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "pendulum", "400", "1");
    let ckpt = train(d, "stride", &data);
    let diff = train(d, "lnn-diffusion", &data);

    let rep = p(d, "rollout.csv");
    let svg = p(d, "rollout.svg");
    ok(&[
        "eval", "rollout", "--ckpt", s(&ckpt), "--data", s(&data), "--horizon", "10", "--starts", "4",
        "--replicates", "2", "--report", s(&rep), "--svg", s(&svg),
    ]);
    let text = std::fs::read_to_string(&rep).unwrap();
    assert!(text.contains("model_digest="));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let rep = p(d, "force.csv");
    ok(&["eval", "force", "--ckpt", s(&ckpt), "--data", s(&data), "--samples", "2", "--report", s(&rep)]);

    let rep = p(d, "nfe.csv");
    ok(&[
        "eval", "nfe", "--ckpt-flow", s(&ckpt), "--ckpt-diff", s(&diff), "--data", s(&data), "--nfe", "1,2,64",
        "--horizon", "5", "--starts", "2", "--replicates", "1", "--report", s(&rep),
    ]);
    let text = std::fs::read_to_string(&rep).unwrap();
    assert!(text.contains("NA"), "diffusion beyond its step count should be NA");

    let out = p(d, "phase.csv");
    ok(&[
        "eval", "phase", "--ckpt", s(&ckpt), "--q-range", "-1:1:3", "--qdot-range", "-1:1:3", "--samples", "2",
        "--out", s(&out),
    ]);
    assert!(std::fs::read_to_string(&out).unwrap().contains("upright eigenvalues"));

    let rep = p(d, "plan.csv");
    ok(&["plan", "--ckpt", "oracle", "--env", "pendulum", "--seconds", "0.5", "--report", s(&rep)]);
    assert!(std::fs::read_to_string(&rep).unwrap().lines().count() > 5);
}

#[test]
fn oracle_rollout_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "cartpole", "200", "2");
    let rep = p(dir.path(), "r.csv");
    ok(&[
        "eval", "rollout", "--ckpt", "oracle", "--data", s(&data), "--horizon", "10", "--starts", "4", "--z", "zero",
        "--report", s(&rep),
    ]);
    let text = std::fs::read_to_string(&rep).unwrap();
    let last = text.lines().last().unwrap();
    let cum: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    assert!(cum < 1e-8, "{last}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(stride(&["train", "--model", "nope"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "pendulum", "100", "1");
    let out = p(dir.path(), "x.csv");
    let r = stride(&[
        "eval", "phase", "--ckpt", "oracle", "--q-range", "1:2", "--out", s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    // Diffusion has no force stream.
    let diff = train(dir.path(), "pure-diffusion", &data);
    let r = stride(&["eval", "force", "--ckpt", s(&diff), "--data", s(&data), "--report", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn corrupt_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "pendulum", "100", "1");
    let text = std::fs::read_to_string(&data).unwrap();
    let bad = p(dir.path(), "bad.jsonl");
    std::fs::write(&bad, &text[..text.len() / 2]).unwrap();
    let out = p(dir.path(), "m.json");
    let r = stride(&["train", "--model", "onn", "--data", s(&bad), "--steps", "2", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    let r = stride(&[
        "eval", "rollout", "--ckpt", s(&bad), "--data", s(&data), "--report", s(&out),
    ]);
    assert_eq!(r.status.code(), Some(3));
    let missing = p(dir.path(), "missing.jsonl");
    let r = stride(&["train", "--model", "onn", "--data", s(&missing), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn divergent_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "pendulum", "200", "1");
    let out = p(dir.path(), "m.json");
    let r = stride(&[
        "train", "--model", "onn", "--data", s(&data), "--steps", "200", "--lr", "1e4", "--out", s(&out),
    ]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out.exists());
}
