use std::path::Path;
use std::process::{Command, Output};

use eagle_forge::checkpoint;
use eagle_forge::model::{ModelConfig, ModelParams};
use eagle_forge::tensor::Rng;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eagle-forge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn small_data(dir: &Path) {
    let o = run(
        dir,
        &["gen-data", "--captions", "4", "--qa", "4", "--eval", "3", "--seed", "5", "--out", "data"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_family_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["gen-data", "--families", "hexagon", "--out", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hexagon"));
}

#[test]
fn missing_config_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["train", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.cfg"));
}

#[test]
fn bad_flag_exits_with_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(t.path(), &["eval", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn gen_data_defaults_and_seed_reproducibility() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["gen-data", "--out", "a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(lines(&t.path().join("a/captions.jsonl")), 2000);
    assert_eq!(lines(&t.path().join("a/qa.jsonl")), 4000);
    assert_eq!(lines(&t.path().join("a/eval.jsonl")), 400);

    let again = run(t.path(), &["gen-data", "--out", "b"]);
    assert!(again.status.success());
    let ma = std::fs::read(t.path().join("a/manifest.json")).unwrap();
    let mb = std::fs::read(t.path().join("b/manifest.json")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(stdout(&o).lines().last(), stdout(&again).lines().last());

    let other = run(t.path(), &["gen-data", "--seed", "1", "--captions", "2000", "--out", "c"]);
    assert!(other.status.success());
    assert_ne!(stdout(&o).lines().last(), stdout(&other).lines().last());
}

#[test]
fn non_empty_output_needs_force() {
    let t = tempfile::tempdir().unwrap();
    small_data(t.path());
    let o = run(t.path(), &["gen-data", "--captions", "2", "--qa", "2", "--eval", "2", "--out", "data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    let forced = run(
        t.path(),
        &["gen-data", "--captions", "2", "--qa", "2", "--eval", "2", "--out", "data", "--force"],
    );
    assert!(forced.status.success());
    assert_eq!(lines(&t.path().join("data/eval.jsonl")), 2);
}

#[test]
fn eval_prints_the_accuracy_footer() {
    let t = tempfile::tempdir().unwrap();
    small_data(t.path());
    let o = run(t.path(), &["eval", "--limit", "2", "--out", "ev"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("n=2\n"));
    assert!(out.lines().any(|l| l.starts_with("top1_accuracy=")));
    assert_eq!(lines(&t.path().join("ev/eval_report.txt")), 2 + 3);
}

#[test]
fn rollout_writes_one_heatmap_per_image() {
    let t = tempfile::tempdir().unwrap();
    small_data(t.path());
    let o = run(t.path(), &["rollout", "--limit", "3", "--out", "viz"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ppm = std::fs::read_dir(t.path().join("viz"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count();
    assert_eq!(ppm, 3);
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn inspect_lists_groups_and_names_corrupt_fields() {
    let t = tempfile::tempdir().unwrap();
    let p = ModelParams::new(ModelConfig::tiny(), &Rng::new(1)).unwrap();
    let path = t.path().join("m.ckpt");
    checkpoint::save(&p, &path).unwrap();

    let o = run(t.path(), &["inspect", "m.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let groups: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("group ")).map(String::from).collect();
    assert_eq!(groups.len(), 3);
    assert!(groups.iter().all(|g| g.contains("sha256 ")));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(t.path().join("bad.ckpt"), &bytes).unwrap();
    let bad = run(t.path(), &["inspect", "bad.ckpt"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("magic"), "{}", stderr(&bad));

    let truncated = &std::fs::read(&path).unwrap()[..40];
    std::fs::write(t.path().join("short.ckpt"), truncated).unwrap();
    let short = run(t.path(), &["inspect", "short.ckpt"]);
    assert_eq!(short.status.code(), Some(1));
    assert!(stderr(&short).contains("corrupt checkpoint"));
}

#[test]
fn saved_run_config_reproduces_the_run() {
    let t = tempfile::tempdir().unwrap();
    small_data(t.path());
    let o = run(t.path(), &["train", "--data", "data", "--out", "r1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("advanced.ckpt"));
    let cfg = t.path().join("r1/run.toml");
    let again = run(t.path(), &["train", "--config", cfg.to_str().unwrap(), "--out", "r2"]);
    assert!(again.status.success(), "{}", stderr(&again));
    for f in ["preliminary.ckpt", "advanced.ckpt"] {
        let a = std::fs::read(t.path().join("r1").join(f)).unwrap();
        let b = std::fs::read(t.path().join("r2").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}
