use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dpg");

/// Small enough to train in well under a second.
const SMOKE: &[&str] = &[
    "--set",
    "data.concepts=3",
    "--set",
    "data.contexts=2",
    "--set",
    "diffusion.timesteps=30",
    "--set",
    "policy.hidden=[16,16]",
    "--set",
    "critic.hidden=[8]",
    "--set",
    "trainer.batch_size=8",
    "--set",
    "eval.samples_per_condition=4",
];

fn dpg(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("DPG_OUT_DIR").output().unwrap()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMOKE);
    args.extend_from_slice(extra);
    dpg(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn image_alignment(report: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix("image_alignment="))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn zero_step_run_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train(&run, &["--set", "trainer.steps=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "config.toml",
        "metrics.jsonl",
        "dataset.tsv",
        "report.txt",
        "checkpoints/step-00000000.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
}

#[test]
fn same_config_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        let o = train(
            run,
            &[
                "--set",
                "trainer.steps=20",
                "--set",
                "trainer.eval_every=10",
                "--seed",
                "3",
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["metrics.jsonl", "report.txt", "checkpoints/step-00000020.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn type_error_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&dir.path().join("run"), &["--set", "trainer.steps=\"many\""]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("trainer.steps"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&dir.path().join("run"), &["--set", "trainer.stepz=3"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));
}

#[test]
fn bad_seed_is_a_usage_error() {
    let o = dpg(&["train", "--seed", "abc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_cell_grid_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid");
    let mut args = vec![
        "ablate",
        "--out",
        out.to_str().unwrap(),
        "--grid",
        "trainer.reward.lambda=0.5",
    ];
    args.extend_from_slice(SMOKE);
    args.extend_from_slice(&["--set", "trainer.steps=5"]);
    let o = dpg(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.starts_with("cell\ttrainer.reward.lambda\t"));
    assert!(out.join("cell-000/report.txt").exists());
}

#[test]
fn eval_is_repeatable_and_missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train(&run, &["--set", "trainer.steps=10", "--set", "trainer.eval_every=10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = run.to_str().unwrap();
    let first = dpg(&["eval", path, "--seed", "5"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let report = run.join("eval/step-00000010-seed-5.txt");
    let a = fs::read(&report).unwrap();
    let second = dpg(&["eval", path, "--seed", "5"]);
    assert!(second.status.success());
    assert_eq!(a, fs::read(&report).unwrap());
    assert_eq!(first.stdout, second.stdout);

    let missing = dpg(&["eval", path, "--step", "7"]);
    assert_eq!(missing.status.code(), Some(6), "{}", stderr(&missing));
}

#[test]
fn training_improves_on_the_smoke_task() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train(
        &run,
        &[
            "--set",
            "trainer.algorithm=\"baseline\"",
            "--set",
            "trainer.steps=400",
            "--set",
            "trainer.eval_every=400",
            "--set",
            "trainer.lr_policy=1e-2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let path = run.to_str().unwrap();
    let start = dpg(&["eval", path, "--step", "0"]);
    let end = dpg(&["eval", path, "--step", "400"]);
    assert!(start.status.success() && end.status.success());
    let ia0 = image_alignment(&fs::read_to_string(run.join("eval/step-00000000.txt")).unwrap());
    let ia1 = image_alignment(&fs::read_to_string(run.join("eval/step-00000400.txt")).unwrap());
    assert!(ia1 >= ia0, "{ia0} -> {ia1}");
}

#[test]
fn out_dir_env_sets_the_default_root() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--seed", "4", "--set", "trainer.steps=0"];
    args.extend_from_slice(SMOKE);
    let o = Command::new(BIN)
        .args(&args)
        .env("DPG_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("train-seed-4/report.txt").exists());
}

#[test]
fn schedule_and_dataset_dumps() {
    let o = dpg(&["show-schedule", "--set", "diffusion.timesteps=10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t\tbeta\talpha\talpha_bar\tlookahead_weight");
    assert_eq!(lines.len(), 11);
    let ab: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split('\t').nth(3).unwrap().parse().unwrap())
        .collect();
    assert!(ab.windows(2).all(|w| w[1] < w[0]));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("data.tsv");
    let mut args = vec!["dump-dataset", "--out", file.to_str().unwrap()];
    args.extend_from_slice(SMOKE);
    let o = dpg(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = dpg(&[&["dump-dataset"], SMOKE].concat());
    assert_eq!(fs::read(&file).unwrap(), printed.stdout);
}
