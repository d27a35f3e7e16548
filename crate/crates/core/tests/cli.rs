use std::path::Path;
use std::process::{Command, Output};

use taypo_lab::experiment::ExperimentConfig;

fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taypo-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn config_line(csv: &str) -> ExperimentConfig {
    let line = csv.lines().nth(1).unwrap();
    serde_json::from_str(line.strip_prefix("# config: ").unwrap()).unwrap()
}

#[test]
fn passing_suite_exits_zero_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "op.toml", "experiment = \"operator_suite\"\nseeds = [1, 2]\n");
    let out = dir.path().join("op.csv");
    let result = run_cli(&["operator_suite", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# schema: taypo-lab/operator_suite/v1\n"));
    assert_eq!(config_line(&text).seeds, vec![1, 2]);
    // header plus 2 seeds x 10 epsilons x 6 orders
    assert_eq!(text.lines().count(), 3 + 120);
}

#[test]
fn seed_flag_shifts_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.toml", "seeds = [0, 1, 2]\nepsilons = [0.05]\n");
    let out = dir.path().join("b.csv");
    let result = run_cli(&[
        "bounds_suite",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "40",
    ]);
    assert!(result.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(config_line(&text).seeds, vec![40, 41, 42]);
    assert!(text.lines().skip(3).all(|l| l.starts_with("4")));
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let out = out.to_str().unwrap();
    let cases = [
        ("unknown.toml", "seedz = [1]\n"),
        ("type.toml", "gamma = \"high\"\n"),
        ("range.toml", "gamma = 1.5\n"),
        ("empty.toml", "epsilons = []\n"),
        ("syntax.toml", "gamma = = 0.9\n"),
        ("mismatch.toml", "experiment = \"optimize\"\n"),
    ];
    for (name, text) in cases {
        let cfg = write(dir.path(), name, text);
        let result = run_cli(&["figure1", "--config", &cfg, "--out", out]);
        assert_eq!(result.status.code(), Some(2), "{name}");
    }
    let missing = dir.path().join("missing.toml");
    let result = run_cli(&["figure1", "--config", missing.to_str().unwrap(), "--out", out]);
    assert_eq!(result.status.code(), Some(2));
    let cfg = write(dir.path(), "ok.toml", "");
    assert_eq!(run_cli(&["figure3", "--config", &cfg, "--out", out]).status.code(), Some(2));
    assert_eq!(
        run_cli(&["figure1", "--config", &cfg, "--out", out, "--jobs", "0"]).status.code(),
        Some(2)
    );
    assert!(!Path::new(out).exists());
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", "seeds = [0]\nepsilons = [0.05]\n");
    let out = dir.path().join("no/such/dir/out.csv");
    let result = run_cli(&["bounds_suite", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn empty_config_uses_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "f.toml", "seeds = [5]\n");
    let out = dir.path().join("f.csv");
    let result = run_cli(&["figure1", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(result.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let parsed = config_line(&text);
    let mut expected = ExperimentConfig::defaults(taypo_lab::experiment::ExperimentKind::Figure1);
    expected.seeds = vec![5];
    assert_eq!(parsed, expected);
    // 10 epsilons x 3 orders x 2 modes for one MDP
    assert_eq!(text.lines().count(), 3 + 60);
}
