use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.toml");

fn cmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmoe"))
        .args(args)
        .env_remove("CMOE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", TINY, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = cmoe(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    o
}

#[test]
fn run_writes_outputs_with_protocol_shape() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(dir.path(), &[]);
    assert!(stdout(&o).contains("bwt_pp"));
    for f in ["metrics.csv", "manifest.json", "checkpoint/checkpoint.json", "checkpoint/checkpoint.bin"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "record,routing,after_task,eval_task,value");
    let accuracy = lines.iter().filter(|l| l.starts_with("accuracy,ptl,")).count();
    assert_eq!(accuracy, 3);
    assert_eq!(lines.iter().filter(|l| l.starts_with("bwt,")).count(), 5);
    assert!(lines.last().unwrap().starts_with("param_ratio,"));
}

#[test]
fn rerun_gives_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_tiny(a.path(), &[]);
    run_tiny(b.path(), &[]);
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn routing_flag_selects_summary_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(dir.path(), &["--routing", "ptl,oracle,shared"]);
    let rows: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| ["ptl ", "oracle ", "shared ", "last ", "random "].iter().any(|p| l.starts_with(p)))
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    assert_eq!(rows, ["ptl", "oracle", "shared"]);
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cmoe"))
        .args(["run", "--config", TINY, "--routing", "oracle"])
        .env("CMOE_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("metrics.csv").is_file());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[probe]\nalpah = 0.5\n").unwrap();
    let o = cmoe(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = cmoe(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = cmoe(&["run", "--similarity", "sideways"]);
    assert_eq!(o.status.code(), Some(2));

    let o = cmoe(&["run", "--config", TINY, "--tasks", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let o = cmoe(&["config", "--config", TINY, "--seed", "9", "--alpha", "1.5", "--cap", "3", "--probes-per-layer", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("seed = 9"));
    assert!(text.contains("alpha = 1.5"));
    assert!(text.contains("n_new_experts_cap = 3"));
    assert!(text.contains("n_probes_per_layer = 4"));
    assert!(text.contains("train_size = 200"));
}

fn parse_layer(line: &str) -> (Vec<f64>, Vec<usize>, f64) {
    let inner = |open: char, close: char| {
        let a = line.find(open).unwrap();
        let b = a + line[a..].find(close).unwrap();
        line[a + 1..b].to_string()
    };
    let act: Vec<f64> = inner('[', ']').split(", ").map(|v| v.parse().unwrap()).collect();
    let rest = &line[line.find("probes").unwrap()..];
    let a = rest.find('[').unwrap();
    let b = rest.find(']').unwrap();
    let probes = rest[a + 1..b].split(", ").map(|v| v.parse().unwrap()).collect();
    let thr = rest.split("threshold ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    (act, probes, thr)
}

#[test]
fn probe_report_is_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    run_tiny(dir.path(), &["--routing", "oracle"]);
    let run = dir.path().to_str().unwrap();
    let o = cmoe(&["probe-report", "--run", run, "--task", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("alpha 0.8"));
    let layers: Vec<&str> = text.lines().filter(|l| l.starts_with("layer")).collect();
    assert_eq!(layers.len(), 4);
    for l in layers {
        let (act, probes, thr) = parse_layer(l);
        let n = act.len() as f64;
        let mean = act.iter().sum::<f64>() / n;
        let std = (act.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((thr - (mean - 0.8 * std)).abs() < 1e-12);
        let above = probes.iter().filter(|&&p| act[p] > thr).count().min(2);
        if above == 0 {
            assert!(l.ends_with("not expanded"));
        } else {
            assert!(l.ends_with(&format!("expand by {above}")), "{l}");
        }
    }
    let o = cmoe(&["probe-report", "--run", run, "--task", "1", "--alpha", "-50"]);
    assert!(stdout(&o).lines().filter(|l| l.starts_with("layer")).all(|l| l.ends_with("not expanded")));

    let o = cmoe(&["probe-report", "--run", run, "--task", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).matches("not expanded").count(), 4);

    let o = cmoe(&["probe-report", "--run", run, "--task", "7"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn confusion_columns_are_distributions() {
    let dir = tempfile::tempdir().unwrap();
    run_tiny(dir.path(), &["--routing", "oracle"]);
    let o = cmoe(&["confusion", "--checkpoint", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    for c in 0..2 {
        let s: f64 = rows.iter().map(|r| r[c]).sum();
        assert!((s - 1.0).abs() < 1e-3, "column {c} sums to {s}");
    }
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    run_tiny(dir.path(), &["--routing", "oracle"]);
    let blob = dir.path().join("checkpoint/checkpoint.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    let o = cmoe(&["confusion", "--checkpoint", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"));
}
