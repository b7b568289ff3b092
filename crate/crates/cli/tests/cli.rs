use std::fs;
use std::process::Command;

fn condensate() -> Command {
    Command::new(env!("CARGO_BIN_EXE_condensate"))
}

#[test]
fn solve_ode_writes_csv_to_stdout() {
    let out = condensate().arg("solve-ode").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# condensate-sim v1"));
    assert!(lines.next().unwrap().starts_with("block,t,gamma_mean,gamma_se"));
    assert_eq!(text.lines().count(), 2 + 31);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("pd.toml");
    fs::write(
        &config,
        r#"
kind = "pd-sample"
master_seed = 3
horizon = 1.0

[model]
rho = 1.0
spec = { A = 1, theta = 1.0 }

[pd]
theta = 1.0
gamma = 1.0
samples = 50
eps = 1e-12
moments = [2]
"#,
    )
    .unwrap();
    let printed = condensate()
        .args(["sample-pd", "--config"])
        .arg(&config)
        .args(["--seed", "11", "--replicas", "2000", "--print-config"])
        .output()
        .unwrap();
    let text = String::from_utf8(printed.stdout).unwrap();
    assert!(text.contains("master_seed = 11"));
    assert!(text.contains("samples = 2000"));

    let out_dir = dir.path().join("out");
    let status = condensate()
        .args(["sample-pd", "--config"])
        .arg(&config)
        .args(["--replicas", "2000", "--out"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(out_dir.join("pd-sample.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(2).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    let (mean, se) = (row[1], row[2]);
    assert!((mean - 0.5).abs() < 4.0 * se, "{mean} +- {se}");
    assert!(out_dir.join("pd-sample.json").exists());
    assert!(out_dir.join("pd-sample_replicas.csv").exists());
}

#[test]
fn same_seed_same_bytes() {
    let (_dir, config) = small_ip_config();
    let run = || {
        condensate()
            .args(["simulate-ip", "--seed", "5", "--replicas", "3", "--format", "csv"])
            .arg("--config")
            .arg(&config)
            .output()
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

fn small_ip_config() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ip.toml");
    fs::write(
        &path,
        r#"
kind = "ip-sim"
master_seed = 1
horizon = 0.5
grid = { points = 6 }
sizes = { sites = [80] }

[model]
rho = 1.0
spec = { A = 1, theta = 1.0 }
"#,
    )
    .unwrap();
    (dir, path)
}

#[test]
fn json_format_and_figure2() {
    let out = condensate().args(["figure2", "--format", "json"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"kind\": \"figure2\""));
    assert!(text.contains("asymptote_upper"));
}

#[test]
fn exit_codes() {
    let bad = condensate().args(["simulate-ip", "--replicas", "0"]).status().unwrap();
    assert_eq!(bad.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    let (_ip_dir, ip_config) = small_ip_config();
    let mut text = fs::read_to_string(&ip_config).unwrap().replace("ip-sim", "ode");
    text = text.replace("horizon = 0.5", "horizon = -1.0");
    fs::write(&path, text).unwrap();
    let bad = condensate().args(["solve-ode", "--config"]).arg(&path).status().unwrap();
    assert_eq!(bad.code(), Some(1));
    let wrong_kind = condensate().args(["moments", "--config"]).arg(&ip_config).status().unwrap();
    assert_eq!(wrong_kind.code(), Some(1));
    let missing = condensate().args(["solve-ode", "--config", "/nonexistent/x.toml"]).status().unwrap();
    assert_eq!(missing.code(), Some(1));
    let unwritable = condensate().args(["solve-ode", "--out", "/dev/null/out"]).status().unwrap();
    assert_eq!(unwritable.code(), Some(3));
}
