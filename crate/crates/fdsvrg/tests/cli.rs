use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
# small synthetic problem
dataset = synthetic
d = 20
n = 60
sparsity = 0.4
data_seed = 3
algorithm = fd-svrg
workers = 2
eta = 0.5
lambda = 0.01
outer = 12
seed = 1
";

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdsvrg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    fs::write(&path, CONFIG).unwrap();
    path.to_str().unwrap().to_owned()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_writes_outputs_and_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = cli(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--algorithm",
        "serial",
        "--deterministic",
        "--set",
        "optimum=none",
    ]);
    ok(&out);
    for f in ["trace.csv", "ledger.csv", "summary.txt", "resolved.cfg"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(out_dir.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("algorithm = serial"), "{resolved}");
    assert!(resolved.contains("deterministic = true"), "{resolved}");
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("t,objective,gap,comm_scalars,seconds"));
    assert_eq!(trace.lines().count(), 1 + 13);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("algorithm=serial"));
}

#[test]
fn sweep_writes_one_curve_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = cli(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--lambdas",
        "1e-3,1e-5",
    ]);
    ok(&out);
    for lambda in ["1e-3", "1e-5"] {
        assert!(out_dir.join(format!("curve_lambda_{lambda}.csv")).exists(), "{lambda}");
        assert!(
            out_dir.join(format!("lambda_{lambda}")).join("trace.csv").exists(),
            "{lambda}"
        );
    }
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}

#[test]
fn speedup_and_contraction_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("speedup");
    let out = cli(&[
        "speedup",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--worker-counts",
        "1,2,4",
    ]);
    ok(&out);
    let table = fs::read_to_string(out_dir.join("speedup.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3, "{table}");

    let out_dir = dir.path().join("contraction");
    let out = cli(&[
        "contraction",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--trials",
        "5",
        "--eta",
        "0.05",
        "--inner",
        "300",
    ]);
    ok(&out);
    let csv = fs::read_to_string(out_dir.join("contraction.csv")).unwrap();
    assert!(csv.starts_with("config_hash,a,b,rho,empirical_ratio,pass"), "{csv}");
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = cli(&["run", "--config", &cfg, "--algorithm", "sgd"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = cli(&["run", "--config", &cfg, "--set", "eta"]);
    assert!(!out.status.success());
    let out = cli(&["run", "--config", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert!(!out.status.success());
}
