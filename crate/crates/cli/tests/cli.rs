use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data.synthetic]
n_nodes = 6
t_total = 200

[model]
d_model = 8
n_heads = 2
n_encoder = 1
n_decoder = 1
window = 8

[train]
epochs = 1
max_iterations = 3
batch_size = 4
"#;

fn kriformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kriformer"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn train_into(dir: &Path, name: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let cfg = tiny_config(dir);
    let r = kriformer(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes() {
    let r = kriformer(&["gradcheck"]);
    assert_eq!(code(&r), 0);
    let text = stdout(&r);
    let value: f64 = text.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value < 1e-5, "{text}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&kriformer(&["frobnicate"])), 1);
    assert_eq!(code(&kriformer(&["train", "--bogus"])), 1);
    let r = kriformer(&["evaluate", "--checkpoint", "none.ckpt", "--scenario", "sm4"]);
    assert_eq!(code(&r), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nd_modle = 8\n").unwrap();
    assert_eq!(code(&kriformer(&["train", "--config", s(&bad)])), 1);
    assert_eq!(code(&kriformer(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let speeds = dir.path().join("speeds.csv");
    fs::write(&speeds, "timestamp,a,b\n0,1,2\n1,3\n").unwrap();
    let dist = dir.path().join("d.csv");
    fs::write(&dist, "from,to,distance\na,b,1\n").unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, format!("[data]\nspeeds = {:?}\ndistances = {:?}\n", s(&speeds), s(&dist))).unwrap();
    let r = kriformer(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains(":3:"), "line number reported");
    let r = kriformer(&["embed", "--distances", s(&dir.path().join("missing.csv")), "--k", "1"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn train_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_into(dir.path(), "a");
    let b = train_into(dir.path(), "b");
    for f in ["model.ckpt", "loss.csv", "speeds.csv", "distances.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let loss = fs::read_to_string(a.join("loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "iteration,loss");
    assert_eq!(lines.len(), 4);

    let cfg = tiny_config(dir.path());
    let c = dir.path().join("c");
    let r = kriformer(&["train", "--config", &cfg, "--seed", "4", "--out", s(&c)]);
    assert_eq!(code(&r), 0);
    assert_ne!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(c.join("model.ckpt")).unwrap());
}

#[test]
fn krige_and_evaluate_on_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_into(dir.path(), "run");
    let (ckpt, speeds, dist) = (run.join("model.ckpt"), run.join("speeds.csv"), run.join("distances.csv"));

    let pred = dir.path().join("pred.csv");
    let args = [
        "krige", "--checkpoint", s(&ckpt), "--speeds", s(&speeds), "--distances", s(&dist),
        "--unobserved", "s1,s4", "--out", s(&pred),
    ];
    let r = kriformer(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&pred).unwrap();
    assert_eq!(text.lines().next(), Some("timestamp,node,value"));
    assert_eq!(text.lines().count() - 1, 200 * 2);
    let first = fs::read(&pred).unwrap();
    assert_eq!(code(&kriformer(&args)), 0);
    assert_eq!(fs::read(&pred).unwrap(), first);

    let mut bad = args.to_vec();
    bad[9] = "s1,zz";
    assert_eq!(code(&kriformer(&bad)), 1);

    let other = dir.path().join("other.csv");
    fs::write(&other, fs::read_to_string(&dist).unwrap().replacen(",0.", ",9.", 1)).unwrap();
    let mut moved = args.to_vec();
    moved[6] = s(&other);
    assert_eq!(code(&kriformer(&moved)), 2);

    let eval = dir.path().join("eval");
    let cfg = run.join("config.toml");
    let r = kriformer(&[
        "evaluate", "--checkpoint", s(&ckpt), "--scenario", "sm5", "--seed", "2", "--config", s(&cfg),
        "--out", s(&eval),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(csv.starts_with("model,scenario,scenario_ratio,train_mask_ratio,seed,mae,rmse,mape,nodes,entries,wall_clock_seconds"));
    assert_eq!(csv.lines().count(), 4);
    let json: String = fs::read_to_string(eval.join("report.json")).unwrap();
    assert!(json.contains("\"scenario\": \"SM5\""));
}

#[test]
fn sweep_and_ablate_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    let r = kriformer(&["sweep-mask", "--config", &cfg, "--ratios", "0.2,0.5", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "ratio,mae,rmse,mape");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.2,") && lines[2].starts_with("0.5,"));
    assert_eq!(code(&kriformer(&["sweep-mask", "--config", &cfg, "--ratios", "1.5"])), 1);

    let out = dir.path().join("abl");
    let r = kriformer(&["ablate", "--config", &cfg, "--variants", "full,no_MSIA", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("kriformer[no_MSIA]"));
    assert_eq!(code(&kriformer(&["ablate", "--config", &cfg, "--variants", "no_FOO"])), 1);
}

#[test]
fn embed_writes_eigenmap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.csv");
    fs::write(&d, "from,to,distance\na,b,1.0\nb,c,1.5\nc,d,0.7\nd,a,2.0\n").unwrap();
    let out = dir.path().join("e.csv");
    let r = kriformer(&["embed", "--distances", s(&d), "--k", "2", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "node,v1,v2");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("a,"));
    let r = kriformer(&["embed", "--distances", s(&d), "--k", "2"]);
    assert_eq!(stdout(&r), text);
    assert_eq!(code(&kriformer(&["embed", "--distances", s(&d), "--k", "4"])), 1);
}
