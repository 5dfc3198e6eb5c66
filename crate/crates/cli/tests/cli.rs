use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_privdiag"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn privdiag")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic 8×8 data and a 64-8-2 model trained on it.
fn small_setup(dir: &TempDir) -> (PathBuf, PathBuf) {
    let data = path(dir, "data.txt");
    let model = path(dir, "model.txt");
    let o = run(&["gen-data", "--seed", "3", "--subjects", "8", "--side", "8", "--out", s(&data)]);
    assert!(o.status.success(), "{o:?}");
    let o = run(&[
        "train", "--data", s(&data), "--sizes", "64-8-2", "--activations", "sigmoid", "--epochs", "30",
        "--learning-rate", "0.01", "--out", s(&model),
    ]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.starts_with("optimizer,epochs,train_loss,test_images,accuracy,precision,recall,f1\n"));
    assert!(out.lines().nth(1).unwrap().starts_with("adam,30,"));
    (data, model)
}

#[test]
fn predict_cost_default_architecture() {
    let o = run(&["predict-cost"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("\ntotal,,135394,135394,2532,1509,162,1184\n"), "{out}");
    assert!(out.contains("\ntable,,135232,135232,2534,1510,162,1184\n"), "{out}");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--out", "/dev/null"]).status.code(), Some(1));
    assert_eq!(run(&["predict-cost", "--sizes", "10"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_on_missing_file_exits_3_without_output() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "m.txt");
    let o = run(&["train", "--data", "/nonexistent/data.txt", "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!model.exists());
}

#[test]
fn zero_epochs_saves_initial_model() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "m.txt");
    let o = run(&[
        "train", "--synth", "2", "--subjects", "6", "--sizes", "64-4-2", "--activations", "relu", "--epochs", "0",
        "--out", s(&model),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(model.exists());
}

#[test]
fn sweep_precision_emits_one_row_per_fraction() {
    let dir = TempDir::new().unwrap();
    let (data, model) = small_setup(&dir);
    let o = run(&[
        "sweep-precision", "--model", s(&model), "--data", s(&data), "--frac-min", "3", "--frac-max", "5",
    ]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let lines: Vec<_> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("frac_bits,"));
    assert!(lines[1].starts_with("3,") && lines[3].starts_with("5,"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")), "{out}");
}

struct Served {
    child: Child,
    addr: String,
}

fn serve(dir: &TempDir, model: &Path, max_sessions: &str) -> Served {
    let creds = path(dir, "creds.txt");
    std::fs::write(&creds, "# uid:password\nalice:secret\n").unwrap();
    let mut child = bin()
        .args([
            "serve", "--model", s(model), "--credentials", s(&creds), "--bind", "127.0.0.1:0", "--max-sessions",
            max_sessions, "--seed", "1",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening,").expect("listening line").split(',').next().unwrap().to_string();
    Served { child, addr }
}

fn diagnose(addr: &str, data: &Path, pwd: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "diagnose", "--server", addr, "--uid", "alice", "--pwd", pwd, "--key-bits", "256", "--seed", "4",
        "--pair-from", s(data), "--subject", "0",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn serve_and_diagnose_over_tcp() {
    let dir = TempDir::new().unwrap();
    let (data, model) = small_setup(&dir);
    let mut served = serve(&dir, &model, "3");

    let o = diagnose(&served.addr, &data, "secret", &[]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let first = out.lines().next().unwrap();
    assert!(first.starts_with("before=D") || first.starts_with("indeterminate"), "{out}");
    assert!(first.contains(" R1=") && first.contains(" R2="));
    // 64-8-2: 8 + 2 big-ints down, 64 + 8 up
    assert!(out.contains("\nD1,10,72,82,"), "{out}");
    assert!(out.contains("\nD2,10,72,82,"), "{out}");

    let swapped = stdout(&diagnose(&served.addr, &data, "secret", &["--swap"]));
    let flip = |l: &str| l.replace("D1", "DX").replace("D2", "D1").replace("DX", "D2");
    let (a, b) = (first.split(" R1").next().unwrap(), swapped.lines().next().unwrap().split(" R1").next().unwrap());
    if a != "indeterminate" {
        assert_eq!(flip(a), b);
    }

    let o = diagnose(&served.addr, &data, "wrong", &[]);
    assert_eq!(o.status.code(), Some(2));

    let status = served.child.wait().unwrap();
    assert!(status.success());
    let mut rest = String::new();
    std::io::Read::read_to_string(served.child.stdout.as_mut().unwrap(), &mut rest).unwrap();
    assert_eq!(rest.lines().filter(|l| l.starts_with("session,")).count(), 3, "{rest}");
    assert!(rest.contains("shutdown,sessions,3"));
}

#[test]
fn diagnose_without_server_exits_2() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "d.txt");
    assert!(run(&["gen-data", "--subjects", "2", "--side", "8", "--out", s(&data)]).status.success());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let o = diagnose(&port.to_string(), &data, "x", &[]);
    assert_eq!(o.status.code(), Some(2));
}
