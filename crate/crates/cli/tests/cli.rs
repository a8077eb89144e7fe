use std::path::Path;
use std::process::{Command, Output};

fn mafenn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mafenn"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_passes_and_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = mafenn(dir.path(), &["gradcheck", "--seeds", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("case,seed,max_rel_err,tolerance,pass\n"));
    assert!(!text.contains(",false"));
}

#[test]
fn game_verify_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = mafenn(dir.path(), &["game-verify", "--seed", "5"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("game_checks.csv")).unwrap();
    assert!(csv.starts_with("check_name,game_id,value,threshold,pass\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn generate_writes_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = mafenn(
        dir.path(),
        &[
            "generate",
            "--channel",
            "linear",
            "--snr-db",
            "-3",
            "--symbols",
            "500",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f = dir.path().join("linear-snr-3-s0.mafd");
    // magic, version, count, then 33 bytes per symbol
    assert_eq!(std::fs::metadata(f).unwrap().len(), 4 + 4 + 8 + 500 * 33);
}

#[test]
fn train_then_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = mafenn(
        dir.path(),
        &[
            "train",
            "--channel",
            "linear",
            "--snr-db",
            "25",
            "--equalizer",
            "rls",
            "--train-symbols",
            "3000",
            "--seed",
            "4",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("rls.mafw").exists());
    let cfg = std::fs::read_to_string(dir.path().join("rls.cfg")).unwrap();
    assert!(cfg.contains("equalizer = rls"));
    let model = dir.path().join("rls");
    let args = [
        "evaluate",
        "--channel",
        "linear",
        "--snr-db",
        "25",
        "--test-symbols",
        "2000",
        "--model",
        model.to_str().unwrap(),
    ];
    let a = mafenn(dir.path(), &args);
    let b = mafenn(dir.path(), &args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a), stdout(&b));
    let line = stdout(&a).lines().nth(1).unwrap().to_string();
    let ser: f64 = line.split(',').next().unwrap().parse().unwrap();
    assert!(ser < 0.05, "{line}");
}

#[test]
fn train_accepts_network_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = mafenn(
        dir.path(),
        &[
            "train",
            "--equalizer",
            "mafenn",
            "--cycles",
            "1",
            "--feedback-window",
            "2",
            "--combine",
            "replace",
            "--train-symbols",
            "400",
            "--set",
            "conv_filters=2,2,2",
            "--set",
            "lstm_hidden=3",
            "--set",
            "latent_dim=3",
            "--set",
            "head_hidden=3",
            "--set",
            "epochs=1",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = std::fs::read_to_string(dir.path().join("mafenn.cfg")).unwrap();
    for want in ["cycles = 1", "k = 2", "combine = replace"] {
        assert!(cfg.contains(want), "{cfg}");
    }
}

#[test]
fn sweep_from_a_plan_file() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.cfg");
    std::fs::write(
        &plan,
        "channel = linear\nequalizers = rls\nsnr_db = 30, 0\ntrials = 2\n\
         train_symbols = 2500\nval_symbols = 200\ntest_symbols = 1500\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = mafenn(&out, &["--config", plan.to_str().unwrap(), "sweep"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);
    let plot = std::fs::read_to_string(out.join("plot").join("rls.csv")).unwrap();
    let snrs: Vec<f64> = plot
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(snrs, [0.0, 30.0]);
}

#[test]
fn bad_plan_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.cfg");
    std::fs::write(&plan, "trials = many\n").unwrap();
    let o = mafenn(dir.path(), &["--config", plan.to_str().unwrap(), "sweep"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trials"));
}
