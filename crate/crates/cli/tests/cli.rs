use std::fs;
use std::process::{Command, Output};

fn odsgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odsgd"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "\
cluster.workers = 2
train.batch = 4
train.epochs = 3
data.n = 96
data.n_test = 32
data.d = 3
data.k = 2
timing.t_cop = 3
timing.t_com = 3
";

#[test]
fn run_writes_metrics_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let (m, t) = (dir.path().join("m.csv"), dir.path().join("t.csv"));
    let o = odsgd(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "odsgd",
        "--wp",
        "2",
        "--t-com-prime",
        "2",
        "--optimizer-local",
        "sgd",
        "--out",
        m.to_str().unwrap(),
        "--trace",
        t.to_str().unwrap(),
        "--baseline",
        "ssgd",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("imp_rate        0.400000"), "{text}");
    let csv = fs::read_to_string(&m).unwrap();
    assert!(
        csv.starts_with("epoch,sim_time,train_loss,train_acc,test_acc,throughput,mean_staleness\n")
    );
    assert_eq!(csv.lines().count(), 4);
    assert!(fs::read_to_string(&t)
        .unwrap()
        .starts_with("sim_time,actor,event,round,labels"));
}

#[test]
fn compare_flags_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let mut files = Vec::new();
    for mode in ["ssgd", "odsgd", "asgd"] {
        let out = dir.path().join(format!("{mode}.csv"));
        let o = odsgd(&[
            "run",
            "-c",
            cfg.to_str().unwrap(),
            "--mode",
            mode,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        files.push(out.to_str().unwrap().to_string());
    }
    let table_csv = dir.path().join("cmp.csv");
    let mut args = vec![
        "compare",
        "--window",
        "1",
        "--csv",
        table_csv.to_str().unwrap(),
    ];
    args.extend(files.iter().map(String::as_str));
    let o = odsgd(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("# test_acc: centered moving average"));
    assert_eq!(text.lines().count(), 5);
    let csv = fs::read_to_string(table_csv).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",true,"));
}

#[test]
fn predict_prints_closed_form() {
    let o = odsgd(&[
        "predict",
        "--t-cop",
        "3",
        "--t-com",
        "3",
        "--t-com-prime",
        "2",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(
        text.contains("t_org     5") && text.contains("t_new     3") && text.contains("0.400000")
    );
}

#[test]
fn exit_codes() {
    assert_eq!(odsgd(&["run", "--workers", "0"]).status.code(), Some(2));
    assert_eq!(odsgd(&["run", "--mode", "od-sgd"]).status.code(), Some(2));
    assert_eq!(
        odsgd(&["run", "--set", "train.batch=-3"]).status.code(),
        Some(2)
    );
    assert_eq!(
        odsgd(&["run", "--config", "/no/such.cfg"]).status.code(),
        Some(2)
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "epoch,oops\n1,2\n").unwrap();
    assert_eq!(
        odsgd(&["compare", bad.to_str().unwrap()]).status.code(),
        Some(3)
    );
    let missing = dir.path().join("absent.csv");
    assert_eq!(
        odsgd(&["compare", missing.to_str().unwrap()]).status.code(),
        Some(3)
    );
}
