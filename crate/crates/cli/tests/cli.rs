use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn robfpca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robfpca")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = robfpca(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, family: &str, n: &str, seed: &str) -> std::path::PathBuf {
    ok(&["simulate", "--family", family, "--n", n, "--m", "6", "--seed", seed, "--out", p(dir)]);
    dir.join("data.csv")
}

fn read_all(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| fs::read(dir.join(n)).unwrap()).collect()
}

const FIT_FILES: [&str; 7] = ["mean.csv", "covariance.csv", "eigen.csv", "scores.csv", "model.json", "summary.txt", "config-echo.json"];

#[test]
fn fit_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "normal", "60", "3");
    let out = dir.path().join("fit");
    let args = ["fit", "--data", p(&data), "--out", p(&out), "--grid-size", "41", "--seed", "5"];
    ok(&args);
    let first = read_all(&out, &FIT_FILES);
    ok(&args);
    assert_eq!(first, read_all(&out, &FIT_FILES));
}

#[test]
fn simulate_twice_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = simulate(a.path(), "student-t", "100", "7");
    let fb = simulate(b.path(), "student-t", "100", "7");
    assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap());
}

/// Re-reads eigen.csv and checks orthonormality with its own trapezoid rule.
#[test]
fn eigen_csv_is_orthonormal() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "normal", "80", "11");
    let out = dir.path().join("fit");
    ok(&["fit", "--data", p(&data), "--out", p(&out), "--loss", "square", "--grid-size", "61", "--components", "2"]);
    let text = fs::read_to_string(out.join("eigen.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,lambda,t,phi"));
    let mut funcs: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    let mut lambdas: BTreeMap<usize, f64> = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let k: usize = f[0].parse().unwrap();
        lambdas.insert(k, f[1].parse().unwrap());
        funcs.entry(k).or_default().push((f[2].parse().unwrap(), f[3].parse().unwrap()));
    }
    assert_eq!(funcs.len(), 2);
    let inner = |a: &[(f64, f64)], b: &[(f64, f64)]| {
        a.windows(2).zip(b.windows(2)).map(|(x, y)| 0.5 * (x[1].0 - x[0].0) * (x[0].1 * y[0].1 + x[1].1 * y[1].1)).sum::<f64>()
    };
    for (j, fj) in &funcs {
        for (k, fk) in &funcs {
            let target = if j == k { 1.0 } else { 0.0 };
            let v = inner(fj, fk);
            assert!((v - target).abs() < 1e-6, "<phi{j}, phi{k}> = {v}");
        }
    }
    assert!(lambdas[&1] >= lambdas[&2] && lambdas[&2] > 0.0);
}

#[test]
fn split_sample_is_recorded_in_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "normal", "40", "2");
    let out = dir.path().join("fit");
    let stdout = ok(&["fit", "--data", p(&data), "--out", p(&out), "--grid-size", "31", "--split-sample"]);
    assert!(stdout.contains("split sample: mean from subjects 1-20, covariance from subjects 21-40"), "{stdout}");
    let echo = fs::read_to_string(out.join("config-echo.json")).unwrap();
    assert!(echo.contains("\"split_sample\": true"));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "normal", "40", "4");
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, format!(r#"{{"data": "{}", "fit": {{"grid_size": 31}}}}"#, p(&data))).unwrap();
    let out = dir.path().join("a");
    ok(&["fit", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(fs::read_to_string(out.join("mean.csv")).unwrap().lines().count(), 32);
    ok(&["fit", "--config", p(&cfg), "--out", p(&out), "--grid-size", "21"]);
    assert_eq!(fs::read_to_string(out.join("mean.csv")).unwrap().lines().count(), 22);
    // the echoed config alone reproduces the run
    let again = dir.path().join("b");
    let before = read_all(&out, &["mean.csv", "eigen.csv", "scores.csv"]);
    ok(&["fit", "--config", p(&out.join("config-echo.json")), "--out", p(&again)]);
    assert_eq!(before, read_all(&again, &["mean.csv", "eigen.csv", "scores.csv"]));
}

#[test]
fn scores_and_reconstruct_from_a_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "normal", "50", "6");
    let out = dir.path().join("fit");
    ok(&["fit", "--data", p(&data), "--out", p(&out), "--grid-size", "41"]);
    let s = dir.path().join("s");
    ok(&["scores", "--model", p(&out.join("model.json")), "--data", p(&data), "--out", p(&s)]);
    assert_eq!(fs::read(out.join("scores.csv")).unwrap(), fs::read(s.join("scores.csv")).unwrap());
    let stdout = ok(&["reconstruct", "--model", p(&out.join("model.json")), "--scores", p(&s.join("scores.csv")), "--out", p(&s)]);
    assert!(stdout.contains("reconstructed 50 subjects"));
    let rows = fs::read_to_string(s.join("reconstruction.csv")).unwrap();
    assert!(rows.starts_with("subject_id,t,value\n"));
    assert_eq!(rows.lines().count(), 1 + 50 * 41);
}

#[test]
fn exit_codes_separate_input_from_numeric_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "subject_id,time,value\na,0.5,1\na,oops,2\n").unwrap();
    let out = robfpca(&["fit", "--data", p(&bad), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    // constant curves: zero covariance, no positive eigenvalue
    let flat = dir.path().join("flat.csv");
    let mut text = String::from("subject_id,time,value\n");
    for i in 0..20 {
        for j in 0..5 {
            text.push_str(&format!("{i},{},1\n", (i * 5 + j) as f64 / 100.0 + 0.005));
        }
    }
    fs::write(&flat, text).unwrap();
    let out = robfpca(&["fit", "--data", p(&flat), "--out", p(dir.path()), "--grid-size", "21"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(robfpca(&["fit", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(robfpca(&["plot", "--kind", "bars", "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn plots_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mean = dir.path().join("mean.csv");
    fs::write(&mean, "t,value\n0,1.5\n0.5,1.5\n1,1.5\n").unwrap();
    ok(&["plot", "--kind", "mean", "--input", p(&mean), "--out", p(dir.path())]);
    let svg = fs::read_to_string(dir.path().join("mean.svg")).unwrap();
    let poly = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
    let ys: Vec<&str> = poly.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>").split(' ').map(|q| q.split(',').nth(1).unwrap()).collect();
    assert!(ys.iter().all(|y| *y == ys[0]));

    ok(&["plot", "--kind", "loss", "--loss", "rho1", "--kappa", "1", "--out", p(dir.path())]);
    let first = fs::read(dir.path().join("loss.svg")).unwrap();
    ok(&["plot", "--kind", "loss", "--loss", "rho1", "--kappa", "1", "--out", p(dir.path())]);
    assert_eq!(first, fs::read(dir.path().join("loss.svg")).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.matches("<polyline").count(), 2);
    assert!(text.contains("|x|"));
}

#[test]
fn reproduce_smoke_row() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["reproduce", "--table", "mean", "--cell", "rho0,normal,100,5", "--runs", "20", "--out", p(dir.path())]);
    assert!(stdout.contains("rho0"));
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("cell,loss,population,n,m,mean,se,runs,excluded"));
    let row = lines.next().unwrap();
    let f: Vec<&str> = row.rsplitn(5, ',').collect();
    let (runs, mean, se): (usize, f64, f64) = (f[1].parse().unwrap(), f[3].parse().unwrap(), f[2].parse().unwrap());
    assert_eq!(runs, 20);
    assert!(mean > 0.0 && se > 0.0 && se < mean);
}
