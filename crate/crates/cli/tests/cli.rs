use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sumk_core::data::ArSeriesSpec;

fn sumk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sumk")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = sumk(&["generate", "--dgp", "sinusoid", "--trials", "3", "--out_dir", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for n in &names {
        let fa = fs::read(a.join(n)).unwrap();
        assert_eq!(fa, fs::read(b.join(n)).unwrap());
        // header plus the sinusoid's 1000 rows
        assert_eq!(data_rows(&a.join(n)).len(), 1001);
    }
    assert_ne!(fs::read(a.join(&names[0])).unwrap(), fs::read(a.join(&names[1])).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let o = sumk(&["compare", "--trials", "0"]);
    assert_eq!(code(&o), 2);
    let o = sumk(&["compare", "--gammas", "0.2,0.1"]);
    assert_eq!(code(&o), 2);
    let o = sumk(&["sweep", "--no_such_key", "1"]);
    assert_eq!(code(&o), 2);

    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("bad.ini");
    fs::write(&ini, "[train]\nwarmup = 3\n").unwrap();
    let o = sumk(&["compare", "--config", ini.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("warmup"), "{}", stderr(&o));
}

#[test]
fn io_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = sumk(&["train-csv", "--csv", dir.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(code(&o), 4);

    let ragged = dir.path().join("ragged.csv");
    fs::write(&ragged, "x1,y,split\n0.1,0.2,train\n0.3,0.4\n").unwrap();
    let o = sumk(&["train-csv", "--csv", ragged.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = sumk(&[
        "compare", "--trials", "1", "--methods", "mve", "--hidden", "8", "--max_epochs", "50", "--patience", "10",
        "--learning_rate", "1e300", "--out_dir", out,
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn compare_writes_annotated_tables() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("run.ini");
    let out = dir.path().join("out");
    fs::write(
        &ini,
        format!(
            "[experiment]\ndgp = polynomial\ntrials = 2\nmethods = sum_k, pinball\nhidden = 8\nout_dir = {}\n[sum_k]\ngamma = 0.2\n[train]\nmax_epochs = 20\npatience = 5\n",
            out.display()
        ),
    )
    .unwrap();
    let o = sumk(&["compare", "--config", ini.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    assert!(table.contains("# experiment.seed = 7"), "{table}");
    assert!(table.contains("# sum_k.gamma = 0.2"), "{table}");
    let rows = data_rows(&out.join("table.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("polynomial,sum_k,0.2,"));

    let results = data_rows(&out.join("results.csv"));
    assert_eq!(results[0], "dataset,method,gamma,trial,split,picp,pinaw,pinalw_p50,winkler,crossing_rate");
    assert_eq!(results.len(), 1 + 2 * 2);

    // polynomial: 1000 rows, 200 validation rows per trial
    let hist = data_rows(&out.join("hist_sum_k.csv"));
    let total: u64 = hist[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 400);
}

#[test]
fn train_csv_then_eval_on_series() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ArSeriesSpec { length: 300, ..Default::default() };
    let (z, cov) = spec.series(1);
    let mut text = String::from("z,d,c\n");
    for (v, c) in z.iter().zip(&cov) {
        text.push_str(&format!("{v},{},{}\n", c[0], c[1]));
    }
    let csv = dir.path().join("series.csv");
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("out");
    let common = [
        "--csv", csv.to_str().unwrap(), "--target", "z", "--lags", "6", "--horizons", "2", "--future", "d,c;d,c",
        "--hidden", "8", "--methods", "sum_k", "--out_dir", out.to_str().unwrap(),
    ];
    let mut args = vec!["train-csv", "--max_epochs", "15", "--patience", "5"];
    args.extend(common);
    let o = sumk(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("val,2,") && stdout.contains("test,1,"), "{stdout}");

    let metrics = data_rows(&out.join("metrics.csv"));
    assert_eq!(metrics.len(), 1 + 2 * 2);
    assert!(out.join("model.skpt").exists());
    assert!(data_rows(&out.join("history.csv")).len() > 1);

    let ckpt = out.join("model.skpt");
    let mut args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend(common);
    let o = sumk(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // the checkpoint reproduces the metrics written at training time
    let eval = data_rows(&out.join("eval.csv"));
    assert_eq!(eval, metrics);

    let mut args = vec!["train-csv", "--future", "d,c"];
    args.extend(&common[..8]);
    args.extend(&common[10..]);
    let o = sumk(&args);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
