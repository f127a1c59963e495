use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn svyfosr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svyfosr"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = svyfosr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 12] = [
    "--n-pop", "6000", "--strata", "6", "--psu-range", "4,6", "--grid-len", "20", "--per-psu-n", "40", "--seed", "3",
];

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--out", p(dir)];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args);
}

fn fit(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["fit", "--data", p(data), "--covariates", "x", "--num-boots", "30", "--mc-samples", "2000", "--out", p(out)];
    args.extend(extra);
    svyfosr(&args)
}

#[test]
fn simulate_then_fit_writes_bands_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &["--reps", "2", "--snr-b", "0.5", "--snr-eps", "1"]);
    for f in ["truth.csv", "sample_001.csv", "sample_002.csv", "probabilities_001.csv", "config.txt", "manifest.json"] {
        assert!(sim.join(f).exists(), "missing {f}");
    }
    let out = tmp.path().join("fit");
    let res = fit(&sim.join("sample_001.csv"), &out, &["--boot-type", "brr"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csvs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .collect();
    assert_eq!(csvs.len(), 2);
    let header = fs::read_to_string(out.join("coef_intercept.csv")).unwrap();
    assert!(header.starts_with("s,beta_hat,se,"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["coefficients"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["seed"], 1);
}

#[test]
fn rwyb_needs_probabilities() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &[]);
    let data = sim.join("sample_001.csv");
    let res = fit(&data, &tmp.path().join("a"), &["--boot-type", "rwyb"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("probabilities"));

    let probs = sim.join("probabilities_001.csv");
    let res = fit(&data, &tmp.path().join("b"), &["--boot-type", "rwyb", "--probabilities", p(&probs)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn reruns_and_worker_counts_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    simulate(&a, &[]);
    simulate(&b, &["--parallel", "4"]);
    for f in ["truth.csv", "sample_001.csv", "probabilities_001.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let data = a.join("sample_001.csv");
    for scheme in ["weighted", "brr"] {
        let outs: Vec<_> = ["1", "1", "4", "8"]
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let out = tmp.path().join(format!("{scheme}{k}"));
                let res = fit(&data, &out, &["--boot-type", scheme, "--parallel", w]);
                assert!(res.status.success());
                fs::read(out.join("coef_x.csv")).unwrap()
            })
            .collect();
        assert!(outs.windows(2).all(|w| w[0] == w[1]), "{scheme} bands differ");
    }
}

#[test]
fn evaluate_aggregates_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &["--reps", "2"]);
    let mut lines = vec!["run,truth,setting".to_string()];
    for r in ["001", "002"] {
        for scheme in ["unweighted", "weighted"] {
            let name = format!("fit_{scheme}_{r}");
            let res = fit(&sim.join(format!("sample_{r}.csv")), &tmp.path().join(&name), &["--boot-type", scheme]);
            assert!(res.status.success());
            lines.push(format!("{name},sim/truth.csv,base"));
        }
    }
    let runs = tmp.path().join("runs.csv");
    fs::write(&runs, lines.join("\n") + "\n").unwrap();
    let out = tmp.path().join("eval");
    ok(&["evaluate", "--runs-file", p(&runs), "--out", p(&out)]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2, "{summary}");
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    let header = table.lines().next().unwrap();
    assert!(header.contains("unweighted") && header.contains("weighted"), "{header}");
}

#[test]
fn evaluate_without_truth_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &[]);
    let fit_dir = tmp.path().join("fit");
    assert!(fit(&sim.join("sample_001.csv"), &fit_dir, &[]).status.success());
    let res = svyfosr(&["evaluate", "--run", p(&fit_dir), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(res.status.code(), Some(2));
    let missing = tmp.path().join("nope.csv");
    let res = svyfosr(&["evaluate", "--run", p(&fit_dir), "--truth", p(&missing), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.conf");
    fs::write(&cfg, "n-pop = 5000\nbogus-key = 3\n").unwrap();
    let res = svyfosr(&["simulate", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("bogus-key"));
}

#[test]
fn config_file_matches_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.conf");
    fs::write(
        &cfg,
        "# small population\nn-pop = 6000\nstrata: 6\npsu-range = 4,6\ngrid-len = 20\nper-psu-n = 40\nseed = 3\n",
    )
    .unwrap();
    let a = tmp.path().join("a");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&a)]);
    let b = tmp.path().join("b");
    simulate(&b, &[]);
    assert_eq!(fs::read(a.join("sample_001.csv")).unwrap(), fs::read(b.join("sample_001.csv")).unwrap());
}

#[test]
fn batch_writes_one_directory_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("batch");
    ok(&[
        "simulate", "--batch", "--family", "poisson", "--n-pop", "3000", "--strata", "4", "--psu-range", "4,4",
        "--grid-len", "10", "--per-psu-n", "20", "--out", p(&out),
    ]);
    let dirs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 27);
}

#[test]
fn subsample_writes_truth_and_probabilities() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &[]);
    let out = tmp.path().join("sub");
    ok(&[
        "subsample", "--data", p(&sim.join("sample_001.csv")), "--covariates", "x", "--scheme", "outcome", "--n", "100",
        "--out", p(&out),
    ]);
    for f in ["subsample.csv", "probabilities.csv", "truth.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let res = fit(&out.join("subsample.csv"), &tmp.path().join("f"), &["--boot-type", "rwyb", "--probabilities", p(&out.join("probabilities.csv"))]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bad_family_value_is_a_usage_error() {
    let res = svyfosr(&["fit", "--data", "x.csv", "--family", "gamma", "--out", "o"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("gamma"));
}
