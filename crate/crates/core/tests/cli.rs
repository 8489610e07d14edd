//! Black-box tests of the command-line interface via the built binary.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sampfuse"))
}

fn write_toy_csv(path: &Path) {
    let mut csv = String::from("x1,x2,delta,in_b,y,d\n");
    for i in 0..40 {
        let x1 = (i % 5) as f64 * 0.4 - 0.8;
        let x2 = (i % 7) as f64 * 0.3;
        if i % 2 == 0 {
            let y = 2.0 + x1 + 0.5 * x2 + (i % 3) as f64 * 0.1;
            csv.push_str(&format!("{x1},{x2},1,0,{y},\n"));
        } else {
            let d = 8.0 + (i % 4) as f64 * 3.0;
            csv.push_str(&format!("{x1},{x2},0,1,,{d}\n"));
        }
    }
    std::fs::write(path, csv).unwrap();
}

const SCHEMA: &str = "covariates=x1,x2;delta=delta;in_b=in_b;y=y;d=d";

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

#[test]
fn estimate_smoke_ipw_logistic() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    write_toy_csv(&input);
    let out = dir.path().join("out");
    let res = run(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--schema",
        SCHEMA,
        "--methods",
        "ipw-logistic",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ipw-logistic.json")).unwrap())
            .unwrap();
    for key in ["mu_hat", "se", "ci_lo", "ci_hi"] {
        assert!(json[key].as_f64().unwrap().is_finite(), "{key} not finite");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("estimator,mu_hat,se,ci_lo,ci_hi\n"));
}

#[test]
fn null_outcome_aipw_matches_ipw() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    write_toy_csv(&input);
    let out_i = dir.path().join("ipw");
    let out_a = dir.path().join("aipw");
    let base = ["--input", input.to_str().unwrap(), "--schema", SCHEMA];
    let r1 = run(&[
        &["estimate"],
        &base[..],
        &[
            "--methods",
            "ipw-logistic",
            "--out",
            out_i.to_str().unwrap(),
        ],
    ]
    .concat());
    assert!(r1.status.success());
    let r2 = run(&[
        &["estimate"],
        &base[..],
        &[
            "--methods",
            "aipw-logistic",
            "--null-outcome",
            "--out",
            out_a.to_str().unwrap(),
        ],
    ]
    .concat());
    assert!(
        r2.status.success(),
        "{}",
        String::from_utf8_lossy(&r2.stderr)
    );
    let mu = |p: &Path, f: &str| -> f64 {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p.join(f)).unwrap()).unwrap();
        v["mu_hat"].as_f64().unwrap()
    };
    let a = mu(&out_i, "ipw-logistic.json");
    let b = mu(&out_a, "aipw-logistic.json");
    assert!((a - b).abs() < 1e-10, "ipw {a} vs null-outcome aipw {b}");
}

#[test]
fn missing_column_exits_1_and_names_it() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    write_toy_csv(&input);
    let res = run(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--schema",
        "covariates=x1,x9;delta=delta;in_b=in_b;y=y;d=d",
        "--methods",
        "ipw-logistic",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("x9"), "stderr should name the column: {err}");
}

#[test]
fn simulate_deterministic_files() {
    let dir = tempdir().unwrap();
    let run_once = |out: &Path| {
        let res = run(&[
            "simulate",
            "--scenario",
            "1",
            "--reps",
            "3",
            "--seed",
            "17",
            "--methods",
            "ipw-logistic",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        std::fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let m1 = run_once(&dir.path().join("r1"));
    let m2 = run_once(&dir.path().join("r2"));
    assert_eq!(m1, m2);
    assert!(m1.starts_with("estimator,pct_bias,mse,mc_se,mean_se,coverage\n"));
}

#[test]
fn cv_lambda_too_many_folds_exits_1() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    write_toy_csv(&input);
    let res = run(&[
        "cv-lambda",
        "--input",
        input.to_str().unwrap(),
        "--schema",
        SCHEMA,
        "--folds",
        "500",
        "--out",
        dir.path().join("curve.csv").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn cv_lambda_writes_curve() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    write_toy_csv(&input);
    let out = dir.path().join("curve.csv");
    let res = run(&[
        "cv-lambda",
        "--input",
        input.to_str().unwrap(),
        "--schema",
        SCHEMA,
        "--folds",
        "4",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("lambda,mean_loss,fold1,fold2,fold3,fold4\n"));
    assert!(text.lines().count() > 10);
}
