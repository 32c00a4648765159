use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn coursepath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coursepath"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = coursepath(args);
    assert!(
        out.status.success(),
        "coursepath {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    coursepath(args).status.code().expect("exit code")
}

struct Dir(TempDir);

impl Dir {
    fn new() -> Self {
        Dir(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> String {
        self.0.path().join(name).to_string_lossy().into_owned()
    }
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    let d = Dir::new();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["fit", "--model", "cmm", "--k", "3"]), 1);
    let missing = d.path("missing.csv");
    let out = d.path("m.json");
    assert_eq!(
        code(&["fit", "--model", "cmm", "--k", "2", "--input", &missing, "--out", &out]),
        2
    );
    let csv = d.path("c.csv");
    ok(&[
        "synth",
        "--scenario",
        "benchmark",
        "--n",
        "50",
        "--out",
        &csv,
    ]);
    assert_eq!(
        code(&[
            "--threads",
            "0",
            "summarize",
            "--input",
            &csv,
            "--out",
            &out
        ]),
        1
    );
    std::fs::write(&csv, "not,a,transcript\n1,2\n").unwrap();
    assert_eq!(code(&["summarize", "--input", &csv, "--out", &out]), 2);
}

#[test]
fn synth_fit_sample_eval_pipeline() {
    let d = Dir::new();
    let (train, holdout, model, samples) = (
        d.path("train.csv"),
        d.path("holdout.csv"),
        d.path("m.json"),
        d.path("s.csv"),
    );
    ok(&[
        "synth",
        "--scenario",
        "benchmark",
        "--n",
        "1500",
        "--seed",
        "1",
        "--out",
        &train,
    ]);
    ok(&[
        "synth",
        "--scenario",
        "benchmark",
        "--n",
        "1500",
        "--seed",
        "2",
        "--out",
        &holdout,
    ]);
    ok(&[
        "fit",
        "--model",
        "cmm",
        "--k",
        "3",
        "--input",
        &train,
        "--out",
        &model,
        "--restarts",
        "2",
        "--seed",
        "4",
    ]);
    ok(&[
        "sample", "--model", &model, "--n", "5000", "--seed", "5", "--out", &samples,
    ]);

    let report = d.path("mf.json");
    ok(&[
        "eval",
        "--metric",
        "mean-field",
        "--model",
        &model,
        "--holdout",
        &holdout,
        "--samples",
        &samples,
        "--out",
        &report,
    ]);
    let err = json(&report)["error"].as_f64().unwrap();
    assert!(err.is_finite() && err < 0.01, "mean-field error {err}");

    // A cohort compared with itself has no marginal error.
    ok(&[
        "eval",
        "--metric",
        "mean-field",
        "--holdout",
        &holdout,
        "--samples",
        &holdout,
        "--out",
        &report,
    ]);
    assert_eq!(json(&report)["error"].as_f64().unwrap(), 0.0);

    let acc = d.path("acc.json");
    ok(&[
        "eval",
        "--metric",
        "accuracy",
        "--model",
        &model,
        "--holdout",
        &holdout,
        "--courses",
        "c0,c1",
        "--k-mc",
        "100",
        "--seed",
        "6",
        "--out",
        &acc,
    ]);
    let a = json(&acc)["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&a));

    let infer = d.path("infer.json");
    ok(&[
        "infer",
        "--model",
        &model,
        "--input",
        &holdout,
        "--query-t",
        "1",
        "--k-mc",
        "50",
        "--out",
        &infer,
    ]);
    let students = json(&infer)["students"].as_array().unwrap().len();
    assert!(students > 0);

    let sankey = d.path("sankey.json");
    ok(&[
        "sankey", "--model", &model, "--input", &holdout, "--out", &sankey,
    ]);
    assert!(!json(&sankey)["links"].as_array().unwrap().is_empty());

    let summary = d.path("summary.json");
    ok(&["summarize", "--input", &train, "--out", &summary]);

    // A TAN model has no intermediate-inference routine.
    let tan = d.path("tan.json");
    ok(&[
        "fit",
        "--model",
        "tan",
        "--k",
        "2",
        "--input",
        &train,
        "--out",
        &tan,
        "--restarts",
        "1",
    ]);
    assert_eq!(
        code(&[
            "eval",
            "--metric",
            "accuracy",
            "--model",
            &tan,
            "--holdout",
            &holdout,
            "--courses",
            "c0",
            "--out",
            &acc
        ]),
        1
    );
}

#[test]
fn recovery_pipeline_reports_small_errors() {
    let d = Dir::new();
    let (csv, truth, model, report) = (
        d.path("c.csv"),
        d.path("truth.json"),
        d.path("m.json"),
        d.path("r.json"),
    );
    ok(&[
        "synth",
        "--scenario",
        "recovery",
        "--n",
        "4000",
        "--seed",
        "3",
        "--out",
        &csv,
        "--truth-out",
        &truth,
    ]);
    ok(&[
        "fit",
        "--model",
        "cmm",
        "--k",
        "3",
        "--input",
        &csv,
        "--vocab-from",
        &truth,
        "--restarts",
        "3",
        "--tol",
        "1e-8",
        "--seed",
        "8",
        "--out",
        &model,
    ]);
    ok(&[
        "eval", "--metric", "recovery", "--model", &model, "--truth", &truth, "--out", &report,
    ]);
    let r = json(&report);
    assert!(r["transition"].as_f64().unwrap() < 0.1, "{r}");
    assert!(r["emission_mean"].as_f64().unwrap() < 0.2, "{r}");
}

#[test]
fn seeds_make_every_command_reproducible() {
    let d = Dir::new();
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let p = |name: &str| d.path(&format!("{tag}-{name}"));
        let files: Vec<PathBuf> = ["c.csv", "nb.json", "s.csv", "score.json"]
            .iter()
            .map(|n| PathBuf::from(p(n)))
            .collect();
        ok(&[
            "synth",
            "--scenario",
            "coupled",
            "--n",
            "600",
            "--seed",
            "2",
            "--out",
            &p("c.csv"),
        ]);
        ok(&[
            "fit",
            "--model",
            "nb",
            "--k",
            "3",
            "--timesteps",
            "3",
            "--input",
            &p("c.csv"),
            "--out",
            &p("nb.json"),
            "--seed",
            "3",
        ]);
        ok(&[
            "fit",
            "--model",
            "cmm",
            "--k",
            "2",
            "--timesteps",
            "3",
            "--input",
            &p("c.csv"),
            "--out",
            &p("cmm.json"),
            "--restarts",
            "1",
        ]);
        ok(&[
            "sample",
            "--model",
            &p("cmm.json"),
            "--n",
            "300",
            "--seed",
            "4",
            "--out",
            &p("s.csv"),
        ]);
        ok(&[
            "score",
            "--input",
            &p("c.csv"),
            "--k",
            "2",
            "--timesteps",
            "3",
            "--folds",
            "2",
            "--restarts",
            "1",
            "--seed",
            "5",
            "--out",
            &p("score.json"),
        ]);
        files.iter().map(|f| std::fs::read(f).unwrap()).collect()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    // Different threading must not change results either.
    let c = d.path("c.csv");
    ok(&[
        "synth",
        "--scenario",
        "coupled",
        "--n",
        "600",
        "--seed",
        "2",
        "--out",
        &c,
    ]);
    let (one, many) = (d.path("one.json"), d.path("many.json"));
    for (threads, out) in [("1", &one), ("4", &many)] {
        ok(&[
            "--threads",
            threads,
            "fit",
            "--model",
            "cmm",
            "--k",
            "2",
            "--timesteps",
            "3",
            "--input",
            &c,
            "--out",
            out,
            "--restarts",
            "2",
        ]);
    }
    assert_eq!(std::fs::read(&one).unwrap(), std::fs::read(&many).unwrap());
}
