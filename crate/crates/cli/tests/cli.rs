use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kpl_core::io::{read_embeddings, read_knowledge_base, read_predictions, write_embeddings, Dtype};
use tempfile::TempDir;

fn kpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small fixture so the debug binary stays quick.
fn fixture(dir: &Path) {
    let out = kpl(&["gen-fixture", "--seed", "7", "--num-images", "60", "--out", p(dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn help_and_version_exit_zero() {
    let out = kpl(&["--version"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("kpl "));
    for sub in ["retrieve", "plan", "learn", "classify", "eval", "pipeline", "bench-ot", "gen-fixture"] {
        let out = kpl(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage: kpl"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let out = kpl(&["pipeline", "--kb", "kb.json", "--out", "r.json"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--images"));
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(code(&kpl(&[])), 1);
    assert_eq!(code(&kpl(&["bench-ot", "--no-such-flag"])), 1);
    assert_eq!(code(&kpl(&["gen-fixture", "--out", "somewhere"])), 1);
    assert_eq!(code(&kpl(&["bench-ot", "--algorithm", "hungarian"])), 1);
    assert_eq!(code(&kpl(&["bench-ot", "--tau-ot", "0"])), 1);
}

#[test]
fn pipeline_happy_path() {
    let dir = TempDir::new().unwrap();
    let fx = dir.path().join("fx");
    fixture(&fx);
    let report = dir.path().join("report.json");
    let out = kpl(&[
        "pipeline", "--mode", "kpl_full",
        "--images", p(&fx.join("images.emb")),
        "--kb", p(&fx.join("kb.json")),
        "--labels", p(&fx.join("labels.txt")),
        "--out", p(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let acc = json["accuracy"]["overall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(json["config"]["mode"], "kpl_full");
    let defaults: Vec<&str> = json["config"]["defaults_applied"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(defaults.contains(&"tau_ot") && defaults.contains(&"k") && defaults.contains(&"marginal"));
    assert!(!defaults.contains(&"mode"));
    assert!(json["solver"]["iterations"].as_u64().unwrap() > 0);
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("index,predicted_class_name\n0,class_"));
    assert_eq!(csv.lines().count(), 61);
}

#[test]
fn staged_commands_match_pipeline() {
    let dir = TempDir::new().unwrap();
    let fx = dir.path().join("fx");
    fixture(&fx);
    let d = |name: &str| dir.path().join(name);
    let images = fx.join("images.emb");
    let kb = fx.join("kb.json");
    let labels = fx.join("labels.txt");

    let s = |name: &str| d(name).to_str().unwrap().to_string();
    let (proxies, pl, w, staged) = (s("proxies.emb"), s("pl.emb"), s("w.emb"), s("staged.csv"));
    let (retrieve_out, plan_out, learn_out, eval_out) = (s("retrieve.json"), s("plan.json"), s("learn.json"), s("eval.json"));
    let runs: [&[&str]; 5] = [
        &["retrieve", "--images", p(&images), "--kb", p(&kb), "--proxies", &proxies, "--out", &retrieve_out],
        &["plan", "--images", p(&images), "--kb", p(&kb), "--pseudo-labels", &pl, "--out", &plan_out],
        &["learn", "--images", p(&images), "--pseudo-labels", &pl, "--proxies", &proxies, "--weights", &w, "--out", &learn_out],
        &["classify", "--images", p(&images), "--proxies", &w, "--kb", p(&kb), "--out", &staged],
        &["eval", "--predictions", &staged, "--labels", p(&labels), "--kb", p(&kb), "--out", &eval_out],
    ];
    for args in runs {
        let out = kpl(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
    let full_out = s("full.json");
    let out = kpl(&["pipeline", "--images", p(&images), "--kb", p(&kb), "--labels", p(&labels), "--out", &full_out]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    assert_eq!(fs::read(d("staged.csv")).unwrap(), fs::read(d("full.csv")).unwrap());
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("eval.json")).unwrap()).unwrap();
    let full: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("full.json")).unwrap()).unwrap();
    assert_eq!(eval["accuracy"], full["accuracy"]);
    let retrieve: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("retrieve.json")).unwrap()).unwrap();
    assert_eq!(retrieve["classes"][0]["indices"], full["retrieval"][0]["indices"]);
    let kb = read_knowledge_base(&kb, &Default::default()).unwrap();
    assert_eq!(read_predictions(d("staged.csv"), &kb.class_names()).unwrap().len(), 60);
    assert_eq!(read_embeddings(d("pl.emb")).unwrap().shape(), (60, 5));
}

#[test]
fn data_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let fx = dir.path().join("fx");
    fixture(&fx);
    let images = fx.join("images.emb");
    let kb = fx.join("kb.json");
    let report = dir.path().join("r.json");

    let missing = kpl(&["pipeline", "--images", p(&dir.path().join("nope.emb")), "--kb", p(&kb), "--out", p(&report)]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("nope.emb"));

    let mut bytes = fs::read(&images).unwrap();
    bytes[40] ^= 0x10;
    let corrupt = dir.path().join("corrupt.emb");
    fs::write(&corrupt, bytes).unwrap();
    let out = kpl(&["pipeline", "--images", p(&corrupt), "--kb", p(&kb), "--out", p(&report)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("CRC"));

    let narrow = dir.path().join("narrow.emb");
    let m = read_embeddings(&images).unwrap();
    let cols: Vec<Vec<f64>> = m.row_iter().map(|r| r[..8].to_vec()).collect();
    write_embeddings(&narrow, &kpl_core::Matrix::from_rows(&cols).unwrap(), Dtype::F64).unwrap();
    let out = kpl(&["pipeline", "--images", p(&narrow), "--kb", p(&kb), "--out", p(&report)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dimension"));

    let short = dir.path().join("short.txt");
    fs::write(&short, "class_0\nclass_1\n").unwrap();
    let out = kpl(&["pipeline", "--images", p(&images), "--kb", p(&kb), "--labels", p(&short), "--out", p(&report)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("short.txt"));
}

#[test]
fn marginal_with_wrong_mode_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let fx = dir.path().join("fx");
    fixture(&fx);
    let q = dir.path().join("q.json");
    fs::write(&q, "[1, 1, 1, 1, 1]").unwrap();
    let out = kpl(&[
        "pipeline", "--mode", "kpl_text",
        "--images", p(&fx.join("images.emb")),
        "--kb", p(&fx.join("kb.json")),
        "--marginal", p(&q),
        "--out", p(&dir.path().join("r.json")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("kpl_full"));
}

#[test]
fn bench_reports_every_solver() {
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("bench.json");
    let out = kpl(&["bench-ot", "--tau-ot", "0.1", "--rows", "12", "--cols", "4", "--seed", "3", "--out", p(&out_path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out_path).unwrap()).unwrap();
    let rows = json["results"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["status"] == "ok"));

    let out = kpl(&["bench-ot", "--tau", "0.001", "--instance", "stress", "--out", p(&out_path)]);
    assert_eq!(code(&out), 3);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out_path).unwrap()).unwrap();
    let statuses: Vec<&str> = json["results"].as_array().unwrap().iter().map(|r| r["status"].as_str().unwrap()).collect();
    assert_eq!(statuses, ["numeric_overflow", "ok", "ok"]);
}

#[test]
fn fixtures_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fixture(&a);
    fixture(&b);
    for f in ["images.emb", "kb.json", "labels.txt", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
