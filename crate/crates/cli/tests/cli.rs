use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cfscm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfscm")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cfscm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

fn synth(dir: &Path, preset: &str, n: &str) {
    ok(dir, &["synth", "--preset", preset, "--n", n, "--dim", "3", "--seed", "7", "--out", "data.csv"]);
}

#[test]
fn synth_writes_table_sidecar_labels_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--preset", "two-site-shift", "--n", "2000", "--seed", "7", "--out", "data.csv"]);
    let lines = rows(&d.join("data.csv"));
    assert_eq!(lines.len(), 2001);
    assert!(lines[0].starts_with("subject_id,sex,age,site,f000,"));
    assert!(d.join("data.noise").exists());
    assert_eq!(rows(&d.join("data.labels.csv")).len(), 2001);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("data.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);
    assert_eq!(m["command"], "synth");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
    assert!(!m["build"].as_str().unwrap().is_empty());
}

#[test]
fn fit_then_harmonize_keeps_shape() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "two-site-shift", "400");
    ok(d, &["fit-scm", "--flow", "qspline", "--data", "data.csv", "--out", "model.cfscm", "--seed", "1", "--epochs", "3"]);
    ok(d, &["harmonize", "--model", "model.cfscm", "--ref-site", "0", "--data", "data.csv", "--out", "harm.csv"]);
    let a = rows(&d.join("data.csv"));
    let b = rows(&d.join("harm.csv"));
    assert_eq!(a.len(), b.len());
    assert_eq!(b[0], format!("{},orig_site", a[0]));
    for (x, y) in a.iter().zip(&b).skip(1) {
        // Identity columns pass through untouched.
        let xs: Vec<&str> = x.split(',').collect();
        let ys: Vec<&str> = y.split(',').collect();
        assert_eq!(xs[..3], ys[..3]);
        assert_eq!(ys[3], "0");
        assert_eq!(xs[3], ys[ys.len() - 1]);
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("harm.report.json")).unwrap()).unwrap();
    assert_eq!(report["rows_out"], 400);
    assert_eq!(report["features"][0]["pre_hist"][0]["counts"].as_array().unwrap().len(), 50);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&cfscm(d, &["--no-such-flag"])), 1);
    assert_eq!(code(&cfscm(d, &["synth", "--preset", "null", "--n", "5", "--out", "x.csv"])), 1, "seed is mandatory");
    assert_eq!(code(&cfscm(d, &["synth", "--preset", "nope", "--n", "5", "--seed", "1", "--out", "x.csv"])), 1);
    assert_eq!(code(&cfscm(d, &["harmonize", "--model", "m", "--data", "x.csv", "--out", "h.csv"])), 1, "ref site is required");
    assert_eq!(code(&cfscm(d, &["fit-scm", "--flow", "cubic", "--data", "x", "--out", "m", "--seed", "1"])), 1);
    let out = cfscm(d, &["bogus"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    let last: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(last["error"]["code"], 1);
    assert_eq!(code(&cfscm(d, &["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "two-site-shift", "200");
    fs::write(d.join("bad.csv"), "subject_id,sex,age,site,f000\ns1,2,50,0,1.0\n").unwrap();
    assert_eq!(code(&cfscm(d, &["combat", "--data", "bad.csv", "--out", "c.csv"])), 2);
    assert_eq!(code(&cfscm(d, &["combat", "--data", "missing.csv", "--out", "c.csv"])), 2);
    ok(d, &["fit-scm", "--flow", "affine", "--data", "data.csv", "--out", "m.cfscm", "--seed", "1", "--epochs", "1"]);
    let out = cfscm(d, &["harmonize", "--model", "m.cfscm", "--ref-site", "9", "--data", "data.csv", "--out", "h.csv"]);
    assert_eq!(code(&out), 2);
    assert!(!d.join("h.csv").exists());
    assert_eq!(code(&cfscm(d, &["harmonize", "--model", "data.csv", "--ref-site", "0", "--data", "data.csv", "--out", "h.csv"])), 2);
    let out = cfscm(d, &["eval", "--task", "regression", "--source", "0", "--target", "1", "--variant", "raw=data.csv", "--variant", "q=nope.csv", "--out", "r.csv"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_fit_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "heteroskedastic", "300");
    let out = cfscm(d, &["fit-scm", "--flow", "affine", "--data", "data.csv", "--out", "m.cfscm", "--seed", "1", "--epochs", "5", "--lr", "1e12"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "two-site-shift", "300");
    ok(d, &["--threads", "1", "fit-scm", "--flow", "lspline", "--data", "data.csv", "--out", "m.cfscm", "--seed", "4", "--epochs", "4"]);
    ok(d, &["--threads", "1", "harmonize", "--model", "m.cfscm", "--ref-site", "1", "--data", "data.csv", "--out", "h.csv"]);
    let model = fs::read(d.join("m.cfscm")).unwrap();
    let harm = fs::read(d.join("h.csv")).unwrap();
    fs::remove_file(d.join("m.cfscm")).unwrap();
    fs::remove_file(d.join("h.csv")).unwrap();
    ok(d, &["replay", "--manifest", "m.manifest.json", "--check"]);
    ok(d, &["replay", "--manifest", "h.manifest.json", "--check"]);
    assert_eq!(fs::read(d.join("m.cfscm")).unwrap(), model);
    assert_eq!(fs::read(d.join("h.csv")).unwrap(), harm);

    // A tampered output is reported.
    let mut text = fs::read_to_string(d.join("h.manifest.json")).unwrap();
    let at = text.find("\"sha256\": \"").unwrap() + 11;
    text.replace_range(at..at + 4, "0000");
    fs::write(d.join("h.manifest.json"), text).unwrap();
    assert_eq!(code(&cfscm(d, &["replay", "--manifest", "h.manifest.json", "--check"])), 2);
}

#[test]
fn combat_eval_and_density_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "combat-hostile", "600");
    ok(d, &["combat", "--data", "data.csv", "--out", "combat.csv"]);
    let params: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("combat.params.json")).unwrap()).unwrap();
    assert_eq!(params["params"]["n_sites"], 2);

    let args = [
        "eval", "--task", "binary-classification", "--source", "0", "--target", "1", "--variant", "raw=data.csv", "--variant",
        "combat=combat.csv", "--epochs", "3", "--out", "report.csv",
    ];
    assert_eq!(code(&cfscm(d, &args)), 1, "labels are required for classification");
    let mut with_labels = args.to_vec();
    with_labels.extend(["--labels", "data.labels.csv"]);
    ok(d, &with_labels);
    let csv = rows(&d.join("report.csv"));
    assert_eq!(csv[0], "task,source,target,role,mode,variant,fold,metric");
    // (Source + Target) x 2 variants + TarOnly, five folds each.
    assert_eq!(csv.len(), 1 + 5 * 5);
    assert!(d.join("report.json").exists());

    for kind in ["affine", "qspline"] {
        ok(d, &["fit-scm", "--flow", kind, "--data", "data.csv", "--out", &format!("{kind}.cfscm"), "--seed", "1", "--epochs", "2"]);
    }
    let out = ok(d, &["density-report", "--models", "affine.cfscm,qspline.cfscm", "--data", "data.csv"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("affine.cfscm\taffine\t"));
    assert!(lines[1].starts_with("qspline.cfscm\tqspline\t"));
    let hist: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
    assert_eq!(hist["features"].as_array().unwrap().len(), 3);
    assert_eq!(hist["features"][0]["models"].as_array().unwrap().len(), 2);
}
