use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use fairsa_core::config::RunConfig;
use serde_json::Value;

fn fairsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairsa"))
        .args(args)
        .output()
        .expect("spawn fairsa")
}

fn ok(args: &[&str]) -> String {
    let out = fairsa(args);
    assert!(
        out.status.success(),
        "fairsa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Synthetic corpus plus its example config in a fresh directory.
fn synth() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", dir.path().to_str().unwrap(), "--seed", "3"]);
    let config = dir.path().join("config.json");
    assert!(config.exists());
    (dir, config)
}

fn edit_config(path: &Path, f: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    let out = path.with_file_name(format!("edited-{}.json", rand_suffix(&v)));
    fs::write(&out, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    out
}

fn rand_suffix(v: &Value) -> String {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};
    let mut h = DefaultHasher::new();
    v.to_string().hash(&mut h);
    format!("{:x}", h.finish())
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let stdout = ok(&args);
    PathBuf::from(stdout.lines().last().unwrap().trim())
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

#[test]
fn verification_run_produces_all_outputs() {
    let (dir, config) = synth();
    let run_dir = run(&config, &dir.path().join("out"), &[]);
    assert!(run_dir.ends_with("verification/none"));

    let csv = read(&run_dir, "curves.csv");
    // 2 subgroups x 2 ladders x 5 levels, plus the header.
    assert_eq!(csv.lines().count(), 21);

    let auc: Value = serde_json::from_str(&read(&run_dir, "auc.json")).unwrap();
    assert_eq!(auc["row_labels"].as_array().unwrap().len(), 2);
    assert_eq!(auc["col_labels"].as_array().unwrap().len(), 2);

    for svg in ["curves-gaussian-blur.svg", "curves-exposure.svg", "curves-heatmap.svg"] {
        assert!(read(&run_dir, svg).contains("<svg"), "{svg}");
    }

    let manifest: Value = serde_json::from_str(&read(&run_dir, "manifest.json")).unwrap();
    let back: RunConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    let original = RunConfig::load(&config).unwrap();
    assert_eq!(back.digest(), original.digest());
    assert_eq!(manifest["config_digest"], Value::String(original.digest()));
}

#[test]
fn reruns_and_worker_counts_are_byte_identical() {
    let (dir, config) = synth();
    let a = run(&config, &dir.path().join("a"), &["--workers", "1"]);
    let b = run(&config, &dir.path().join("b"), &["--workers", "8"]);
    let c = run(&config, &dir.path().join("c"), &["--workers", "1"]);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 5);
    for name in &names {
        let name = name.to_str().unwrap();
        if name == "manifest.json" {
            let strip = |d: &Path| {
                let mut v: Value = serde_json::from_str(&read(d, name)).unwrap();
                v.as_object_mut().unwrap().remove("timestamp");
                v
            };
            assert_eq!(strip(&a), strip(&b));
            assert_eq!(strip(&a), strip(&c));
        } else {
            assert_eq!(read(&a, name), read(&b, name), "{name} differs across workers");
            assert_eq!(read(&a, name), read(&c, name), "{name} differs across reruns");
        }
    }
}

#[test]
fn flags_override_config_for_self_matching() {
    let (dir, config) = synth();
    let run_dir = run(
        &config,
        &dir.path().join("out"),
        &["--task", "self-matching", "--pruning", "vpsa-identities"],
    );
    assert!(run_dir.ends_with("self-matching/vpsa-identities"));
    let irc = read(&run_dir, "irc.csv");
    assert_eq!(irc.lines().count(), 11);
    let first = irc.lines().nth(1).unwrap();
    // Match-rate rows carry no subgroup.
    let fields: Vec<&str> = first.split(',').collect();
    assert_eq!((fields[2], fields[3]), ("", ""), "{first}");
    assert!(run_dir.join("irc_auc.json").exists());
    assert!(run_dir.join("irc-heatmap.svg").exists());
    let manifest: Value = serde_json::from_str(&read(&run_dir, "manifest.json")).unwrap();
    assert_eq!(manifest["config"]["task"], "self-matching");
}

#[test]
fn precomputed_and_process_providers_match_builtin() {
    let (dir, config) = synth();
    let reference = run(&config, &dir.path().join("toy"), &[]);

    let fsae = dir.path().join("emb.fsae");
    let stdout = ok(&["embed", "--config", config.to_str().unwrap(), "--out", fsae.to_str().unwrap()]);
    // 64 gallery rows plus 4 non-zero levels for each of the two ladders.
    assert!(stdout.starts_with("576 embeddings"), "{stdout}");
    let file_config = edit_config(&config, |v| {
        v["provider"] = serde_json::json!({"variant": "file", "path": fsae});
    });
    let from_file = run(&file_config, &dir.path().join("file"), &[]);
    assert_eq!(read(&reference, "curves.csv"), read(&from_file, "curves.csv"));

    let process_config = edit_config(&config, |v| {
        v["provider"] = serde_json::json!({
            "variant": "process",
            "command": [env!("CARGO_BIN_EXE_fairsa"), "serve-toy"],
            "expected_dim": 256
        });
    });
    let from_process = run(&process_config, &dir.path().join("proc"), &["--workers", "2"]);
    assert_eq!(read(&reference, "curves.csv"), read(&from_process, "curves.csv"));
    // The manifest names the provider, so only the digest may differ.
    let values = |d: &Path| {
        let mut v: Value = serde_json::from_str(&read(d, "auc.json")).unwrap();
        v.as_object_mut().unwrap().remove("manifest_digest");
        v
    };
    assert_eq!(values(&reference), values(&from_process));
}

#[test]
fn perturb_writes_png_and_zero_is_identity() {
    let (dir, _) = synth();
    let input = dir.path().join("images/000001.png");
    let out = dir.path().join("blurred.png");
    ok(&[
        "perturb", "--image", input.to_str().unwrap(), "--kind", "gaussian-blur", "--level", "2", "--out",
        out.to_str().unwrap(),
    ]);
    let original = fs::read(&input).unwrap();
    assert_ne!(fs::read(&out).unwrap(), original);

    let same = dir.path().join("same.png");
    ok(&[
        "perturb", "--image", input.to_str().unwrap(), "--kind", "exposure", "--level", "-0", "--out",
        same.to_str().unwrap(),
    ]);
    let decode = |p: &Path| image::open(p).unwrap().to_rgb8();
    assert_eq!(decode(&same), decode(&input));

    let bad = fairsa(&[
        "perturb", "--image", input.to_str().unwrap(), "--kind", "exposure", "--level", "-9", "--out",
        same.to_str().unwrap(),
    ]);
    assert!(!bad.status.success());
}

#[test]
fn report_rerenders_and_summarizes() {
    let (dir, config) = synth();
    let run_dir = run(&config, &dir.path().join("out"), &[]);
    let heatmap = run_dir.join("curves-heatmap.svg");
    let before = fs::read_to_string(&heatmap).unwrap();
    fs::remove_file(&heatmap).unwrap();
    let listed = ok(&["report", "--in", run_dir.to_str().unwrap(), "--svg"]);
    assert!(listed.contains("curves-heatmap.svg"));
    assert_eq!(fs::read_to_string(&heatmap).unwrap(), before);

    let summary = ok(&["report", "--in", run_dir.to_str().unwrap()]);
    assert!(summary.contains("L1 norm"));
    assert!(summary.contains("Bright=1"));

    let empty = tempfile::tempdir().unwrap();
    assert!(!fairsa(&["report", "--in", empty.path().to_str().unwrap(), "--svg"]).status.success());
}

#[test]
fn fatal_errors_exit_nonzero_with_diagnostics() {
    let (dir, config) = synth();
    let typo = edit_config(&config, |v| {
        v["alpah"] = serde_json::json!(0.05);
    });
    let out = fairsa(&["run", "--config", typo.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));

    let unknown = edit_config(&config, |v| {
        v["subgroups"] = serde_json::json!([{"attribute": "Smiling", "value": true}]);
    });
    let out = fairsa(&["run", "--config", unknown.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Smiling"));

    let out = fairsa(&["run", "--config", config.to_str().unwrap(), "--pruning", "vpsa-identities"]);
    assert!(!out.status.success());
}

#[test]
fn serve_toy_survives_bad_requests() {
    let (dir, _) = synth();
    let mut child = Command::new(env!("CARGO_BIN_EXE_fairsa"))
        .arg("serve-toy")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut ask = |line: &str| -> Value {
        writeln!(stdin, "{line}").unwrap();
        stdin.flush().unwrap();
        let mut reply = String::new();
        stdout.read_line(&mut reply).unwrap();
        serde_json::from_str(&reply).unwrap()
    };
    assert_eq!(ask(r#"{"op":"hello","version":1}"#)["dim"], 256);
    assert_eq!(ask("not json")["op"], "error");
    assert_eq!(ask(r#"{"op":"embed","id":"x","path":"/no/such.png"}"#)["op"], "error");
    let image = dir.path().join("images/000002.png");
    let reply = ask(&format!(r#"{{"op":"embed","id":"y","path":"{}"}}"#, image.display()));
    assert_eq!(reply["op"], "embedding");
    assert_eq!(reply["vec"].as_array().unwrap().len(), 256);
    writeln!(stdin, r#"{{"op":"shutdown"}}"#).unwrap();
    drop(stdin);
    assert!(child.wait().unwrap().success());
}
