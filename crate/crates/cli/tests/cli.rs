use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
log_every = 5

[corpus]
n = 70

[clap]
epochs = 5

[vc]
iterations = 10
batch_size = 4

[eval]
conversions = 4
lambdas = [0.0, 1.0]
"#;

fn emovc_in(dir: &Path, out: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emovc"))
        .args(["--config", dir.join("run.toml").to_str().unwrap(), "--out", dir.join(out).to_str().unwrap()])
        .args(args)
        .output()
        .expect("binary runs")
}

fn emovc(dir: &Path, args: &[&str]) -> Output {
    emovc_in(dir, "run", args)
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = emovc(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = emovc(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

#[test]
fn full_command_sequence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    let d = dir.path();

    assert!(ok(d, &["gen-corpus"]).starts_with("70 utterances (56 train / 7 val / 7 test)"));
    assert!(d.join("run/corpus/corpus.jsonl").exists());
    ok(d, &["train-clap"]);
    assert!(fails(d, &["convert", "--mode", "reference", "--source", "0", "--reference", "1"]).contains("not found"));
    ok(d, &["train-vc"]);
    ok(d, &["build-store"]);

    let report: serde_json::Value =
        serde_json::from_str(&ok(d, &["convert", "--mode", "retrieval", "--intensity", "0.5", "--source", "3", "--reference", "9"]))
            .unwrap();
    assert_eq!(report["mode"], "retrieval");
    assert_eq!(report["lambda"], 0.5);
    assert_eq!(report["target_class"], 2);
    assert!(report["retrieval_hit"].is_boolean());
    assert_eq!(report["mel"].as_array().unwrap().len(), report["frames"].as_u64().unwrap() as usize);

    let table = ok(d, &["evaluate"]);
    assert_eq!(table.lines().count(), 6);
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);

    assert!(fails(d, &["convert", "--mode", "sideways", "--source", "0", "--reference", "1"]).contains("sideways"));
    assert!(fails(d, &["convert", "--mode", "prompt", "--intensity", "2.5", "--source", "0", "--reference", "1"]).contains("[0, 2]"));
    // A different contrastive objective does not match the trained checkpoint.
    assert!(fails(d, &["--loss", "kl", "build-store"]).contains("different configuration"));

    for (out, flags) in [("kl", &["--loss", "kl"][..]), ("noaig", &["--no-aig"][..])] {
        for cmd in ["train-clap", "train-vc", "build-store", "evaluate"] {
            let o = emovc_in(d, out, &[flags, &[cmd]].concat());
            assert!(o.status.success(), "{out} {cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
    let (kl, noaig) = (d.join("kl"), d.join("noaig"));
    ok(d, &["evaluate", "--compare", kl.to_str().unwrap(), noaig.to_str().unwrap()]);
    let table = std::fs::read_to_string(d.join("run/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "bogus = 1\n").unwrap();
    assert!(fails(dir.path(), &["gen-corpus"]).contains("bogus"));
    std::fs::write(dir.path().join("run.toml"), "[eval]\nlambdas = [3.0]\n").unwrap();
    assert!(fails(dir.path(), &["gen-corpus"]).contains("[0, 2]"));
    assert!(fails(dir.path(), &["--loss", "l1", "gen-corpus"]).contains("l1"));
}
