use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn ldznet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldznet"))
        .arg("--config")
        .arg(tiny())
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .args(args)
        .env_remove("LDZ_OUT")
        .output()
        .expect("binary runs")
}

fn error_line(o: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let last = stderr.lines().last().expect("stderr has an error line");
    serde_json::from_str(last).expect("error line is JSON")
}

#[test]
fn eval_before_train_seg_names_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldznet(dir.path(), &["eval", "--model", "ldznet"]);
    assert!(!o.status.success());
    let e = error_line(&o);
    assert_eq!(e["error"], "missing_artifact");
    assert_eq!(e["stage"], "train-seg");
    assert!(e["message"].as_str().unwrap().contains("train-seg"));

    let o = ldznet(dir.path(), &["train-ae"]);
    assert!(!o.status.success());
    assert_eq!(error_line(&o)["stage"], "synth");

    let o = ldznet(dir.path(), &["train-seg", "--model", "unet"]);
    assert!(!o.status.success());
    assert_eq!(error_line(&o)["error"], "config");
}

#[test]
fn tampered_upstream_is_refused_with_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ldznet(dir.path(), &["synth"]).status.success());
    let synth = std::fs::read_dir(dir.path().join("synth")).unwrap().next().unwrap().unwrap().path();
    std::fs::write(synth.join("train/index.json"), "{}").unwrap();
    let o = ldznet(dir.path(), &["train-ae"]);
    assert!(!o.status.success());
    let e = error_line(&o);
    assert_eq!(e["error"], "hash_mismatch");
    assert_ne!(e["expected"], e["found"]);
}

fn full_run(out: &Path) -> Vec<String> {
    let o = ldznet(out, &["--build-upstream", "--seed", "1234", "eval", "--model", "ldznet", "--domain", "B"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let dir = PathBuf::from(line["dir"].as_str().unwrap());
    let report = std::fs::read_to_string(dir.join("eval_report.json")).unwrap();
    let stages = ["synth", "train-ae", "train-ldm", "train-seg"];
    let mut hashes: Vec<String> = stages
        .iter()
        .map(|s| {
            let d = std::fs::read_dir(out.join(s)).unwrap().next().unwrap().unwrap().path();
            let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run.json")).unwrap()).unwrap();
            run["output_sha256"].as_str().unwrap().to_string()
        })
        .collect();
    hashes.push(report);
    hashes
}

#[test]
fn pipeline_is_reproducible_and_closed_under_provenance() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = full_run(a.path());
    let rb = full_run(b.path());
    assert_eq!(ra, rb);

    let report: serde_json::Value = serde_json::from_str(ra.last().unwrap()).unwrap();
    let prov = &report["provenance"];
    assert_eq!(prov["root_seed"], "1234");
    for stage in ["synth", "train-ae", "train-ldm", "train-seg"] {
        let hash = prov[format!("{stage}.config_hash")].as_str().unwrap();
        assert!(a.path().join(stage).join(hash).join("run.json").exists(), "{stage}");
    }
    let synth_hash = prov["synth.config_hash"].as_str().unwrap();
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("synth").join(synth_hash).join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"].to_string(), prov["dataset_seed"].as_str().unwrap());

    // A second invocation reuses every stage.
    let o = ldznet(a.path(), &["--seed", "1234", "eval", "--model", "ldznet", "--domain", "B"]);
    assert!(o.status.success());
}

#[test]
fn all_subcommands_run_on_the_tiny_preset() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldznet(dir.path(), &["all", "--seeds", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let last: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(last["stage"], "report");
    let md = std::fs::read_to_string(Path::new(last["dir"].as_str().unwrap()).join("report.md")).unwrap();
    assert!(md.contains("| Model | mIoU | IoU_FG | AP |"));
    for name in ["RGBNet", "ZNet", "LD-ZNet", "LD-ZNet (concat)"] {
        assert!(md.contains(&format!("| {name} |")), "{md}");
    }
    for stage in ["sample", "saliency", "probe-grid"] {
        assert!(dir.path().join(stage).exists(), "{stage}");
    }
}
