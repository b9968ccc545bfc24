use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedsim::io::{ALIGNMENT_HEADER, DYNAMICS_HEADER, OUTPUT_DIR_ENV, SCALAR_HEADER};

const SMALL: [&str; 12] = [
    "--clients", "10", "--rounds", "4", "--participation", "0.5", "--local-epochs", "1", "--milestones", "2",
    "--lr", "0.1",
];

fn fedsim(args: &[&str], cwd: &Path, env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedsim"));
    cmd.args(args).current_dir(cwd).env_remove(OUTPUT_DIR_ENV);
    if let Some(dir) = env {
        cmd.env(OUTPUT_DIR_ENV, dir);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(dir: &Path, cadence: &str) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        format!(
            r#"{{"data": {{"kind": "synthetic", "classes": 10, "input_dim": 32, "samples_per_class": 200,
                         "center_scale": 1.0, "noise": 1.0, "seed": 0}},
                "partition": {{"kind": "shard", "shards_per_client": 2}},
                "cadence": {cadence}}}"#
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn train_writes_expected_csv_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"scalar": 1, "alignment": 2, "dynamics": 8}"#);
    let out = tmp.path().join("run");
    let mut args = vec!["train", "--config", &cfg, "--output", out.to_str().unwrap()];
    args.extend(SMALL);
    let res = fedsim(&args, tmp.path(), None);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let header = |name: &str| csv::Reader::from_path(out.join(name)).unwrap().headers().unwrap().clone();
    assert_eq!(header("scalars.csv"), csv::StringRecord::from(SCALAR_HEADER.to_vec()));
    assert_eq!(header("alignment.csv"), csv::StringRecord::from(ALIGNMENT_HEADER.to_vec()));
    assert_eq!(header("dynamics.csv"), csv::StringRecord::from(DYNAMICS_HEADER.to_vec()));

    // 5 participants per round; alignment on rounds 1 and 3; dynamics on the
    // final round only; every shard client has both subsets.
    assert_eq!(rows(&out.join("scalars.csv")).len(), 4);
    let align = rows(&out.join("alignment.csv"));
    assert_eq!(align.len(), 2 * 5 * 2);
    assert!(align.iter().all(|r| &r[0] == "1" || &r[0] == "3"));
    let dynamics = rows(&out.join("dynamics.csv"));
    assert_eq!(dynamics.len(), 5 * 2);
    assert!(dynamics.iter().all(|r| &r[0] == "3"));

    for f in ["config.json", "partition.json", "checkpoint-r0002.json", "model.json", "summary.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let report = fedsim(&["report", "--dir", out.to_str().unwrap()], tmp.path(), None);
    assert_eq!(code(&report), 0, "{}", String::from_utf8_lossy(&report.stderr));
    let v: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert!(v.is_object());
}

#[test]
fn env_var_overrides_configured_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"alignment": 0, "dynamics": 0}"#);
    let target = tmp.path().join("from-env");
    let mut args = vec!["train", "--config", &cfg];
    args.extend(SMALL);
    let res = fedsim(&args, tmp.path(), Some(&target));
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(target.join("model.json").is_file());
    assert!(!tmp.path().join("results").exists());

    // An explicit --output wins over the variable.
    let explicit = tmp.path().join("explicit");
    let mut args = vec!["partition", "--config", &cfg, "--output", explicit.to_str().unwrap()];
    args.extend(["--clients", "10"]);
    let res = fedsim(&args, tmp.path(), Some(&target));
    assert_eq!(code(&res), 0);
    assert!(explicit.join("partition.json").is_file());
}

#[test]
fn finetune_after_train() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"alignment": 0, "dynamics": 0}"#);
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    let mut args = vec!["train", "--config", &cfg, "--output", o];
    args.extend(SMALL);
    assert_eq!(code(&fedsim(&args, tmp.path(), None)), 0);

    let mut no_lr = vec!["finetune", "--config", &cfg, "--output", o];
    no_lr.extend(SMALL);
    assert_eq!(code(&fedsim(&no_lr, tmp.path(), None)), 1);

    let mut ok = no_lr.clone();
    ok.extend(["--ft-lr", "0.05", "--ft-epochs", "2"]);
    let res = fedsim(&ok, tmp.path(), None);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["clients"], 10);
    assert!(out.join("personalization.csv").is_file());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    assert_eq!(code(&fedsim(&["--help"], cwd, None)), 0);
    assert_eq!(code(&fedsim(&["etfcheck", "--classes", "10"], cwd, None)), 0);
    assert_eq!(code(&fedsim(&["gradcheck", "--cases", "3"], cwd, None)), 0);

    // Validation errors.
    assert_eq!(code(&fedsim(&["no-such-command"], cwd, None)), 1);
    assert_eq!(code(&fedsim(&["etfcheck", "--classes", "1"], cwd, None)), 1);
    assert_eq!(code(&fedsim(&["etfcheck", "--classes", "20", "--dim", "5"], cwd, None)), 1);
    assert_eq!(code(&fedsim(&["train", "--lr", "-1"], cwd, None)), 1);
    assert_eq!(code(&fedsim(&["train", "--kd", "1", "--ld", "1"], cwd, None)), 1);
    fs::write(cwd.join("broken.json"), "{\"data\": ").unwrap();
    assert_eq!(code(&fedsim(&["train", "--config", "broken.json"], cwd, None)), 1);

    // Runtime failures.
    assert_eq!(code(&fedsim(&["report", "--dir", "missing"], cwd, None)), 2);
    assert_eq!(code(&fedsim(&["gradcheck", "--cases", "2", "--tolerance", "0"], cwd, None)), 2);
}
