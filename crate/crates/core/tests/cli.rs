use std::fs;
use std::path::Path;
use std::process::Command;

use ncf_core::metatrain::ModelConfig;
use ncf_core::odeint::IntegratorSpec;
use ncf_core::systems::SystemName;

fn ncf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ncf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = ncf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn binary_runs_the_whole_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    fs::write(p("grid.toml"), "[[train]]\ng = 5.0\n[[train]]\ng = 11.0\n[[adapt]]\ng = 8.0\n").unwrap();
    let mut cfg = ncf_core::cli::default_train_config(SystemName::Sp);
    cfg.epochs = 4;
    cfg.model = ModelConfig::compact(2, 4);
    cfg.solver = IntegratorSpec::rk4(0.25);
    cfg.validate_every = 0;
    fs::write(p("cfg.toml"), cfg.to_toml().unwrap()).unwrap();

    ok(&["generate", "--system", "sp", "--grid", &p("grid.toml"), "--counts", "2,1,1,1", "--out", &p("data")]);
    ok(&["--seed", "3", "train", "--data", &p("data"), "--config", &p("cfg.toml"), "--out", &p("run")]);
    ok(&["adapt", "--data", &p("data"), "--checkpoint", &p("run"), "--iterations", "5", "--out", &p("adapt")]);
    let adapted = p("adapt/contexts.json");
    ok(&[
        "eval", "--data", &p("data"), "--checkpoint", &p("run"), "--contexts", &adapted, "--split", "ood-test", "--out",
        &p("eval"),
    ]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["split"], "ood_test");
    assert!(m["metrics"]["mse"].as_f64().unwrap().is_finite());

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("run/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["seed"], 3);
    assert!(Path::new(&p("run/model/checkpoint.json")).exists());
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o").display().to_string();
    let out = ncf(&["generate", "--system", "nope", "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(2));
    let missing = dir.path().join("missing").display().to_string();
    let out = ncf(&["eval", "--data", &missing, "--checkpoint", &missing, "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sp_desk_context_model_fits_better_than_one_for_all() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    ok(&["generate", "--system", "sp", "--preset", "desk", "--out", &p("data")]);
    ok(&["train", "--data", &p("data"), "--epochs", "300", "--out", &p("ncf")]);
    ok(&["train", "--data", &p("data"), "--model", "ofa", "--epochs", "300", "--out", &p("ofa")]);
    let ctx = p("ncf/contexts.json");
    ok(&["eval", "--data", &p("data"), "--checkpoint", &p("ncf"), "--contexts", &ctx, "--split", "train", "--out", &p("e1")]);
    ok(&["eval", "--data", &p("data"), "--checkpoint", &p("ofa"), "--split", "train", "--out", &p("e2")]);
    let mse = |d: &str| -> f64 {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&p(d)).join("metrics.json")).unwrap()).unwrap();
        m["metrics"]["mse"].as_f64().unwrap()
    };
    let (ncf_mse, ofa_mse) = (mse("e1"), mse("e2"));
    assert!(ncf_mse < ofa_mse, "NCF {ncf_mse:.3e} vs OFA {ofa_mse:.3e}");
}
