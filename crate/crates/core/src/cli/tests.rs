use super::*;
use clap::Parser;
use tempfile::TempDir;

fn call(args: &[&str]) -> Result<()> {
    let argv: Vec<String> = std::iter::once("ncf").chain(args.iter().copied()).map(String::from).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| invalid(e.to_string()))?;
    run(&cli, &argv)
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

/// Tiny SP problem: 2 training envs, short trajectories.
fn tiny_sp(dir: &TempDir) -> String {
    let grid = p(dir, "grid.toml");
    fs::write(
        &grid,
        "[[train]]\ng = 4.0\n[[train]]\ng = 9.0\n[[adapt]]\ng = 6.5\n",
    )
    .unwrap();
    let data = p(dir, "data");
    call(&["generate", "--system", "sp", "--grid", &grid, "--counts", "2,1,1,1", "--out", &data]).unwrap();
    data
}

fn tiny_config(dir: &TempDir) -> String {
    let mut cfg = default_train_config(SystemName::Sp);
    cfg.epochs = 3;
    cfg.model = ModelConfig::compact(2, 4);
    cfg.validate_every = 0;
    cfg.solver = IntegratorSpec::rk4(0.25);
    let path = p(dir, "cfg.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn lv_paper_preset_grid_sizes() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "lv");
    call(&["generate", "--system", "lv", "--preset", "paper", "--counts", "1,1,1,1", "--out", &out]).unwrap();
    let ds = dataset::load(Path::new(&out)).unwrap();
    assert_eq!(ds.train.n_envs(), 9);
    assert_eq!(ds.ood_train.n_envs(), 4);
}

#[test]
fn sp_desk_preset_has_eight_envs() {
    let grid = systems::preset_grid(SystemName::Sp, Preset::Desk);
    assert_eq!(grid.train.len(), 8);
}

#[test]
fn unknown_system_is_a_usage_error() {
    let err = Cli::try_parse_from(["ncf", "generate", "--system", "xx", "--out", "o"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn end_to_end_on_a_tiny_problem() {
    let dir = TempDir::new().unwrap();
    let data = tiny_sp(&dir);
    let cfg = tiny_config(&dir);
    let run_dir = p(&dir, "run");
    call(&["train", "--data", &data, "--config", &cfg, "--out", &run_dir]).unwrap();
    for f in ["model/checkpoint.json", "contexts.json", "config.toml", "report.json", "loss.csv", "run.json"] {
        assert!(Path::new(&run_dir).join(f).exists(), "{f} missing");
    }
    let ctx = p(&dir, "run/contexts.json");

    // eval needs contexts
    let err = call(&["eval", "--data", &data, "--checkpoint", &run_dir, "--out", &run_dir]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    call(&["eval", "--data", &data, "--checkpoint", &run_dir, "--contexts", &ctx, "--out", &run_dir]).unwrap();

    let ad = p(&dir, "adapt");
    call(&["adapt", "--data", &data, "--checkpoint", &run_dir, "--iterations", "3", "--out", &ad]).unwrap();
    let adapted = p(&dir, "adapt/contexts.json");
    let uq = p(&dir, "uq");
    call(&[
        "uq", "--data", &data, "--checkpoint", &run_dir, "--contexts", &adapted, "--split", "ood-test", "--out", &uq,
    ])
    .unwrap();
    let u: serde_json::Value = serde_json::from_str(&fs::read_to_string(p(&dir, "uq/uq.json")).unwrap()).unwrap();
    assert_eq!(u["candidates"], 3);

    let id = p(&dir, "id");
    call(&["identify", "--data", &data, "--contexts", &ctx, "--heldout", &adapted, "--out", &id]).unwrap();
    assert!(Path::new(&id).join("identification.json").exists());

    let plots = p(&dir, "plots");
    call(&["export-plots", "--report", &run_dir, "--out", &plots]).unwrap();
    let lines = |f: &str| fs::read_to_string(Path::new(&plots).join(f)).unwrap().lines().count();
    assert_eq!(lines("loss_curve.csv"), 1 + 3);
    assert_eq!(lines("context_scatter.csv"), 1 + 2);
    assert_eq!(lines("error_heatmap.csv"), 1 + 2);
}

#[test]
fn bulk_with_one_env_matches_sequential() {
    let dir = TempDir::new().unwrap();
    let data = tiny_sp(&dir);
    let cfg = tiny_config(&dir);
    let run_dir = p(&dir, "run");
    call(&["train", "--data", &data, "--config", &cfg, "--out", &run_dir]).unwrap();
    let (a, b) = (p(&dir, "seq"), p(&dir, "bulk"));
    let common = ["adapt", "--data", &data, "--checkpoint", &run_dir, "--iterations", "5", "--envs", "1"];
    call(&[&common[..], &["--mode", "sequential", "--out", &a]].concat()).unwrap();
    call(&[&common[..], &["--mode", "bulk", "--out", &b]].concat()).unwrap();
    let read = |d: &str| fs::read_to_string(Path::new(d).join("contexts.json")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let dir = TempDir::new().unwrap();
    let data = tiny_sp(&dir);
    let cfg = tiny_config(&dir);
    let (a, b) = (p(&dir, "a"), p(&dir, "b"));
    call(&["--seed", "7", "train", "--data", &data, "--config", &cfg, "--out", &a]).unwrap();
    call(&["--seed", "7", "train", "--data", &data, "--config", &cfg, "--out", &b]).unwrap();
    let read = |d: &str, f: &str| fs::read(Path::new(d).join(f)).unwrap();
    assert_eq!(read(&a, "loss.csv"), read(&b, "loss.csv"));
    assert_eq!(read(&a, "contexts.json"), read(&b, "contexts.json"));
    let c: TrainConfig = TrainConfig::from_toml(&String::from_utf8(read(&a, "config.toml")).unwrap()).unwrap();
    assert_eq!(c.seed, 7);
}

#[test]
fn baseline_training_and_eval() {
    let dir = TempDir::new().unwrap();
    let data = tiny_sp(&dir);
    let cfg = tiny_config(&dir);
    let tcfg = TrainConfig::from_toml(&fs::read_to_string(&cfg).unwrap()).unwrap();
    let bcfg = p(&dir, "b.toml");
    fs::write(&bcfg, toml::to_string(&default_baseline_config(&tcfg)).unwrap()).unwrap();
    let out = p(&dir, "ofa");
    call(&["train", "--data", &data, "--model", "ofa", "--config", &bcfg, "--out", &out]).unwrap();
    call(&["eval", "--data", &data, "--checkpoint", &out, "--split", "ood-test", "--out", &out]).unwrap();
    let ope = p(&dir, "ope");
    call(&["train", "--data", &data, "--model", "ope", "--config", &bcfg, "--out", &ope]).unwrap();
    call(&["eval", "--data", &data, "--checkpoint", &ope, "--split", "test", "--out", &ope]).unwrap();
    let err = call(&["eval", "--data", &data, "--checkpoint", &ope, "--split", "ood-test", "--out", &ope]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_plot_series_are_listed() {
    let dir = TempDir::new().unwrap();
    let err = call(&["export-plots", "--report", &p(&dir, "nowhere"), "--out", &p(&dir, "o")]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("loss.csv"));
}

#[test]
fn heatmap_of_a_five_by_five_grid_has_25_rows() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r");
    fs::create_dir_all(&report).unwrap();
    let per_env: Vec<serde_json::Value> = (0..25).map(|i| serde_json::json!({"mse": i as f64, "mape": null})).collect();
    let params: Vec<Vec<f64>> = (0..25).map(|i| vec![(i / 5) as f64, (i % 5) as f64]).collect();
    let m = serde_json::json!({
        "varying": ["beta", "delta"],
        "env_params": params,
        "metrics": {"per_env": per_env, "mse": 1.0, "mape": null},
    });
    fs::write(report.join("metrics.json"), m.to_string()).unwrap();
    let out = p(&dir, "o");
    call(&["export-plots", "--report", report.to_str().unwrap(), "--series", "heatmap", "--out", &out]).unwrap();
    let text = fs::read_to_string(Path::new(&out).join("error_heatmap.csv")).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert!(text.starts_with("env,beta,delta,mse,mape"));
}

#[test]
fn exit_codes() {
    assert_eq!(CliError::Validation(String::new()).exit_code(), 2);
    assert_eq!(CliError::Numerical(String::new()).exit_code(), 3);
    let e: CliError = MetaError::Ode(OdeError::NonFinite { t: 0.0 }).into();
    assert_eq!(e.exit_code(), 3);
}
