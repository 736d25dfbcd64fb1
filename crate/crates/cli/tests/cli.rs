use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_avidonet");

fn write_config(dir: &Path, problem: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let doc = format!(
        r#"{{"problem": "{problem}", "data": {{"n_train": 12, "n_test": 4, "n_queries": 4, "n_ood": 2}},
            "alpha_grid": [0.5, 2.0], "seeds": 2, "train": {{"epochs": 40, "n_mc": 2}},
            "eval": {{"draws": 4}}, "record_wall_time": false{extra}}}"#
    );
    std::fs::write(&path, doc).unwrap();
    path
}

fn run(dir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn count(dir: &Path, name: &str) -> usize {
    let mut n = 0;
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() == name {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn sweep_resume_and_exports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "antiderivative", r#", "include_deterministic": false"#);
    let out = ok(run(tmp.path(), &cfg, &["generate"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("N1=12, M=100, N2=4, seed=0"));

    ok(run(tmp.path(), &cfg, &["train"]));
    let cells = tmp.path().join("out/cells");
    assert_eq!(count(&cells, "model.ckpt"), 4);
    assert_eq!(count(&cells, "loss.csv"), 4);

    let record = cells.join("antiderivative/alpha_0.5/seed_0/record.json");
    let stamp = std::fs::metadata(&record).unwrap().modified().unwrap();
    ok(run(tmp.path(), &cfg, &["train", "--resume"]));
    assert_eq!(std::fs::metadata(&record).unwrap().modified().unwrap(), stamp);

    ok(run(tmp.path(), &cfg, &["evaluate"]));
    let results = tmp.path().join("out/results/antiderivative");
    let metrics = std::fs::read_to_string(results.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.starts_with("problem,alpha,seed,converged,nmse,nll,wall_time_s"));
    // too few epochs for the convergence filter: rows stay but are empty
    let table = std::fs::read_to_string(results.join("aggregate.md")).unwrap();
    assert!(table.contains("| 0.50 | – | – | 0/2 |"), "{table}");

    for ci in std::fs::read_dir(results.join("ci")).unwrap() {
        let text = std::fs::read_to_string(ci.unwrap().path()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,true,mean,lower95,upper95"));
        for line in lines {
            let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
            assert!(v[3] <= v[2] && v[2] <= v[4], "{line}");
        }
    }

    ok(run(tmp.path(), &cfg, &["plotdata"]));
    let bars = std::fs::read_to_string(tmp.path().join("out/plots/antiderivative/bars.csv")).unwrap();
    assert!(bars.starts_with("metric,D-DeepONet,KLD-VI,best-alpha,best_alpha"), "{bars}");
}

#[test]
fn deterministic_flag_trains_only_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "pendulum", "");
    ok(run(tmp.path(), &cfg, &["generate"]));
    ok(run(tmp.path(), &cfg, &["train", "--deterministic"]));
    let cells = tmp.path().join("out/cells/pendulum");
    assert_eq!(count(&cells, "model.ckpt"), 2);
    assert!(cells.join("deterministic/seed_1/model.ckpt").exists());
    ok(run(tmp.path(), &cfg, &["evaluate"]));
}

#[test]
fn pde_fields_have_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "advection_diffusion",
        r#", "seeds": 1, "alpha_grid": [1.0], "eval": {"draws": 2, "ci_examples": [0]}"#,
    );
    ok(run(tmp.path(), &cfg, &["generate"]));
    assert!(tmp.path().join("out/data/advection_diffusion/ood_rational_quadratic.bin").exists());
    ok(run(tmp.path(), &cfg, &["train"]));
    ok(run(tmp.path(), &cfg, &["evaluate"]));
    assert!(tmp.path().join("out/results/advection_diffusion/ood.md").exists());
    ok(run(tmp.path(), &cfg, &["plotdata"]));
    let field = tmp.path().join("out/plots/advection_diffusion/field_kld_vi_example_0_abs_error.csv");
    let text = std::fs::read_to_string(field).unwrap();
    assert_eq!(text.lines().next(), Some("x,t,value"));
    assert_eq!(text.lines().count(), 1 + 100 * 100);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "antiderivative", "");

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"problem": "antiderivative", "alpha_grid": [1.0, 1.0]}"#).unwrap();
    assert_eq!(run(tmp.path(), &bad, &["generate"]).status.code(), Some(2));

    // training before generating is a data error
    assert_eq!(run(tmp.path(), &cfg, &["train"]).status.code(), Some(3));
    ok(run(tmp.path(), &cfg, &["generate"]));
    assert_eq!(run(tmp.path(), &cfg, &["generate"]).status.code(), Some(3));
    ok(run(tmp.path(), &cfg, &["generate", "--force"]));
    assert_eq!(run(tmp.path(), &cfg, &["evaluate"]).status.code(), Some(3));
    assert_eq!(run(tmp.path(), &cfg, &["plotdata"]).status.code(), Some(3));
}

#[test]
fn flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "antiderivative", "");
    let out = ok(run(tmp.path(), &cfg, &["--seed", "41", "generate"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed=41"));
    let no_problem = Command::new(BIN).arg("generate").output().unwrap();
    assert_eq!(no_problem.status.code(), Some(2));
}
