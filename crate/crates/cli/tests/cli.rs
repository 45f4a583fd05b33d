use std::path::Path;
use std::process::{Command, Output};

fn flowlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("FLOWLAB_OUT")
        .output()
        .expect("spawn flowlab")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("in.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn gen_paths_snaps_every_sparse_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "[gen_paths]\ntrajectories = 8\ngrid = \"geometric\"\nsteps = 200\n");
    let r = flowlab(&["--config", &cfg, "gen-paths"], &out);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rows = csv_rows(&read(&out.join("endpoints.csv")));
    assert_eq!(rows.len(), 8);
    for row in rows {
        assert!(row[1].parse::<i64>().unwrap() >= 0, "unsnapped row {row:?}");
        assert_eq!(row[2], "-1");
    }
    assert!(out.join("trajectories/traj_0007.csv").exists());
    assert!(!out.join("paths.svg").exists());
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "gen-paths");
    assert!(manifest["files"].as_array().unwrap().iter().any(|f| f == "endpoints.csv"));
}

#[test]
fn single_step_gen_paths_is_one_euler_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let r = flowlab(&["gen-paths", "--steps", "1", "--trajectories", "2"], &out);
    assert!(r.status.success());
    let traj = read(&out.join("trajectories/traj_0000.csv"));
    assert_eq!(traj.lines().count(), 3, "header plus two nodes");
    assert!(read(&out.join("config.toml")).contains("steps = 1"));
}

#[test]
fn rerun_from_written_config_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = write_config(dir.path(), "[run]\nseed = 5\n[gen_paths]\ntrajectories = 4\n");
    assert!(flowlab(&["--config", &cfg, "gen-paths", "--svg"], &a).status.success());
    let written = a.join("config.toml");
    assert!(flowlab(&["--config", written.to_str().unwrap(), "gen-paths"], &b).status.success());
    for f in ["endpoints.csv", "dataset.csv", "trajectories/traj_0003.csv", "config.toml"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
    assert!(a.join("paths.svg").exists() && !b.join("paths.svg").exists());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(flowlab(&["bound-check", "--samples", "4000", "--threads", "1"], &a).status.success());
    assert!(flowlab(&["bound-check", "--samples", "4000", "--threads", "3"], &b).status.success());
    assert_eq!(read(&a.join("bound.csv")), read(&b.join("bound.csv")));
}

#[test]
fn bound_check_holds_and_single_point_has_zero_bound() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let r = flowlab(&["bound-check", "--samples", "5000", "--svg"], &out);
    assert!(r.status.success());
    assert!(out.join("bound.svg").exists());
    let rows = csv_rows(&read(&out.join("bound.csv")));
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[5] == "1"));

    let one = dir.path().join("one");
    let cfg = write_config(dir.path(), "[bound_check]\nsamples = 100\n[bound_check.dataset]\npoints = 1\n");
    assert!(flowlab(&["--config", &cfg, "bound-check"], &one).status.success());
    for r in csv_rows(&read(&one.join("bound.csv"))) {
        assert_eq!(r[2].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn emb_approx_targets_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "[emb_approx]\ndims = [16]\npoints = 50\npanels = 512\n");
    let r = flowlab(&["--config", &cfg, "emb-approx"], &out);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rows = csv_rows(&read(&out.join("emb/s1000_dim16.csv")));
    assert_eq!(rows.len(), 50);
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 1.0);
    let summary = csv_rows(&read(&out.join("emb_summary.csv")));
    assert_eq!(summary.len(), 2);
    let err = |row: &Vec<String>| row[4].parse::<f64>().unwrap();
    assert!(err(&summary[1]) < err(&summary[0]), "higher scale should fit better");
}

#[test]
fn train_zero_epochs_records_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "[train]\neval_samples = 200\nemb_dim = 16\npanels_unused = 1\n");
    // unknown key: configuration error
    let r = flowlab(&["--config", &cfg, "train", "--epochs", "0"], &out);
    assert_eq!(r.status.code(), Some(2));

    let cfg = write_config(dir.path(), "[train]\neval_samples = 200\nemb_dim = 16\n");
    let r = flowlab(&["--config", &cfg, "train", "--epochs", "0"], &out);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let metrics = read(&out.join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.lines().nth(1).unwrap().starts_with("0,"));
    assert!(out.join("checkpoints/ckpt_000000.json").exists());
    assert!(out.join("histograms.json").exists());
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = write_config(dir.path(), "[train]\nepochs = 40\ncheckpoint_every = 20\neval_samples = 100\nemb_dim = 16\n");
    assert!(flowlab(&["--config", &cfg, "train"], &a).status.success());
    let ck = a.join("checkpoints/ckpt_000020.json");
    let r = flowlab(&["--config", &cfg, "train", "--resume", ck.to_str().unwrap()], &b);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(read(&a.join("checkpoints/ckpt_000040.json")), read(&b.join("checkpoints/ckpt_000040.json")));
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
}

#[test]
fn train_subspace_small_network() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "[train]\nmode = \"subspace\"\nsub_dim = 3\nambient_dim = 3\npoints = 20\nepochs = 10\ncheckpoint_every = 5\neval_samples = 50\nhidden = 8\n",
    );
    let r = flowlab(&["--config", &cfg, "train", "--svg"], &out);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rows = csv_rows(&read(&out.join("metrics.csv")));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| !r[4].is_empty()));
    assert!(out.join("metrics.svg").exists());
}

#[test]
fn verify_reports_json_and_detects_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ok");
    let r = flowlab(&["verify", "--checks", "2,5", "--json"], &out);
    assert!(r.status.success());
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["all_pass"], true);
    assert_eq!(v["checks"].as_array().unwrap().len(), 2);

    let bad = dir.path().join("bad");
    let r = flowlab(&["verify", "--checks", "5", "--perturb-optimal", "0.1"], &bad);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("FAIL #5"));
    assert!(read(&bad.join("verify.txt")).contains("FAIL #5"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "[gen_paths.dataset]\nmode = \"file\"\npath = \"/nonexistent/data.csv\"\n");
    assert_eq!(flowlab(&["--config", &cfg, "gen-paths"], &out).status.code(), Some(2));
    let cfg = write_config(dir.path(), "[gen_paths]\nepsilon = 2.0\n");
    assert_eq!(flowlab(&["--config", &cfg, "gen-paths"], &out).status.code(), Some(2));
    assert_eq!(flowlab(&["bound-check", "--samples", "0"], &out).status.code(), Some(2));
    assert_eq!(flowlab(&["verify", "--checks", "99"], &out).status.code(), Some(2));
}

#[test]
fn file_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pts.csv");
    std::fs::write(&data, "0,0\n10,0\n0,10\n").unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("[gen_paths]\ntrajectories = 3\n[gen_paths.dataset]\nmode = \"file\"\npath = {:?}\n", data.to_str().unwrap()),
    );
    let out = dir.path().join("run");
    let r = flowlab(&["--config", &cfg, "gen-paths"], &out);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(read(&out.join("dataset.csv")).lines().count(), 3);
}

#[test]
fn env_var_overrides_out_flag() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from_env");
    let flag_out = dir.path().join("from_flag");
    let r = Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args(["bound-check", "--samples", "100", "--out"])
        .arg(&flag_out)
        .env("FLOWLAB_OUT", &env_out)
        .output()
        .unwrap();
    assert!(r.status.success());
    assert!(env_out.join("bound.csv").exists());
    assert!(!flag_out.exists());
}
