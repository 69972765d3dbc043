//! Command-level behavior of the binary: exit codes, artifact layout, and
//! the validation paths that do not need a trained model.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_swarm-density"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_in(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run_in(dir.path(), &["--version"])), 0);
    assert_eq!(code(&run_in(dir.path(), &["gen", "--help"])), 0);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["gen", "--frobnicate", "--out", "d"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_in(dir.path(), &[])), 1);
}

#[test]
fn checkpoint_and_ideal_conflict_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "x.bin",
            "--ideal",
            "--dataset",
            "d",
            "--out",
            "e",
        ],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_requires_checkpoint_or_ideal() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["eval", "--dataset", "d", "--out", "e"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["train", "--dataset", "no-such-dir", "--out", "t"],
    );
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
}

#[test]
fn malformed_config_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "no_such_key = 5\n").unwrap();
    let out = run_in(
        dir.path(),
        &["gen", "--config", "bad.toml", "--out", "d"],
    );
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("configuration error"), "stderr: {stderr}");
}

#[test]
fn invalid_grid_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["gen", "--grid", "3by3", "--out", "d"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gen_writes_dataset_artifacts_and_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "gen",
            "--seed",
            "5",
            "--n",
            "6",
            "--balance-cap",
            "2",
            "--out",
            "d",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let d = dir.path().join("d");
    assert!(d.join("manifest.json").is_file());
    assert!(d.join("images").join("000000.ppm").is_file());
    assert!(d.join("labels").join("000000.json").is_file());
    assert!(d.join("bucket_histogram.csv").is_file());
    assert!(d.join("bin_distribution.csv").is_file());
    assert!(d.join("run-config.toml").is_file());

    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("target_count,n_samples"));
    assert!(stdout.contains("bin_index,bin_lo_m,bin_hi_m,gt_mass"));

    // The persisted configuration reflects the flag overrides.
    let cfg = fs::read_to_string(d.join("run-config.toml")).unwrap();
    assert!(cfg.contains("seed = 5"));
    assert!(cfg.contains("balance_cap = 2"));
}

#[test]
fn bias_study_sweeps_tilt_and_keeps_density_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["bias-study", "--out", "b"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("b").join("bias_study.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "tilt_deg,bbox_bin_error,density_bin_error");
    assert_eq!(lines.len(), 1 + 13, "0..60 in steps of 5");
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[2].parse::<i64>().unwrap(), 0, "density stays exact");
    }
    assert!(dir.path().join("b").join("run-config.toml").is_file());
}

#[test]
fn compare_rejects_reports_with_different_bin_counts() {
    let dir = tempfile::tempdir().unwrap();
    for (name, n_bin) in [("a", 2usize), ("b", 3usize)] {
        let d = dir.path().join(name);
        fs::create_dir_all(&d).unwrap();
        let mut report = String::from("bin_index,bin_lo_m,bin_hi_m,e_bar,gt_mass\n");
        for i in 0..n_bin {
            report.push_str(&format!("{i},{i}.0,{}.0,0.0,1.0\n", i + 1));
        }
        report.push_str("T_bar,E_bar,E_bar_prime,n_images\n0.0,0.0,0.0,1\n");
        fs::write(d.join("report.csv"), report).unwrap();
        fs::write(
            d.join("meta.json"),
            format!("{{\"params\": 0, \"n_bin\": {n_bin}, \"source\": \"{name}\"}}"),
        )
        .unwrap();
    }
    let out = run_in(dir.path(), &["compare", "a", "b", "--out", "c"]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bin counts"), "stderr: {stderr}");
}

#[test]
fn compare_marks_best_and_second_per_column() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [("a", 0.3, 2.0), ("b", 0.1, 3.0), ("c", 0.2, 1.0)];
    for (name, t_bar, e_bar) in rows {
        let d = dir.path().join(name);
        fs::create_dir_all(&d).unwrap();
        let report = format!(
            "bin_index,bin_lo_m,bin_hi_m,e_bar,gt_mass\n\
             0,0.0,1.0,{e_bar:.8e},1.0\n\
             T_bar,E_bar,E_bar_prime,n_images\n\
             {t_bar:.8e},{e_bar:.8e},{e_bar:.8e},1\n"
        );
        fs::write(d.join("report.csv"), report).unwrap();
        fs::write(
            d.join("meta.json"),
            format!("{{\"params\": 10, \"n_bin\": 1, \"source\": \"{name}\"}}"),
        )
        .unwrap();
    }
    let out = run_in(dir.path(), &["compare", "a", "b", "c", "--out", "cmp"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("cmp").join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "name,t_bar,e_bar,e_bar_prime,params,t_bar_mark,e_bar_mark,e_bar_prime_mark"
    );
    // T_bar: best b, second c. E_bar: best c, second a.
    assert!(lines[1].starts_with("a,") && lines[1].ends_with(",second,second"));
    assert!(lines[2].starts_with("b,") && lines[2].contains(",best,,"));
    assert!(lines[3].starts_with("c,") && lines[3].contains(",second,best,best"));
}

#[test]
fn gen_is_byte_identical_across_working_directories() {
    let root1 = tempfile::tempdir().unwrap();
    let root2 = tempfile::tempdir().unwrap();
    for root in [root1.path(), root2.path()] {
        let out = run_in(
            root,
            &[
                "gen",
                "--seed",
                "9",
                "--n",
                "6",
                "--balance-cap",
                "2",
                "--out",
                "d",
            ],
        );
        assert_eq!(code(&out), 0);
    }
    assert_trees_identical(&root1.path().join("d"), &root2.path().join("d"));
}

fn assert_trees_identical(a: &Path, b: &Path) {
    let mut names_a = list_files(a);
    let mut names_b = list_files(b);
    names_a.sort();
    names_b.sort();
    assert_eq!(names_a, names_b, "directory layout differs");
    for rel in names_a {
        let fa = fs::read(a.join(&rel)).unwrap();
        let fb = fs::read(b.join(&rel)).unwrap();
        assert_eq!(fa, fb, "file {rel} differs");
    }
}

fn list_files(root: &Path) -> Vec<String> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, base, out);
            } else {
                out.push(
                    path.strip_prefix(base)
                        .unwrap()
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}
