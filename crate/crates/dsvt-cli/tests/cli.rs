//! Black-box CLI tests: golden partition dumps, exit codes, determinism of
//! gen and forward, and report files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn dsvt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dsvt"))
}

fn run(args: &[&str]) -> Output {
    dsvt().args(args).output().expect("spawn dsvt")
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

/// Ten points in distinct pillars of one (12, 12, 1) window, listed so the
/// X-major order equals the roster order.
fn ten_voxel_csv(dir: &Path) -> PathBuf {
    let path = dir.join("ten.csv");
    let mut text = String::from("x,y,z\n");
    for i in 0..10 {
        let x = i as f32 * 0.32 + 0.16;
        text.push_str(&format!("{x},0.16,0.5\n"));
    }
    write(&path, &text);
    path
}

fn small_config(dir: &Path, tau: usize) -> PathBuf {
    let path = dir.join("cfg.json");
    write(
        &path,
        &format!(
            r#"{{
  "grid": {{"range_min": [0,0,0], "range_max": [24,24,6], "voxel_size": [0.32,0.32,6.0]}},
  "variant": "P",
  "blocks_per_stage": [1],
  "window_a": [12,12],
  "window_b": [24,24],
  "tau": {tau},
  "channels": 12,
  "heads": 2,
  "ffn": 24,
  "partition": "Rotate",
  "pool_variant": "AttnPool"
}}"#
        ),
    );
    path
}

#[test]
fn partition_golden_ten_voxel_fixture() {
    let dir = TempDir::new().unwrap();
    let pc = ten_voxel_csv(dir.path());
    let cfg = small_config(dir.path(), 4);
    let out = dir.path().join("dump.json");
    let res = run(&[
        "partition",
        "--input",
        pc.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let dump: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(dump["tau"], 4);
    assert_eq!(dump["voxels"], 10);
    let windows = dump["blocks"][0]["windows"].as_array().unwrap();
    assert_eq!(windows.len(), 1);
    let w = &windows[0];
    assert_eq!(w["n"], 10);
    assert_eq!(w["s"], 3);
    assert_eq!(
        w["q"],
        serde_json::json!([[0, 0, 1, 2], [3, 4, 5, 5], [6, 7, 8, 9]])
    );
    assert_eq!(
        w["mask"],
        serde_json::json!([
            [true, false, true, true],
            [true, true, true, false],
            [true, true, true, true]
        ])
    );
}

#[test]
fn partition_empty_cloud_exits_zero() {
    let dir = TempDir::new().unwrap();
    let pc = dir.path().join("empty.csv");
    write(&pc, "x,y,z\n");
    let cfg = small_config(dir.path(), 4);
    let out = dir.path().join("dump.json");
    let res = run(&[
        "partition",
        "--input",
        pc.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let dump: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(dump["voxels"], 0);
    assert_eq!(dump["blocks"][0]["windows"].as_array().unwrap().len(), 0);
}

#[test]
fn missing_config_field_exits_two_with_field_path() {
    let dir = TempDir::new().unwrap();
    let pc = ten_voxel_csv(dir.path());
    let cfg = dir.path().join("broken.json");
    // No `tau` field.
    write(
        &cfg,
        r#"{
  "grid": {"range_min": [0,0,0], "range_max": [24,24,6], "voxel_size": [0.32,0.32,6.0]},
  "variant": "P",
  "blocks_per_stage": [1],
  "window_a": [12,12],
  "window_b": [24,24],
  "channels": 12,
  "heads": 2,
  "ffn": 24,
  "partition": "Rotate",
  "pool_variant": "AttnPool"
}"#,
    );
    let out = dir.path().join("dump.json");
    let res = run(&[
        "partition",
        "--input",
        pc.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("tau"), "stderr was: {err}");
}

#[test]
fn unknown_preset_and_unreadable_input_exit_two() {
    let dir = TempDir::new().unwrap();
    let pc = ten_voxel_csv(dir.path());
    let res = run(&[
        "partition",
        "--input",
        pc.to_str().unwrap(),
        "--preset",
        "dsvt-zz",
        "--out",
        dir.path().join("d.json").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));

    let cfg = small_config(dir.path(), 4);
    let res = run(&[
        "forward",
        "--input",
        dir.path().join("nope.csv").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("bev.bin").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn check_passes_clean_and_fails_mutated() {
    let ok = run(&["check", "--iters", "2000", "--trials", "5"]);
    assert_eq!(ok.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("all invariants hold"), "stdout: {stdout}");

    let bad = run(&[
        "check",
        "--iters",
        "5000",
        "--trials",
        "0",
        "--mutate",
        "float-floor",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("witness N="), "stderr: {err}");
}

#[test]
fn gen_is_deterministic_and_seed_overrides() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("model.json");
    write(
        &model,
        r#"{"extent": [24,24,4], "clusters": 2, "points_per_cluster": 25,
            "cluster_std_xy": 1.0, "cluster_std_z": 0.2,
            "background_points": 30, "seed": 3}"#,
    );
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    for (out, seed) in [(&a, None), (&b, None), (&c, Some("9"))] {
        let mut args = vec![
            "gen",
            "--model",
            model.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        assert!(run(&args).status.success());
    }
    let bytes_a = std::fs::read(&a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b).unwrap());
    assert_ne!(bytes_a, std::fs::read(&c).unwrap());

    // Binary output parses back with the right row width.
    let bin = dir.path().join("scene.bin");
    assert!(run(&[
        "gen",
        "--model",
        model.to_str().unwrap(),
        "--out",
        bin.to_str().unwrap(),
    ])
    .status
    .success());
    let pc = dsvt::voxel::PointCloud::from_le_bin(&bin, 0).unwrap();
    assert_eq!(pc.len(), 80);
}

#[test]
fn forward_weights_file_round_trip_and_mismatch_diagnostics() {
    let dir = TempDir::new().unwrap();
    let pc = ten_voxel_csv(dir.path());
    let cfg = small_config(dir.path(), 4);
    let weights = dir.path().join("w.bin");
    let bev_seeded = dir.path().join("bev_seeded.bin");
    let res = run(&[
        "forward",
        "--input",
        pc.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
        "--save-weights",
        weights.to_str().unwrap(),
        "--out",
        bev_seeded.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    // Loading the persisted weights reproduces the exact output.
    let bev_loaded = dir.path().join("bev_loaded.bin");
    let res = run(&[
        "forward",
        "--input",
        pc.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        bev_loaded.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(
        std::fs::read(&bev_seeded).unwrap(),
        std::fs::read(&bev_loaded).unwrap()
    );

    // A config with different widths names the offending tensor and shapes.
    let wrong = small_config(dir.path(), 4);
    let text = std::fs::read_to_string(&wrong).unwrap();
    write(&wrong, &text.replace("\"ffn\": 24", "\"ffn\": 32"));
    let res = run(&[
        "forward",
        "--input",
        pc.to_str().unwrap(),
        "--config",
        wrong.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        dir.path().join("x.bin").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("expected shape"), "stderr: {err}");
}

#[test]
fn forward_sidecar_records_voxel_stage_extents() {
    let dir = TempDir::new().unwrap();
    // A few points across the z range of the voxel preset's grid.
    let pc = dir.path().join("pts.csv");
    write(&pc, "x,y,z\n1.0,1.0,0.5\n5.0,5.0,3.0\n9.0,2.0,5.5\n");
    let cfg = dir.path().join("vcfg.json");
    write(
        &cfg,
        r#"{
  "grid": {"range_min": [0,0,0], "range_max": [24,24,6], "voxel_size": [0.32,0.32,0.1875]},
  "variant": "V",
  "blocks_per_stage": [1,1,1,1],
  "window_a": [12,12],
  "window_b": [24,24],
  "tau": 8,
  "channels": 12,
  "heads": 2,
  "ffn": 24,
  "pool_z_strides": [4,4,2],
  "z_windows": [32,8,2,1],
  "partition": "Rotate",
  "pool_variant": "AttnPool"
}"#,
    );
    let out = dir.path().join("bev.bin");
    let res = run(&[
        "forward",
        "--input",
        pc.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let side: Value =
        serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(side["stage_z_extents"], serde_json::json!([32, 8, 2, 1]));
    assert_eq!(side["shape"][0], 12);
}

#[test]
fn bench_writes_csv_and_json_reports() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("model.json");
    write(
        &model,
        r#"{"extent": [24,24,4], "clusters": 2, "points_per_cluster": 30,
            "cluster_std_xy": 1.0, "cluster_std_z": 0.2,
            "background_points": 40, "seed": 5}"#,
    );
    let out = dir.path().join("report.csv");
    let res = run(&[
        "bench",
        "--model",
        model.to_str().unwrap(),
        "--strategies",
        "dynamic_set,bucketing",
        "--channels",
        "24",
        "--heads",
        "4",
        "--ffn",
        "48",
        "--repeats",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with(
        "strategy,windows,total_slots,valid_slots,pad_ratio,invocations,median_ms,p90_ms"
    ));
    assert_eq!(csv.lines().count(), 3);
    let json: Value =
        serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(json["scene_model"]["seed"], 5);
    assert_eq!(json["reports"].as_array().unwrap().len(), 2);
    assert_eq!(json["reports"][0]["strategy"], "dynamic_set");

    // Unknown strategy is a usage error.
    let res = run(&[
        "bench",
        "--model",
        model.to_str().unwrap(),
        "--strategies",
        "warp",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn threads_env_var_is_honored() {
    let dir = TempDir::new().unwrap();
    let pc = ten_voxel_csv(dir.path());
    let cfg = small_config(dir.path(), 4);
    let out = dir.path().join("bev.bin");
    let res = dsvt()
        .env("DSVT_THREADS", "2")
        .args([
            "forward",
            "--input",
            pc.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "1",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let res = dsvt()
        .env("DSVT_THREADS", "zero")
        .args(["check", "--iters", "10", "--trials", "0"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
}
