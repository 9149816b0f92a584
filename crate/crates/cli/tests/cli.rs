//! Black-box tests of the `culvert` binary: exit codes and JSON contracts.

use std::path::Path;
use std::process::{Command, Output};

fn culvert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_culvert"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

const SMALL_CONFIG: &str = r#"
[camera1]
fx = 120.0
fy = 120.0
cx = 80.0
cy = 60.0
width = 160
height = 120

[camera2]
fx = 120.0
fy = 120.0
cx = 80.0
cy = 60.0
width = 160
height = 120

[grid]
psi_steps = 9
phi_steps = 5
x_steps = 7

[mission]
waypoint_spacing = 2.0
"#;

const SMALL_SCENE: &str = r#"
length = 4.0
diameter = 1.2
seed = 9

[[defects]]
angular_position = 0.2
axial_position = 1.5
extent = 0.2
label = "stain"

[[defects]]
angular_position = -0.3
axial_position = 3.0
extent = 0.25
label = "joint"
"#;

/// Points on a 0.6 m circle in the y-z plane, in text format.
fn circle_cloud() -> String {
    let mut out = String::new();
    for i in 0..400 {
        let theta = std::f64::consts::TAU * i as f64 / 400.0;
        out.push_str(&format!(
            "{:.6} {:.6} {:.6}\n",
            0.01 * i as f64,
            0.6 * theta.cos(),
            0.6 * theta.sin()
        ));
    }
    out
}

#[test]
fn fit_cylinder_recovers_radius() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("cloud.txt");
    write(&cloud, &circle_cloud());
    let out_path = dir.path().join("model.json");
    let out = culvert(&[
        "fit-cylinder",
        "--input",
        cloud.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let radius = json["model"]["radius"].as_f64().unwrap();
    assert!((radius - 0.6).abs() < 1e-6, "radius {radius}");
}

#[test]
fn fit_cylinder_unreadable_input_exits_1() {
    let out = culvert(&["fit-cylinder", "--input", "/nonexistent/cloud.txt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_cylinder_degenerate_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("line.txt");
    // Collinear points: no circle fits.
    let text: String = (0..50)
        .map(|i| format!("0.0 {} {}\n", i as f64 * 0.01, i as f64 * 0.01))
        .collect();
    write(&cloud, &text);
    let out = culvert(&["fit-cylinder", "--input", cloud.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unknown_subcommand_exits_1() {
    let out = culvert(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let out = culvert(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("simulate-mission"));
}

#[test]
fn mission_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    let scene = dir.path().join("scene.toml");
    let fixtures = dir.path().join("fixtures");
    let report = dir.path().join("report.json");
    let diag = dir.path().join("diag");
    write(&config, SMALL_CONFIG);
    write(&scene, SMALL_SCENE);

    let out = culvert(&[
        "simulate-mission",
        "--config",
        config.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--fixtures",
        fixtures.to_str().unwrap(),
        "--synthesize-fixtures",
        "--render-diagnostics",
        diag.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["waypoints"].as_array().unwrap().len(), 3); // 0, 2, 4
    assert!(json["total_sim_time"].as_f64().unwrap() > 0.0);
    assert!(diag.join("waypoint-000.png").exists());

    // The report subcommand summarizes it, exit 0.
    let out = culvert(&["report", "--input", report.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("waypoints"), "{text}");

    // Re-running against the same fixtures is byte-identical.
    let report2 = dir.path().join("report2.json");
    let out = culvert(&[
        "simulate-mission",
        "--config",
        config.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--fixtures",
        fixtures.to_str().unwrap(),
        "--out",
        report2.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(&report).unwrap(),
        std::fs::read_to_string(&report2).unwrap()
    );
}

#[test]
fn simulate_mission_without_scene_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("fixtures")).unwrap();
    let out = culvert(&[
        "simulate-mission",
        "--fixtures",
        dir.path().join("fixtures").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn assess_with_missing_fixture_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("fixtures");
    std::fs::create_dir_all(&fixtures).unwrap();

    // Build a real enriched ROI via fuse-roi so the assess input is honest.
    let config = dir.path().join("config.toml");
    write(&config, SMALL_CONFIG);
    let model = dir.path().join("model.json");
    write(&model, r#"{"radius": 0.6, "center_yz": [0.0, 0.0]}"#);
    let proposals = dir.path().join("proposals.json");
    write(
        &proposals,
        r#"[{"box": [0.3, 0.55, 0.6, 0.8], "reason": "stain", "confidence": 1.0}]"#,
    );
    let depth = dir.path().join("depth.raw");
    {
        // 160x120 constant 1.5 m in the raw format.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&160u32.to_le_bytes());
        bytes.extend_from_slice(&120u32.to_le_bytes());
        for _ in 0..(160 * 120) {
            bytes.extend_from_slice(&1.5f32.to_le_bytes());
        }
        std::fs::write(&depth, bytes).unwrap();
    }
    let fused = dir.path().join("fused.json");
    let out = culvert(&[
        "fuse-roi",
        "--config",
        config.to_str().unwrap(),
        "--depth",
        depth.to_str().unwrap(),
        "--proposals",
        proposals.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        fused.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // plan-viewpoint accepts the fused envelope.
    let out = culvert(&[
        "plan-viewpoint",
        "--config",
        config.to_str().unwrap(),
        "--rois",
        fused.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let batch: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(batch["planned"].as_array().unwrap().len(), 1);

    // Single-ROI file for assess.
    let fused_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&fused).unwrap()).unwrap();
    let roi = dir.path().join("roi.json");
    write(&roi, &fused_json["rois"][0].to_string());

    let out = culvert(&[
        "assess",
        "--roi",
        roi.to_str().unwrap(),
        "--closeup",
        "closeup-w0-r0",
        "--fixtures",
        fixtures.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
