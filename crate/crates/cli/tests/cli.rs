use evbridge_core::io::{load_histogram, load_pgm, load_vector_field, save_pgm, save_vector_field};
use evbridge_core::losses::{compose_losses, LossParts};
use evbridge_core::{
    count_events, log_intensity_change, log_transform, spatial_gradient, ContrastThreshold,
    EventHistogram, ScalarField, VectorField,
};
use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

fn evbridge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evbridge"))
        .args(args)
        .env_remove("EVBRIDGE_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_ramp(dir: &Path) -> std::path::PathBuf {
    let (w, h) = (12, 9);
    let data = (0..w * h)
        .map(|i| 0.1 + 0.8 * ((i % w) as f64 + (i / w) as f64) / (w + h) as f64)
        .collect();
    let path = dir.join("ramp.pgm");
    save_pgm(&path, &ScalarField::new(w, h, data).unwrap()).unwrap();
    path
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{"image_size": 16, "train_scenes": 8, "test_scenes": 8, "batch_size": 2, "iterations": 2}"#,
    )
    .unwrap();
    path
}

#[test]
fn translate_matches_the_event_model_and_reports_the_default_contrast() {
    let dir = TempDir::new().unwrap();
    let img_path = write_ramp(dir.path());
    let img = load_pgm(&img_path).unwrap();
    let flow = VectorField::new(12, 9, vec![1.5; 108], vec![-0.5; 108]).unwrap();
    let flow_prefix = dir.path().join("flow");
    save_vector_field(&flow_prefix, &flow).unwrap();
    let out = dir.path().join("ev");
    let o = evbridge(&[
        "translate",
        "--image",
        p(&img_path),
        "--flow",
        p(&flow_prefix),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("0.2"), "{}", stderr(&o));

    let grad = spatial_gradient(&log_transform(&img, 1e-3).unwrap()).unwrap();
    let dlog = log_intensity_change(&grad, &flow, 1.0).unwrap();
    let expect = EventHistogram::from_signed_count(&count_events(
        &dlog,
        ContrastThreshold::new(0.2).unwrap(),
    ));
    assert_eq!(load_histogram(&out).unwrap(), expect);
    assert!(dir.path().join("ev_preview.pgm").exists());

    let o = evbridge(&[
        "translate",
        "--image",
        p(&img_path),
        "--flow",
        p(&flow_prefix),
        "--contrast",
        "0.1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert!(!stderr(&o).contains("not given"));
    assert!(load_histogram(&out).unwrap().total() > expect.total());
}

#[test]
fn translate_samples_a_flow_from_an_inline_spec() {
    let dir = TempDir::new().unwrap();
    let img_path = write_ramp(dir.path());
    let out = dir.path().join("s");
    let spec = r#"{"kind": "translational", "seed": 3, "magnitude_range": [1.0, 2.0]}"#;
    let args = [
        "translate",
        "--image",
        p(&img_path),
        "--sample-flow",
        spec,
        "--contrast",
        "0.2",
        "--out",
        p(&out),
    ];
    assert_eq!(code(&evbridge(&args)), 0);
    let a = load_histogram(&out).unwrap();
    assert_eq!(code(&evbridge(&args)), 0);
    assert_eq!(load_histogram(&out).unwrap(), a);
    assert!(a.total() > 0.0);
}

#[test]
fn bad_inputs_exit_with_one_and_bad_usage_with_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.pgm");
    let o = evbridge(&[
        "translate",
        "--image",
        p(&missing),
        "--flow",
        "x",
        "--out",
        "y",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.pgm"));
    assert_eq!(code(&evbridge(&["translate", "--bogus"])), 2);
    assert_eq!(code(&evbridge(&["oracle-check", "--scene", "spiral"])), 2);
    assert_eq!(
        code(&evbridge(&[
            "oracle-check",
            "--scene",
            "ramp",
            "--motion",
            "1"
        ])),
        2
    );
    let img = write_ramp(dir.path());
    let bad_spec = r#"{"kind": "translational", "seed": 3, "magnitude_range": [2.0, 1.0]}"#;
    let o = evbridge(&[
        "translate",
        "--image",
        p(&img),
        "--sample-flow",
        bad_spec,
        "--out",
        "z",
    ]);
    assert_eq!(code(&o), 1);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"image_size": 12}"#).unwrap();
    assert_eq!(
        code(&evbridge(&[
            "make-data",
            "--config",
            p(&cfg),
            "--out",
            p(dir.path())
        ])),
        1
    );
}

#[test]
fn oracle_check_passes_on_every_scene() {
    for scene in ["ramp", "step", "bar"] {
        let o = evbridge(&[
            "oracle-check",
            "--scene",
            scene,
            "--motion",
            "-1,0.5",
            "--contrast",
            "0.2",
        ]);
        assert_eq!(code(&o), 0, "{scene}: {}{}", stdout(&o), stderr(&o));
        assert!(stdout(&o).contains("PASS"));
    }
}

#[test]
fn augment_keeps_magnitudes_and_takes_directions() {
    let dir = TempDir::new().unwrap();
    let flow = VectorField::new(
        3,
        2,
        vec![3.0, 0.0, -1.0, 0.5, 2.0, 0.0],
        vec![4.0, 0.0, 1.0, 0.5, 0.0, -2.0],
    )
    .unwrap();
    let dirs = VectorField::new(
        3,
        2,
        vec![0.0, 1.0, 1.0, -1.0, 0.0, 2.0],
        vec![1.0, 1.0, 0.0, 0.0, -3.0, 0.0],
    )
    .unwrap();
    save_vector_field(&dir.path().join("f"), &flow).unwrap();
    save_vector_field(&dir.path().join("d"), &dirs).unwrap();
    let out = dir.path().join("a");
    let o = evbridge(&[
        "augment",
        "--flow",
        p(&dir.path().join("f")),
        "--dirs",
        p(&dir.path().join("d")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = load_vector_field(&out).unwrap();
    // PFM stores single precision
    let expect_u = [0.0, 0.0, 2f64.sqrt(), -(0.5f64.sqrt()), 0.0, 2.0];
    let expect_v = [5.0, 0.0, 0.0, 0.0, -2.0, 0.0];
    for (got, want) in a.u().iter().zip(expect_u).chain(a.v().iter().zip(expect_v)) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn losses_accepts_consistent_reports_and_rejects_tampered_ones() {
    let dir = TempDir::new().unwrap();
    let parts = LossParts {
        lat_gen: 0.5,
        recons_gen: 1.0,
        cycle: 0.25,
        augm: 0.125,
        task: 2.0,
        ..LossParts::default()
    };
    let line = serde_json::to_string(&compose_losses(parts).unwrap()).unwrap();
    let log = dir.path().join("losses.jsonl");
    std::fs::write(&log, format!("{line}\n{line}\n")).unwrap();
    let o = evbridge(&["losses", "--report", p(&log)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("2 reports"));

    let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
    v["composite_gen"] = serde_json::json!(3.0);
    std::fs::write(&log, format!("{line}\n{v}\n")).unwrap();
    let o = evbridge(&["losses", "--report", p(&log)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
}

#[test]
fn make_data_train_and_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let o = evbridge(&["make-data", "--config", p(&cfg), "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let labels = std::fs::read_to_string(data.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 8 + 8);
    assert!(data.join("image_00000.pgm").exists());
    assert!(data.join("events_00008_pos.pfm").exists());

    let run = dir.path().join("run");
    let o = evbridge(&[
        "train",
        "--config",
        p(&cfg),
        "--seed",
        "3",
        "--out",
        p(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["model.evbr", "losses.jsonl", "metrics.json", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seed"], 3);
    assert_eq!(metrics["gen_steps"], 2);
    let o = evbridge(&["losses", "--report", p(&run.join("losses.jsonl"))]);
    assert_eq!(code(&o), 0);

    let ckpt = run.join("model.evbr");
    let o = evbridge(&["eval", "--config", p(&cfg), "--ckpt", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("accuracy "));

    let img = data.join("image_00000.pgm");
    let out = dir.path().join("refined");
    let spec = r#"{"kind": "translational", "seed": 1, "magnitude_range": [1.0, 1.0]}"#;
    let o = evbridge(&[
        "translate",
        "--config",
        p(&cfg),
        "--image",
        p(&img),
        "--sample-flow",
        spec,
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_histogram(&out).unwrap().width(), 16);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_evbridge"))
        .args([
            "train",
            "--config",
            p(&cfg),
            "--out",
            p(&run),
            "--iterations",
            "1",
        ])
        .env("EVBRIDGE_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = std::fs::read_to_string(run.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"seed\": 42"));
}

#[test]
fn grad_check_prints_every_primitive_and_the_pipeline() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let o = evbridge(&["grad-check", "--config", p(&cfg), "--points", "2"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    for name in [
        "conv2d",
        "charbonnier_smoothness",
        "pipeline (generator)",
        "pipeline (discriminator)",
    ] {
        assert!(out.contains(name), "{name} missing from\n{out}");
    }
}
