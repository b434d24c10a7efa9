use std::path::Path;
use std::process::{Command, Output};

fn tubemil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tubemil"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_data(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--num-clips",
        "4",
        "--frames-per-clip",
        "128",
    ];
    args.extend_from_slice(extra);
    tubemil(&args)
}

/// `violation_rate=` field of the gen-data summary line.
fn violation(o: &Output) -> f64 {
    let text = stdout(o);
    let field = text
        .split_whitespace()
        .find_map(|f| f.strip_prefix("violation_rate="))
        .unwrap();
    field.parse().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(tubemil(&["--help"]).status.code(), Some(0));
    assert_eq!(tubemil(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(tubemil(&["gen-data"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    assert_eq!(small_data(&data, &["--fn-rate", "1.5"]).status.code(), Some(1));
    let missing = dir.path().join("missing.jsonl");
    let model = dir.path().join("m.json");
    let o = tubemil(&[
        "train",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[data\nnum_clips = ").unwrap();
    assert_eq!(
        small_data(&data, &["--config", bad.to_str().unwrap()]).status.code(),
        Some(1)
    );
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let model = dir.path().join("m.json");
    let result = dir.path().join("r.json");
    let o = small_data(&data, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("clips=4 "));

    let o = tubemil(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--epochs",
        "5",
        "--method",
        "mil-max+uncertainty",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epochs=5"));

    let o = tubemil(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("Frame AP") && stdout(&o).contains("Video AP"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&result).unwrap()).unwrap();
    assert_eq!(json["video_ap"]["thresholds"].as_array().unwrap().len(), 2);
    assert_eq!(json["frame_ap"]["thresholds"][0]["iou"], 0.5);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    small_data(&a, &["--data-seed", "3"]);
    small_data(&b, &["--data-seed", "3"]);
    small_data(&c, &["--data-seed", "4"]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[data]\nnum_clips = 2\n").unwrap();
    let o = small_data(&dir.path().join("d"), &["--config", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("clips=2 "), "{}", stdout(&o));
}

#[test]
fn violation_rate_grows_with_false_negatives() {
    let dir = tempfile::tempdir().unwrap();
    let rates: Vec<f64> = ["0.0", "0.2", "0.4", "0.6", "0.8"]
        .iter()
        .map(|fnr| {
            let o = tubemil(&[
                "gen-data",
                "--out",
                dir.path().join("d").to_str().unwrap(),
                "--num-clips",
                "20",
                "--fp-rate",
                "0",
                "--fn-rate",
                fnr,
                "--window",
                "1",
            ]);
            assert!(o.status.success());
            violation(&o)
        })
        .collect();
    assert!(rates.windows(2).all(|w| w[1] >= w[0]), "{rates:?}");
    assert!(rates[4] > rates[0]);
}
