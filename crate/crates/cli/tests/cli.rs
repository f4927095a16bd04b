use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

fn stmha(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmha")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn platoon_of_three_solves_to_three_tracks() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(stmha(&["gen", "--preset", "platoon-3", "--out", p(&data)]).status.success());
    let solved = dir.path().join("solved.csv");
    let traj = dir.path().join("traj.csv");
    let o = stmha(&[
        "solve-pose",
        "--camera",
        p(&data.join("camera.json")),
        "--detections",
        p(&data.join("detections.csv")),
        "--pose-source",
        "file",
        "--out",
        p(&solved),
        "--trajectories",
        p(&traj),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let detections = std::fs::read_to_string(data.join("detections.csv")).unwrap();
    let rows = std::fs::read_to_string(&solved).unwrap();
    assert_eq!(detections.lines().count(), rows.lines().count());
    let traj = std::fs::read_to_string(&traj).unwrap();
    let ids: BTreeSet<&str> = traj.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ids.into_iter().collect::<Vec<_>>(), vec!["0", "1", "2"]);
    assert!(solved.with_extension("manifest.json").exists());
}

#[test]
fn truncated_detection_keeps_a_flagged_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(stmha(&["gen", "--preset", "platoon-3", "--out", p(&data)]).status.success());
    let path = data.join("detections.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut fields: Vec<String> = lines[1].split(',').map(str::to_string).collect();
    fields[2] = "-25.0".into();
    lines[1] = fields.join(",");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();

    let solved = dir.path().join("solved.csv");
    let o = stmha(&[
        "solve-pose",
        "--camera",
        p(&data.join("camera.json")),
        "--detections",
        p(&path),
        "--pose-source",
        "file",
        "--out",
        p(&solved),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = std::fs::read_to_string(&solved).unwrap();
    assert_eq!(out.lines().count(), lines.len());
    let row = out.lines().nth(1).unwrap();
    assert!(row.contains("truncated"), "{row}");
    assert!(row.starts_with(&format!("{},{},,,,", fields[0], fields[1])), "{row}");
}

#[test]
fn missing_input_exits_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = stmha(&["gen", "--scenario", p(&missing), "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.json"));
}

#[test]
fn malformed_json_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"name\": \"x\",\n  \"duration_s\": ,\n}\n").unwrap();
    let o = stmha(&["gen", "--scenario", p(&bad), "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("line 3"), "{msg}");
    assert!(msg.contains("column"), "{msg}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(stmha(&["gen"]).status.code(), Some(2));
    assert_eq!(stmha(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let o = stmha(&["gen", "--preset", "no-such-preset", "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_predict_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("d");
    let model = root.join("m");
    let config = root.join("run.json");
    std::fs::write(
        &config,
        r#"{"model": {"d_model": 16, "d_ff": 16, "lstm_hidden": 8, "layers": 1},
            "train": {"learning_rate": 0.003, "batch_size": 4, "epochs": 2}, "stride": 4}"#,
    )
    .unwrap();
    assert!(stmha(&["gen", "--preset", "lane-change", "--out", p(&data)]).status.success());
    let o = stmha(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.json", "weights.json", "windows.json", "loss.csv", "manifest.json"] {
        assert!(model.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(model.join("loss.csv")).unwrap().lines().count(), 3);

    let o = stmha(&["predict", "--model", p(&model), "--window", p(&model.join("windows.json"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("window_id,track_id,step,x,y\n"));
    assert!(csv.lines().count() > 10);

    let o = stmha(&["eval", "--model", p(&model), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rmse = std::fs::read_to_string(model.join("eval").join("rmse.csv")).unwrap();
    assert_eq!(rmse.lines().next(), Some("horizon_s,rmse"));
    assert_eq!(rmse.lines().count(), 6);
}

#[test]
fn mismatched_weights_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("d");
    let model = root.join("m");
    let config = root.join("run.json");
    std::fs::write(
        &config,
        r#"{"model": {"d_model": 16, "d_ff": 16, "lstm_hidden": 8, "layers": 1},
            "train": {"epochs": 1, "batch_size": 8}, "stride": 6}"#,
    )
    .unwrap();
    assert!(stmha(&["gen", "--preset", "platoon-3", "--out", p(&data)]).status.success());
    assert!(stmha(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&model)])
        .status
        .success());
    let model_json = model.join("model.json");
    let text = std::fs::read_to_string(&model_json).unwrap();
    std::fs::write(&model_json, text.replace("\"d_model\": 16", "\"d_model\": 32")).unwrap();
    let o = stmha(&["eval", "--model", p(&model), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("shape"), "{}", stderr(&o));
}
