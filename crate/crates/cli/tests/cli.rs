use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use utg_core::dataset::encode_idx_images;
use utg_core::fixtures::{house_sales_schema, synthetic_house_sales, to_csv, two_pattern_images};
use utg_core::pipeline::{read_jsonl, to_u8};

fn utg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_utg"))
        .args(args)
        .env_remove("UTG_STORE")
        .output()
        .expect("run utg")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn houses(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("houses.csv");
    let schema = dir.join("houses.schema.json");
    std::fs::write(&data, to_csv(&synthetic_house_sales(300, 5))).unwrap();
    std::fs::write(&schema, house_sales_schema().to_json_pretty()).unwrap();
    (data, schema)
}

fn train_small_vae(dir: &Path, out: &str) -> (Output, PathBuf) {
    let (data, schema) = houses(dir);
    let model = dir.join(out);
    let o = utg(&[
        "train", "vae", "--data", s(&data), "--schema", s(&schema), "--latent-dim", "4", "--hidden", "16",
        "--epochs", "3", "--seed", "42", "--out", s(&model),
    ]);
    (o, model)
}

fn pattern_idx(dir: &Path) -> PathBuf {
    let ds = two_pattern_images(64, 3);
    let bytes: Vec<u8> = ds.pixels.iter().map(|&p| to_u8(p)).collect();
    let path = dir.join("patterns-idx3-ubyte");
    std::fs::write(&path, encode_idx_images(ds.len(), ds.height, ds.width, &bytes)).unwrap();
    path
}

fn train_small_image_models(dir: &Path) -> (PathBuf, PathBuf) {
    let images = pattern_idx(dir);
    let vq = dir.join("vq.utgm");
    let prior = dir.join("p.utgm");
    let o = utg(&[
        "train", "vqvae", "--images", s(&images), "--codebook-size", "8", "--code-dim", "4", "--channels", "4,8",
        "--epochs", "2", "--seed", "1", "--out", s(&vq),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = utg(&[
        "train", "prior", "--vq", s(&vq), "--layers", "3", "--channels", "8", "--first-kernel", "3", "--epochs",
        "2", "--seed", "2", "--out", s(&prior),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (vq, prior)
}

#[test]
fn train_vae_writes_model_loss_and_run_config_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (o, model) = train_small_vae(dir.path(), "m.utgm");
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["m.utgm", "m.loss.json", "m.run.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let loss: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("m.loss.json")).unwrap()).unwrap();
    assert_eq!(loss["loss"].as_array().unwrap().len(), 4);

    let (o, again) = train_small_vae(dir.path(), "m2.utgm");
    assert!(o.status.success());
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());

    // Re-running from the written config, with only the output redirected,
    // reproduces the model.
    let third = dir.path().join("m3.utgm");
    let o = utg(&["train", "vae", "--config", s(&dir.path().join("m.run.json")), "--out", s(&third)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&third).unwrap());
}

#[test]
fn config_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = houses(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        serde_json::json!({ "data": data, "schema": schema, "latent_dim": 3, "epochs": 1, "hidden": [8], "seed": 1 })
            .to_string(),
    )
    .unwrap();
    let out = dir.path().join("m.utgm");
    let o = utg(&["train", "vae", "--config", s(&cfg), "--latent-dim", "5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("m.run.json")).unwrap()).unwrap();
    assert_eq!(run["latent_dim"], 5);
    assert_eq!(run["epochs"], 1);
    assert_eq!(run["seed"], 1);
}

#[test]
fn missing_schema_exits_one_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = houses(dir.path());
    let o = utg(&[
        "train", "vae", "--data", s(&data), "--schema", "no-such.schema.json", "--out", s(&dir.path().join("m.utgm")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no-such.schema.json"), "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = houses(dir.path());
    let o = utg(&[
        "train", "vae", "--data", s(&data), "--schema", s(&schema), "--lr", "1e30", "--epochs", "5", "--seed", "0",
        "--out", s(&dir.path().join("m.utgm")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(utg(&["train", "vae", "--bogus"]).status.code(), Some(1));
    assert_eq!(utg(&[]).status.code(), Some(1));
    assert_eq!(utg(&["--help"]).status.code(), Some(0));
}

#[test]
fn generate_tabular_writes_records_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let (o, model) = train_small_vae(dir.path(), "m.utgm");
    assert!(o.status.success());
    let out = dir.path().join("lu");
    let o = utg(&[
        "generate", "--model", s(&model), "--mu-u", "5", "--sigma-u", "5", "--n", "100", "--seed", "7", "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_jsonl(&out.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 100);
    assert!(records.iter().all(|r| r.model_ref == s(&model)));
    let csv = std::fs::read_to_string(out.join("records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 14);

    let again = dir.path().join("lu2");
    let o = utg(&["generate", "--config", s(&out.join("run.json")), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("records.jsonl")).unwrap(),
        std::fs::read(again.join("records.jsonl")).unwrap()
    );
}

#[test]
fn generate_zero_records_is_empty_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = train_small_vae(dir.path(), "m.utgm");
    let out = dir.path().join("none");
    let o = utg(&["generate", "--model", s(&model), "--n", "0", "--seed", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("records.jsonl")).unwrap().len(), 0);
}

#[test]
fn generate_rejects_mismatched_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = train_small_vae(dir.path(), "m.utgm");
    let o = utg(&["generate", "--model", s(&model), "--t", "0.5", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = utg(&["generate", "--vq", s(&model), "--prior", s(&model), "--out", s(&dir.path().join("y"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("vae model"), "{}", stderr(&o));
}

#[test]
fn image_generation_and_threshold_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let (vq, prior) = train_small_image_models(dir.path());
    let out = dir.path().join("lu_img");
    let o = utg(&[
        "generate", "--vq", s(&vq), "--prior", s(&prior), "--t", "0.6", "--n", "10", "--seed", "3", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".png"))
        .count();
    assert_eq!(pngs, 11, "ten samples plus grid.png");
    let img = image::open(out.join("0000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (8, 8));

    let sweep = dir.path().join("sweep");
    let o = utg(&[
        "sweep", "--param", "t", "--from", "1.0", "--to", "0.2", "--steps", "5", "--vq", s(&vq), "--prior",
        s(&prior), "--n", "4", "--seed", "1", "--out", s(&sweep),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..5 {
        assert!(sweep.join(format!("p{i:02}")).join("records.jsonl").exists());
    }
    assert!(!sweep.join("p05").exists());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(sweep.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["points"].as_array().unwrap().len(), 5);
    let strip = image::open(sweep.join("strip.png")).unwrap();
    assert_eq!(strip.width(), 5 * 10 + 2);
}

#[test]
fn sweep_grid_rules() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = train_small_vae(dir.path(), "m.utgm");
    let run = |extra: &[&str], out: &str| {
        let out = dir.path().join(out);
        let mut args = vec!["sweep", "--param", "s", "--model", s(&model), "--mu-u", "5", "--sigma-u", "5"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--n", "5", "--seed", "1", "--out"]);
        let out_s = out.to_str().unwrap().to_owned();
        args.push(&out_s);
        (utg(&args), out)
    };
    let (o, out) = run(&["--from", "1", "--to", "1", "--steps", "1"], "single");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("p00").exists() && !out.join("p01").exists());

    let (o, out) = run(&["--from", "2", "--to", "0", "--steps", "5"], "down");
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["grid"], serde_json::json!([2.0, 1.5, 1.0, 0.5, 0.0]));

    let (o, _) = run(&["--grid", "0,1,0.5"], "bad");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("monotone"), "{}", stderr(&o));

    let o = utg(&["sweep", "--param", "t", "--from", "1", "--to", "0.5", "--steps", "2", "--model", s(&model), "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_records_to_csv_and_png() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = train_small_vae(dir.path(), "m.utgm");
    let out = dir.path().join("lu");
    assert!(utg(&["generate", "--model", s(&model), "--n", "12", "--seed", "2", "--out", s(&out)]).status.success());
    let csv = dir.path().join("out.csv");
    let o = utg(&["export", "--records", s(&out.join("records.jsonl")), "--format", "csv", "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(&csv).unwrap(),
        std::fs::read(out.join("records.csv")).unwrap(),
        "schema recovered from the referenced model"
    );
    let png_dir = dir.path().join("png");
    let o = utg(&["export", "--records", s(&out.join("records.jsonl")), "--format", "png", "--out", s(&png_dir)]);
    assert_eq!(o.status.code(), Some(1), "tabular records have no image");
}

#[test]
fn ingest_summarizes_tables_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = houses(dir.path());
    let o = utg(&["ingest", "--data", s(&data), "--schema", s(&schema)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["rows"], 300);
    assert_eq!(v["columns"].as_array().unwrap().len(), 14);

    let images = pattern_idx(dir.path());
    let o = utg(&["ingest", "--images", s(&images)]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((v["count"].as_u64(), v["height"].as_u64()), (Some(64), Some(8)));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "bedrooms\n1\n").unwrap();
    let o = utg(&["ingest", "--data", s(&bad), "--schema", s(&schema)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.csv"), "{}", stderr(&o));
}

#[test]
fn synth_houses_writes_csv_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = utg(&["synth", "houses", "--n", "50", "--out", s(dir.path())]);
    assert!(o.status.success());
    let o = utg(&[
        "ingest", "--data", s(&dir.path().join("houses.csv")), "--schema", s(&dir.path().join("houses.schema.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

struct Server {
    child: std::process::Child,
    url: String,
}

fn spawn_server(store: &Path, port: u16) -> Server {
    let mut child = Command::new(env!("CARGO_BIN_EXE_utg"))
        .args(["serve", "--port", &port.to_string()])
        .env("UTG_STORE", store)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("address line").to_owned();
    Server { child, url }
}

fn terminate(mut server: Server) -> Option<i32> {
    Command::new("kill").args(["-TERM", &server.child.id().to_string()]).status().unwrap();
    for _ in 0..100 {
        if let Some(status) = server.child.try_wait().unwrap() {
            return status.code();
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    server.child.kill().unwrap();
    None
}

#[test]
fn serve_answers_health_rejects_busy_port_and_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("sessions");
    let server = spawn_server(&store, 0);
    let client = reqwest::blocking::Client::new();
    let health: serde_json::Value = client.get(format!("{}/healthz", server.url)).send().unwrap().json().unwrap();
    assert_eq!(health["status"], "ok");
    assert!(store.join("sessions").exists());

    let port = server.url.rsplit(':').next().unwrap();
    let o = utg(&["serve", "--port", port, "--store", s(&dir.path().join("other"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bind"), "{}", stderr(&o));

    assert_eq!(terminate(server), Some(0));
}
