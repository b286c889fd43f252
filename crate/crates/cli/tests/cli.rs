use std::path::Path;
use std::process::{Command, Output};

use dva_core::pgm::read_pgm;
use dva_core::synth::read_dataset;
use dva_core::trainer::{predict_scene, Checkpoint, TrainReport};
use tempfile::tempdir;

fn dva(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dva"))
        .args(args)
        .env_remove("DVA_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, name: &str, scenes: usize, seed: u64) -> String {
    let out = dir.join(name);
    let o = dva(&[
        "gen-data",
        "--seed",
        &seed.to_string(),
        "--scenes",
        &scenes.to_string(),
        "--boxes",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.to_str().unwrap().to_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, r#"{"epochs": 2, "n_encoders": 2, "eval_every": 1}"#).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn gen_data_is_reproducible_and_prints_its_config() {
    let dir = tempdir().unwrap();
    let a = gen(dir.path(), "a.dvas", 6, 3);
    let b = gen(dir.path(), "b.dvas", 6, 3);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_dataset(&a).unwrap().len(), 6);

    let o = dva(&["gen-data", "--scenes", "1", "--out", dir.path().join("c.dvas").to_str().unwrap()]);
    let first = stdout(&o).lines().next().unwrap().to_owned();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["command"], "gen-data");
    assert_eq!(v["resolved_config"]["boxes"], 8);
    assert_eq!(v["resolved_config"]["geometry"]["cameras"].as_array().unwrap().len(), 6);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&dva(&["gen-data", "--out", "x", "--bogus"])), 2);
    assert_eq!(code(&dva(&["no-such-command"])), 2);
    assert_eq!(code(&dva(&["bench", "--grid", "4x4"])), 2);
    assert_eq!(code(&dva(&["train", "--data", "x"])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_dva"))
        .args(["gradcheck"])
        .env("DVA_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn io_errors_exit_with_three() {
    let dir = tempdir().unwrap();
    let missing = dir.path().join("missing.dvas");
    let ckpt = dir.path().join("m.dvap");
    assert_eq!(
        code(&dva(&["train", "--data", missing.to_str().unwrap(), "--out", ckpt.to_str().unwrap()])),
        3
    );
    let junk = dir.path().join("junk.dvas");
    std::fs::write(&junk, b"DVAS\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(code(&dva(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", junk.to_str().unwrap()])), 3);
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let data = gen(dir.path(), "d.dvas", 2, 0);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"n_encoders": 0}"#).unwrap();
    let ckpt = dir.path().join("m.dvap");
    let o = dva(&["train", "--config", cfg.to_str().unwrap(), "--data", &data, "--out", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!ckpt.exists());
}

#[test]
fn gradcheck_passes_and_detects_a_sign_flip() {
    let ok = dva(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let text = stdout(&ok);
    assert!(text.contains("dva") && text.contains("pipeline") && text.contains("worst"));
    assert!(!text.contains("FAIL"));

    let bad = dva(&["gradcheck", "--inject-gd-sign-flip"]);
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn train_eval_and_dump_bev_round_trip() {
    let dir = tempdir().unwrap();
    let data = gen(dir.path(), "d.dvas", 5, 1);
    let cfg = small_config(dir.path());
    let run = |tag: &str| {
        let ckpt = dir.path().join(format!("{tag}.dvap"));
        let report = dir.path().join(format!("{tag}.json"));
        let o = dva(&[
            "train",
            "--config",
            &cfg,
            "--data",
            &data,
            "--out",
            ckpt.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
            "--method",
            "dva",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (ckpt, report, stdout(&o))
    };
    let (ckpt, report, out) = run("a");
    let (ckpt_b, report_b, _) = run("b");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&ckpt_b).unwrap());
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&report_b).unwrap());

    let parsed: TrainReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.epochs.len(), 2);
    let printed: serde_json::Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert_eq!(printed["resolved_config"], serde_json::to_value(&parsed.config).unwrap());

    let e = dva(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", &data]);
    assert_eq!(code(&e), 0);
    let json: String = stdout(&e).lines().skip(1).collect::<Vec<_>>().join("\n");
    let ev: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(ev["scenes"], 5);
    assert!(ev["bev_loss"].as_f64().unwrap().is_finite());

    let pgm = dir.path().join("bev.pgm");
    let d = dva(&["dump-bev", "--ckpt", ckpt.to_str().unwrap(), "--data", &data, "--index", "2", "--out", pgm.to_str().unwrap()]);
    assert_eq!(code(&d), 0);
    let image = read_pgm(&pgm).unwrap();
    let model = Checkpoint::load(&ckpt).unwrap();
    let scenes = read_dataset(&data).unwrap();
    let probs = predict_scene(&model, &scenes[2]).unwrap();
    assert_eq!(image.dim(), probs.dim());
    assert_eq!(image.dim(), (model.config.grid.dims[0], model.config.grid.dims[1]));
    for (a, b) in image.iter().zip(probs.iter()) {
        assert!((a - b).abs() <= 1.0 / 255.0);
    }
    let again = dir.path().join("bev2.pgm");
    dva(&["dump-bev", "--ckpt", ckpt.to_str().unwrap(), "--data", &data, "--index", "2", "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(&pgm).unwrap(), std::fs::read(&again).unwrap());

    let oob = dva(&["dump-bev", "--ckpt", ckpt.to_str().unwrap(), "--data", &data, "--index", "9", "--out", pgm.to_str().unwrap()]);
    assert_eq!(code(&oob), 2);
}

#[test]
fn bench_is_thread_count_invariant() {
    let run = |threads: &str, strategy: &str| {
        let o = dva(&[
            "bench", "--grid", "32x32x4", "--channels", "8", "--repeats", "2", "--threads", threads, "--strategy", strategy,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let json: String = stdout(&o).lines().skip(1).collect::<Vec<_>>().join("\n");
        serde_json::from_str::<serde_json::Value>(&json).unwrap()
    };
    let one = run("1", "deterministic");
    let many = run("4", "deterministic");
    assert_eq!(one["output_crc32"], many["output_crc32"]);
    assert_eq!(many["threads_used"], 4);
    assert!(one["relaxed_vs_deterministic"].as_f64().unwrap() < 1e-5);
    assert!(one["rays_per_second"].as_f64().unwrap() > 0.0);
    let relaxed = run("2", "relaxed");
    assert_eq!(relaxed["config"]["reduction"], "relaxed");
}
