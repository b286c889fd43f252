use std::path::Path;

use serde_json::json;

use dva_core::bench::{run_bench, BenchConfig};
use dva_core::fixtures::InstanceDims;
use dva_core::gradcheck::{self, GradcheckConfig, GradcheckReport};
use dva_core::synth::{generate_corpus, read_dataset, write_dataset, SceneOptions};
use dva_core::trainer::{predict_scene, Checkpoint};
use dva_core::{evaluate, pgm, train as train_model, GeometryConfig, TrainConfig};

use crate::{BenchArgs, DumpBevArgs, EvalArgs, Failure, GenDataArgs, GradcheckArgs, Precision, SizeArgs, TrainArgs};

pub fn parse_grid(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X', ',']).collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected XxYxZ, got `{s}`"))?;
    match dims[..] {
        [x, y, z] if x > 0 && y > 0 && z > 0 => Ok([x, y, z]),
        _ => Err(format!("expected three positive dimensions XxYxZ, got `{s}`")),
    }
}

fn print_config(command: &str, config: &serde_json::Value) {
    println!("{}", json!({ "command": command, "resolved_config": config }));
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn emit(report: Option<&Path>, text: &str) -> Result<(), Failure> {
    match report {
        Some(p) => write_text(p, text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let geometry = match &a.geometry {
        Some(p) => GeometryConfig::from_json(&read_text(p)?)?,
        None => GeometryConfig::default_surround(),
    };
    let opts = SceneOptions {
        n_boxes: a.boxes,
        max_translation: a.max_translation,
        max_yaw: a.max_yaw,
    };
    print_config(
        "gen-data",
        &json!({
            "seed": a.seed,
            "scenes": a.scenes,
            "boxes": a.boxes,
            "max_translation": a.max_translation,
            "max_yaw": a.max_yaw,
            "out": a.out,
            "geometry": geometry,
        }),
    );
    let scenes = generate_corpus(a.seed, a.scenes, &opts, &geometry.rig()?, &geometry.grid()?)?;
    write_dataset(&a.out, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::from_json(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.method {
        config.method = m;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(n) = a.n_encoders {
        config.n_encoders = n;
    }
    config.validate()?;
    print_config("train", &serde_json::to_value(&config).expect("config serializes"));
    let scenes = read_dataset(&a.data)?;
    let outcome = train_model(&config, &scenes)?;
    outcome.checkpoint.save(&a.out)?;
    emit(a.report.as_deref(), &outcome.report.to_json())?;
    if let Some(f) = &outcome.report.final_eval {
        eprintln!("final eval: bev_loss {:.6} iou {:.4}", f.bev_loss, f.iou);
    }
    outcome.check()?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    print_config("eval", &json!({ "ckpt": a.ckpt, "data": a.data }));
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let scenes = read_dataset(&a.data)?;
    let report = evaluate(&ckpt, &scenes)?;
    emit(
        a.report.as_deref(),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )
}

fn dims_with(base: InstanceDims, s: &SizeArgs) -> InstanceDims {
    InstanceDims {
        cameras: s.cameras.unwrap_or(base.cameras),
        height: s.height.unwrap_or(base.height),
        width: s.width.unwrap_or(base.width),
        bins: s.bins.unwrap_or(base.bins),
        grid: s.grid.unwrap_or(base.grid),
        channels: s.channels.unwrap_or(base.channels),
    }
}

fn check_dims(d: &InstanceDims) -> Result<(), Failure> {
    let all = [d.cameras, d.height, d.width, d.bins, d.channels, d.grid[0], d.grid[1], d.grid[2]];
    if all.contains(&0) {
        return Err(Failure::Usage("every size must be positive".into()));
    }
    Ok(())
}

fn print_gradcheck(r: &GradcheckReport) {
    for c in &r.checks {
        println!(
            "{:<24} {:<34} n={:<6} max_rel={:.3e} max_abs={:.3e} tol={:.0e} {}",
            c.suite,
            c.tensor,
            c.entries,
            c.max_rel_error,
            c.max_abs_error,
            c.threshold,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("precision {} worst relative error {:.3e}", r.precision, r.worst());
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let cfg = GradcheckConfig {
        dims: dims_with(InstanceDims::tiny(), &a.sizes),
        seed: a.seed,
        step: a.step,
        inject_gd_sign_flip: a.inject_gd_sign_flip,
    };
    check_dims(&cfg.dims)?;
    if !(cfg.step.is_finite() && cfg.step > 0.0) {
        return Err(Failure::Usage("step must be positive".into()));
    }
    print_config("gradcheck", &json!({ "config": cfg, "mode": format!("{:?}", a.mode).to_lowercase() }));
    let report = match a.mode {
        Precision::F64 => gradcheck::run::<f64>(&cfg)?,
        Precision::F32 => gradcheck::run::<f32>(&cfg)?,
    };
    print_gradcheck(&report);
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed()).count();
        Err(Failure::Check(format!("{failed} tensor(s) exceed their tolerance")))
    }
}

pub fn bench(a: BenchArgs, env_threads: Option<usize>) -> Result<(), Failure> {
    let mut cfg = BenchConfig::from_dims(dims_with(InstanceDims::half_setting(), &a.sizes));
    check_dims(&cfg.dims())?;
    cfg.reduction = a.strategy;
    cfg.threads = a.threads.or(env_threads).unwrap_or(1);
    cfg.repeats = a.repeats;
    cfg.seed = a.seed;
    print_config("bench", &serde_json::to_value(cfg).expect("config serializes"));
    let report = run_bench(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

pub fn dump_bev(a: DumpBevArgs) -> Result<(), Failure> {
    print_config(
        "dump-bev",
        &json!({ "ckpt": a.ckpt, "data": a.data, "index": a.index, "out": a.out }),
    );
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let scenes = read_dataset(&a.data)?;
    let scene = scenes
        .get(a.index)
        .ok_or_else(|| Failure::Usage(format!("index {} out of range ({} scenes)", a.index, scenes.len())))?;
    let probs = predict_scene(&ckpt, scene)?;
    pgm::write_pgm(&a.out, &probs)?;
    let (x, y) = probs.dim();
    println!("wrote {x}x{y} map to {}", a.out.display());
    Ok(())
}
