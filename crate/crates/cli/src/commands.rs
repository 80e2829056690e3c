use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use opir::ablate::{ablate, parse_variants, TABLE_VARIANTS};
use opir::bench::{bench, parse_size, to_csv, write_csv};
use opir::checkpoint::{config_to_kv, Checkpoint, INDEX_NAME};
use opir::dataset::{generate, GenConfig, Manifest, TaskSelection};
use opir::degrade::DegradationKind;
use opir::eval::evaluate;
use opir::io::{load_image, save_image, save_tensor};
use opir::kernel::ScaleSet;
use opir::metrics::ChannelMode;
use opir::param::Parameters;
use opir::tensor_io::is_raw_tensor;
use opir::trainer::{mean_present, train, TrainConfig};
use opir::Image;

use crate::{AblateArgs, BenchArgs, Command, EvalArgs, GenArgs, InspectArgs, RestoreArgs, TrainArgs};

/// Exit 1 for bad flags or values, 2 for everything that fails at run time.
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<opir::Error> for Failure {
    fn from(e: opir::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

/// Prints the resolved settings of a command before it runs.
fn echo(command: &str, fields: &[(&str, String)]) {
    println!("[{command}]");
    for (k, v) in fields {
        println!("{k} = {v}");
    }
}

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Restore(a) => restore(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn gen(a: GenArgs) -> Outcome {
    if a.count <= 0 {
        return Err(Failure::Usage(format!("--count must be positive, got {}", a.count)));
    }
    let task = usage(TaskSelection::parse(&a.task))?;
    let (height, width) = usage(parse_size(&a.size))?;
    let cfg = GenConfig {
        task,
        count: a.count as usize,
        height,
        width,
        seed: a.seed,
        gain_only: a.gain_only,
        clean_dir: a.clean.clone(),
    };
    if a.gain_only && task != TaskSelection::One(DegradationKind::Rain) {
        return Err(Failure::Usage("--gain-only requires --task rain".into()));
    }
    echo(
        "gen",
        &[
            ("task", a.task.clone()),
            ("count", cfg.count.to_string()),
            ("size", format!("{height}x{width}")),
            ("seed", a.seed.to_string()),
            ("out", a.out.display().to_string()),
            ("clean", a.clean.as_ref().map_or("procedural".into(), |p| p.display().to_string())),
            ("gain_only", a.gain_only.to_string()),
        ],
    );
    let m = generate(&cfg, &a.out)?;
    println!("wrote {} records to {}", m.records.len(), a.out.display());
    Ok(())
}

fn load_train_config(path: &Path) -> Result<TrainConfig, Failure> {
    if !path.exists() {
        return Err(Failure::Runtime(anyhow!("config {} not found", path.display())));
    }
    TrainConfig::load(path).map_err(|e| match e {
        opir::Error::Io { .. } => Failure::Runtime(e.into()),
        other => Failure::Usage(other.to_string()),
    })
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let cfg = load_train_config(&a.config)?;
    println!("[train]");
    print!("{}", cfg.to_text());
    if let Some(r) = &a.resume {
        println!("resume = {}", r.display());
    }
    let out = train(&cfg, a.resume.as_deref())?;
    let fmt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.3}"));
    println!(
        "trained {} steps; probe PSNR {} dB (input {} dB); checkpoint {}; log {}",
        out.steps,
        fmt(mean_present(&out.final_probe)),
        fmt(mean_present(&out.input_probe)),
        out.final_checkpoint.display(),
        out.log_path.display()
    );
    Ok(())
}

fn parse_task(s: &str) -> Result<usize, Failure> {
    match s.parse::<usize>() {
        Ok(id) => usage(DegradationKind::from_task_id(id)).map(|k| k.task_id()),
        Err(_) => usage(DegradationKind::parse(s)).map(|k| k.task_id()),
    }
}

/// Grayscale view scaled so the largest value maps to white.
fn normalized(um: &Image<f32>) -> Image<f32> {
    let max = um.data().iter().fold(0.0f32, |m, &v| m.max(v));
    if max > 0.0 {
        um.map(|v| v / max)
    } else {
        um.clone()
    }
}

fn restore(a: RestoreArgs) -> Outcome {
    let task = parse_task(&a.task)?;
    echo(
        "restore",
        &[
            ("ckpt", a.ckpt.display().to_string()),
            ("task", task.to_string()),
            ("in", a.input.display().to_string()),
            ("out", a.output.display().to_string()),
            ("dump_intermediates", a.dump_intermediates.as_ref().map_or("-".into(), |p| p.display().to_string())),
        ],
    );
    let ck = Checkpoint::load(&a.ckpt)?;
    let img = load_image(&a.input)?;
    let pass = ck.model.forward(&img, task)?;
    write_image(pass.final_output(), &a.output)?;
    if let Some(dir) = &a.dump_intermediates {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let um = pass.uncertainty().to_image();
        save_image(pass.j1(), dir.join("stage1.png"))?;
        save_image(&normalized(&um), dir.join("uncertainty.png"))?;
        save_tensor(&um, dir.join("uncertainty.tensor"))?;
        save_tensor(&pass.stage1.cache.kernels.to_image(), dir.join("kernels_stage1.tensor"))?;
        if let Some(s2) = &pass.stage2 {
            save_tensor(&s2.cache.kernels.to_image(), dir.join("kernels_stage2.tensor"))?;
        }
    }
    println!("wrote {}", a.output.display());
    Ok(())
}

/// PNG unless the path ends in `.tensor`.
fn write_image(img: &Image<f32>, path: &Path) -> opir::Result<()> {
    if path.extension().is_some_and(|e| e == "tensor") {
        save_tensor(img, path)
    } else {
        save_image(img, path)
    }
}

fn eval(a: EvalArgs) -> Outcome {
    let mode = match a.mode.as_str() {
        "auto" => None,
        m => Some(usage(ChannelMode::parse(m))?),
    };
    echo(
        "eval",
        &[
            ("ckpt", a.ckpt.display().to_string()),
            ("manifest", a.manifest.display().to_string()),
            ("mode", a.mode.clone()),
            ("report", a.report.display().to_string()),
        ],
    );
    let ck = Checkpoint::load(&a.ckpt)?;
    let manifest = Manifest::load(&a.manifest)?;
    let report = evaluate(&manifest, &ck.model, mode)?;
    report.write_csv(&a.report)?;
    println!(
        "{} images: mean PSNR {} dB, mean SSIM {:.4}",
        report.rows.len(),
        opir::metrics::format_psnr(report.mean_psnr),
        report.mean_ssim
    );
    Ok(())
}

fn inspect(a: InspectArgs) -> Outcome {
    let p = &a.path;
    echo("inspect", &[("path", p.display().to_string())]);
    if p.is_dir() && p.join(INDEX_NAME).exists() {
        let ck = Checkpoint::load(p)?;
        println!("checkpoint: step {} lr {:e} adam_t {}", ck.step, ck.lr, ck.adam.t);
        println!("config: {}", config_to_kv(&ck.model.config));
        println!("variant: {}", ck.model.config.variant);
        for (name, t) in ck.model.tensors() {
            let norm = t.data.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            println!("  {name} {:?} norm {norm:.6}", t.shape);
        }
        println!("parameters: {}", ck.model.num_scalars());
    } else if p.extension().is_some_and(|e| e == "jsonl") {
        let m = Manifest::load(p)?;
        println!("manifest: {} records", m.records.len());
        for k in DegradationKind::ALL {
            println!("  {} (task {}): {}", k.name(), k.task_id(), m.for_task(k.task_id()).len());
        }
    } else if p.is_file() {
        let img = load_image(p)?;
        let (h, w, c) = img.dims();
        let d = img.data();
        let (lo, hi) = d.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        let kind = if is_raw_tensor(p) { "tensor" } else { "png" };
        println!("{kind}: {h}x{w}x{c} min {lo} max {hi} mean {mean:.6}");
    } else {
        return Err(Failure::Runtime(anyhow!("{} is not a checkpoint, manifest, tensor, or PNG", p.display())));
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Outcome {
    let sizes = usage(a.sizes.split(',').map(parse_size).collect::<Result<Vec<_>, _>>())?;
    let sets = usage(a.scales.split(';').map(ScaleSet::parse).collect::<Result<Vec<_>, _>>())?;
    if a.reps == 0 {
        return Err(Failure::Usage("--reps must be positive".into()));
    }
    echo(
        "bench",
        &[
            ("sizes", a.sizes.clone()),
            ("scales", a.scales.clone()),
            ("reps", a.reps.to_string()),
            ("seed", a.seed.to_string()),
            ("report", a.report.as_ref().map_or("-".into(), |p| p.display().to_string())),
        ],
    );
    let rows = bench(&sizes, &sets, a.reps, a.seed)?;
    print!("{}", to_csv(&rows));
    if let Some(path) = &a.report {
        write_csv(&rows, path)?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Outcome {
    let cfg = load_train_config(&a.config)?;
    let list = a.variants.clone().unwrap_or_else(|| TABLE_VARIANTS.join(","));
    let variants = usage(parse_variants(&list))?;
    let report_path: PathBuf = a.report.clone().unwrap_or_else(|| cfg.out_dir.join("ablation.csv"));
    println!("[ablate]");
    print!("{}", cfg.to_text());
    println!("variants = {list}");
    println!("report = {}", report_path.display());
    let report = ablate(&cfg, &variants)?;
    if let Some(parent) = report_path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    report.write_csv(&report_path)?;
    print!("{}", report.to_csv());
    Ok(())
}
