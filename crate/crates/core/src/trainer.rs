//! Training loop: mixed-task patch sampling, Adam with cosine annealing,
//! CSV logging, checkpoints, and bit-exact resumption.
//!
//! Every random draw of step `k` comes from its own stream derived from
//! `(seed, k)`, so resuming from a checkpoint at step `k` replays the exact
//! batches an uninterrupted run would have seen.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::dataset::Manifest;
use crate::degrade::DegradationKind;
use crate::error::{Error, Result};
use crate::eval::default_mode;
use crate::image::{crop_patch, flip_h, flip_v, Image};
use crate::io::save_tensor;
use crate::kernel::ScaleSet;
use crate::losses::{total_loss, LossWeights};
use crate::metrics::format_psnr;
use crate::model::{Model, ModelConfig, Variant};
use crate::optim::{clip_global_norm, cosine_lr, LR_MIN, LR_START};
use crate::param::Parameters;
use crate::rng::Rng;

pub const LOG_HEADER: &str = "step,lr,loss_c,loss_e,loss_f,loss_total,psnr_rain,psnr_snow,psnr_haze";
pub const LOG_NAME: &str = "log.csv";
pub const FINAL_NAME: &str = "final";
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Consecutive non-finite steps before training aborts.
pub const MAX_BAD_STEPS: usize = 3;
const BATCH_STREAM: u64 = 1 << 32;

/// One entry of the task mix.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSource {
    pub kind: DegradationKind,
    pub manifest: PathBuf,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub lr_start: f64,
    pub lr_min: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Records held out per task for the probe PSNR columns.
    pub probe_count: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub tasks: Vec<TaskSource>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 4,
            patch_size: 64,
            seed: 0,
            lr_start: LR_START,
            lr_min: LR_MIN,
            checkpoint_every: 0,
            log_every: 50,
            probe_count: 4,
            clip_norm: 1.0,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            tasks: Vec::new(),
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse_val<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("bad value for {key}: '{v}'")))
}

impl TrainConfig {
    /// Parses `key = value` lines; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = Self { out_dir: base.join("run"), ..Self::default() };
        let mut variant = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            match key {
                "total_steps" => c.total_steps = parse_val(key, val)?,
                "batch_size" => c.batch_size = parse_val(key, val)?,
                "patch_size" => c.patch_size = parse_val(key, val)?,
                "seed" => c.seed = parse_val(key, val)?,
                "lr_start" => c.lr_start = parse_val(key, val)?,
                "lr_min" => c.lr_min = parse_val(key, val)?,
                "checkpoint_every" => c.checkpoint_every = parse_val(key, val)?,
                "log_every" => c.log_every = parse_val(key, val)?,
                "probe_count" => c.probe_count = parse_val(key, val)?,
                "clip_norm" => c.clip_norm = parse_val(key, val)?,
                "freq_weight" => c.loss.freq = parse_val(key, val)?,
                "edge_weight" => c.loss.edge = parse_val(key, val)?,
                "charbonnier_eps" => c.loss.eps = parse_val(key, val)?,
                "scales" => c.model.scales = ScaleSet::parse(val)?,
                "base_width" => c.model.base_width = parse_val(key, val)?,
                "emb_dim" => c.model.emb_dim = parse_val(key, val)?,
                "tam_hidden" => c.model.tam_hidden = parse_val(key, val)?,
                "variant" => variant = Some(Variant::parse(val)?),
                "out_dir" => c.out_dir = base.join(val),
                _ if key.starts_with("task.") => {
                    let kind = DegradationKind::parse(&key[5..])?;
                    let mut parts = val.split_whitespace();
                    let path = parts.next().ok_or_else(|| Error::Config(format!("{key} needs a manifest path")))?;
                    let weight = parts.next().map(|w| parse_val(key, w)).transpose()?.unwrap_or(1.0);
                    if parts.next().is_some() {
                        return Err(Error::Config(format!("{key}: expected 'path [weight]'")));
                    }
                    if c.tasks.iter().any(|t| t.kind == kind) {
                        return Err(Error::Config(format!("{key} given twice")));
                    }
                    c.tasks.push(TaskSource { kind, manifest: base.join(path), weight });
                }
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        }
        if let Some(v) = variant {
            c.model.variant = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_start > self.lr_min && self.lr_min > 0.0) {
            return bad(format!("need lr_start > lr_min > 0, got {} and {}", self.lr_start, self.lr_min));
        }
        if !self.patch_size.is_power_of_two() || self.patch_size % 4 != 0 {
            return bad(format!("patch_size {} must be a power of two divisible by 4", self.patch_size));
        }
        if self.patch_size < 8 {
            return bad("patch_size must be at least 8".into());
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip_norm {}", self.clip_norm));
        }
        if self.tasks.is_empty() {
            return bad("no task.<name> entries".into());
        }
        if self.tasks.iter().any(|t| !(t.weight >= 0.0) || !t.weight.is_finite()) || self.total_weight() <= 0.0 {
            return bad("task weights must be non-negative with a positive sum".into());
        }
        self.loss.validate()?;
        self.model.validate()
    }

    fn total_weight(&self) -> f64 {
        self.tasks.iter().map(|t| t.weight).sum()
    }

    /// Fully resolved config in the input syntax.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("total_steps", self.total_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("lr_start", format!("{:?}", self.lr_start));
        kv("lr_min", format!("{:?}", self.lr_min));
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("log_every", self.log_every.to_string());
        kv("probe_count", self.probe_count.to_string());
        kv("clip_norm", format!("{:?}", self.clip_norm));
        kv("freq_weight", format!("{:?}", self.loss.freq));
        kv("edge_weight", format!("{:?}", self.loss.edge));
        kv("charbonnier_eps", format!("{:?}", self.loss.eps));
        kv("scales", m.scales.to_string());
        kv("base_width", m.base_width.to_string());
        kv("emb_dim", m.emb_dim.to_string());
        kv("tam_hidden", m.tam_hidden.to_string());
        kv("variant", m.variant.name());
        kv("out_dir", self.out_dir.display().to_string());
        for t in &self.tasks {
            kv(&format!("task.{}", t.kind.name()), format!("{} {:?}", t.manifest.display(), t.weight));
        }
        s
    }
}

/// A loaded degraded/clean pair.
#[derive(Clone, Debug)]
pub struct Pair {
    pub id: String,
    pub task: usize,
    pub degraded: Image<f32>,
    pub clean: Image<f32>,
}

/// Training pools (one per task source, config order) and the probe set.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub pools: Vec<Vec<Pair>>,
    pub weights: Vec<f64>,
    pub probe: Vec<Pair>,
}

impl TrainData {
    /// The last `probe_count` records of each task are held out.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let mut manifests: BTreeMap<PathBuf, Manifest> = BTreeMap::new();
        let (mut pools, mut probe) = (Vec::new(), Vec::new());
        for src in &cfg.tasks {
            if !manifests.contains_key(&src.manifest) {
                manifests.insert(src.manifest.clone(), Manifest::load(&src.manifest)?);
            }
            let m = &manifests[&src.manifest];
            let task = src.kind.task_id();
            let mut pairs = m
                .for_task(task)
                .into_iter()
                .map(|r| {
                    Ok(Pair { id: r.id.clone(), task, degraded: m.load_degraded(r)?, clean: m.load_clean(r)? })
                })
                .collect::<Result<Vec<_>>>()?;
            if pairs.len() <= cfg.probe_count {
                return Err(Error::Manifest(format!(
                    "{}: {} {} records, need more than probe_count = {}",
                    src.manifest.display(),
                    pairs.len(),
                    src.kind.name(),
                    cfg.probe_count
                )));
            }
            for p in &pairs {
                p.degraded.ensure_same_shape(&p.clean, &p.id)?;
                if p.clean.channels() != cfg.model.image_channels {
                    return Err(Error::ChannelCount { expected: cfg.model.image_channels, actual: p.clean.channels() });
                }
                if p.clean.height() < cfg.patch_size || p.clean.width() < cfg.patch_size {
                    return Err(Error::Config(format!("{} is smaller than patch_size {}", p.id, cfg.patch_size)));
                }
            }
            probe.extend(pairs.split_off(pairs.len() - cfg.probe_count));
            pools.push(pairs);
        }
        Ok(Self { pools, weights: cfg.tasks.iter().map(|t| t.weight).collect(), probe })
    }
}

/// Aligned crops of one training pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub task: usize,
    pub degraded: Image<f32>,
    pub clean: Image<f32>,
}

/// Batch for step `step` (0-based). Depends only on `(seed, step)` and data.
pub fn sample_batch(data: &TrainData, cfg: &TrainConfig, step: usize) -> Result<Vec<Sample>> {
    let mut rng = Rng::with_stream(cfg.seed, BATCH_STREAM + step as u64);
    let total: f64 = data.weights.iter().sum();
    let p = cfg.patch_size;
    (0..cfg.batch_size)
        .map(|_| {
            let u = rng.uniform() * total;
            let mut acc = 0.0;
            let mut src = data.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            for (i, w) in data.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    src = i;
                    break;
                }
            }
            let pool = &data.pools[src];
            if pool.is_empty() {
                return Err(Error::Manifest("empty training pool".into()));
            }
            let pair = &pool[rng.below(pool.len())];
            let top = rng.below(pair.clean.height() - p + 1);
            let left = rng.below(pair.clean.width() - p + 1);
            let (fh, fv) = (rng.coin(0.5), rng.coin(0.5));
            let aug = |img: &Image<f32>| -> Result<Image<f32>> {
                let mut x = crop_patch(img, top, left, p)?;
                if fh {
                    x = flip_h(&x);
                }
                if fv {
                    x = flip_v(&x);
                }
                Ok(x)
            };
            Ok(Sample { task: pair.task, degraded: aug(&pair.degraded)?, clean: aug(&pair.clean)? })
        })
        .collect()
}

/// Batch-mean loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub content: f64,
    pub edge: f64,
    pub freq: f64,
    pub total: f64,
}

impl StepLoss {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.content.is_finite() && self.edge.is_finite() && self.freq.is_finite()
    }
}

/// Loss and summed gradient over a batch. Per-sample gradients are formed in
/// parallel and added in sample order.
pub fn batch_gradient(model: &Model<f32>, batch: &[Sample], w: &LossWeights) -> Result<(StepLoss, Model<f32>)> {
    let inv = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|s| {
            let pass = model.forward(&s.degraded, s.task)?;
            let mut outputs = vec![pass.j1()];
            outputs.extend(pass.j2());
            let l = total_loss(&outputs, &s.clean, w)?;
            let scale = inv as f32;
            let mut grads = l.grads.into_iter().map(|g| g.map(|v| v * scale));
            let d1 = grads.next().expect("stage-1 gradient");
            let d2 = grads.next();
            let g = model.backward(pass, &d1, d2.as_ref())?;
            Ok((StepLoss { content: l.content, edge: l.edge, freq: l.freq, total: l.total }, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = model.zeros_like();
    let mut loss = StepLoss::default();
    for (l, g) in &parts {
        sum.add_assign_from(g);
        loss.content += l.content * inv;
        loss.edge += l.edge * inv;
        loss.freq += l.freq * inv;
        loss.total += l.total * inv;
    }
    Ok((loss, sum))
}

/// Mean probe PSNR per task id (`None` for tasks without probe images).
pub fn probe_psnr(model: &Model<f32>, probe: &[Pair]) -> Result<Vec<Option<f64>>> {
    let scores = probe
        .par_iter()
        .map(|p| {
            let kind = DegradationKind::from_task_id(p.task)?;
            let restored = model.restore(&p.degraded, p.task)?;
            Ok((p.task, score_psnr(&restored, &p.clean, kind)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_task_mean(&scores))
}

/// Probe PSNR of the unrestored inputs.
pub fn input_psnr(probe: &[Pair]) -> Result<Vec<Option<f64>>> {
    let scores = probe
        .iter()
        .map(|p| Ok((p.task, score_psnr(&p.degraded, &p.clean, DegradationKind::from_task_id(p.task)?)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_task_mean(&scores))
}

fn score_psnr(x: &Image<f32>, clean: &Image<f32>, kind: DegradationKind) -> Result<f64> {
    let mode = default_mode(kind);
    let (x, y) = (mode.project(x)?, mode.project(clean)?);
    crate::metrics::psnr(&x, &y, 1.0)
}

fn per_task_mean(scores: &[(usize, f64)]) -> Vec<Option<f64>> {
    DegradationKind::ALL
        .iter()
        .map(|k| {
            let v: Vec<f64> = scores.iter().filter(|(t, _)| *t == k.task_id()).map(|(_, p)| *p).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

/// Mean over the tasks that have probe images.
pub fn mean_present(v: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = v.iter().flatten().copied().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn log_row(step: usize, lr: f64, l: &StepLoss, probe: &[Option<f64>]) -> String {
    let p: Vec<String> = probe.iter().map(|v| v.map(format_psnr).unwrap_or_default()).collect();
    format!("{step},{lr:e},{:.8e},{:.8e},{:.8e},{:.8e},{}", l.content, l.edge, l.freq, l.total, p.join(","))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Probe PSNR of the degraded inputs, per task id.
    pub input_probe: Vec<Option<f64>>,
    pub final_probe: Vec<Option<f64>>,
    pub last_loss: Option<StepLoss>,
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}"))
}

/// Keeps the header and rows up to `step`.
fn truncate_log(path: &Path, step: usize) -> Result<String> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{LOG_HEADER}\n");
    for line in text.lines().skip(1) {
        match line.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
            Some(s) if s <= step => {
                out.push_str(line);
                out.push('\n');
            }
            _ => {}
        }
    }
    Ok(out)
}

fn dump_divergence(dir: &Path, model: &Model<f32>, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pass = model.forward(&sample.degraded, sample.task)?;
    save_tensor(&sample.degraded, dir.join("input.tensor"))?;
    save_tensor(&pass.stage1.cache.kernels.to_image(), dir.join("kernels_stage1.tensor"))?;
    save_tensor(&pass.uncertainty().to_image(), dir.join("uncertainty.tensor"))?;
    if let Some(s2) = &pass.stage2 {
        save_tensor(&s2.cache.kernels.to_image(), dir.join("kernels_stage2.tensor"))?;
    }
    Ok(())
}

/// Trains from scratch, or from `resume` when given.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainData::load(cfg)?;
    train_with_data(cfg, &data, resume)
}

pub fn train_with_data(cfg: &TrainConfig, data: &TrainData, resume: Option<&Path>) -> Result<TrainOutcome> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ck = match resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.model.config != cfg.model {
                return Err(Error::Checkpoint(format!("{} was trained with a different model config", dir.display())));
            }
            if ck.step > cfg.total_steps {
                return Err(Error::Checkpoint(format!("checkpoint step {} beyond total_steps", ck.step)));
            }
            ck
        }
        None => Checkpoint::initial(Model::new(cfg.model.clone(), cfg.seed)?, cfg.lr_start),
    };
    let log_path = out.join(LOG_NAME);
    let head = if resume.is_some() { truncate_log(&log_path, ck.step)? } else { format!("{LOG_HEADER}\n") };
    fs::write(&log_path, head).map_err(|e| Error::io(&log_path, e))?;
    let mut log = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let input_probe = input_psnr(&data.probe)?;
    let mut bad = 0;
    let mut last_loss = None;
    let started = Instant::now();
    for step in ck.step..cfg.total_steps {
        let lr = cosine_lr(step, cfg.total_steps, cfg.lr_start, cfg.lr_min)?;
        let batch = sample_batch(data, cfg, step)?;
        let (loss, mut grads) = batch_gradient(&ck.model, &batch, &cfg.loss)?;
        if !loss.is_finite() || !grads.all_finite() {
            bad += 1;
            log::warn!("step {}: non-finite loss or gradient, update skipped", step + 1);
            if bad >= MAX_BAD_STEPS {
                let dir = out.join("diverged");
                dump_divergence(&dir, &ck.model, &batch[0])?;
                return Err(Error::Diverged(format!(
                    "{MAX_BAD_STEPS} consecutive non-finite steps ending at {}; state dumped to {}",
                    step + 1,
                    dir.display()
                )));
            }
        } else {
            bad = 0;
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.clip_norm);
            }
            ck.adam.step(&mut ck.model, &grads, lr)?;
        }
        ck.step = step + 1;
        ck.lr = lr;
        last_loss = Some(loss);
        if ck.step % cfg.log_every == 0 || ck.step == cfg.total_steps {
            let probe = probe_psnr(&ck.model, &data.probe)?;
            let row = log_row(ck.step, lr, &loss, &probe);
            writeln!(log, "{row}").map_err(|e| Error::io(&log_path, e))?;
            log::info!(
                "step {}/{} loss {:.5} probe {} ({:.1}s)",
                ck.step,
                cfg.total_steps,
                loss.total,
                mean_present(&probe).map(format_psnr).unwrap_or_default(),
                started.elapsed().as_secs_f64()
            );
        }
        if cfg.checkpoint_every > 0 && ck.step % cfg.checkpoint_every == 0 {
            ck.save(checkpoint_path(out, ck.step))?;
        }
    }
    let final_checkpoint = out.join(FINAL_NAME);
    ck.save(&final_checkpoint)?;
    let final_probe = probe_psnr(&ck.model, &data.probe)?;
    Ok(TrainOutcome { steps: ck.step, final_checkpoint, log_path, input_probe, final_probe, last_loss })
}
