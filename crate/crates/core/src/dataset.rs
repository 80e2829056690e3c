//! Synthetic pair generation and the line-delimited JSON manifest.
//!
//! Layout under the output directory:
//! `clean/<id>.png`, `degraded/<id>.tensor`, `aux/<id>_<map>.tensor`,
//! `manifest.jsonl`. Clean images are snapped to the 8-bit grid before
//! degradation so the PNG is exact; degraded images and maps are stored as
//! raw float tensors so `I = g ⊙ J + b` holds on disk.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade::{
    apply_haze, apply_rain, apply_rain_attenuation, apply_snow, to_affine, DegradationKind, DegradationMaps,
    HazeParams, PerPixelAffine, RainParams, SnowParams, Transmission,
};
use crate::error::{Error, Result};
use crate::image::{crop_rect, Image};
use crate::io::{load_image, quantize, save_image, save_tensor};
use crate::procedural::{depth_map, texture};
use crate::rng::Rng;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub task_id: usize,
    pub clean_path: String,
    pub degraded_path: String,
    pub aux_paths: BTreeMap<String, String>,
    pub seed: u64,
    /// Generator parameters as space-separated `key=value` pairs.
    pub params: String,
}

impl Record {
    pub fn kind(&self) -> Result<DegradationKind> {
        DegradationKind::from_task_id(self.task_id)
    }

    /// Value of `key` in [`Record::params`].
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.split_whitespace().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
    }
}

/// Records plus the directory their relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
            r.kind().map_err(|_| Error::Manifest(format!("{}:{}: task id {}", path.display(), n + 1, r.task_id)))?;
            records.push(r);
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { dir, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::Manifest(e.to_string()))?;
            out.push(b'\n');
        }
        fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn load_clean(&self, r: &Record) -> Result<Image<f32>> {
        load_image(self.resolve(&r.clean_path))
    }

    pub fn load_degraded(&self, r: &Record) -> Result<Image<f32>> {
        load_image(self.resolve(&r.degraded_path))
    }

    pub fn load_aux(&self, r: &Record, name: &str) -> Result<Image<f32>> {
        let rel = r
            .aux_paths
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("record {} has no '{name}' map", r.id)))?;
        load_image(self.resolve(rel))
    }

    /// Ground-truth affine operator of a record, rebuilt from its maps.
    pub fn load_affine(&self, r: &Record, channels: usize) -> Result<PerPixelAffine<f32>> {
        let maps = match r.kind()? {
            DegradationKind::Rain if r.aux_paths.contains_key("gain") => {
                DegradationMaps::RainGain { gain: self.load_aux(r, "gain")? }
            }
            DegradationKind::Rain => DegradationMaps::Rain { streaks: self.load_aux(r, "rain")? },
            DegradationKind::Snow => {
                DegradationMaps::Snow { mask: self.load_aux(r, "mask")?, particles: self.load_aux(r, "snow")? }
            }
            DegradationKind::Haze => {
                let airlight = r
                    .param("airlight")
                    .ok_or_else(|| Error::Manifest(format!("record {} lacks airlight", r.id)))?
                    .split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| Error::Manifest(format!("bad airlight in {}", r.id))))
                    .collect::<Result<Vec<_>>>()?;
                DegradationMaps::Haze { transmission: self.load_aux(r, "transmission")?, airlight }
            }
        };
        to_affine(r.kind()?, &maps, channels)
    }

    pub fn for_task(&self, task: usize) -> Vec<&Record> {
        self.records.iter().filter(|r| r.task_id == task).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskSelection {
    One(DegradationKind),
    /// Equal split over all kinds.
    All,
}

impl TaskSelection {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(Self::All)
        } else {
            DegradationKind::parse(s).map(Self::One)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub task: TaskSelection,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Rain as attenuation only (`b = 0`) instead of additive streaks.
    pub gain_only: bool,
    /// Crop clean images from these PNGs instead of procedural textures.
    pub clean_dir: Option<PathBuf>,
}

pub const DEFAULT_BASE_GAIN: (f64, f64) = (0.6, 0.8);
pub const DEFAULT_MAX_OCCLUSION: f64 = 0.5;

/// Kind of the `i`-th of `count` records: contiguous equal blocks for `All`,
/// remainder going to the first kinds.
pub fn kind_for_index(sel: TaskSelection, i: usize, count: usize) -> DegradationKind {
    match sel {
        TaskSelection::One(k) => k,
        TaskSelection::All => {
            let n = DegradationKind::ALL.len();
            let (base, rem) = (count / n, count % n);
            let mut start = 0;
            for (t, k) in DegradationKind::ALL.iter().enumerate() {
                let len = base + usize::from(t < rem);
                if i < start + len {
                    return *k;
                }
                start += len;
            }
            DegradationKind::ALL[n - 1]
        }
    }
}

fn clean_sources(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG files in {}", dir.display())));
    }
    Ok(files)
}

fn clean_image(cfg: &GenConfig, sources: &[PathBuf], i: usize, rng: &mut Rng) -> Result<Image<f64>> {
    let (h, w) = (cfg.height, cfg.width);
    let img = if sources.is_empty() {
        texture::<f64>(h, w, 3, rng)
    } else {
        let src = load_image(&sources[i % sources.len()])?.cast::<f64>();
        if src.height() < h || src.width() < w {
            return Err(Error::InvalidImage(format!(
                "{} is {}x{}, smaller than {h}x{w}",
                sources[i % sources.len()].display(),
                src.height(),
                src.width()
            )));
        }
        let top = rng.below(src.height() - h + 1);
        let left = rng.below(src.width() - w + 1);
        let crop = crop_rect(&src, top, left, h, w)?;
        match crop.channels() {
            3 => crop,
            1 => Image::from_fn(h, w, 3, |r, c, _| crop.at(r, c, 0)),
            c => return Err(Error::ChannelCount { expected: 3, actual: c }),
        }
    };
    Ok(img.map(|v| quantize(v) as f64 / 255.0))
}

/// Writes a dataset tree under `out` and returns its manifest.
pub fn generate(cfg: &GenConfig, out: &Path) -> Result<Manifest> {
    if cfg.count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    if cfg.height < 3 || cfg.width < 3 {
        return Err(Error::Config(format!("size {}x{} too small", cfg.height, cfg.width)));
    }
    if cfg.gain_only && !matches!(cfg.task, TaskSelection::One(DegradationKind::Rain)) {
        return Err(Error::Config("gain-only applies to the rain task".into()));
    }
    let sources = match &cfg.clean_dir {
        Some(d) => clean_sources(d)?,
        None => Vec::new(),
    };
    for sub in ["clean", "degraded", "aux"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let kind = kind_for_index(cfg.task, i, cfg.count);
        let seed = Rng::with_stream(cfg.seed, i as u64).next_u64();
        let mut rng = Rng::new(seed);
        let clean = clean_image(cfg, &sources, i, &mut rng)?;
        let id = format!("{}_{i:05}", kind.name());
        let (degraded, aux, params) = degrade_one(kind, &clean, cfg.gain_only, &mut rng)?;

        let clean_rel = format!("clean/{id}.png");
        let degraded_rel = format!("degraded/{id}.tensor");
        save_image(&clean, out.join(&clean_rel))?;
        save_tensor(&degraded, out.join(&degraded_rel))?;
        let mut aux_paths = BTreeMap::new();
        for (name, map) in aux {
            let rel = format!("aux/{id}_{name}.tensor");
            save_tensor(&map, out.join(&rel))?;
            aux_paths.insert(name.to_string(), rel);
        }
        records.push(Record {
            id,
            task_id: kind.task_id(),
            clean_path: clean_rel,
            degraded_path: degraded_rel,
            aux_paths,
            seed,
            params,
        });
    }
    let manifest = Manifest { dir: out.to_path_buf(), records };
    manifest.save(out.join(MANIFEST_NAME))?;
    Ok(manifest)
}

type Degraded = (Image<f64>, Vec<(&'static str, Image<f64>)>, String);

fn degrade_one(kind: DegradationKind, clean: &Image<f64>, gain_only: bool, rng: &mut Rng) -> Result<Degraded> {
    let (h, w, _) = clean.dims();
    match kind {
        DegradationKind::Rain => {
            let p = RainParams { num_streaks: 20 + rng.below(41), seed: rng.next_u64(), ..RainParams::default() };
            if gain_only {
                let base = rng.range(DEFAULT_BASE_GAIN.0, DEFAULT_BASE_GAIN.1);
                let (img, gain) = apply_rain_attenuation(clean, &p, base, DEFAULT_MAX_OCCLUSION)?;
                let kv = format!(
                    "{} base_gain={base} max_occlusion={DEFAULT_MAX_OCCLUSION}",
                    p.to_kv().replace("model=additive", "model=attenuation")
                );
                Ok((img, vec![("gain", gain.channel(0)?)], kv))
            } else {
                let (img, rain) = apply_rain(clean, &p)?;
                Ok((img, vec![("rain", rain.channel(0)?)], p.to_kv()))
            }
        }
        DegradationKind::Snow => {
            let p = SnowParams { density: rng.range(0.04, 0.12), seed: rng.next_u64(), ..SnowParams::default() };
            let (img, mask, snow) = apply_snow(clean, &p)?;
            Ok((img, vec![("mask", mask.channel(0)?), ("snow", snow.channel(0)?)], p.to_kv()))
        }
        DegradationKind::Haze => {
            let a = rng.range(0.75, 0.95);
            let airlight = vec![a, (a + rng.range(-0.03, 0.03)).min(1.0), (a + rng.range(-0.03, 0.03)).min(1.0)];
            let beta = rng.range(0.6, 1.4);
            let depth = depth_map::<f64>(h, w, 1.5, rng);
            let p = HazeParams { atmospheric_light: airlight, transmission: Transmission::Depth { beta, depth }, t_min: 0.05 };
            let (img, t) = apply_haze(clean, &p)?;
            Ok((img, vec![("transmission", t)], p.to_kv()))
        }
    }
}
