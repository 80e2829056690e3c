//! Checkpoint directories.
//!
//! ```text
//! <dir>/index.txt
//! <dir>/params/<name>.tensor
//! <dir>/adam_m/<name>.tensor
//! <dir>/adam_v/<name>.tensor
//! ```
//!
//! `index.txt` holds the training scalars, the model config, and one
//! `tensor <name> <shape> <param file> <m file> <v file>` line per parameter.
//! Tensors are stored flat as `1 x len x 1` raw tensors; the index carries the
//! real shape. Values are `f32`, so an `f32` model round-trips bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kernel::ScaleSet;
use crate::model::{Model, ModelConfig, Variant};
use crate::optim::Adam;
use crate::param::{Parameters, Tensor};
use crate::tensor_io::RawTensor;

pub const FORMAT: &str = "opir-checkpoint 1";
pub const INDEX_NAME: &str = "index.txt";

/// Model plus optimizer state at a given step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    /// Completed optimizer steps.
    pub step: usize,
    /// Learning rate of the last completed step (start rate at step 0).
    pub lr: f64,
}

impl Checkpoint {
    /// Fresh state: step 0, zero moments.
    pub fn initial(model: Model<f32>, lr: f64) -> Self {
        let adam = Adam::new(&model);
        Self { model, adam, step: 0, lr }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["params", "adam_m", "adam_v"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut index = String::new();
        let _ = writeln!(index, "{FORMAT}");
        let _ = writeln!(index, "step {}", self.step);
        let _ = writeln!(index, "lr {:?}", self.lr);
        let _ = writeln!(index, "adam_t {}", self.adam.t);
        let _ = writeln!(index, "config {}", config_to_kv(&self.model.config));
        let tensors = self.model.tensors();
        if tensors.len() != self.adam.m.len() || tensors.len() != self.adam.v.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        for (((name, t), m), v) in tensors.iter().zip(&self.adam.m).zip(&self.adam.v) {
            let file = format!("{name}.tensor");
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(index, "tensor {name} {} params/{file} adam_m/{file} adam_v/{file}", shape.join(","));
            write_flat(t, dir.join("params").join(&file))?;
            write_flat(m, dir.join("adam_m").join(&file))?;
            write_flat(v, dir.join("adam_v").join(&file))?;
        }
        let path = dir.join(INDEX_NAME);
        fs::write(&path, index).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(INDEX_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint index", path.display())));
        }
        let (mut step, mut lr, mut adam_t, mut config) = (None, None, None, None);
        let mut entries = Vec::new();
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "step" => step = Some(parse_num::<usize>("step", rest)?),
                "lr" => lr = Some(parse_num::<f64>("lr", rest)?),
                "adam_t" => adam_t = Some(parse_num::<u64>("adam_t", rest)?),
                "config" => config = Some(config_from_kv(rest)?),
                "tensor" => entries.push(rest.to_string()),
                "" => {}
                other => return Err(Error::Checkpoint(format!("unknown index key '{other}'"))),
            }
        }
        let missing = |k: &str| Error::Checkpoint(format!("index lacks '{k}'"));
        let config = config.ok_or_else(|| missing("config"))?;
        let mut model = Model::<f32>::zeros(config)?;
        let mut adam = Adam::new(&model);
        adam.t = adam_t.ok_or_else(|| missing("adam_t"))?;

        let slots = model.tensors_mut();
        if slots.len() != entries.len() {
            return Err(Error::Checkpoint(format!("{} tensors in index, model has {}", entries.len(), slots.len())));
        }
        for (i, ((name, slot), entry)) in slots.into_iter().zip(&entries).enumerate() {
            let f: Vec<&str> = entry.split_whitespace().collect();
            if f.len() != 5 || f[0] != name {
                return Err(Error::Checkpoint(format!("expected tensor '{name}', found '{entry}'")));
            }
            let shape = f[1]
                .split(',')
                .map(|d| parse_num::<usize>("shape", d))
                .collect::<Result<Vec<_>>>()?;
            if shape != slot.shape {
                return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, model expects {:?}", slot.shape)));
            }
            *slot = read_flat(&shape, dir.join(f[2]))?;
            adam.m[i] = read_flat(&shape, dir.join(f[3]))?;
            adam.v[i] = read_flat(&shape, dir.join(f[4]))?;
        }
        Ok(Self {
            model,
            adam,
            step: step.ok_or_else(|| missing("step"))?,
            lr: lr.ok_or_else(|| missing("lr"))?,
        })
    }
}

fn parse_num<N: std::str::FromStr>(what: &str, s: &str) -> Result<N> {
    s.trim().parse().map_err(|_| Error::Checkpoint(format!("bad {what} '{s}'")))
}

fn write_flat(t: &Tensor<f32>, path: PathBuf) -> Result<()> {
    RawTensor::new(1, t.len(), 1, t.data.clone())?.write(path)
}

fn read_flat(shape: &[usize], path: PathBuf) -> Result<Tensor<f32>> {
    let raw = RawTensor::read(&path)?;
    Tensor::from_vec(shape, raw.data)
        .map_err(|_| Error::Checkpoint(format!("{} does not hold {shape:?}", path.display())))
}

fn flag(b: bool) -> u8 {
    u8::from(b)
}

/// Single-line `key=value` form of a model config.
pub fn config_to_kv(c: &ModelConfig) -> String {
    let v = c.variant;
    format!(
        "image_channels={} base_width={} emb_dim={} tam_hidden={} num_tasks={} scales={} two_stage={} use_um={} use_tam={} multiscale={}",
        c.image_channels,
        c.base_width,
        c.emb_dim,
        c.tam_hidden,
        c.num_tasks,
        c.scales,
        flag(v.two_stage),
        flag(v.use_um),
        flag(v.use_tam),
        flag(v.multiscale)
    )
}

pub fn config_from_kv(s: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    let mut v = Variant::FULL;
    for kv in s.split_whitespace() {
        let (k, val) = kv.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad config field '{kv}'")))?;
        let bit = || match val {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::Checkpoint(format!("bad flag {kv}"))),
        };
        match k {
            "image_channels" => c.image_channels = parse_num(k, val)?,
            "base_width" => c.base_width = parse_num(k, val)?,
            "emb_dim" => c.emb_dim = parse_num(k, val)?,
            "tam_hidden" => c.tam_hidden = parse_num(k, val)?,
            "num_tasks" => c.num_tasks = parse_num(k, val)?,
            "scales" => c.scales = ScaleSet::parse(val)?,
            "two_stage" => v.two_stage = bit()?,
            "use_um" => v.use_um = bit()?,
            "use_tam" => v.use_tam = bit()?,
            "multiscale" => v.multiscale = bit()?,
            _ => return Err(Error::Checkpoint(format!("unknown config field '{k}'"))),
        }
    }
    c.variant = v;
    c.validate()?;
    Ok(c)
}
