//! Timing of the naive dense multi-scale filter against the gathered fast
//! path on random inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernel::{apply_multiscale_fast, apply_multiscale_naive, gather_samples, softmax_fusion, KernelField, ScaleSet};
use crate::rng::Rng;

pub const REPORT_HEADER: &str = "h,w,scales,naive_ms,fast_ms,speedup,max_abs_diff";
/// Agreement required between the two paths on every run.
pub const AGREEMENT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub scales: ScaleSet,
    pub naive_ms: f64,
    /// Gather plus filter.
    pub fast_ms: f64,
    pub max_abs_diff: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.naive_ms / self.fast_ms
    }
}

/// `HxW` as `(h, w)`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("size '{s}' is not HxW"));
    let (h, w) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    let (h, w) = (h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?);
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Times one configuration over `reps` repetitions (median reported).
pub fn bench_case(height: usize, width: usize, scales: &ScaleSet, reps: usize, seed: u64) -> Result<BenchRow> {
    if reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let img = Image::<f32>::from_fn(height, width, 3, |_, _, _| rng.uniform() as f32);
    let k = KernelField::from_fn(height, width, |_, _, _| rng.range(-0.5, 0.5) as f32);
    let logits = Image::<f32>::from_fn(height, width, scales.len(), |_, _, _| rng.normal() as f32);
    let alpha = softmax_fusion(&logits)?;
    let (mut naive, mut fast, mut diff) = (Vec::new(), Vec::new(), 0.0f64);
    for _ in 0..reps {
        let t = Instant::now();
        let a = apply_multiscale_naive(&img, &k, scales, &alpha)?;
        naive.push(millis(t));
        let t = Instant::now();
        let samples = gather_samples(&img, scales)?;
        let b = apply_multiscale_fast(&samples, &k, &alpha)?;
        fast.push(millis(t));
        diff = diff.max(a.max_abs_diff(&b));
    }
    if !(diff <= AGREEMENT_TOLERANCE) {
        return Err(Error::ShapeMismatch(format!(
            "fast and naive paths disagree by {diff:e} at {height}x{width}, scales {scales}"
        )));
    }
    Ok(BenchRow { height, width, scales: scales.clone(), naive_ms: median(naive), fast_ms: median(fast), max_abs_diff: diff })
}

pub fn bench(sizes: &[(usize, usize)], scale_sets: &[ScaleSet], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &(h, w) in sizes {
        for s in scale_sets {
            rows.push(bench_case(h, w, s, reps, seed)?);
        }
    }
    Ok(rows)
}

/// Scale sets are written `1;2;4` to keep the CSV unquoted.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let scales: Vec<String> = r.scales.scales().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{:.3},{:.3},{:.2},{:e}",
            r.height,
            r.width,
            scales.join(";"),
            r.naive_ms,
            r.fast_ms,
            r.speedup(),
            r.max_abs_diff
        );
    }
    s
}

pub fn write_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv(rows)).map_err(|e| Error::io(path, e))
}
