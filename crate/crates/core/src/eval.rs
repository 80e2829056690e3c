//! Per-image evaluation of a model against a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::Manifest;
use crate::degrade::DegradationKind;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{format_psnr, psnr, ssim, ChannelMode};
use crate::model::Model;

pub const REPORT_HEADER: &str = "id,task,psnr_db,ssim";

/// Rain is scored on luma, the other tasks on RGB.
pub fn default_mode(kind: DegradationKind) -> ChannelMode {
    match kind {
        DegradationKind::Rain => ChannelMode::Y,
        _ => ChannelMode::Rgb,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub task: usize,
    pub mode: ChannelMode,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.6}", r.id, r.task, format_psnr(r.psnr), r.ssim);
        }
        let _ = writeln!(s, "mean,,{},{:.6}", format_psnr(self.mean_psnr), self.mean_ssim);
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// PSNR and SSIM of `restored` against `clean` in `mode`.
pub fn score(restored: &Image<f32>, clean: &Image<f32>, mode: ChannelMode) -> Result<(f64, f64)> {
    let (x, y) = (mode.project(restored)?, mode.project(clean)?);
    Ok((psnr(&x, &y, 1.0)?, ssim(&x, &y)?))
}

/// Restores every record and scores it. `mode = None` picks the per-task
/// default. Rows follow manifest order.
pub fn evaluate(manifest: &Manifest, model: &Model<f32>, mode: Option<ChannelMode>) -> Result<EvalReport> {
    if manifest.records.is_empty() {
        return Err(Error::Manifest("empty manifest".into()));
    }
    let rows = manifest
        .records
        .par_iter()
        .map(|r| {
            let kind = r.kind()?;
            let (clean, degraded) = (manifest.load_clean(r)?, manifest.load_degraded(r)?);
            if degraded.channels() != model.config.image_channels {
                return Err(Error::ChannelCount { expected: model.config.image_channels, actual: degraded.channels() });
            }
            let restored = model.restore(&degraded, r.task_id)?;
            let mode = mode.unwrap_or_else(|| default_mode(kind));
            let (p, s) = score(&restored, &clean, mode)?;
            Ok(EvalRow { id: r.id.clone(), task: r.task_id, mode, psnr: p, ssim: s })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok(EvalReport { rows, mean_psnr, mean_ssim })
}
