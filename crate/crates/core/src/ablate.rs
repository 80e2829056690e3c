//! Component ablation: trains each variant under one seed and budget and
//! tabulates probe PSNR.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::trainer::{mean_present, train_with_data, TrainConfig, TrainData};

pub const REPORT_HEADER: &str = "variant,stages,uncertainty_map,task_aware,multi_scale,psnr,delta_psnr";

/// Rows (a) to (f): single-stage baseline, then task modulation and
/// multi-scale filtering, then the second stage, then its uncertainty input.
pub const TABLE_VARIANTS: [&str; 6] = [
    "one-stage+no-tam+no-multiscale",
    "one-stage+no-multiscale",
    "one-stage+no-tam",
    "one-stage",
    "no-um",
    "full",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Mean probe PSNR over tasks after training.
    pub psnr: f64,
    /// Against the first row.
    pub delta_psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let v = r.variant;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{:+.4}",
                v.name(),
                if v.two_stage { 2 } else { 1 },
                u8::from(v.use_um),
                u8::from(v.use_tam),
                u8::from(v.multiscale),
                r.psnr,
                r.delta_psnr
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn psnr_of(&self, v: Variant) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == v).map(|r| r.psnr)
    }
}

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let vs = list.split(',').filter(|s| !s.trim().is_empty()).map(Variant::parse).collect::<Result<Vec<_>>>()?;
    if vs.is_empty() {
        return Err(Error::Config("empty variant list".into()));
    }
    Ok(vs)
}

/// Trains every variant from `cfg` (only the variant differs) into
/// `cfg.out_dir/<variant>`.
pub fn ablate(cfg: &TrainConfig, variants: &[Variant]) -> Result<AblationReport> {
    cfg.validate()?;
    let data = TrainData::load(cfg)?;
    let mut rows: Vec<AblationRow> = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut run = cfg.clone();
        run.model.variant = v;
        run.out_dir = cfg.out_dir.join(v.name());
        log::info!("ablation: training {}", v.name());
        let out = train_with_data(&run, &data, None)?;
        let psnr = mean_present(&out.final_probe).ok_or_else(|| Error::Manifest("empty probe set".into()))?;
        let base = rows.first().map_or(psnr, |r| r.psnr);
        rows.push(AblationRow { variant: v, psnr, delta_psnr: psnr - base });
    }
    Ok(AblationReport { rows })
}
