use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{blockiness, psnr, ssim};
use crate::csmodel::{crop, ModelParams, PadPolicy};
use crate::error::{Error, Result};
use crate::netpbm;
use crate::tensorcore::Scalar;

/// Tag written next to SSIM values so reports state which variant produced them.
pub const SSIM_VARIANT: &str = "ssim-ref-11x11";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub blockiness: f64,
}

/// Per-image rows in filename order plus their arithmetic means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_blockiness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
    Blockiness,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::Ssim, Metric::Blockiness];

    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| match p {
                "psnr" => Ok(Metric::Psnr),
                "ssim" => Ok(Metric::Ssim),
                "blockiness" => Ok(Metric::Blockiness),
                other => Err(Error::config(format!("unknown metric '{other}'"))),
            })
            .collect()
    }

    fn header(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr_db",
            Metric::Ssim => "ssim",
            Metric::Blockiness => "blockiness",
        }
    }
}

/// PSNR values print as `inf` when the images are identical.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn json_value(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(format_value(v))
    }
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        MetricReport {
            mean_psnr_db: mean(|r| r.psnr_db),
            mean_ssim: mean(|r| r.ssim),
            mean_blockiness: mean(|r| r.blockiness),
            rows,
        }
    }

    fn value(row: &MetricRow, m: Metric) -> f64 {
        match m {
            Metric::Psnr => row.psnr_db,
            Metric::Ssim => row.ssim,
            Metric::Blockiness => row.blockiness,
        }
    }

    fn mean(&self, m: Metric) -> f64 {
        match m {
            Metric::Psnr => self.mean_psnr_db,
            Metric::Ssim => self.mean_ssim,
            Metric::Blockiness => self.mean_blockiness,
        }
    }

    /// Tab-separated table: a header line, one line per image and a final
    /// `mean` line.
    pub fn to_tsv(&self, metrics: &[Metric]) -> String {
        let mut out = String::from("name");
        for m in metrics {
            out.push('\t');
            out.push_str(m.header());
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.name);
            for &m in metrics {
                let _ = write!(out, "\t{}", format_value(Self::value(row, m)));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for &m in metrics {
            let _ = write!(out, "\t{}", format_value(self.mean(m)));
        }
        out.push('\n');
        out
    }

    /// One JSON object per image: `{"name", "psnr_db", "ssim", "blockiness",
    /// "ssim_variant"}`. Non-finite values are written as strings.
    pub fn to_jsonl(&self, metrics: &[Metric]) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let mut obj = serde_json::Map::new();
            obj.insert("name".into(), json!(row.name));
            for &m in metrics {
                obj.insert(m.header().into(), json_value(Self::value(row, m)));
            }
            if metrics.contains(&Metric::Ssim) {
                obj.insert("ssim_variant".into(), json!(SSIM_VARIANT));
            }
            out.push_str(&serde_json::Value::Object(obj).to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub peak: f64,
    pub pad_policy: PadPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            peak: 1.0,
            pad_policy: PadPolicy::ReflectPadThenCrop,
        }
    }
}

/// Netpbm files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && netpbm::is_netpbm_path(p))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Measures and reconstructs every image in `dir` (colour images are reduced
/// to luma) and scores the reconstruction against the original.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, dir: impl AsRef<Path>, opts: &EvalOptions) -> Result<MetricReport> {
    let dir = dir.as_ref();
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no PGM/PPM images in {}", dir.display())));
    }
    let block = params.config().measurement_stride;
    let mut rows = Vec::with_capacity(paths.len());
    for path in paths {
        let image = netpbm::to_luma(&netpbm::read_image::<T>(&path)?)?;
        let recon = params.reconstruct_image(&image, opts.pad_policy)?;
        let s = recon.shape();
        let (bh, bw) = (s.h / block * block, s.w / block * block);
        let block_score = if bh == 0 || bw == 0 {
            1.0
        } else {
            blockiness(&crop(&recon, 0, 0, bh, bw)?, block)?
        };
        rows.push(MetricRow {
            name: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            psnr_db: psnr(&recon, &image, opts.peak)?,
            ssim: ssim(&recon, &image, opts.peak)?,
            blockiness: block_score,
        });
    }
    Ok(MetricReport::from_rows(rows))
}
