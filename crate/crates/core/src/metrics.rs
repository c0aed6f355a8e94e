//! PSNR and SSIM, and directory-level evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{list_images, load_rgb, write_atomic};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `10·log10(peak² / MSE)` over all elements; identical inputs give `+∞`.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("psnr", "operands", format!("{} vs {} elements", a.len(), b.len())));
    }
    if !(peak > 0.0) {
        return Err(invalid!("psnr: peak must be > 0, got {peak}"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

/// ITU-R BT.601 luma of a `[3, H, W]` image; `[1, H, W]` and `[H, W]` pass through.
pub fn luma(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let sh = img.shape();
    match sh {
        [h, w] => Ok(img.clone().reshape([*h, *w])?),
        [1, h, w] => Ok(img.clone().reshape([*h, *w])?),
        [3, h, w] => {
            let n = h * w;
            let d = img.data();
            let y = (0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).collect();
            Tensor::from_vec([*h, *w], y)
        }
        _ => Err(Error::shape("ssim", "C (channels)", format!("expected [3|1,H,W] or [H,W], got {sh:?}"))),
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Valid-mode separable Gaussian filter of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ = 1.5) of
/// the luma planes, with dynamic range `range`.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, range: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", "operands", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ya, yb) = (luma(a)?, luma(b)?);
    let (h, w) = (ya.dim(0), ya.dim(1));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!("ssim: {h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"));
    }
    let g = gaussian_taps();
    let (x, y) = (ya.data(), yb.data());
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(x, h, w, &g);
    let mu_b = filter_valid(y, h, w, &g);
    let e_aa = filter_valid(&prod(x, x), h, w, &g);
    let e_bb = filter_valid(&prod(y, y), h, w, &g);
    let e_ab = filter_valid(&prod(x, y), h, w, &g);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// PSNR (peak 255, all channels) and SSIM (luma, range 255) of two 8-bit images.
pub fn image_pair_metrics(restored: &Tensor<u8>, gt: &Tensor<u8>) -> Result<(f64, f64)> {
    let a = restored.map(|v| v as f64);
    let b = gt.map(|v| v as f64);
    Ok((psnr(a.data(), b.data(), 255.0)?, ssim(&a, &b, 255.0)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("filename,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, fmt_num(r.psnr), fmt_num(r.ssim));
        }
        let _ = writeln!(s, "mean,{},{}", fmt_num(self.mean_psnr()), fmt_num(self.mean_ssim()));
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Fixed-width table with a summary row.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(8);
        let mut s = format!("{:<width$}  {:>9}  {:>7}\n", "image", "PSNR(dB)", "SSIM");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>9.3}  {:>7.4}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "{:<width$}  {:>9.3}  {:>7.4}", "mean", self.mean_psnr(), self.mean_ssim());
        s
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

/// Compare same-named images of two directories, ordered by file name.
pub fn evaluate_pairs(restored_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let name = |p: &std::path::PathBuf| p.file_name().unwrap().to_string_lossy().into_owned();
    let restored: Vec<_> = list_images(restored_dir)?;
    let gt: Vec<_> = list_images(gt_dir)?;
    let rn: Vec<String> = restored.iter().map(name).collect();
    let gn: Vec<String> = gt.iter().map(name).collect();
    let only_r: Vec<&String> = rn.iter().filter(|n| !gn.contains(n)).collect();
    let only_g: Vec<&String> = gn.iter().filter(|n| !rn.contains(n)).collect();
    if !only_r.is_empty() || !only_g.is_empty() {
        return Err(invalid!(
            "unmatched files: only in {}: {:?}; only in {}: {:?}",
            restored_dir.display(),
            only_r,
            gt_dir.display(),
            only_g
        ));
    }
    if rn.is_empty() {
        return Err(invalid!("no images in {}", restored_dir.display()));
    }
    let mut rows = Vec::new();
    for (n, (rp, gp)) in rn.iter().zip(restored.iter().zip(&gt)) {
        let (a, b) = (load_rgb(rp)?, load_rgb(gp)?);
        if a.shape() != b.shape() {
            return Err(Error::shape("evaluate_pairs", n.clone(), format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let (p, s) = image_pair_metrics(&a, &b)?;
        rows.push(MetricRow {
            name: n.clone(),
            psnr: p,
            ssim: s,
        });
    }
    Ok(MetricReport { rows })
}
