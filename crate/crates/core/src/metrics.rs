//! Full-reference quality metrics on 8-bit images: PSNR, SSIM and MAD.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{load_image, scan_corpus, ImageBuffer, IMAGE_EXTENSIONS};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(
            &[a.height(), a.width()],
            &[b.height(), b.width()],
            "image dimensions",
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels; `+inf` for identical images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    let mse = sse / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// Mean absolute difference on the 0–255 scale.
pub fn mad(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// BT.601 luma in `[0, 255]`, row-major.
pub fn luma(image: &ImageBuffer) -> Vec<f64> {
    image
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect()
}

/// Normalised `SSIM_WINDOW × SSIM_WINDOW` Gaussian weights, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let dy = (i / SSIM_WINDOW) as f64 - r;
            let dx = (i % SSIM_WINDOW) as f64 - r;
            (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Single-scale SSIM on luma, averaged over every position where the window
/// fits entirely inside the image.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid_shape(
            &[h, w],
            format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels"),
        ));
    }
    let (la, lb) = (luma(a), luma(b));
    let window = gaussian_window();
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                let row = (y + ky) * w + x;
                for kx in 0..SSIM_WINDOW {
                    let g = window[ky * SSIM_WINDOW + kx];
                    let (p, q) = (la[row + kx], lb[row + kx]);
                    ma += g * p;
                    mb += g * q;
                    saa += g * p * p;
                    sbb += g * q * q;
                    sab += g * p * q;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mad: f64,
}

impl MetricRow {
    pub fn compute(name: impl Into<String>, a: &ImageBuffer, b: &ImageBuffer) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            psnr_db: psnr(a, b)?,
            ssim: ssim(a, b)?,
            mad: mad(a, b)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    /// One row per matched pair, sorted by name.
    pub rows: Vec<MetricRow>,
    /// Unmatched or unreadable files.
    pub warnings: Vec<String>,
}

impl MetricReport {
    /// Arithmetic means of the three columns (`None` without rows).
    pub fn means(&self) -> Option<MetricRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let sum = |f: fn(&MetricRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(MetricRow {
            name: "mean".into(),
            psnr_db: sum(|r| r.psnr_db),
            ssim: sum(|r| r.ssim),
            mad: sum(|r| r.mad),
        })
    }

    /// CSV with header `name,psnr_db,ssim,mad`, one line per row and a final
    /// `mean` line. Numbers use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim,mad\n");
        for r in self.rows.iter().chain(self.means().as_ref()) {
            out.push_str(&format!("{},{},{},{}\n", csv_field(&r.name), r.psnr_db, r.ssim, r.mad));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max(4);
        writeln!(f, "{:<width$}  {:>10}  {:>8}  {:>8}", "name", "psnr_db", "ssim", "mad")?;
        for r in self.rows.iter().chain(self.means().as_ref()) {
            writeln!(
                f,
                "{:<width$}  {:>10.4}  {:>8.5}  {:>8.4}",
                r.name, r.psnr_db, r.ssim, r.mad
            )?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Compares every image in `enhanced_dir` with the same-named file in
/// `reference_dir`.
pub fn evaluate_pairs(enhanced_dir: impl AsRef<Path>, reference_dir: impl AsRef<Path>) -> Result<MetricReport> {
    let enhanced = scan_corpus(enhanced_dir.as_ref(), &IMAGE_EXTENSIONS)?;
    let reference = scan_corpus(reference_dir.as_ref(), &IMAGE_EXTENSIONS)?;
    let file_name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut report = MetricReport::default();
    for path in &enhanced {
        let name = file_name(path);
        let Some(other) = reference.iter().find(|r| file_name(r) == name) else {
            report.warnings.push(format!("{name}: no reference image"));
            continue;
        };
        let row = load_image(path)
            .and_then(|a| load_image(other).map(|b| (a, b)))
            .and_then(|(a, b)| MetricRow::compute(name.clone(), &a, &b));
        match row {
            Ok(row) => report.rows.push(row),
            Err(e) => report.warnings.push(format!("{name}: {e}")),
        }
    }
    for path in &reference {
        let name = file_name(path);
        if !enhanced.iter().any(|e| file_name(e) == name) {
            report.warnings.push(format!("{name}: no enhanced image"));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(w: usize, h: usize, v: u8) -> ImageBuffer {
        ImageBuffer::new(w, h, vec![v; w * h * 3]).unwrap()
    }

    #[test]
    fn sentinels() {
        let a = flat(12, 12, 90);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(mad(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hand_values() {
        assert_eq!(psnr(&flat(2, 2, 0), &flat(2, 2, 255)).unwrap(), 0.0);
        assert_eq!(mad(&flat(2, 2, 0), &flat(2, 2, 2)).unwrap(), 2.0);
    }

    #[test]
    fn dimension_checks() {
        assert!(psnr(&flat(2, 2, 0), &flat(2, 3, 0)).is_err());
        assert!(ssim(&flat(10, 12, 0), &flat(10, 12, 0)).is_err());
    }

    #[test]
    fn window_is_normalised() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[SSIM_WINDOW * SSIM_WINDOW - 1]);
    }

    #[test]
    fn csv_has_mean_row() {
        let report = MetricReport {
            rows: vec![
                MetricRow { name: "a.png".into(), psnr_db: 30.0, ssim: 0.5, mad: 1.0 },
                MetricRow { name: "b.png".into(), psnr_db: 20.0, ssim: 0.75, mad: 3.0 },
            ],
            warnings: vec![],
        };
        let csv = report.to_csv();
        assert_eq!(csv.lines().next(), Some("name,psnr_db,ssim,mad"));
        assert_eq!(csv.lines().last(), Some("mean,25,0.625,2"));
    }
}
