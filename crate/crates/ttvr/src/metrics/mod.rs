//! Image quality and identity metrics: PSNR, SSIM, NIQE, LPIPS-style
//! perceptual distance and the Deg identity score.
//!
//! All metrics take images with values in `[0, 1]` and compute in `f64`.

mod niqe;

pub use niqe::{
    aggd_fit, fit_niqe, mscn, niqe, niqe_features, AggdFit, NiqeModel, NIQE_FEATURES,
};

use ttvr_core::image::LUMA;
use ttvr_core::{Error, Image, Result};

use crate::objectives::{rgb_batch, EmbeddingBackbone};

/// Score reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over every channel and pixel; identical images score [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let t: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = t.iter().sum();
        t.into_iter().map(|v| v / s).collect()
    }
}

/// Luma plane used by SSIM; RGB is converted with the BT.601 weights.
pub fn luma_plane(img: &Image) -> Vec<f64> {
    if img.channels() == 1 {
        return img.data().iter().map(|&v| v as f64).collect();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len())
        .map(|i| LUMA[0] as f64 * r[i] as f64 + LUMA[1] as f64 * g[i] as f64 + LUMA[2] as f64 * b[i] as f64)
        .collect()
}

/// Valid-mode separable filtering of an `(h, w)` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

/// Mean SSIM over all fully contained windows.
pub fn ssim_with(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < cfg.window || w < cfg.window {
        return Err(Error::Argument(format!(
            "ssim needs images of at least {0}x{0}, got {h}x{w}",
            cfg.window
        )));
    }
    let (x, y) = (luma_plane(a), luma_plane(b));
    let taps = cfg.taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let (mx, oh, ow) = filter_valid(&x, h, w, &taps);
    let (my, ..) = filter_valid(&y, h, w, &taps);
    let (mxx, ..) = filter_valid(&prod(&x, &x), h, w, &taps);
    let (myy, ..) = filter_valid(&prod(&y, &y), h, w, &taps);
    let (mxy, ..) = filter_valid(&prod(&x, &y), h, w, &taps);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let total: f64 = (0..oh * ow)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / (oh * ow) as f64)
}

/// LPIPS-style distance: channel-normalized tapped features, squared
/// difference with uniform channel weights, spatial mean, summed over taps.
pub fn lpips(phi: &EmbeddingBackbone, a: &Image, b: &Image) -> Result<f64> {
    phi.ensure_loaded()?;
    EmbeddingBackbone::check_pair(a, b)?;
    let fa = phi.features(&rgb_batch(a)?)?;
    let fb = phi.features(&rgb_batch(b)?)?;
    let mut total = 0.0;
    for (ta, tb) in fa.iter().zip(&fb) {
        let s = ta.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let (da, db) = (ta.data(), tb.data());
        let mut acc = 0.0;
        for p in 0..hw {
            let norm = |d: &[f32]| (0..c).map(|k| (d[k * hw + p] as f64).powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (na, nb) = (norm(da), norm(db));
            acc += (0..c)
                .map(|k| (da[k * hw + p] as f64 / na - db[k * hw + p] as f64 / nb).powi(2))
                .sum::<f64>();
        }
        total += acc / hw as f64;
    }
    Ok(total)
}

/// `100 · cos(a, b)`.
pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument(format!(
            "embedding lengths differ or are empty: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Numeric("cosine of a zero or non-finite embedding".into()));
    }
    Ok(100.0 * (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Identity preservation: `100 · cos(η(a), η(b))`.
pub fn deg(eta: &EmbeddingBackbone, a: &Image, b: &Image) -> Result<f64> {
    eta.ensure_loaded()?;
    EmbeddingBackbone::check_pair(a, b)?;
    cosine_score(&eta.embed_image(a)?, &eta.embed_image(b)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub lpips: f64,
    pub niqe: f64,
    pub deg: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

/// Evaluators needed by [`evaluate`].
pub struct Evaluators<'a> {
    pub phi: &'a EmbeddingBackbone,
    pub eta: &'a EmbeddingBackbone,
    pub niqe: &'a NiqeModel,
}

/// Scores `(id, result, reference)` triples and averages them.
pub fn evaluate(items: &[(String, Image, Image)], ev: &Evaluators) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(items.len());
    for (id, out, reference) in items {
        let out_rgb = out.to_rgb();
        let ref_rgb = reference.to_rgb();
        rows.push(MetricRow {
            id: id.clone(),
            lpips: lpips(ev.phi, &out_rgb, &ref_rgb)?,
            niqe: niqe(out, ev.niqe)?,
            deg: deg(ev.eta, &out_rgb, &ref_rgb)?,
            psnr: psnr(&out_rgb, &ref_rgb)?,
            ssim: ssim(&out_rgb, &ref_rgb)?,
        });
    }
    let n = rows.len() as f64;
    let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = MetricRow {
        id: "mean".into(),
        lpips: avg(|r| r.lpips),
        niqe: avg(|r| r.niqe),
        deg: avg(|r| r.deg),
        psnr: avg(|r| r.psnr),
        ssim: avg(|r| r.ssim),
    };
    Ok(MetricReport { rows, mean })
}

impl MetricReport {
    pub const HEADER: &'static str = "id,lpips,niqe,deg,psnr,ssim";

    /// Per-image rows followed by the mean row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            s += &format!("{},{:.6},{:.6},{:.6},{:.6},{:.6}\n", r.id, r.lpips, r.niqe, r.deg, r.psnr, r.ssim);
        }
        s
    }

    /// One-line aggregate table in the column order LPIPS, NIQE, Deg, PSNR, SSIM.
    pub fn table(&self, label: &str) -> String {
        let m = &self.mean;
        format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:<12} {:>8.4} {:>8.3} {:>8.2} {:>8.2} {:>8.4}\n",
            "method", "LPIPS↓", "NIQE↓", "Deg↑", "PSNR↑", "SSIM↑", label, m.lpips, m.niqe, m.deg, m.psnr, m.ssim
        )
    }
}
