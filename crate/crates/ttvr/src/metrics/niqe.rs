//! Natural Image Quality Evaluator.
//!
//! Images are converted to luma on a 0–255 scale and normalized into MSCN
//! coefficients (7×7 Gaussian, σ = 7/6, C = 1). Each patch yields 18
//! statistics per scale: an AGGD fit of the coefficients (shape, mean scale)
//! and AGGD fits of the four neighbour products (shape, mean, left and right
//! scale). The second scale is a 2×2 box downsample with half the patch size.
//! The pristine model is the mean and covariance of the sharpest patches; an
//! image scores the Mahalanobis-style distance between that model and the
//! Gaussian fit to its own patches.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;
use ttvr_core::{load_checkpoint, save_checkpoint, Checkpoint, Error, Image, Result, Tensor};

use super::luma_plane;

pub const NIQE_FEATURES: usize = 36;
const RIDGE: f64 = 1e-6;
const MSCN_C: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NiqeModel {
    pub mu: Vec<f64>,
    /// Row-major `NIQE_FEATURES × NIQE_FEATURES` covariance.
    pub sigma: Vec<f64>,
    pub patch_size: usize,
    pub sharpness_threshold: f64,
}

impl NiqeModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        c.insert("niqe.mu", Tensor::new(&[NIQE_FEATURES], to32(&self.mu)).expect("mu length"));
        c.insert(
            "niqe.sigma",
            Tensor::new(&[NIQE_FEATURES, NIQE_FEATURES], to32(&self.sigma)).expect("sigma length"),
        );
        c.set_meta("kind", "niqe");
        c.set_meta("niqe.patch_size", self.patch_size.to_string());
        c.set_meta("niqe.sharpness_threshold", self.sharpness_threshold.to_string());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.meta("kind") != Some("niqe") {
            return Err(Error::Integrity("checkpoint does not hold a NIQE model".into()));
        }
        let mu = c.get("niqe.mu")?;
        let sigma = c.get("niqe.sigma")?;
        if mu.shape() != [NIQE_FEATURES] || sigma.shape() != [NIQE_FEATURES, NIQE_FEATURES] {
            return Err(Error::Integrity("NIQE model has wrong feature dimension".into()));
        }
        let meta = |k: &str| {
            c.meta(k)
                .ok_or_else(|| Error::Integrity(format!("NIQE model lacks {k}")))
        };
        let patch_size = meta("niqe.patch_size")?
            .parse()
            .map_err(|_| Error::Integrity("bad niqe.patch_size".into()))?;
        let sharpness_threshold = meta("niqe.sharpness_threshold")?
            .parse()
            .map_err(|_| Error::Integrity("bad niqe.sharpness_threshold".into()))?;
        Ok(Self {
            mu: mu.data().iter().map(|&v| v as f64).collect(),
            sigma: sigma.data().iter().map(|&v| v as f64).collect(),
            patch_size,
            sharpness_threshold,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// Asymmetric generalized Gaussian fit by moment matching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggdFit {
    pub alpha: f64,
    pub left_scale: f64,
    pub right_scale: f64,
}

impl AggdFit {
    /// `(β_r − β_l)·Γ(2/α)/Γ(1/α)`.
    pub fn mean(&self) -> f64 {
        (self.right_scale - self.left_scale) * (ln_gamma(2.0 / self.alpha) - ln_gamma(1.0 / self.alpha)).exp()
    }
}

/// `(α, Γ(2/α)² / (Γ(1/α)·Γ(3/α)))` on a 0.001 grid over `[0.2, 10]`.
fn ratio_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=9800)
            .map(|i| {
                let a = 0.2 + i as f64 * 0.001;
                let r = (2.0 * ln_gamma(2.0 / a) - ln_gamma(1.0 / a) - ln_gamma(3.0 / a)).exp();
                (a, r)
            })
            .collect()
    })
}

pub fn aggd_fit(x: &[f64]) -> AggdFit {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    let (mut abs, mut sq) = (0.0, 0.0);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
        abs += v.abs();
        sq += v * v;
    }
    let table = ratio_table();
    if sq == 0.0 || x.is_empty() {
        return AggdFit {
            alpha: table.last().unwrap().0,
            left_scale: 0.0,
            right_scale: 0.0,
        };
    }
    let mut left = if ln > 0 { (ls / ln as f64).sqrt() } else { 0.0 };
    let mut right = if rn > 0 { (rs / rn as f64).sqrt() } else { 0.0 };
    if left == 0.0 {
        left = right;
    }
    if right == 0.0 {
        right = left;
    }
    let n = x.len() as f64;
    let g = left / right;
    let rhat = (abs / n).powi(2) / (sq / n);
    let rnorm = rhat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let alpha = table
        .iter()
        .min_by(|a, b| (a.1 - rnorm).abs().total_cmp(&(b.1 - rnorm).abs()))
        .unwrap()
        .0;
    let s = (0.5 * (ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha))).exp();
    AggdFit {
        alpha,
        left_scale: left * s,
        right_scale: right * s,
    }
}

fn gaussian_7() -> [f64; 7] {
    let sigma = 7.0 / 6.0;
    let mut t = [0.0; 7];
    for (i, v) in t.iter_mut().enumerate() {
        *v = (-((i as f64 - 3.0).powi(2)) / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Same-size separable filtering with replicated borders.
fn filter_replicate(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * p[y * w + at(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[at(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// MSCN coefficients and local standard deviation of a 0–255 plane.
pub fn mscn(p: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let taps = gaussian_7();
    let mu = filter_replicate(p, h, w, &taps);
    let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
    let m2 = filter_replicate(&sq, h, w, &taps);
    let sigma: Vec<f64> = m2.iter().zip(&mu).map(|(a, m)| (a - m * m).abs().sqrt()).collect();
    let coef = p
        .iter()
        .zip(&mu)
        .zip(&sigma)
        .map(|((v, m), s)| (v - m) / (s + MSCN_C))
        .collect();
    (coef, sigma)
}

fn patch_stats(coef: &[f64], w: usize, y0: usize, x0: usize, ps: usize, out: &mut Vec<f64>) {
    let at = |y: usize, x: usize| coef[(y0 + y) * w + x0 + x];
    let mut vals = Vec::with_capacity(ps * ps);
    for y in 0..ps {
        for x in 0..ps {
            vals.push(at(y, x));
        }
    }
    let f = aggd_fit(&vals);
    out.push(f.alpha);
    out.push((f.left_scale + f.right_scale) / 2.0);
    // Neighbour products inside the patch, wrapping at its border.
    for (dy, dx) in [(0isize, 1isize), (1, 0), (1, 1), (1, -1)] {
        let prods: Vec<f64> = (0..ps)
            .flat_map(|y| (0..ps).map(move |x| (y, x)))
            .map(|(y, x)| {
                let sy = (y as isize - dy).rem_euclid(ps as isize) as usize;
                let sx = (x as isize - dx).rem_euclid(ps as isize) as usize;
                at(y, x) * at(sy, sx)
            })
            .collect();
        let f = aggd_fit(&prods);
        out.push(f.alpha);
        out.push(f.mean());
        out.push(f.left_scale);
        out.push(f.right_scale);
    }
}

fn downsample2(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = 0.25 * (p[2 * y * w + 2 * x] + p[2 * y * w + 2 * x + 1] + p[(2 * y + 1) * w + 2 * x] + p[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    out
}

/// Per-patch feature vectors and patch sharpness (mean local deviation).
pub fn niqe_features(img: &Image, patch_size: usize) -> Result<(Vec<[f64; NIQE_FEATURES]>, Vec<f64>)> {
    if patch_size < 4 || patch_size % 2 != 0 {
        return Err(Error::Argument(format!("NIQE patch size must be even and >= 4, got {patch_size}")));
    }
    let (ph, pw) = (img.height() / patch_size, img.width() / patch_size);
    if ph == 0 || pw == 0 {
        return Err(Error::Argument(format!(
            "image {}x{} is smaller than the NIQE patch size {patch_size}",
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (ph * patch_size, pw * patch_size);
    let full = luma_plane(img);
    let iw = img.width();
    let mut p = Vec::with_capacity(h * w);
    for y in 0..h {
        p.extend(full[y * iw..y * iw + w].iter().map(|v| v * 255.0));
    }
    let (c1, s1) = mscn(&p, h, w);
    let p2 = downsample2(&p, h, w);
    let (c2, _) = mscn(&p2, h / 2, w / 2);
    let half = patch_size / 2;
    let mut feats = Vec::with_capacity(ph * pw);
    let mut sharp = Vec::with_capacity(ph * pw);
    for by in 0..ph {
        for bx in 0..pw {
            let mut f = Vec::with_capacity(NIQE_FEATURES);
            patch_stats(&c1, w, by * patch_size, bx * patch_size, patch_size, &mut f);
            patch_stats(&c2, w / 2, by * half, bx * half, half, &mut f);
            feats.push(f.try_into().expect("36 features"));
            let mut s = 0.0;
            for y in 0..patch_size {
                for x in 0..patch_size {
                    s += s1[(by * patch_size + y) * w + bx * patch_size + x];
                }
            }
            sharp.push(s / (patch_size * patch_size) as f64);
        }
    }
    Ok((feats, sharp))
}

fn mean_cov(rows: &[[f64; NIQE_FEATURES]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let mut mu = DVector::zeros(NIQE_FEATURES);
    for r in rows {
        mu += DVector::from_row_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(NIQE_FEATURES, NIQE_FEATURES);
    if n > 1 {
        for r in rows {
            let d = DVector::from_row_slice(r) - &mu;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
    }
    (mu, cov)
}

/// Fits the pristine model on the sharpest patches of `corpus`: patches whose
/// sharpness exceeds `sharpness_threshold × max` within their image.
pub fn fit_niqe(corpus: &[Image], patch_size: usize, sharpness_threshold: f64) -> Result<NiqeModel> {
    if !(0.0..=1.0).contains(&sharpness_threshold) {
        return Err(Error::Argument(format!(
            "sharpness threshold must lie in [0, 1], got {sharpness_threshold}"
        )));
    }
    let mut selected = Vec::new();
    for img in corpus {
        let (feats, sharp) = niqe_features(img, patch_size)?;
        let max = sharp.iter().cloned().fold(0.0, f64::max);
        for (f, s) in feats.into_iter().zip(sharp) {
            if s > sharpness_threshold * max && f.iter().all(|v| v.is_finite()) {
                selected.push(f);
            }
        }
    }
    if selected.len() < 2 {
        return Err(Error::Argument(format!(
            "NIQE corpus yields {} usable patches; at least 2 are needed",
            selected.len()
        )));
    }
    let (mu, cov) = mean_cov(&selected);
    Ok(NiqeModel {
        mu: mu.iter().cloned().collect(),
        sigma: cov.transpose().iter().cloned().collect(),
        patch_size,
        sharpness_threshold,
    })
}

/// `√((ν−μ)ᵀ((Σ+Σ_img)/2 + εI)⁺(ν−μ))`.
pub fn niqe(img: &Image, model: &NiqeModel) -> Result<f64> {
    let (feats, _) = niqe_features(img, model.patch_size)?;
    let feats: Vec<_> = feats.into_iter().filter(|f| f.iter().all(|v| v.is_finite())).collect();
    if feats.is_empty() {
        return Err(Error::Numeric("no finite NIQE patch features".into()));
    }
    let (nu, cov) = mean_cov(&feats);
    let mu = DVector::from_column_slice(&model.mu);
    let sigma = DMatrix::from_row_slice(NIQE_FEATURES, NIQE_FEATURES, &model.sigma);
    let pooled = (sigma + cov) / 2.0 + DMatrix::identity(NIQE_FEATURES, NIQE_FEATURES) * RIDGE;
    let inv = pooled
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Numeric(format!("NIQE covariance inversion failed: {e}")))?;
    let d = nu - mu;
    let q = (d.transpose() * inv * &d)[(0, 0)];
    if !q.is_finite() {
        return Err(Error::Numeric("NIQE distance is not finite".into()));
    }
    Ok(q.max(0.0).sqrt())
}
