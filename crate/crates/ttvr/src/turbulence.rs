//! Turbulence degradation: `y = clip(warp(blur(x, k), field) + noise)`.
//!
//! Blur kernels are rotated anisotropic Gaussians; the geometric distortion is
//! an elastic field (uniform noise smoothed by a Gaussian of std `beta`,
//! rescaled to peak magnitude `alpha`); the noise is i.i.d. Gaussian.

use serde::{Deserialize, Serialize};
use ttvr_core::{Error, Image, Result, RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub size: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
}

impl KernelSpec {
    pub fn isotropic(size: usize, sigma: f64) -> Self {
        Self {
            size,
            sigma_x: sigma,
            sigma_y: sigma,
            theta: 0.0,
        }
    }
}

/// Per-pixel displacements in pixels; `dx`/`dy` have shape `(H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub dx: Tensor,
    pub dy: Tensor,
    pub alpha: f64,
    pub beta: f64,
}

impl DisplacementField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            dx: Tensor::zeros(&[h, w]),
            dy: Tensor::zeros(&[h, w]),
            alpha: 0.0,
            beta: 1.0,
        }
    }

    pub fn constant(h: usize, w: usize, dx: f32, dy: f32) -> Self {
        Self {
            dx: Tensor::full(&[h, w], dx),
            dy: Tensor::full(&[h, w], dy),
            alpha: dx.abs().max(dy.abs()) as f64,
            beta: f64::INFINITY,
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.dx
            .data()
            .iter()
            .chain(self.dy.data())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// One sampled realization of the degradation operator. The displacement
/// field itself is realized inside [`degrade`] because it depends on the image
/// size; `alpha`/`beta` fully determine it given the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub kernel: KernelSpec,
    pub alpha: f64,
    pub beta: f64,
    pub noise_sigma: f64,
    pub seed_label: String,
}

impl DegradationParams {
    /// Delta kernel, no displacement, no noise.
    pub fn identity() -> Self {
        Self {
            kernel: KernelSpec::isotropic(11, 0.0),
            alpha: 0.0,
            beta: 1.0,
            noise_sigma: 0.0,
            seed_label: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurbulenceConfig {
    pub kernel_size: usize,
    pub sigma: (f64, f64),
    /// Probability of drawing an anisotropic kernel instead of an isotropic one.
    pub anisotropic_prob: f64,
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub noise_max: f64,
}

impl Default for TurbulenceConfig {
    fn default() -> Self {
        Self {
            kernel_size: 11,
            sigma: (1.0, 11.0),
            anisotropic_prob: 0.5,
            alpha: (41.0, 51.0),
            beta: (11.0, 21.0),
            noise_max: 0.02,
        }
    }
}

impl TurbulenceConfig {
    pub fn from_config(c: &crate::config::Config) -> Self {
        Self {
            kernel_size: c.blur_kernel_size,
            sigma: (c.sigma_min, c.sigma_max),
            anisotropic_prob: c.anisotropic_prob,
            alpha: (c.alpha_min, c.alpha_max),
            beta: (c.beta_min, c.beta_max),
            noise_max: c.noise_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64| {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < min {
                Err(Error::Argument(format!("{name} range [{lo}, {hi}] is invalid")))
            } else {
                Ok(())
            }
        };
        if self.kernel_size % 2 == 0 {
            return Err(Error::Argument(format!("kernel size {} must be odd", self.kernel_size)));
        }
        range("sigma", self.sigma, 0.0)?;
        range("alpha", self.alpha, 0.0)?;
        range("beta", self.beta, f64::MIN_POSITIVE)?;
        range("noise", (0.0, self.noise_max), 0.0)?;
        if !(0.0..=1.0).contains(&self.anisotropic_prob) {
            return Err(Error::Argument("anisotropic_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Rotated anisotropic Gaussian evaluated at integer offsets, normalized to sum 1.
/// A zero sigma collapses that axis to a delta.
pub fn gaussian_blur_kernel(spec: &KernelSpec) -> Result<Tensor> {
    if spec.size % 2 == 0 || spec.size == 0 {
        return Err(Error::Argument(format!("kernel size {} must be odd and >= 1", spec.size)));
    }
    if !(spec.sigma_x >= 0.0 && spec.sigma_y >= 0.0) {
        return Err(Error::Argument("kernel sigmas must be non-negative".into()));
    }
    let r = (spec.size / 2) as isize;
    let (s, c) = spec.theta.sin_cos();
    let axis = |coord: f64, sigma: f64| {
        if sigma == 0.0 {
            if coord.abs() < 1e-9 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            coord * coord / (2.0 * sigma * sigma)
        }
    };
    let mut vals = Vec::with_capacity(spec.size * spec.size);
    for dy in -r..=r {
        for dx in -r..=r {
            let (dx, dy) = (dx as f64, dy as f64);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            vals.push((-(axis(u, spec.sigma_x) + axis(v, spec.sigma_y))).exp());
        }
    }
    let total: f64 = vals.iter().sum();
    let data = vals.iter().map(|v| (v / total) as f32).collect();
    Tensor::new(&[spec.size, spec.size], data)
}

/// Index into `[0, n)` with mirror reflection that does not repeat the edge.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Same-size 2-D convolution of every channel with reflect padding.
pub fn blur(img: &Image, kernel: &Tensor) -> Result<Image> {
    let ks = kernel.shape();
    if ks.len() != 2 || ks[0] != ks[1] || ks[0] % 2 == 0 {
        return Err(Error::Argument(format!("blur kernel must be odd square, got {ks:?}")));
    }
    let k = ks[0];
    let r = (k / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let kd = kernel.data();
    let mut out = img.clone();
    for c in 0..img.channels() {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        // Precompute reflected column indices for each output column.
        let cols: Vec<Vec<usize>> = (0..w as isize)
            .map(|x| (-r..=r).map(|d| reflect(x + d, w)).collect())
            .collect();
        for y in 0..h as isize {
            let rows: Vec<usize> = (-r..=r).map(|d| reflect(y + d, h)).collect();
            for x in 0..w {
                let mut acc = 0.0f32;
                for (ky, &ry) in rows.iter().enumerate() {
                    let row = &src[ry * w..(ry + 1) * w];
                    let krow = &kd[ky * k..(ky + 1) * k];
                    for (kv, &cx) in krow.iter().zip(&cols[x]) {
                        acc += kv * row[cx];
                    }
                }
                dst[y as usize * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// 1-D Gaussian taps truncated at 4 sigma, normalized.
pub(crate) fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian smoothing of an `(h, w)` plane with reflect padding.
pub(crate) fn smooth_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * row[reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        for y in 0..h {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

pub fn elastic_field(
    h: usize,
    w: usize,
    alpha: f64,
    beta: f64,
    rng: &mut RngStream,
) -> Result<DisplacementField> {
    if !(beta > 0.0) {
        return Err(Error::Argument(format!("elastic beta must be > 0, got {beta}")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Argument(format!("elastic alpha must be >= 0, got {alpha}")));
    }
    let raw_x: Vec<f64> = (0..h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let raw_y: Vec<f64> = (0..h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let sx = smooth_plane(&raw_x, h, w, beta);
    let sy = smooth_plane(&raw_y, h, w, beta);
    let peak = sx.iter().chain(&sy).fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { alpha / peak } else { 0.0 };
    let to_tensor = |v: Vec<f64>| {
        let data = v
            .into_iter()
            .map(|d| ((d * scale) as f32).clamp(-alpha as f32, alpha as f32))
            .collect();
        Tensor::new(&[h, w], data)
    };
    Ok(DisplacementField {
        dx: to_tensor(sx)?,
        dy: to_tensor(sy)?,
        alpha,
        beta,
    })
}

/// Bilinear resampling at `(x + dx, y + dy)` with coordinates clamped to the image.
pub fn warp(img: &Image, field: &DisplacementField) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if field.dx.shape() != [h, w] || field.dy.shape() != [h, w] {
        return Err(Error::Argument(format!(
            "field {:?} does not match image {h}x{w}",
            field.dx.shape()
        )));
    }
    let mut out = img.clone();
    let (fx, fy) = (field.dx.data(), field.dy.data());
    for c in 0..img.channels() {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = (x as f64 + fx[i] as f64).clamp(0.0, (w - 1) as f64);
                let sy = (y as f64 + fy[i] as f64).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (ax, ay) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                let top = (1.0 - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1];
                let bottom = (1.0 - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1];
                dst[i] = (1.0 - ay) * top + ay * bottom;
            }
        }
    }
    Ok(out)
}

pub fn sample_params(rng: &mut RngStream, cfg: &TurbulenceConfig) -> Result<DegradationParams> {
    cfg.validate()?;
    let anisotropic = rng.uniform(0.0, 1.0) < cfg.anisotropic_prob;
    let sigma_x = rng.uniform(cfg.sigma.0, cfg.sigma.1);
    let (sigma_y, theta) = if anisotropic {
        (
            rng.uniform(cfg.sigma.0, cfg.sigma.1),
            rng.uniform(0.0, std::f64::consts::PI),
        )
    } else {
        (sigma_x, 0.0)
    };
    let alpha = rng.uniform(cfg.alpha.0, cfg.alpha.1);
    let beta = rng.uniform(cfg.beta.0, cfg.beta.1);
    let noise_sigma = rng.uniform(0.0, cfg.noise_max);
    Ok(DegradationParams {
        kernel: KernelSpec {
            size: cfg.kernel_size,
            sigma_x,
            sigma_y,
            theta,
        },
        alpha,
        beta,
        noise_sigma,
        seed_label: rng.label().to_string(),
    })
}

pub fn degrade(img: &Image, params: &DegradationParams, rng: &RngStream) -> Result<Image> {
    let kernel = gaussian_blur_kernel(&params.kernel)?;
    let blurred = blur(img, &kernel)?;
    let field = if params.alpha == 0.0 {
        DisplacementField::zeros(img.height(), img.width())
    } else {
        elastic_field(
            img.height(),
            img.width(),
            params.alpha,
            params.beta,
            &mut rng.fork("field"),
        )?
    };
    let mut out = warp(&blurred, &field)?;
    if params.noise_sigma > 0.0 {
        let mut noise = rng.fork("noise");
        for v in out.data_mut() {
            *v += (noise.normal() * params.noise_sigma) as f32;
        }
    }
    Ok(out.clamp01())
}

/// Samples parameters from `rng.fork("params")` and applies them.
pub fn degrade_random(
    img: &Image,
    cfg: &TurbulenceConfig,
    rng: &RngStream,
) -> Result<(Image, DegradationParams)> {
    let params = sample_params(&mut rng.fork("params"), cfg)?;
    let out = degrade(img, &params, rng)?;
    Ok((out, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;
    use ttvr_core::{make_rng, ColorSpace};

    #[test]
    fn zero_sigma_is_delta() {
        let k = gaussian_blur_kernel(&KernelSpec::isotropic(11, 0.0)).unwrap();
        for (i, v) in k.data().iter().enumerate() {
            assert_eq!(*v, if i == 60 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn unit_sigma_3x3_hand_values() {
        // exp(-d^2/2) at d^2 = 0, 1, 2 normalized by 1 + 4e^-0.5 + 4e^-1.
        let k = gaussian_blur_kernel(&KernelSpec::isotropic(3, 1.0)).unwrap();
        let d = k.data();
        assert!((d[4] - 0.2042).abs() < 1e-4);
        assert!((d[1] - 0.1238).abs() < 1e-4);
        assert!((d[0] - 0.0751).abs() < 1e-4);
    }

    #[test]
    fn rotation_swaps_axes() {
        let a = gaussian_blur_kernel(&KernelSpec { size: 11, sigma_x: 3.0, sigma_y: 1.0, theta: FRAC_PI_2 }).unwrap();
        let b = gaussian_blur_kernel(&KernelSpec { size: 11, sigma_x: 1.0, sigma_y: 3.0, theta: 0.0 }).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn isotropic_kernel_is_rotation_invariant() {
        let k = gaussian_blur_kernel(&KernelSpec::isotropic(7, 2.3)).unwrap();
        let d = k.data();
        for y in 0..7 {
            for x in 0..7 {
                // 90 degree rotation: (x, y) -> (6 - y, x)
                assert!((d[y * 7 + x] - d[x * 7 + (6 - y)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(gaussian_blur_kernel(&KernelSpec::isotropic(4, 1.0)).is_err());
    }

    #[test]
    fn elastic_zero_alpha_and_bad_beta() {
        let f = elastic_field(8, 8, 0.0, 3.0, &mut make_rng(1)).unwrap();
        assert_eq!(f.max_abs(), 0.0);
        assert!(elastic_field(8, 8, 1.0, 0.0, &mut make_rng(1)).is_err());
    }

    #[test]
    fn elastic_peak_equals_alpha_and_is_seeded() {
        let a = elastic_field(32, 32, 45.0, 16.0, &mut make_rng(5).fork("f")).unwrap();
        let b = elastic_field(32, 32, 45.0, 16.0, &mut make_rng(5).fork("f")).unwrap();
        assert_eq!(a, b);
        assert!((a.max_abs() - 45.0).abs() < 1e-4);
    }

    #[test]
    fn warp_identity_and_shift() {
        let ramp: Vec<f32> = (0..6 * 10).map(|i| (i % 10) as f32 / 10.0).collect();
        let img = Image::new(Tensor::new(&[1, 6, 10], ramp).unwrap(), ColorSpace::Grayscale).unwrap();
        assert_eq!(warp(&img, &DisplacementField::zeros(6, 10)).unwrap(), img);
        let shifted = warp(&img, &DisplacementField::constant(6, 10, 1.0, 0.0)).unwrap();
        for y in 0..6 {
            for x in 0..9 {
                assert_eq!(shifted.plane(0)[y * 10 + x], img.plane(0)[y * 10 + x + 1]);
            }
        }
    }

    #[test]
    fn warp_dimension_mismatch() {
        let img = Image::filled(ColorSpace::Grayscale, 4, 4, 0.5);
        assert!(warp(&img, &DisplacementField::zeros(4, 5)).is_err());
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn inverted_ranges_rejected() {
        let cfg = TurbulenceConfig { alpha: (51.0, 41.0), ..Default::default() };
        assert!(sample_params(&mut make_rng(0), &cfg).is_err());
    }
}
