use ttvr::dataset::toy_pairs;
use ttvr::metrics::*;
use ttvr::objectives::EmbeddingBackbone;
use ttvr::turbulence::{blur, gaussian_blur_kernel, KernelSpec};
use ttvr_core::{make_rng, ColorSpace, Image, RngStream, Tensor};

fn random_image(rng: &mut RngStream, color: ColorSpace, h: usize, w: usize) -> Image {
    let n = color.channels() * h * w;
    let data = (0..n).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    Image::new(Tensor::new(&[color.channels(), h, w], data).unwrap(), color).unwrap()
}

#[test]
fn psnr_closed_forms() {
    let black = Image::filled(ColorSpace::Grayscale, 8, 8, 0.0);
    let white = Image::filled(ColorSpace::Grayscale, 8, 8, 1.0);
    assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    assert_eq!(psnr(&black, &black).unwrap(), PSNR_CAP);
    let half = Image::filled(ColorSpace::Grayscale, 8, 8, 0.5);
    assert!((psnr(&black, &half).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
    let mut one = black.clone();
    one.data_mut()[17] = 1.0;
    assert!((psnr(&black, &one).unwrap() - 10.0 * 64f64.log10()).abs() < 1e-9);
}

#[test]
fn psnr_rejects_shape_mismatch() {
    let a = Image::filled(ColorSpace::Grayscale, 8, 8, 0.0);
    let b = Image::filled(ColorSpace::Rgb, 8, 8, 0.0);
    assert!(psnr(&a, &b).is_err());
    assert!(ssim(&a, &b).is_err());
}

/// SSIM from explicit 2-D window sums with two-pass moments.
fn ssim_reference(a: &[f64], b: &[f64], h: usize, w: usize, win: usize) -> f64 {
    let r = (win / 2) as f64;
    let mut k = vec![0.0; win * win];
    for u in 0..win {
        for v in 0..win {
            k[u * win + v] = (-((u as f64 - r).powi(2) + (v as f64 - r).powi(2)) / 4.5).exp();
        }
    }
    let s: f64 = k.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = Vec::new();
    for y in 0..=h - win {
        for x in 0..=w - win {
            let idx = |u: usize, v: usize| (y + u) * w + x + v;
            let mean = |p: &[f64]| (0..win * win).map(|i| k[i] * p[idx(i / win, i % win)]).sum::<f64>() / s;
            let (ma, mb) = (mean(a), mean(b));
            let mom = |f: &dyn Fn(usize) -> f64| (0..win * win).map(|i| k[i] * f(idx(i / win, i % win))).sum::<f64>() / s;
            let va = mom(&|j| (a[j] - ma).powi(2));
            let vb = mom(&|j| (b[j] - mb).powi(2));
            let cv = mom(&|j| (a[j] - ma) * (b[j] - mb));
            acc.push(((2.0 * ma * mb + c1) * (2.0 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    acc.iter().sum::<f64>() / acc.len() as f64
}

#[test]
fn ssim_default_window_matches_reference() {
    let mut rng = make_rng(3);
    for _ in 0..10 {
        let a = random_image(&mut rng, ColorSpace::Grayscale, 16, 16);
        let b = random_image(&mut rng, ColorSpace::Grayscale, 16, 16);
        let f = |i: &Image| i.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let want = ssim_reference(&f(&a), &f(&b), 16, 16, 11);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn ssim_identity_and_bounds() {
    let mut rng = make_rng(4);
    let a = random_image(&mut rng, ColorSpace::Rgb, 24, 24);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let b = random_image(&mut rng, ColorSpace::Rgb, 24, 24);
    let s = ssim(&a, &b).unwrap();
    assert!(s < 0.5 && s > -1.0);
    let small = Image::filled(ColorSpace::Grayscale, 8, 8, 0.2);
    assert!(ssim(&small, &small).is_err());
}

#[test]
fn ssim_on_rgb_uses_luma() {
    let mut rng = make_rng(5);
    let a = random_image(&mut rng, ColorSpace::Rgb, 16, 16);
    let b = random_image(&mut rng, ColorSpace::Rgb, 16, 16);
    assert!((ssim(&a, &b).unwrap() - ssim(&a.to_grayscale(), &b.to_grayscale()).unwrap()).abs() < 1e-5);
}

#[test]
fn cosine_score_trivial_cases() {
    assert!((cosine_score(&[2.0, 0.0, 0.0], &[5.0, 0.0, 0.0]).unwrap() - 100.0).abs() < 1e-6);
    assert!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-6);
    assert!((cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 70.710678).abs() < 1e-6);
    assert!((cosine_score(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 100.0).abs() < 1e-6);
    assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert!(cosine_score(&[1.0], &[1.0, 0.0]).is_err());
}

#[test]
fn deg_of_identical_images_is_100() {
    let eta = EmbeddingBackbone::seeded_identity(7, 32);
    let mut rng = make_rng(6);
    let a = random_image(&mut rng, ColorSpace::Rgb, 32, 32);
    assert!((deg(&eta, &a, &a).unwrap() - 100.0).abs() < 1e-6);
    assert!(deg(&EmbeddingBackbone::unloaded(ttvr::objectives::BackboneRole::Identity), &a, &a).is_err());
}

#[test]
fn lpips_properties() {
    let phi = EmbeddingBackbone::seeded_perceptual(8);
    let mut rng = make_rng(9);
    let a = random_image(&mut rng, ColorSpace::Rgb, 32, 32);
    let b = random_image(&mut rng, ColorSpace::Rgb, 32, 32);
    assert!(lpips(&phi, &a, &a).unwrap().abs() < 1e-12);
    let ab = lpips(&phi, &a, &b).unwrap();
    let ba = lpips(&phi, &b, &a).unwrap();
    assert!(ab > 0.0 && (ab - ba).abs() < 1e-9);
    let mut near = a.clone();
    for v in near.data_mut() {
        *v = (*v + 0.02 * rng.normal() as f32).clamp(0.0, 1.0);
    }
    assert!(lpips(&phi, &a, &near).unwrap() < ab);
}

#[test]
fn lpips_black_white_is_positive_and_deterministic() {
    let phi = EmbeddingBackbone::seeded_perceptual(1234);
    let black = Image::filled(ColorSpace::Rgb, 32, 32, 0.0);
    let white = Image::filled(ColorSpace::Rgb, 32, 32, 1.0);
    let d = lpips(&phi, &black, &white).unwrap();
    assert!(d.is_finite() && d > 0.0);
    assert_eq!(d, lpips(&phi, &black, &white).unwrap());
}

#[test]
fn aggd_recovers_gaussian_shape() {
    let mut rng = make_rng(10);
    let x: Vec<f64> = (0..200_000).map(|_| rng.normal() * 0.5).collect();
    let f = aggd_fit(&x);
    assert!((f.alpha - 2.0).abs() < 0.05, "{f:?}");
    assert!((f.left_scale - f.right_scale).abs() < 0.02);
    assert!(f.mean().abs() < 0.01);
    let laplace: Vec<f64> = (0..200_000)
        .map(|_| {
            let u = rng.uniform(-0.5, 0.5);
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect();
    assert!((aggd_fit(&laplace).alpha - 1.0).abs() < 0.05);
}

#[test]
fn mscn_of_constant_is_zero() {
    let p = vec![128.0; 20 * 20];
    let (c, s) = mscn(&p, 20, 20);
    assert!(c.iter().all(|v| v.abs() < 1e-9));
    assert!(s.iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn niqe_features_shape_and_checks() {
    let mut rng = make_rng(11);
    let img = random_image(&mut rng, ColorSpace::Grayscale, 40, 56);
    let (f, s) = niqe_features(&img, 16).unwrap();
    assert_eq!(f.len(), 2 * 3);
    assert_eq!(s.len(), 6);
    assert!(niqe_features(&img, 15).is_err());
    assert!(niqe_features(&img, 64).is_err());
}

#[test]
fn niqe_prefers_pristine_and_round_trips() {
    let pairs = toy_pairs(8, 2, 64, &make_rng(12)).unwrap();
    let corpus: Vec<Image> = pairs.iter().skip(1).step_by(2).map(|p| p.visible.clone()).collect();
    let model = fit_niqe(&corpus, 16, 0.75).unwrap();
    assert_eq!(model.mu.len(), NIQE_FEATURES);
    let k = gaussian_blur_kernel(&KernelSpec::isotropic(11, 2.0)).unwrap();
    for p in pairs.iter().step_by(2) {
        let sharp = niqe(&p.visible, &model).unwrap();
        let blurred = niqe(&blur(&p.visible, &k).unwrap(), &model).unwrap();
        assert!(sharp < blurred, "{sharp} vs {blurred}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("niqe.ckpt");
    model.save(&path).unwrap();
    let back = NiqeModel::load(&path).unwrap();
    assert_eq!(back.patch_size, 16);
    let (a, b) = (niqe(&pairs[0].visible, &model).unwrap(), niqe(&pairs[0].visible, &back).unwrap());
    assert!((a - b).abs() / a < 1e-3);
    assert!(fit_niqe(&corpus, 16, 1.5).is_err());
}

fn report_fixture() -> Vec<(String, Image, Image)> {
    let mut rng = make_rng(13);
    (0..2)
        .map(|i| {
            let r = random_image(&mut rng, ColorSpace::Rgb, 32, 32);
            let o = random_image(&mut rng, ColorSpace::Rgb, 32, 32);
            (format!("img{i}.png"), o, r)
        })
        .collect()
}

#[test]
fn evaluate_reports_mean_row() {
    let items = report_fixture();
    let refs: Vec<Image> = items.iter().map(|i| i.2.clone()).collect();
    let model = fit_niqe(&refs, 16, 0.0).unwrap();
    let phi = EmbeddingBackbone::seeded_perceptual(1);
    let eta = EmbeddingBackbone::seeded_identity(1, 16);
    let report = evaluate(
        &items,
        &Evaluators {
            phi: &phi,
            eta: &eta,
            niqe: &model,
        },
    )
    .unwrap();
    assert_eq!(report.rows.len(), 2);
    let m = (report.rows[0].psnr + report.rows[1].psnr) / 2.0;
    assert!((report.mean.psnr - m).abs() < 1e-12);
    let csv = report.to_csv();
    assert!(csv.starts_with(MetricReport::HEADER));
    assert_eq!(csv.lines().count(), 4);
    assert!(report.table("ours").contains("ours"));
}
