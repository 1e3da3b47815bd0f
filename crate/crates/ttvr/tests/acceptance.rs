//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line each; exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=3,7` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};
use ttvr::config::{Config, Preset};
use ttvr::dataset::{assemble_batch, split_ids, toy_pairs, Pair, SplitSpec};
use ttvr::generator::{Generator, GeneratorConfig, LatentCode, NoiseSeeds};
use ttvr::metrics::{aggd_fit, cosine_score, fit_niqe, niqe, psnr, ssim_with, SsimConfig};
use ttvr::objectives::{AdvForm, Discriminator, EmbeddingBackbone, LossWeights};
use ttvr::projection::{Projection, ProjectionConfig};
use ttvr::trainer::{
    log_csv, pretrain_generator, projection_loss_graph, reconstruct, train, Frozen, LogRow, PretrainConfig,
    TrainConfig, TrainRun, TrainState,
};
use ttvr::turbulence::{
    blur, degrade, degrade_random, gaussian_blur_kernel, sample_params, DegradationParams, KernelSpec,
    TurbulenceConfig,
};
use ttvr::verification::{rank1, vr_at_far, Entry, GallerySet, ProbeSet};
use ttvr_core::{make_rng, ColorSpace, GraphOf, Image, RngStream, Tensor};

type Outcome = (bool, String);

fn gray(rng: &mut RngStream, h: usize, w: usize) -> Image {
    let data = (0..h * w).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    Image::new(Tensor::new(&[1, h, w], data).unwrap(), ColorSpace::Grayscale).unwrap()
}

fn c1_modulation_identity() -> Outcome {
    let t = Instant::now();
    let c = Config::preset(Preset::Desk64);
    let gc = GeneratorConfig::from_config(&c);
    let gen = Generator::init(gc.clone(), &mut make_rng(11)).unwrap().freeze();
    let proj = Projection::init(ProjectionConfig::from_config(&c), &mut make_rng(12)).unwrap();
    let mut rng = make_rng(13);
    let mut worst = 0.0f32;
    for i in 0..10 {
        let z = LatentCode::random(1, gc.latent_dim, &mut rng.fork(&format!("z{i}")));
        let thermal = gray(&mut rng, 64, 64);
        let (_, mods) = proj.project(&[thermal]).unwrap();
        let noise = NoiseSeeds::new(make_rng(14).fork(&format!("n{i}")));
        let plain = gen.generate(&z, &noise).unwrap();
        let modulated = gen.generate_modulated(&z, &mods, &noise).unwrap();
        for (a, b) in plain[0].data().iter().zip(modulated[0].data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (
        worst <= 1e-6 && secs < 60.0,
        format!("max |generate - generate_modulated| = {worst:.3e} over 10 latents, {secs:.1}s"),
    )
}

/// Pretraining plus two identical training runs on the desk64 toy setup,
/// shared by the freeze, training and reconstruction criteria.
struct E2e {
    gen: Generator,
    state: TrainState,
    rows: Vec<LogRow>,
    rerun_rows: Vec<LogRow>,
    checksum_before: u64,
    checksum_at_100: Option<u64>,
    checksum_after: u64,
    elapsed: Duration,
    test_pairs: Vec<Pair>,
    turb: TurbulenceConfig,
}

fn run_e2e() -> E2e {
    let seed = 1;
    let t = Instant::now();
    let c = Config::preset(Preset::Desk64);
    let gc = GeneratorConfig::from_config(&c);
    let pairs = toy_pairs(c.toy_subjects, c.toy_variations, c.resolution, &make_rng(seed)).unwrap();
    let ids: Vec<String> = pairs.iter().map(|p| p.record.subject_id.clone()).collect();
    let (tr, _, te) = split_ids(&ids, &SplitSpec::vis_th(seed).fit_to(c.toy_subjects)).unwrap();
    let pick = |set: &[String]| -> Vec<Pair> {
        pairs.iter().filter(|p| set.contains(&p.record.subject_id)).cloned().collect()
    };
    let (train_pairs, test_pairs) = (pick(&tr), pick(&te));
    let visible: Vec<Image> = train_pairs.iter().map(|p| p.visible.clone()).collect();
    let pc = PretrainConfig::from_config(&c, seed);
    let gen = pretrain_generator(gc.clone(), &visible, &pc, None).unwrap().generator.freeze();
    let phi = EmbeddingBackbone::seeded_perceptual(c.backbone_seed);
    let eta = EmbeddingBackbone::seeded_identity(c.backbone_seed, c.eta_embed_dim);
    let tc = TrainConfig::from_config(&c, seed).unwrap();
    let turb = TurbulenceConfig::from_config(&c);
    let frozen = Frozen {
        generator: &gen,
        phi: &phi,
        eta: &eta,
    };
    let checksum_before = gen.checksum();
    let mut checksum_at_100 = None;
    let mut state = TrainState::new(ProjectionConfig::from_config(&c), gc.clone(), &tc).unwrap();
    let mut probe = |r: &LogRow| {
        if r.iter + 1 == 100 {
            checksum_at_100 = Some(gen.checksum());
        }
    };
    let run = TrainRun {
        on_step: Some(&mut probe),
        ..Default::default()
    };
    let rows = train(&mut state, &frozen, &train_pairs, &turb, &tc, run).unwrap();
    let elapsed = t.elapsed();
    let mut again = TrainState::new(ProjectionConfig::from_config(&c), gc, &tc).unwrap();
    let rerun_rows = train(&mut again, &frozen, &train_pairs, &turb, &tc, TrainRun::default()).unwrap();
    let checksum_after = gen.checksum();
    E2e {
        gen,
        state,
        rows,
        rerun_rows,
        checksum_before,
        checksum_at_100,
        checksum_after,
        elapsed,
        test_pairs,
        turb,
    }
}

fn c2_freeze(e: &E2e) -> Outcome {
    let ok = e.checksum_at_100 == Some(e.checksum_before) && e.checksum_after == e.checksum_before;
    (
        ok,
        format!(
            "checksum {:016x} before, {} at step 100, {:016x} after {} steps",
            e.checksum_before,
            e.checksum_at_100.map_or("missing".into(), |c| format!("{c:016x}")),
            e.checksum_after,
            e.rows.len()
        ),
    )
}

fn c3_gradients() -> Outcome {
    let gc = GeneratorConfig {
        output_resolution: 16,
        base_channels: 4,
        max_channels: 8,
        latent_dim: 8,
        mapping_layers: 1,
    };
    let gen = Generator::init(gc.clone(), &mut make_rng(1)).unwrap().freeze();
    let d = Discriminator::init(gc.clone(), &mut make_rng(2)).unwrap();
    let phi = EmbeddingBackbone::seeded_perceptual(3);
    let eta = EmbeddingBackbone::seeded_identity(3, 16);
    let mut proj = Projection::init(ProjectionConfig::new(&gc, 2, 4, 8, 3), &mut make_rng(4)).unwrap();
    // Zero heads make every gradient except the heads' vanish.
    let mut r = make_rng(5);
    let names: Vec<String> = proj.params().names().cloned().collect();
    for n in names.iter().filter(|n| n.contains("head")) {
        let t = proj.params_mut().get_mut(n).unwrap();
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, 0.1, &mut r);
    }
    let pairs = toy_pairs(2, 2, 16, &make_rng(6)).unwrap();
    let turb = TurbulenceConfig {
        alpha: (1.0, 1.5),
        beta: (1.0, 2.0),
        ..Default::default()
    };
    let batch = assemble_batch(&pairs, &[0, 3], &turb, &make_rng(7)).unwrap();
    let noise = NoiseSeeds::new(make_rng(8));
    let frozen = Frozen {
        generator: &gen,
        phi: &phi,
        eta: &eta,
    };
    let w = LossWeights::default();
    let loss = |p: &Projection| {
        let mut g = GraphOf::<f64>::new();
        let (v, _, _) = projection_loss_graph(&mut g, p, &d, &frozen, &batch, &noise, &w, AdvForm::Literal);
        g.value(v.total).item()
    };
    let mut g = GraphOf::<f64>::new();
    let (v, bound, _) = projection_loss_graph(&mut g, &proj, &d, &frozen, &batch, &noise, &w, AdvForm::Literal);
    let mut grads = g.backward(v.total);
    let analytic = bound.collect(&g, &mut grads);
    let mut pick = make_rng(9);
    let rel_at = |h: f32, n: &str, k: usize| {
        let (mut p1, mut p2) = (proj.clone(), proj.clone());
        p1.params_mut().get_mut(n).unwrap().data_mut()[k] += h;
        p2.params_mut().get_mut(n).unwrap().data_mut()[k] -= h;
        let step = p1.params().get(n).unwrap().data()[k] as f64 - p2.params().get(n).unwrap().data()[k] as f64;
        let num = (loss(&p1) - loss(&p2)) / step;
        let a = analytic[n].data()[k] as f64;
        (a - num).abs() / a.abs().max(num.abs()).max(1e-12)
    };
    let (mut worst, mut worst_coarse) = (0.0f64, 0.0f64);
    let samples = 24;
    for _ in 0..samples {
        let n = &names[pick.below(names.len())];
        let k = pick.below(proj.params().get(n).unwrap().numel());
        worst = worst.max(rel_at(1e-6, n, k));
        worst_coarse = worst_coarse.max(rel_at(1e-3, n, k));
    }
    (
        worst < 1e-3,
        format!(
            "{samples} weights, max relative error {worst:.2e} (f64, step 1e-6); step 1e-3 gives {worst_coarse:.2e} across loss kinks"
        ),
    )
}

fn c4_preset_constants() -> Outcome {
    let c = Config::preset(Preset::Paper512);
    let pc = ProjectionConfig::from_config(&c);
    let tc = TrainConfig::from_config(&c, 0).unwrap();
    let t = TurbulenceConfig::from_config(&c);
    let checks = [
        ("down layers 7", pc.downsample_layers == 7),
        ("up layers 7", pc.upsample_layers == 7),
        ("bottleneck 4x4", pc.resolution(pc.downsample_layers) == 4 && pc.validate().is_ok()),
        ("3x3 convs", pc.kernel_size == 3),
        ("batch 4", tc.batch_size == 4),
        ("adam", (tc.beta1, tc.beta2, tc.eps) == (0.9, 0.999, 1e-8)),
        ("lr 2e-3", tc.lr0 == 2e-3),
        ("halve at 140K", tc.lr_halve_at == 140_000),
        ("stop 150K", tc.total_iters == 150_000),
        (
            "lambdas (1,10,10)",
            (tc.weights.lambda_adv, tc.weights.lambda_per, tc.weights.lambda_id) == (1.0, 10.0, 10.0),
        ),
        ("kernel 11", t.kernel_size == 11),
        ("sigma [1,11]", t.sigma == (1.0, 11.0)),
        ("alpha [41,51]", t.alpha == (41.0, 51.0)),
        ("beta [11,21]", t.beta == (11.0, 21.0)),
    ];
    let bad: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    (
        bad.is_empty(),
        if bad.is_empty() {
            format!("all {} paper512 constants match", checks.len())
        } else {
            format!("mismatched: {}", bad.join(", "))
        },
    )
}

fn c5_simulation() -> Outcome {
    let cfg = TurbulenceConfig::default();
    let mut rng = make_rng(21);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = sample_params(&mut rng, &cfg).unwrap();
        let k = gaussian_blur_kernel(&p.kernel).unwrap();
        let s: f64 = k.data().iter().map(|&v| v as f64).sum();
        worst = worst.max((s - 1.0).abs());
    }
    let mut exact = true;
    for i in 0..5 {
        let img = gray(&mut rng, 32, 48);
        let out = degrade(&img, &DegradationParams::identity(), &make_rng(22).fork(&format!("{i}"))).unwrap();
        exact &= out.data() == img.data();
    }
    let pairs = toy_pairs(10, 2, 64, &make_rng(23)).unwrap();
    let mut monotone = 0;
    for p in &pairs {
        let ps: Vec<f64> = [1.0, 5.0, 11.0]
            .iter()
            .map(|&s| {
                let k = gaussian_blur_kernel(&KernelSpec::isotropic(11, s)).unwrap();
                psnr(&blur(&p.thermal, &k).unwrap(), &p.thermal).unwrap()
            })
            .collect();
        if ps[0] > ps[1] && ps[1] > ps[2] {
            monotone += 1;
        }
    }
    let ok = worst <= 1e-6 && exact && monotone * 10 >= pairs.len() * 9;
    (
        ok,
        format!(
            "max |kernel sum - 1| = {worst:.1e} over 1000 specs; identity exact: {exact}; PSNR monotone in sigma on {monotone}/{} images",
            pairs.len()
        ),
    )
}

/// Direct two-pass SSIM over every window position.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, win: usize, sigma: f64) -> f64 {
    let r = (win / 2) as f64;
    let mut wts = vec![0.0; win * win];
    for u in 0..win {
        for v in 0..win {
            let d2 = (u as f64 - r).powi(2) + (v as f64 - r).powi(2);
            wts[u * win + v] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = wts.iter().sum();
    wts.iter_mut().for_each(|x| *x /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - win {
        for x in 0..=w - win {
            let at = |p: &[f64], u: usize, v: usize| p[(y + u) * w + x + v];
            let (mut ma, mut mb) = (0.0, 0.0);
            for u in 0..win {
                for v in 0..win {
                    ma += wts[u * win + v] * at(a, u, v);
                    mb += wts[u * win + v] * at(b, u, v);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..win {
                for v in 0..win {
                    let (da, db) = (at(a, u, v) - ma, at(b, u, v) - mb);
                    va += wts[u * win + v] * da * da;
                    vb += wts[u * win + v] * db * db;
                    cov += wts[u * win + v] * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn c6_metric_oracles() -> Outcome {
    let mut rng = make_rng(31);
    let cfg = SsimConfig {
        window: 7,
        ..Default::default()
    };
    let mut ssim_err = 0.0f64;
    for _ in 0..100 {
        let a = gray(&mut rng, 8, 8);
        let mut b = a.clone();
        let mix = rng.uniform(0.0, 1.0) as f32;
        for v in b.data_mut() {
            *v = ((1.0 - mix) * *v + mix * rng.uniform(0.0, 1.0) as f32).clamp(0.0, 1.0);
        }
        let to64 = |i: &Image| i.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let want = ssim_oracle(&to64(&a), &to64(&b), 8, 8, 7, 1.5);
        ssim_err = ssim_err.max((ssim_with(&a, &b, &cfg).unwrap() - want).abs());
    }
    let black = Image::filled(ColorSpace::Rgb, 4, 4, 0.0);
    let white = Image::filled(ColorSpace::Rgb, 4, 4, 1.0);
    let mut one = black.clone();
    one.data_mut()[5] = 1.0;
    let n = black.data().len() as f64;
    let psnr_err = (psnr(&black, &white).unwrap() - 0.0)
        .abs()
        .max((psnr(&black, &one).unwrap() - 10.0 * n.log10()).abs());
    let deg_err = [
        (cosine_score(&[1.0, 0.0], &[3.0, 0.0]).unwrap(), 100.0),
        (cosine_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0),
        (cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 100.0 / 2f64.sqrt()),
    ]
    .iter()
    .fold(0.0f64, |m, (got, want)| m.max((got - want).abs()));
    (
        ssim_err <= 1e-6 && psnr_err <= 1e-9 && deg_err <= 1e-6,
        format!("SSIM max err {ssim_err:.1e} (100 pairs 8x8); PSNR err {psnr_err:.1e}; Deg err {deg_err:.1e}"),
    )
}

fn c7_niqe() -> Outcome {
    let t = Instant::now();
    let mut r = rand::rngs::StdRng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for &(alpha, left, right) in &[(0.6, 1.0, 1.0), (1.0, 0.7, 1.3), (2.0, 1.0, 1.0), (3.0, 1.2, 0.6)] {
        let g = Gamma::<f64>::new(1.0 / alpha, 1.0).unwrap();
        let x: Vec<f64> = (0..1_000_000)
            .map(|_| {
                let m = g.sample(&mut r).powf(1.0 / alpha);
                if r.random::<f64>() < left / (left + right) {
                    -left * m
                } else {
                    right * m
                }
            })
            .collect();
        worst = worst.max((aggd_fit(&x).alpha - alpha).abs() / alpha);
    }
    let c = Config::preset(Preset::Desk64);
    let pairs = toy_pairs(20, 2, 64, &make_rng(42)).unwrap();
    let pristine: Vec<Image> = pairs.iter().skip(1).step_by(2).map(|p| p.visible.clone()).collect();
    let model = fit_niqe(&pristine, c.niqe_patch_size, c.niqe_sharpness).unwrap();
    let k = gaussian_blur_kernel(&KernelSpec::isotropic(11, 2.0)).unwrap();
    let held_out: Vec<&Pair> = pairs.iter().step_by(2).collect();
    let ordered = held_out
        .iter()
        .filter(|p| niqe(&p.visible, &model).unwrap() < niqe(&blur(&p.visible, &k).unwrap(), &model).unwrap())
        .count();
    let secs = t.elapsed().as_secs_f64();
    (
        worst <= 0.05 && ordered * 10 >= held_out.len() * 9 && secs < 300.0,
        format!(
            "AGGD alpha max rel err {:.2}% on 1e6 samples; pristine < blurred on {ordered}/{} images; {secs:.1}s",
            100.0 * worst,
            held_out.len()
        ),
    )
}

fn c8_verification() -> Outcome {
    let mut rng = make_rng(51);
    let mut rank_ok = true;
    for t in 0..20 {
        let subjects = 5 + rng.below(15);
        let dim = 4 + rng.below(8);
        let vec = |rng: &mut RngStream| -> Vec<f32> { (0..dim).map(|_| rng.normal() as f32).collect() };
        let gallery: Vec<Entry> = (0..subjects)
            .map(|s| Entry {
                subject_id: format!("s{s}"),
                id: format!("s{s}/g"),
                embedding: vec(&mut rng),
            })
            .collect();
        let probes: Vec<Entry> = (0..50)
            .map(|i| Entry {
                subject_id: format!("s{}", rng.below(subjects)),
                id: format!("p{t}/{i}"),
                embedding: vec(&mut rng),
            })
            .collect();
        let hits = probes
            .iter()
            .filter(|p| {
                let cos = |g: &Entry| {
                    let dot: f64 = p.embedding.iter().zip(&g.embedding).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let n = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                    dot / (n(&p.embedding) * n(&g.embedding))
                };
                let mut best = (f64::NEG_INFINITY, 0);
                for (j, g) in gallery.iter().enumerate() {
                    if cos(g) > best.0 {
                        best = (cos(g), j);
                    }
                }
                gallery[best.1].subject_id == p.subject_id
            })
            .count();
        let want = 100.0 * hits as f64 / 50.0;
        let got = rank1(&GallerySet::new(gallery).unwrap(), &ProbeSet { entries: probes }).unwrap();
        rank_ok &= got == want;
    }
    let fars = [0.001, 0.005, 0.01, 0.05, 0.1, 0.25, 0.5];
    let (mut far_ok, mut mono_ok, mut sets) = (true, true, 0);
    for t in 0..200 {
        let n_imp = 1 + rng.below(3000);
        let n_gen = 1 + rng.below(200);
        // Coarse quantization on some sets forces ties at the threshold.
        let q = if t % 2 == 0 { 20.0 } else { 1e6 };
        let mut score = |mu: f64| ((mu + 0.3 * rng.normal()) * q).round() / q;
        let impostor: Vec<f64> = (0..n_imp).map(|_| score(0.0)).collect();
        let genuine: Vec<f64> = (0..n_gen).map(|_| score(0.5)).collect();
        let mut prev = -1.0;
        for &far in &fars {
            let r = vr_at_far(&genuine, &impostor, far).unwrap();
            let accepted = impostor.iter().filter(|&&s| s > r.threshold).count();
            far_ok &= accepted as f64 / n_imp as f64 <= far;
            mono_ok &= r.vr >= prev;
            prev = r.vr;
        }
        sets += 1;
    }
    (
        rank_ok && far_ok && mono_ok,
        format!(
            "rank-1 matches brute force on 20 instances of 50 probes: {rank_ok}; achieved FAR <= target on {sets} score sets: {far_ok}; VR monotone in FAR: {mono_ok}"
        ),
    )
}

fn c9_training(e: &E2e) -> Outcome {
    let px: Vec<f64> = e.rows.iter().map(|r| r.loss.pixel as f64).collect();
    if px.len() < 40 {
        return (false, format!("only {} iterations logged", px.len()));
    }
    let first = px[..20].iter().sum::<f64>() / 20.0;
    let last = px[px.len() - 20..].iter().sum::<f64>() / 20.0;
    let bit_exact = log_csv(&e.rows) == log_csv(&e.rerun_rows)
        && e
            .rows
            .iter()
            .zip(&e.rerun_rows)
            .all(|(a, b)| a.loss.total.to_bits() == b.loss.total.to_bits() && a.d_loss.to_bits() == b.d_loss.to_bits());
    let secs = e.elapsed.as_secs_f64();
    (
        last <= 0.7 * first && secs < 900.0 && bit_exact && e.state.iteration == 200,
        format!(
            "pixel loss first-20 mean {first:.4}, last-20 mean {last:.4} (ratio {:.3}); pretrain+train {secs:.0}s; rerun bit-exact: {bit_exact}",
            last / first
        ),
    )
}

fn c10_reconstruction(e: &E2e) -> Outcome {
    let (mut rec, mut input) = (0.0, 0.0);
    let noise = NoiseSeeds::new(make_rng(61));
    for (k, p) in e.test_pairs.iter().enumerate() {
        let (deg, _) = degrade_random(&p.thermal, &e.turb, &make_rng(62).fork(&format!("{k}"))).unwrap();
        let out = reconstruct(&e.state.projection, &e.gen, &[deg.clone()], &noise).unwrap();
        rec += psnr(&out[0], &p.visible).unwrap();
        input += psnr(&deg.to_rgb(), &p.visible).unwrap();
    }
    let n = e.test_pairs.len() as f64;
    let (rec, input) = (rec / n, input / n);
    (
        rec > input,
        format!("mean PSNR reconstruction {rec:.2} dB vs degraded input {input:.2} dB on {} test images", n),
    )
}

fn c11_splits() -> Outcome {
    let check = |n: usize, spec: &dyn Fn(u64) -> SplitSpec, want: (usize, usize, usize)| {
        let ids: Vec<String> = (0..n).map(|i| format!("subject{i:03}")).collect();
        (0..5).all(|seed| {
            let (a, b, c) = split_ids(&ids, &spec(seed)).unwrap();
            let all: BTreeSet<&String> = a.iter().chain(&b).chain(&c).collect();
            (a.len(), b.len(), c.len()) == want && all.len() == n
        })
    };
    let vis = check(50, &SplitSpec::vis_th, (35, 5, 10));
    let arl = check(220, &SplitSpec::arl_vtf, (160, 40, 20));
    (
        vis && arl,
        format!("VIS-TH 35/5/10 of 50 disjoint: {vis}; ARL-VTF 160/40/20 of 220 disjoint: {arl} (5 seeds each)"),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |s| s.contains(&i));
    let mut e2e: Option<Option<E2e>> = None;
    let shared = |e2e: &mut Option<Option<E2e>>| -> bool {
        if e2e.is_none() {
            *e2e = Some(catch_unwind(run_e2e).ok());
        }
        e2e.as_ref().unwrap().is_some()
    };
    let names = [
        "modulation identity",
        "freeze contract",
        "gradient correctness",
        "full-scale preset constants",
        "simulation invariants",
        "metric oracles",
        "NIQE sanity",
        "verification oracle",
        "end-to-end training smoke",
        "reconstruction beats input",
        "split fidelity",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !wanted(id) {
            continue;
        }
        let needs_e2e = matches!(id, 2 | 9 | 10);
        let outcome = if needs_e2e && !shared(&mut e2e) {
            Ok((false, "end-to-end run panicked".to_string()))
        } else {
            let e = e2e.as_ref().and_then(|x| x.as_ref());
            catch_unwind(AssertUnwindSafe(|| match id {
                1 => c1_modulation_identity(),
                2 => c2_freeze(e.unwrap()),
                3 => c3_gradients(),
                4 => c4_preset_constants(),
                5 => c5_simulation(),
                6 => c6_metric_oracles(),
                7 => c7_niqe(),
                8 => c8_verification(),
                9 => c9_training(e.unwrap()),
                10 => c10_reconstruction(e.unwrap()),
                _ => c11_splits(),
            }))
        };
        let (pass, detail) = outcome.unwrap_or_else(|_| (false, "panicked".into()));
        if !pass {
            failed += 1;
        }
        println!("{} [{id:>2}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
