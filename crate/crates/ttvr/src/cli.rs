//! The `ttvr` command line: one binary, one subcommand per pipeline stage.
//!
//! Global flags select a preset, a config file, `--set key=value` overrides,
//! the seed and the output directory. Every subcommand writes
//! `config.resolved.toml` into its output directory; passing that file back
//! with `--config` and the recorded seed reproduces the run. Failures print
//! one `error kind=<kind> message=<text>` line on stderr and exit with 1;
//! usage errors exit with 2.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ttvr_core::{load_image, make_rng, save_image, ColorSpace, Error, Image, Result, Tensor};

use crate::config::{Config, Preset};
use crate::dataset::{
    color_adjust, load_paired_dataset, make_toy_dataset, split_subjects, Pair, PairedDataset, Record, SplitSpec,
};
use crate::generator::{Generator, GeneratorConfig, NoiseSeeds};
use crate::metrics::{evaluate, fit_niqe, Evaluators, NiqeModel};
use crate::objectives::{BackboneRole, EmbeddingBackbone};
use crate::projection::{Projection, ProjectionConfig};
use crate::trainer::{
    log_csv, pretrain_generator, pretrained_checkpoint, reconstruct, train, Frozen, PretrainConfig, TrainConfig,
    TrainRun, TrainState,
};
use crate::turbulence::{degrade_random, TurbulenceConfig};
use crate::verification::{build_protocol, verify};

#[derive(Parser, Debug)]
#[command(name = "ttvr", version, about = "Thermal-to-visible face reconstruction under atmospheric turbulence")]
pub struct Cli {
    /// Base preset.
    #[arg(long, global = true, default_value = "desk64", value_parser = ["paper512", "desk64"])]
    pub preset: String,
    /// TOML file overriding preset values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key=value` override applied after the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render procedural paired faces and a manifest.
    MakeToyDataset(ToyArgs),
    /// Degrade thermal images with random turbulence.
    Simulate(SimulateArgs),
    /// Adversarially pretrain the generator on visible images.
    Pretrain(PretrainArgs),
    /// Train the projection module against a frozen generator.
    Train(TrainArgs),
    /// Map degraded thermal images to visible reconstructions.
    Reconstruct(ReconstructArgs),
    /// Score reconstructions against references.
    Evaluate(EvaluateArgs),
    /// Face verification of reconstructions against a visible gallery.
    Verify(VerifyArgs),
    /// Fit a NIQE pristine model on a directory of images.
    FitNiqe(FitNiqeArgs),
    /// Tile (input, reconstruction, reference) triplets into one PNG.
    Grid(GridArgs),
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    /// Defaults to `toy_subjects` from the config.
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Defaults to `toy_variations` from the config.
    #[arg(long)]
    pub variations: Option<usize>,
    /// Defaults to `resolution` from the config.
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Directory of clean thermal PNGs.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub input: Option<PathBuf>,
    /// Dataset manifest; degrades the chosen split and copies its visible references.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `pretrain_iters` from the config.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Apply the percentile color adjustment to visible images.
    #[arg(long)]
    pub color_adjust: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained generator checkpoint.
    #[arg(long)]
    pub generator: PathBuf,
    /// Stop after this many iterations instead of `total_iters`.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Resume from a `train_state.ckpt`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub color_adjust: bool,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub projection: PathBuf,
    #[arg(long)]
    pub generator: PathBuf,
    /// Directory of degraded thermal PNGs.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub results: PathBuf,
    /// Directory of reference images with the same file names.
    #[arg(long)]
    pub reference: PathBuf,
    /// Perceptual backbone; defaults to `phi_path` or the seeded backbone.
    #[arg(long)]
    pub phi: Option<PathBuf>,
    /// Identity backbone; defaults to `eta_path` or the seeded backbone.
    #[arg(long)]
    pub eta: Option<PathBuf>,
    /// NIQE model; fitted on the reference directory when absent.
    #[arg(long)]
    pub niqe: Option<PathBuf>,
    #[arg(long, default_value = "ours")]
    pub label: String,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Reconstructions named `<subject>_<tag>.png`.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    pub split: String,
    #[arg(long)]
    pub eta: Option<PathBuf>,
    #[arg(long, default_value = "ours")]
    pub label: String,
}

#[derive(Args, Debug)]
pub struct FitNiqeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub reconstruction: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Maximum number of rows.
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error kind={} message={}", error_kind(&e), e.to_string().replace('\n', " "));
            1
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Argument(_) => "argument",
        Error::Format(_) => "format",
        Error::Integrity(_) => "integrity",
        Error::State(_) => "state",
        Error::Numeric(_) => "numeric",
        Error::Ingestion { .. } => "ingestion",
        Error::Io { .. } => "io",
        Error::Image { .. } => "image",
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let preset = Preset::parse(&cli.preset)?;
    let cfg = Config::resolve(preset, cli.config.as_deref(), &cli.overrides)?;
    let out = &cli.out;
    mkdir(out)?;
    write_snapshot(cli, &cfg)?;
    match &cli.command {
        Command::MakeToyDataset(a) => make_toy(a, &cfg, cli.seed, out),
        Command::Simulate(a) => simulate(a, &cfg, cli.seed, out),
        Command::Pretrain(a) => pretrain(a, &cfg, cli.seed, out),
        Command::Train(a) => train_cmd(a, &cfg, cli.seed, out),
        Command::Reconstruct(a) => reconstruct_cmd(a, cli.seed, out),
        Command::Evaluate(a) => evaluate_cmd(a, &cfg, out),
        Command::Verify(a) => verify_cmd(a, &cfg, cli.seed, out),
        Command::FitNiqe(a) => {
            let imgs = load_dir(&a.corpus)?;
            let model = fit_niqe(&imgs.into_values().collect::<Vec<_>>(), cfg.niqe_patch_size, cfg.niqe_sharpness)?;
            model.save(out.join("niqe.ckpt"))
        }
        Command::Grid(a) => grid_cmd(a, out),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, s: &str) -> Result<()> {
    std::fs::write(p, s).map_err(|e| Error::io(p, e))
}

fn write_snapshot(cli: &Cli, cfg: &Config) -> Result<()> {
    let sub = format!("{:?}", cli.command);
    let sub = sub.split(['(', ' ']).next().unwrap_or_default().to_string();
    let mut s = String::new();
    let _ = writeln!(s, "# subcommand = {sub}");
    let _ = writeln!(s, "# seed = {}", cli.seed);
    let _ = writeln!(s, "# config_hash = {}", cfg.hash());
    s += &cfg.to_toml();
    write_file(&cli.out.join("config.resolved.toml"), &s)
}

/// File stem used for per-record outputs.
pub fn record_stem(r: &Record) -> String {
    format!("{}_{}", r.subject_id, r.tag)
}

/// PNGs of a directory keyed by file name, in name order.
pub fn load_dir(dir: &Path) -> Result<BTreeMap<String, Image>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, load_image(&path)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Argument(format!("no PNG images in {}", dir.display())));
    }
    Ok(out)
}

fn split_spec(cfg: &Config, seed: u64, n_subjects: usize) -> Result<SplitSpec> {
    Ok(SplitSpec::preset(&cfg.split, seed)?.fit_to(n_subjects))
}

fn select_split(ds: &PairedDataset, cfg: &Config, seed: u64, which: &str) -> Result<PairedDataset> {
    if which == "all" {
        return Ok(ds.clone());
    }
    let spec = split_spec(cfg, seed, ds.subjects().len())?;
    let (tr, va, te) = split_subjects(ds, &spec)?;
    Ok(match which {
        "train" => tr,
        "val" => va,
        _ => te,
    })
}

fn make_toy(a: &ToyArgs, cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let ds = make_toy_dataset(
        a.subjects.unwrap_or(cfg.toy_subjects),
        a.variations.unwrap_or(cfg.toy_variations),
        a.resolution.unwrap_or(cfg.resolution),
        &make_rng(seed).fork("toy"),
        out,
    )?;
    println!("wrote {} pairs to {}", ds.len(), ds.manifest.display());
    Ok(())
}

fn simulate(a: &SimulateArgs, cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let turb = TurbulenceConfig::from_config(cfg);
    let root = make_rng(seed).fork("simulate");
    let deg_dir = out.join("degraded");
    mkdir(&deg_dir)?;
    let mut rows = String::from("name,kernel_size,sigma_x,sigma_y,theta,alpha,beta,noise_sigma,seed_label\n");
    let mut jobs: Vec<(String, Image, Option<Image>)> = Vec::new();
    if let Some(manifest) = &a.data {
        let ds = select_split(&load_paired_dataset(manifest)?, cfg, seed, &a.split)?;
        for p in ds.load_pairs()? {
            jobs.push((format!("{}.png", record_stem(&p.record)), p.thermal, Some(p.visible)));
        }
    } else if let Some(dir) = &a.input {
        for (name, img) in load_dir(dir)? {
            jobs.push((name, img.to_grayscale(), None));
        }
    }
    if jobs.iter().any(|j| j.2.is_some()) {
        mkdir(&out.join("reference"))?;
    }
    for (name, img, reference) in &jobs {
        let (d, p) = degrade_random(img, &turb, &root.fork(name))?;
        save_image(&d, deg_dir.join(name))?;
        if let Some(r) = reference {
            save_image(r, out.join("reference").join(name))?;
        }
        let k = &p.kernel;
        let _ = writeln!(
            rows,
            "{name},{},{},{},{},{},{},{},{}",
            k.size, k.sigma_x, k.sigma_y, k.theta, p.alpha, p.beta, p.noise_sigma, p.seed_label
        );
    }
    write_file(&out.join("params.csv"), &rows)?;
    println!("degraded {} images into {}", jobs.len(), deg_dir.display());
    Ok(())
}

fn load_training_pairs(data: &Path, cfg: &Config, seed: u64, adjust: bool) -> Result<Vec<Pair>> {
    let ds = select_split(&load_paired_dataset(data)?, cfg, seed, "train")?;
    let mut pairs = ds.load_pairs()?;
    if adjust {
        for p in &mut pairs {
            p.visible = color_adjust(&p.visible);
        }
    }
    Ok(pairs)
}

fn pretrain(a: &PretrainArgs, cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let pairs = load_training_pairs(&a.data, cfg, seed, a.color_adjust)?;
    let visible: Vec<Image> = pairs.into_iter().map(|p| p.visible).collect();
    let mut pc = PretrainConfig::from_config(cfg, seed);
    if let Some(n) = a.iters {
        pc.iters = n;
    }
    let outcome = pretrain_generator(GeneratorConfig::from_config(cfg), &visible, &pc, None)?;
    let mut log = String::from("iter,d_loss,g_loss\n");
    for (n, d, g) in &outcome.log {
        let _ = writeln!(log, "{n},{d},{g}");
    }
    write_file(&out.join("pretrain_log.csv"), &log)?;
    ttvr_core::save_checkpoint(&pretrained_checkpoint(&outcome.generator, pc.iters), out.join("generator.ckpt"))?;
    println!("pretrained generator for {} iterations", pc.iters);
    Ok(())
}

fn backbones(cfg: &Config, phi: Option<&Path>, eta: Option<&Path>) -> Result<(EmbeddingBackbone, EmbeddingBackbone)> {
    let path = |o: Option<&Path>, d: &str| o.map(|p| p.to_string_lossy().into_owned()).unwrap_or_else(|| d.to_string());
    Ok((
        EmbeddingBackbone::resolve(BackboneRole::Perceptual, &path(phi, &cfg.phi_path), cfg.backbone_seed, cfg.eta_embed_dim)?,
        EmbeddingBackbone::resolve(BackboneRole::Identity, &path(eta, &cfg.eta_path), cfg.backbone_seed, cfg.eta_embed_dim)?,
    ))
}

fn train_cmd(a: &TrainArgs, cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let gen_cfg = GeneratorConfig::from_config(cfg);
    let generator = Generator::load_pretrained_expecting(&a.generator, &gen_cfg)?.freeze();
    let (phi, eta) = backbones(cfg, None, None)?;
    let pairs = load_training_pairs(&a.data, cfg, seed, a.color_adjust)?;
    let tc = TrainConfig::from_config(cfg, seed)?;
    let fresh = TrainState::new(ProjectionConfig::from_config(cfg), gen_cfg, &tc)?;
    let mut state = match &a.resume {
        Some(p) => TrainState::load(p, &fresh)?,
        None => fresh,
    };
    let frozen = Frozen {
        generator: &generator,
        phi: &phi,
        eta: &eta,
    };
    let run = TrainRun {
        stop_at: a.iters.map(|n| state.iteration + n),
        checkpoint_dir: Some(out),
        on_step: None,
    };
    let rows = train(&mut state, &frozen, &pairs, &TurbulenceConfig::from_config(cfg), &tc, run)?;
    write_file(&out.join("loss_log.csv"), &log_csv(&rows))?;
    state.save(out.join("train_state.ckpt"))?;
    state.projection.save(out.join("projection.ckpt"))?;
    println!("trained to iteration {}", state.iteration);
    Ok(())
}

fn reconstruct_cmd(a: &ReconstructArgs, seed: u64, out: &Path) -> Result<()> {
    let projection = Projection::load(&a.projection)?;
    let generator = Generator::load_pretrained(&a.generator)?.freeze();
    let noise = NoiseSeeds::new(make_rng(seed).fork("reconstruct"));
    let mut n = 0;
    for (name, img) in load_dir(&a.input)? {
        let rec = reconstruct(&projection, &generator, &[img.to_grayscale()], &noise)?;
        save_image(&rec[0], out.join(&name))?;
        n += 1;
    }
    println!("reconstructed {n} images");
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, cfg: &Config, out: &Path) -> Result<()> {
    let results = load_dir(&a.results)?;
    let refs = load_dir(&a.reference)?;
    let (phi, eta) = backbones(cfg, a.phi.as_deref(), a.eta.as_deref())?;
    let model = match &a.niqe {
        Some(p) => NiqeModel::load(p)?,
        None => fit_niqe(&refs.values().cloned().collect::<Vec<_>>(), cfg.niqe_patch_size, cfg.niqe_sharpness)?,
    };
    let mut items = Vec::new();
    for (name, img) in &results {
        let r = refs
            .get(name)
            .ok_or_else(|| Error::Argument(format!("no reference image named {name}")))?;
        items.push((name.clone(), img.clone(), r.clone()));
    }
    let report = evaluate(
        &items,
        &Evaluators {
            phi: &phi,
            eta: &eta,
            niqe: &model,
        },
    )?;
    write_file(&out.join("metrics.csv"), &report.to_csv())?;
    let table = report.table(&a.label);
    write_file(&out.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn verify_cmd(a: &VerifyArgs, cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let ds = select_split(&load_paired_dataset(&a.data)?, cfg, seed, &a.split)?;
    let pairs = ds.load_pairs()?;
    let (_, eta) = backbones(cfg, None, a.eta.as_deref())?;
    let mut recs = BTreeMap::new();
    for p in &pairs {
        let path = a.results.join(format!("{}.png", record_stem(&p.record)));
        if path.exists() {
            recs.insert(p.record.id(), load_image(&path)?);
        }
    }
    let (gallery, probes) = build_protocol(&pairs, &eta, &recs)?;
    let res = verify(&gallery, &probes)?;
    write_file(&out.join("scores.csv"), &res.scores_csv(&gallery, &probes))?;
    let table = res.table(&a.label);
    write_file(&out.join("verification.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Tiles rows of equally sized images into one RGB image.
pub fn montage(rows: &[Vec<Image>]) -> Result<Image> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Argument("montage needs at least one image".into()))?;
    let (h, w) = (first.height(), first.width());
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Argument("montage rows differ in length".into()));
    }
    let (oh, ow) = (h * rows.len(), w * cols);
    let mut data = vec![0.0f32; 3 * oh * ow];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            if img.height() != h || img.width() != w {
                return Err(Error::Argument(format!(
                    "montage tile {ri},{ci} is {}x{}, expected {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            let rgb = img.to_rgb();
            for c in 0..3 {
                let src = rgb.plane(c);
                for y in 0..h {
                    let dst = c * oh * ow + (ri * h + y) * ow + ci * w;
                    data[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
    }
    Image::new(Tensor::new(&[3, oh, ow], data)?, ColorSpace::Rgb)
}

fn grid_cmd(a: &GridArgs, out: &Path) -> Result<()> {
    let input = load_dir(&a.input)?;
    let rec = load_dir(&a.reconstruction)?;
    let reference = load_dir(&a.reference)?;
    let mut rows = Vec::new();
    for (name, img) in &input {
        if let (Some(r), Some(f)) = (rec.get(name), reference.get(name)) {
            rows.push(vec![img.clone(), r.clone(), f.clone()]);
        }
    }
    if let Some(n) = a.limit {
        rows.truncate(n);
    }
    if rows.is_empty() {
        return Err(Error::Argument("no file name is present in all three directories".into()));
    }
    let m = montage(&rows)?;
    save_image(&m, out.join("grid.png"))?;
    println!("wrote {}x{} grid of {} rows", m.width(), m.height(), rows.len());
    Ok(())
}
