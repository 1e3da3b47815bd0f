//! Alternating discriminator/projection optimization against a frozen
//! generator, plus unconditional pretraining of the toy generator.
//!
//! Randomness is keyed by iteration: iteration `n` degrades its samples with
//! `train/iter{n}/sample{k}` and draws generator noise from
//! `train/iter{n}/noise`; the batch order of epoch `e` comes from
//! `data/epoch{e}`. A saved [`TrainState`] therefore resumes onto exactly the
//! trajectory of an uninterrupted run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ttvr_core::{
    load_checkpoint, make_rng, save_checkpoint, Adam, Checkpoint, Error, Graph, GraphOf, Image,
    Real, Result, RngStream, Tensor, Var,
};

use crate::config::Config;
use crate::dataset::{assemble_batch, epoch_order, Batch, Pair};
use crate::generator::{Generator, GeneratorConfig, LatentCode, NoiseSeeds};
use crate::nn::images_to_batch;
use crate::objectives::{
    discriminator_step, generator_loss_graph, AdvForm, Critics, Discriminator, EmbeddingBackbone,
    LossReport, LossWeights,
};
use crate::projection::{Projection, ProjectionConfig};
use crate::turbulence::TurbulenceConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub lr0: f32,
    pub d_lr: f32,
    pub lr_halve_at: usize,
    pub total_iters: usize,
    pub checkpoint_every: usize,
    pub grad_clip: f32,
    pub r1_gamma: f32,
    pub r1_every: usize,
    pub weights: LossWeights,
    pub adv_form: AdvForm,
    pub seed: u64,
}

impl TrainConfig {
    pub fn from_config(c: &Config, seed: u64) -> Result<Self> {
        Ok(Self {
            batch_size: c.batch_size,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            lr0: c.lr0,
            d_lr: c.d_lr,
            lr_halve_at: c.lr_halve_at,
            total_iters: c.total_iters,
            checkpoint_every: c.checkpoint_every,
            grad_clip: c.grad_clip,
            r1_gamma: c.r1_gamma,
            r1_every: c.r1_every,
            weights: LossWeights::from_config(c),
            adv_form: AdvForm::parse(&c.adv_form)?,
            seed,
        })
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.beta1, self.beta2, self.eps)
    }
}

/// `lr0` before `lr_halve_at`, `lr0 / 2` from then on.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> Result<f32> {
    if iter >= cfg.total_iters {
        return Err(Error::Argument(format!(
            "iteration {iter} is outside [0, {})",
            cfg.total_iters
        )));
    }
    Ok(if iter < cfg.lr_halve_at { cfg.lr0 } else { cfg.lr0 / 2.0 })
}

/// Everything that evolves during projection training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub projection: Projection,
    pub proj_opt: Adam,
    pub discriminator: Discriminator,
    pub disc_opt: Adam,
}

impl TrainState {
    pub fn new(proj_cfg: ProjectionConfig, gen_cfg: GeneratorConfig, cfg: &TrainConfig) -> Result<Self> {
        let root = make_rng(cfg.seed).fork("init");
        Ok(Self {
            iteration: 0,
            projection: Projection::init(proj_cfg, &mut root.fork("projection"))?,
            proj_opt: cfg.adam(),
            discriminator: Discriminator::init(gen_cfg, &mut root.fork("discriminator"))?,
            disc_opt: cfg.adam(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.projection.write_into(&mut c, "projection");
        for (k, v) in self.discriminator.to_checkpoint("discriminator").entries {
            c.insert(k, v);
        }
        self.proj_opt.save_into(&mut c, "adam.projection");
        self.disc_opt.save_into(&mut c, "adam.discriminator");
        c.set_meta("iteration", self.iteration.to_string());
        c
    }

    /// Restores a state; `template` supplies the optimizer hyper-parameters and
    /// the discriminator architecture.
    pub fn from_checkpoint(c: &Checkpoint, template: &TrainState) -> Result<Self> {
        let iteration = c
            .meta("iteration")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Integrity("train state lacks iteration".into()))?;
        let projection = Projection::read_from(c, "projection")?;
        let mut discriminator = template.discriminator.clone();
        discriminator.load_from(c, "discriminator")?;
        let mut proj_opt = template.proj_opt.clone();
        proj_opt.load_from(c, "adam.projection")?;
        let mut disc_opt = template.disc_opt.clone();
        disc_opt.load_from(c, "adam.discriminator")?;
        Ok(Self {
            iteration,
            projection,
            proj_opt,
            discriminator,
            disc_opt,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: impl AsRef<Path>, template: &TrainState) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, template)
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f32,
    pub loss: LossReport,
    pub d_loss: f32,
    pub r1: f32,
}

pub const LOG_HEADER: &str = "iter,lr,total,adv,pixel,perceptual,identity";

impl LogRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, self.lr, l.total, l.adv, l.pixel, l.perceptual, l.identity
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Fixed networks a training step reads.
pub struct Frozen<'a> {
    pub generator: &'a Generator,
    pub phi: &'a EmbeddingBackbone,
    pub eta: &'a EmbeddingBackbone,
}

/// Handles of the projection → modulated generator forward pass.
pub struct Reconstruction {
    pub image: Var,
    pub pre_clamp: Var,
    pub z: Var,
    pub mods: Vec<Var>,
}

/// Builds projection + frozen-generator synthesis for a `(B, 1, R, R)` thermal batch.
pub fn reconstruct_graph<R: Real>(
    g: &mut GraphOf<R>,
    proj: &Projection,
    proj_bound: &ttvr_core::Bound,
    generator: &Generator,
    thermal: Var,
    noise: &NoiseSeeds,
) -> Reconstruction {
    let gp = generator.bind(g);
    let (z, mods) = proj.forward_graph(g, proj_bound, thermal);
    let b = g.shape(thermal)[0];
    let noise: Vec<Var> = noise
        .all_levels(generator.config(), b)
        .into_iter()
        .map(|t| g.constant(t))
        .collect();
    let out = generator.synthesize(g, &gp, z, Some(&mods), &noise);
    Reconstruction {
        image: out.image,
        pre_clamp: out.pre_clamp,
        z,
        mods,
    }
}

/// Projection loss graph for one batch; returns the loss handles and the
/// projection binding.
pub fn projection_loss_graph<R: Real>(
    g: &mut GraphOf<R>,
    proj: &Projection,
    discriminator: &Discriminator,
    frozen: &Frozen,
    batch: &Batch,
    noise: &NoiseSeeds,
    weights: &LossWeights,
    form: AdvForm,
) -> (crate::objectives::LossVars, ttvr_core::Bound, Var) {
    let pp = proj.bind(g);
    let x = g.constant(batch.thermal.clone());
    let rec = reconstruct_graph(g, proj, &pp, frozen.generator, x, noise);
    let dp = discriminator.bind(g, false);
    let real = g.constant(batch.visible.clone());
    let critics = Critics {
        discriminator,
        phi: frozen.phi,
        eta: frozen.eta,
    };
    let vars = generator_loss_graph(g, real, rec.image, &critics, &dp, weights, form);
    (vars, pp, rec.image)
}

fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f32) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .values()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// One discriminator update on the current reconstructions, then one
/// projection update against the updated discriminator.
pub fn train_step(
    state: &mut TrainState,
    frozen: &Frozen,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<LogRow> {
    if !frozen.generator.is_frozen() {
        return Err(Error::State("refusing to train against a generator that is not frozen".into()));
    }
    frozen.phi.ensure_loaded()?;
    frozen.eta.ensure_loaded()?;
    let n = state.iteration;
    let lr = lr_schedule(n, cfg)?;
    let d_lr = cfg.d_lr * (lr / cfg.lr0);
    let noise = NoiseSeeds::new(rng.fork("noise"));

    let mut g = Graph::new();
    let pp = state.projection.bind(&mut g);
    let x = g.constant(batch.thermal.clone());
    let rec = reconstruct_graph(&mut g, &state.projection, &pp, frozen.generator, x, &noise);
    let fake = g.value(rec.image).clone();

    let r1_weight = if cfg.r1_gamma > 0.0 && n % cfg.r1_every == 0 {
        cfg.r1_every as f32
    } else {
        0.0
    };
    let d = discriminator_step(&state.discriminator, &batch.visible, &fake, cfg.r1_gamma, r1_weight)?;
    let mut dgrads = d.grads;
    clip_grads(&mut dgrads, cfg.grad_clip);
    state
        .disc_opt
        .step(state.discriminator.params_mut(), &dgrads, d_lr);

    let dp = state.discriminator.bind(&mut g, false);
    let real = g.constant(batch.visible.clone());
    let critics = Critics {
        discriminator: &state.discriminator,
        phi: frozen.phi,
        eta: frozen.eta,
    };
    let vars = generator_loss_graph(&mut g, real, rec.image, &critics, &dp, &cfg.weights, cfg.adv_form);
    let mut grads = g.backward(vars.total);
    let mut pgrads = pp.collect(&g, &mut grads);
    clip_grads(&mut pgrads, cfg.grad_clip);
    state.proj_opt.step(state.projection.params_mut(), &pgrads, lr);
    state.iteration += 1;
    Ok(LogRow {
        iter: n,
        lr,
        loss: vars.report(&g),
        d_loss: d.logistic,
        r1: d.r1,
    })
}

/// Deterministic batch for iteration `n`.
pub fn batch_for_iteration(
    pairs: &[Pair],
    n: usize,
    batch_size: usize,
    turb: &TurbulenceConfig,
    seed: u64,
) -> Result<Batch> {
    let per_epoch = pairs.len() / batch_size;
    if per_epoch == 0 {
        return Err(Error::Argument(format!(
            "dataset of {} pairs cannot fill a batch of {batch_size}",
            pairs.len()
        )));
    }
    let (epoch, j) = (n / per_epoch, n % per_epoch);
    let order = epoch_order(pairs.len(), &make_rng(seed).fork("data").fork(&format!("epoch{epoch}")));
    let idx = &order[j * batch_size..(j + 1) * batch_size];
    assemble_batch(pairs, idx, turb, &iteration_rng(seed, n))
}

fn iteration_rng(seed: u64, n: usize) -> RngStream {
    make_rng(seed).fork("train").fork(&format!("iter{n}"))
}

/// Options for [`train`].
#[derive(Default)]
pub struct TrainRun<'a> {
    /// Stop before this iteration (exclusive) instead of `total_iters`.
    pub stop_at: Option<usize>,
    /// Directory for periodic `train_state.ckpt` snapshots.
    pub checkpoint_dir: Option<&'a Path>,
    pub on_step: Option<&'a mut dyn FnMut(&LogRow)>,
}

/// Runs iterations `state.iteration .. total_iters` (or `stop_at`).
pub fn train(
    state: &mut TrainState,
    frozen: &Frozen,
    pairs: &[Pair],
    turb: &TurbulenceConfig,
    cfg: &TrainConfig,
    mut run: TrainRun,
) -> Result<Vec<LogRow>> {
    if pairs.is_empty() {
        return Err(Error::Argument("training dataset is empty".into()));
    }
    if !frozen.generator.is_frozen() {
        return Err(Error::State("refusing to train against a generator that is not frozen".into()));
    }
    let end = run.stop_at.unwrap_or(cfg.total_iters).min(cfg.total_iters);
    let mut rows = Vec::with_capacity(end.saturating_sub(state.iteration));
    while state.iteration < end {
        let n = state.iteration;
        let batch = batch_for_iteration(pairs, n, cfg.batch_size, turb, cfg.seed)?;
        let row = train_step(state, frozen, &batch, cfg, &iteration_rng(cfg.seed, n))?;
        if let Some(cb) = run.on_step.as_mut() {
            cb(&row);
        }
        rows.push(row);
        if let Some(dir) = run.checkpoint_dir {
            let done = state.iteration;
            if cfg.checkpoint_every > 0 && (done % cfg.checkpoint_every == 0 || done == end) {
                state.save(dir.join("train_state.ckpt"))?;
            }
        }
    }
    Ok(rows)
}

/// Reconstructs visible images from degraded thermal images.
pub fn reconstruct(
    projection: &Projection,
    generator: &Generator,
    thermal: &[Image],
    noise: &NoiseSeeds,
) -> Result<Vec<Image>> {
    let (z, mods) = projection.project(thermal)?;
    generator.generate_modulated(&z, &mods, noise)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub r1_gamma: f32,
    pub r1_every: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn from_config(c: &Config, seed: u64) -> Self {
        Self {
            iters: c.pretrain_iters,
            batch_size: c.pretrain_batch,
            lr: c.pretrain_lr,
            r1_gamma: c.r1_gamma,
            r1_every: c.r1_every,
            seed,
        }
    }
}

pub struct PretrainOutcome {
    pub generator: Generator,
    pub discriminator: Discriminator,
    /// `(iter, d_loss, g_loss)` per iteration.
    pub log: Vec<(usize, f32, f32)>,
}

/// Unconditional adversarial training of a fresh generator on visible images.
/// The generator step uses the non-saturating logistic loss.
pub fn pretrain_generator(
    gen_cfg: GeneratorConfig,
    visible: &[Image],
    cfg: &PretrainConfig,
    mut on_step: Option<&mut dyn FnMut(usize, f32, f32)>,
) -> Result<PretrainOutcome> {
    if visible.len() < cfg.batch_size || cfg.batch_size == 0 {
        return Err(Error::Argument(format!(
            "pretraining needs at least {} images, got {}",
            cfg.batch_size,
            visible.len()
        )));
    }
    let root = make_rng(cfg.seed).fork("pretrain");
    let mut generator = Generator::init(gen_cfg.clone(), &mut root.fork("init/generator"))?;
    let mut discriminator = Discriminator::init(gen_cfg.clone(), &mut root.fork("init/discriminator"))?;
    let mut g_opt = Adam::new(0.0, 0.99, 1e-8);
    let mut d_opt = Adam::new(0.0, 0.99, 1e-8);
    let per_epoch = visible.len() / cfg.batch_size;
    let mut log = Vec::with_capacity(cfg.iters);
    for n in 0..cfg.iters {
        let it = root.fork(&format!("iter{n}"));
        let (epoch, j) = (n / per_epoch, n % per_epoch);
        let order = epoch_order(visible.len(), &root.fork(&format!("epoch{epoch}")));
        let real: Vec<Image> = order[j * cfg.batch_size..(j + 1) * cfg.batch_size]
            .iter()
            .map(|&i| visible[i].to_rgb())
            .collect();
        let real = images_to_batch(&real)?;
        let z = LatentCode::random(cfg.batch_size, gen_cfg.latent_dim, &mut it.fork("z"));
        let noise = NoiseSeeds::new(it.fork("noise"));

        let mut g = Graph::new();
        let gp = generator.bind(&mut g);
        let zv = g.constant(z.0.clone());
        let nv: Vec<Var> = noise
            .all_levels(&gen_cfg, cfg.batch_size)
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let out = generator.synthesize(&mut g, &gp, zv, None, &nv);
        let fake = g.value(out.image).clone();

        let r1_weight = if cfg.r1_gamma > 0.0 && n % cfg.r1_every.max(1) == 0 {
            cfg.r1_every.max(1) as f32
        } else {
            0.0
        };
        let d = discriminator_step(&discriminator, &real, &fake, cfg.r1_gamma, r1_weight)?;
        d_opt.step(discriminator.params_mut(), &d.grads, cfg.lr);

        let dp = discriminator.bind(&mut g, false);
        let logits = discriminator.forward(&mut g, &dp, out.image);
        let neg = g.neg(logits);
        let sp = g.softplus(neg);
        let loss = g.mean(sp);
        let mut grads = g.backward(loss);
        let ggrads = gp.collect(&g, &mut grads);
        g_opt.step(generator.params_mut()?, &ggrads, cfg.lr);

        let gl = g.value(loss).item();
        if let Some(cb) = on_step.as_mut() {
            cb(n, d.logistic, gl);
        }
        log.push((n, d.logistic, gl));
    }
    Ok(PretrainOutcome {
        generator,
        discriminator,
        log,
    })
}

/// Generator checkpoint marked as pretrained.
pub fn pretrained_checkpoint(generator: &Generator, iters: usize) -> Checkpoint {
    let mut c = generator.to_checkpoint();
    c.set_meta("pretrained", "true");
    c.set_meta("pretrain_iters", iters.to_string());
    c
}

