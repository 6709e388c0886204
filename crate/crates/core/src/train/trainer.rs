//! The adversarial training loop for the proposed model, its ablations and
//! the two baselines.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use pseudoheal_autograd::{Adam, Bound, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bundle::{save_checkpoint, ModelBundle, Optimizers};
use super::config::{Ablation, Baseline, TrainConfig, UpdateScheme};
use super::log::LossLog;
use crate::data::{Dataset, MaskPool};
use crate::image::{images_to_tensor, masks_to_tensor, PathologyMask};
use crate::losses::{
    cycle_hh, cycle_ph, dice_loss, l1, ls_critic_loss, ls_generator_loss, total_loss, wasserstein_critic_loss,
    wasserstein_generator_loss, Components,
};
use crate::nets::{forward_g, forward_r, forward_s, CriticNet, Module};
use crate::{Error, Result};

/// Inputs of one training run.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub pathological: &'a Dataset,
    pub healthy: &'a Dataset,
    /// Real masks of subjects outside the training pools.
    pub mask_pool: &'a MaskPool,
}

/// Instrumentation counters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub generator_updates: u64,
    /// Critic phases run; one phase updates every critic once.
    pub critic_updates: u64,
    /// Calls of the supervised Dice loss.
    pub dice_calls: u64,
    /// Mask tensors built from ground truth or the mask pool.
    pub mask_batches_built: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for per-epoch and diagnostic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from a saved state instead of fresh networks.
    pub resume: Option<(ModelBundle, Optimizers)>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub optimizers: Optimizers,
    pub log: LossLog,
    pub counters: Counters,
}

pub const EPOCH_CHECKPOINT: &str = "checkpoint.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";

/// Trains the model described by `cfg` on `data`.
pub fn train(data: TrainData<'_>, cfg: &TrainConfig, options: TrainOptions) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut t = Trainer::new(data, cfg, options)?;
    t.run()?;
    Ok(TrainOutput {
        bundle: t.bundle,
        optimizers: t.optimizers,
        log: t.log,
        counters: t.counters,
    })
}

struct Trainer<'a> {
    data: TrainData<'a>,
    cfg: TrainConfig,
    options: TrainOptions,
    bundle: ModelBundle,
    optimizers: Optimizers,
    log: LossLog,
    counters: Counters,
    labeled: Vec<bool>,
    unlabeled_idx: Vec<usize>,
    batch: usize,
}

/// Critic scores through either objective family.
fn generator_adv(g: &mut Graph, critic: &CriticNet, p: &Bound, fake: Var, ls: bool) -> Result<Var> {
    if ls {
        ls_generator_loss(g, critic, p, fake)
    } else {
        wasserstein_generator_loss(g, critic, p, fake)
    }
}

struct CriticStep {
    total: Var,
    wasserstein: f64,
    penalty: f64,
}

impl<'a> Trainer<'a> {
    fn new(data: TrainData<'a>, cfg: &TrainConfig, mut options: TrainOptions) -> Result<Self> {
        let p = data.pathological;
        let h = data.healthy;
        if p.is_empty() {
            return Err(Error::config("data", "the pathological training pool is empty"));
        }
        if h.is_empty() {
            return Err(Error::config("data", "the healthy training pool is empty"));
        }
        let input_hw = p.samples[0].image.shape();
        if p.samples.iter().chain(&h.samples).any(|s| s.image.shape() != input_hw) {
            return Err(Error::Validation("training slices must share one shape".into()));
        }

        let proposed = cfg.baseline == Baseline::None;
        let n_labeled = if proposed {
            (cfg.setting.ratio() * p.len() as f64).round() as usize
        } else {
            0
        };
        let mut order: Vec<usize> = (0..p.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(999);
        order.shuffle(&mut rng);
        let mut labeled = vec![false; p.len()];
        for &i in &order[..n_labeled] {
            labeled[i] = true;
        }
        let unlabeled_idx: Vec<usize> = (0..p.len()).filter(|&i| !labeled[i]).collect();
        let mask_critic = proposed && !unlabeled_idx.is_empty();
        if (mask_critic || (proposed && cfg.ablation == Ablation::CycleHp)) && data.mask_pool.is_empty() {
            return Err(Error::config("mask_pool", "this setting needs masks from other subjects"));
        }
        let train_subjects: BTreeSet<u64> = p.subjects().union(&h.subjects()).copied().collect();
        if let Some(s) = data.mask_pool.subjects.iter().find(|s| train_subjects.contains(s)) {
            return Err(Error::config(
                "mask_pool",
                format!("subject {s} appears in both the mask pool and the training pools"),
            ));
        }

        let (bundle, optimizers) = match options.resume.take() {
            Some((b, o)) => {
                if b.config != *cfg {
                    return Err(Error::config("resume", "checkpoint was written with a different configuration"));
                }
                (b, o)
            }
            None => {
                let b = ModelBundle::init(cfg, input_hw, mask_critic)?;
                let o = b
                    .networks()
                    .into_iter()
                    .map(|(n, s)| (n.to_string(), Adam::new(cfg.optimizer.into(), s)))
                    .collect();
                (b, o)
            }
        };
        let log = LossLog::new(Self::columns(cfg, n_labeled > 0, mask_critic));
        Ok(Self {
            data,
            cfg: cfg.clone(),
            options,
            bundle,
            optimizers,
            log,
            counters: Counters::default(),
            labeled,
            unlabeled_idx,
            batch: cfg.batch_size.min(p.len()),
        })
    }

    fn columns(cfg: &TrainConfig, has_labeled: bool, has_unlabeled: bool) -> Vec<String> {
        let mut c: Vec<&str> = vec!["step", "epoch", "critic_iters"];
        let wgan = cfg.ablation != Ablation::Lsgan;
        let critic_cols = |c: &mut Vec<&str>, name: &'static [&'static str; 3]| {
            c.push(name[0]);
            if wgan {
                c.push(name[1]);
                c.push(name[2]);
            }
        };
        match cfg.baseline {
            Baseline::ConditionalGan => {
                c.extend(["l_gan1", "total"]);
                critic_cols(&mut c, &["d_x_loss", "d_x_wdist", "d_x_gp"]);
            }
            Baseline::Cyclegan => {
                c.extend(["l_gan1", "l_gan2", "l_cc1", "l_cc2", "total"]);
                critic_cols(&mut c, &["d_x_loss", "d_x_wdist", "d_x_gp"]);
                critic_cols(&mut c, &["d_p_loss", "d_p_wdist", "d_p_gp"]);
            }
            Baseline::None => {
                c.push("l_gan1");
                if cfg.ablation != Ablation::NoCycleHh {
                    c.push("l_gan2");
                }
                c.push("l_cc1");
                if cfg.ablation != Ablation::NoCycleHh {
                    c.push("l_cc2");
                }
                if has_labeled {
                    c.push("l_seg_dice");
                }
                if has_unlabeled {
                    c.push("l_seg_adv");
                }
                c.push("total");
                critic_cols(&mut c, &["d_x_loss", "d_x_wdist", "d_x_gp"]);
                if has_unlabeled {
                    critic_cols(&mut c, &["d_m_loss", "d_m_wdist", "d_m_gp"]);
                }
                if cfg.ablation == Ablation::CycleHp {
                    critic_cols(&mut c, &["d_p_loss", "d_p_wdist", "d_p_gp"]);
                }
            }
        }
        c.into_iter().map(String::from).collect()
    }

    fn proposed(&self) -> bool {
        self.cfg.baseline == Baseline::None
    }

    fn hh(&self) -> bool {
        self.proposed() && matches!(self.cfg.ablation, Ablation::None | Ablation::Lsgan)
    }

    fn ls(&self) -> bool {
        self.cfg.ablation == Ablation::Lsgan
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(epoch as u64 + 1);
        r
    }

    fn run(&mut self) -> Result<()> {
        let n = self.data.pathological.len();
        'epochs: for epoch in self.bundle.epoch..self.cfg.epochs {
            let mut rng = self.epoch_rng(epoch);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let iters = self.cfg.critic_iters_for(epoch);
            for chunk in order.chunks(self.batch) {
                if chunk.len() < self.batch {
                    break;
                }
                if let Some(max) = self.cfg.max_steps {
                    if self.bundle.step >= max {
                        break 'epochs;
                    }
                }
                let mut row = vec![self.bundle.step as f64, epoch as f64, iters as f64];
                let critic_row = self.critic_phase(iters, &mut rng)?;
                let gen_row = self.generator_phase(chunk, &mut rng)?;
                row.extend(gen_row);
                row.extend(critic_row);
                self.log.push(row);
                self.bundle.step += 1;
                self.counters.generator_updates += 1;
            }
            self.bundle.epoch = epoch + 1;
            if self.options.verbose {
                eprintln!(
                    "epoch {}/{} step {} {}",
                    epoch + 1,
                    self.cfg.epochs,
                    self.bundle.step,
                    self.log.summary_last()
                );
            }
            if let Some(dir) = &self.options.checkpoint_dir {
                save_checkpoint(&dir.join(EPOCH_CHECKPOINT), &self.bundle, Some(&self.optimizers))?;
            }
        }
        Ok(())
    }

    fn fail(&self, term: &str) -> Error {
        let checkpoint = self.options.checkpoint_dir.as_ref().and_then(|dir| {
            let path = dir.join(DIAGNOSTIC_CHECKPOINT);
            save_checkpoint(&path, &self.bundle, Some(&self.optimizers)).ok().map(|_| path)
        });
        Error::NonFinite {
            term: term.to_string(),
            step: self.bundle.step,
            checkpoint,
        }
    }

    fn check(&self, term: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(self.fail(term))
        }
    }

    fn sample_images(&self, pool: &Dataset, idx: &[usize]) -> Result<Tensor> {
        images_to_tensor(idx.iter().map(|&i| &pool.samples[i].image))
    }

    fn draw(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..self.batch).map(|_| rng.gen_range(0..len)).collect()
    }

    fn pool_masks(&mut self, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let pool = &self.data.mask_pool.masks;
        let picks: Vec<&PathologyMask> = (0..self.batch).map(|_| &pool[rng.gen_range(0..pool.len())]).collect();
        self.counters.mask_batches_built += 1;
        masks_to_tensor(picks)
    }

    /// Pool masks moved to random positions inside the brains of `x_h`.
    fn fitted_masks(&mut self, x_h: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let (b, _, h, w) = x_h.dims4()?;
        let pool = &self.data.mask_pool.masks;
        let mut out = Vec::with_capacity(b);
        for s in 0..b {
            let mask = &pool[rng.gen_range(0..pool.len())];
            out.push(fit_mask_in_region(mask, x_h.sample(s), (h, w), rng));
        }
        self.counters.mask_batches_built += 1;
        masks_to_tensor(&out)
    }

    fn step_net(&mut self, name: &str, store: StoreRef, grads: Vec<Tensor>) {
        let adam = self.optimizers.get_mut(name).expect("optimiser per network");
        let params = match store {
            StoreRef::G => self.bundle.g.params_mut(),
            StoreRef::S => self.bundle.s.as_mut().expect("S").params_mut(),
            StoreRef::R => self.bundle.r.as_mut().expect("R").params_mut(),
            StoreRef::F => self.bundle.f.as_mut().expect("F").params_mut(),
            StoreRef::Dx => self.bundle.d_x.params_mut(),
            StoreRef::Dm => self.bundle.d_m.as_mut().expect("D_m").params_mut(),
            StoreRef::Dp => self.bundle.d_p.as_mut().expect("D_p").params_mut(),
        };
        adam.step(params, &grads);
    }

    fn critic_objective(
        &self,
        g: &mut Graph,
        critic: &CriticNet,
        p: &Bound,
        real: &Tensor,
        fake: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<CriticStep> {
        if self.ls() {
            let total = ls_critic_loss(g, critic, p, real, fake)?;
            Ok(CriticStep {
                total,
                wasserstein: f64::NAN,
                penalty: 0.0,
            })
        } else {
            let l = wasserstein_critic_loss(g, critic, p, real, fake, self.cfg.weights.lambda_gp, rng)?;
            Ok(CriticStep {
                total: l.total,
                wasserstein: l.wasserstein,
                penalty: l.penalty,
            })
        }
    }

    fn critic_values(&self, g: &Graph, s: &CriticStep, out: &mut Vec<f64>) {
        out.push(g.value(s.total).item());
        if !self.ls() {
            out.push(s.wasserstein);
            out.push(s.penalty);
        }
    }

    /// Runs `iters` critic phases and returns the log values of the last one.
    fn critic_phase(&mut self, iters: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut last = Vec::new();
        for _ in 0..iters {
            last = self.critic_iteration(rng)?;
            self.counters.critic_updates += 1;
        }
        Ok(last)
    }

    fn critic_iteration(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let p_pool = self.data.pathological;
        let h_pool = self.data.healthy;
        let xp_idx = self.draw(p_pool.len(), rng);
        let x_p = self.sample_images(p_pool, &xp_idx)?;
        let x_h1 = self.sample_images(h_pool, &self.draw(h_pool.len(), rng))?;
        let x_h2 = self.sample_images(h_pool, &self.draw(h_pool.len(), rng))?;
        let mut values = Vec::new();

        // Image critic.
        let fake_g = forward_g(&self.bundle.g, &x_p)?;
        let mut g = Graph::new();
        let p = g.bind(self.bundle.d_x.params());
        let d_x = &self.bundle.d_x;
        let first = self.critic_objective(&mut g, d_x, &p, &x_h1, &fake_g, rng)?;
        let mut total = first.total;
        let mut shown = first;
        if self.hh() {
            let zeros = Tensor::zeros(x_h2.shape());
            let fake_r = forward_r(self.bundle.reconstructor()?, &x_h2, &zeros)?;
            let second = self.critic_objective(&mut g, d_x, &p, &x_h1, &fake_r, rng)?;
            total = g.add(total, second.total)?;
            shown = CriticStep {
                total,
                wasserstein: shown.wasserstein + second.wasserstein,
                penalty: shown.penalty + second.penalty,
            };
        }
        self.check("d_x_loss", g.value(total).item())?;
        self.critic_values(&g, &shown, &mut values);
        let grads = g.backward(total)?.for_params(&p, self.bundle.d_x.params());
        self.step_net("D_x", StoreRef::Dx, grads);

        // Mask critic on slices without ground truth.
        if let Some(d_m) = &self.bundle.d_m {
            let idx: Vec<usize> = (0..self.batch)
                .map(|_| self.unlabeled_idx[rng.gen_range(0..self.unlabeled_idx.len())])
                .collect();
            let x_u = self.sample_images(p_pool, &idx)?;
            let fake = forward_s(self.bundle.segmentor()?, &x_u)?;
            let d_m = d_m.clone();
            let real = self.pool_masks(rng)?;
            let mut g = Graph::new();
            let p = g.bind(d_m.params());
            let s = self.critic_objective(&mut g, &d_m, &p, &real, &fake, rng)?;
            self.check("d_m_loss", g.value(s.total).item())?;
            self.critic_values(&g, &s, &mut values);
            let grads = g.backward(s.total)?.for_params(&p, d_m.params());
            self.step_net("D_m", StoreRef::Dm, grads);
        }

        // Pathological-image critic.
        if let Some(d_p) = &self.bundle.d_p {
            let d_p = d_p.clone();
            let fake = if self.proposed() {
                let m = self.fitted_masks(&x_h2, rng)?;
                forward_r(self.bundle.reconstructor()?, &x_h2, &m)?
            } else {
                forward_g(self.bundle.f.as_ref().expect("F"), &x_h2)?
            };
            let mut g = Graph::new();
            let p = g.bind(d_p.params());
            let s = self.critic_objective(&mut g, &d_p, &p, &x_p, &fake, rng)?;
            self.check("d_p_loss", g.value(s.total).item())?;
            self.critic_values(&g, &s, &mut values);
            let grads = g.backward(s.total)?.for_params(&p, d_p.params());
            self.step_net("D_p", StoreRef::Dp, grads);
        }
        Ok(values)
    }

    fn generator_phase(&mut self, chunk: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let h_pool = self.data.healthy;
        let x_p = self.sample_images(self.data.pathological, chunk)?;
        let x_h = self.sample_images(h_pool, &self.draw(h_pool.len(), rng))?;
        match self.cfg.baseline {
            Baseline::ConditionalGan => self.conditional_gan_step(&x_p),
            Baseline::Cyclegan => self.cyclegan_step(&x_p, &x_h),
            Baseline::None => {
                let hp_masks = if self.cfg.ablation == Ablation::CycleHp {
                    Some(self.fitted_masks(&x_h, rng)?)
                } else {
                    None
                };
                let labeled: Vec<usize> = (0..chunk.len()).filter(|&k| self.labeled[chunk[k]]).collect();
                let unlabeled: Vec<usize> = (0..chunk.len()).filter(|&k| !self.labeled[chunk[k]]).collect();
                let m_p = if labeled.is_empty() {
                    None
                } else {
                    self.counters.mask_batches_built += 1;
                    Some(masks_to_tensor(labeled.iter().map(|&k| &self.data.pathological.samples[chunk[k]].mask))?)
                };
                let batch = Batch {
                    x_p: &x_p,
                    x_h: &x_h,
                    m_p: m_p.as_ref(),
                    hp_masks: hp_masks.as_ref(),
                    labeled: &labeled,
                    unlabeled: &unlabeled,
                };
                match self.cfg.update {
                    UpdateScheme::Joint => self.proposed_step(&batch, [true; 3]),
                    UpdateScheme::Alternating => {
                        let mut row = Vec::new();
                        for k in 0..3 {
                            let mut which = [false; 3];
                            which[k] = true;
                            row = self.proposed_step(&batch, which)?;
                        }
                        Ok(row)
                    }
                }
            }
        }
    }

    /// One evaluation of the combined objective; updates the networks
    /// flagged in `train` (G, S, R).
    fn proposed_step(&mut self, b: &Batch<'_>, train: [bool; 3]) -> Result<Vec<f64>> {
        let bundle = &self.bundle;
        let seg = bundle.segmentor()?;
        let rec = bundle.reconstructor()?;
        let mut g = Graph::new();
        let bind = |g: &mut Graph, store: &ParamStore, on: bool| if on { g.bind(store) } else { g.freeze(store) };
        let pg = bind(&mut g, bundle.g.params(), train[0]);
        let ps = bind(&mut g, seg.params(), train[1]);
        let pr = bind(&mut g, rec.params(), train[2]);
        let pdx = g.freeze(bundle.d_x.params());
        let ls = self.ls();
        let batch = b.x_p.batch() as f64;

        let x_p = g.constant(b.x_p.clone());
        let x_tilde = bundle.g.forward(&mut g, &pg, x_p)?;
        let m_tilde = seg.forward(&mut g, &ps, x_p)?;
        let x_hat = rec.forward(&mut g, &pr, x_tilde, m_tilde)?;
        let mut c = Components {
            gan1: Some(generator_adv(&mut g, &bundle.d_x, &pdx, x_tilde, ls)?),
            cc1: Some(cycle_ph(&mut g, x_hat, x_p)?),
            ..Components::default()
        };

        match self.cfg.ablation {
            Ablation::None | Ablation::Lsgan => {
                let x_h = g.constant(b.x_h.clone());
                let zeros = g.constant(Tensor::zeros(b.x_h.shape()));
                let x_bar = rec.forward(&mut g, &pr, x_h, zeros)?;
                let back = bundle.g.forward(&mut g, &pg, x_bar)?;
                let mask = seg.forward(&mut g, &ps, x_bar)?;
                c.gan2 = Some(generator_adv(&mut g, &bundle.d_x, &pdx, x_bar, ls)?);
                c.cc2 = Some(cycle_hh(&mut g, back, mask, x_h, zeros)?);
            }
            Ablation::CycleHp => {
                let d_p = bundle.d_p.as_ref().expect("D_p exists for Cycle H-P");
                let pdp = g.freeze(d_p.params());
                let x_h = g.constant(b.x_h.clone());
                let m = g.constant(b.hp_masks.expect("masks for Cycle H-P").clone());
                let x_sick = rec.forward(&mut g, &pr, x_h, m)?;
                let back = bundle.g.forward(&mut g, &pg, x_sick)?;
                let mask = seg.forward(&mut g, &ps, x_sick)?;
                c.gan2 = Some(wasserstein_generator_loss(&mut g, d_p, &pdp, x_sick)?);
                let a = l1(&mut g, back, x_h)?;
                let bm = l1(&mut g, mask, m)?;
                c.cc2 = Some(g.add(a, bm)?);
            }
            Ablation::NoCycleHh => {}
        }

        if let Some(m_p) = b.m_p {
            let pred = g.select_batch(m_tilde, b.labeled)?;
            let target = g.constant(m_p.clone());
            let dice = dice_loss(&mut g, pred, target)?;
            self.counters.dice_calls += 1;
            c.seg_dice = Some(g.scale(dice, b.labeled.len() as f64 / batch));
        } else if self.log.has_column("l_seg_dice") {
            c.seg_dice = Some(g.constant(Tensor::scalar(0.0)));
        }
        if !b.unlabeled.is_empty() {
            let d_m = bundle.d_m.as_ref().expect("D_m exists when masks are missing");
            let pdm = g.freeze(d_m.params());
            let pred = g.select_batch(m_tilde, b.unlabeled)?;
            let adv = generator_adv(&mut g, d_m, &pdm, pred, ls)?;
            c.seg_adv = Some(g.scale(adv, b.unlabeled.len() as f64 / batch));
        } else if self.log.has_column("l_seg_adv") {
            c.seg_adv = Some(g.constant(Tensor::scalar(0.0)));
        }

        let (total, breakdown) = total_loss(&mut g, &self.cfg.weights, &c)?;
        for (name, v) in &breakdown {
            self.check(name, *v)?;
        }
        let grads = g.backward(total)?;
        let gg = grads.for_params(&pg, bundle.g.params());
        let gs = grads.for_params(&ps, seg.params());
        let gr = grads.for_params(&pr, rec.params());
        if train[0] {
            self.step_net("G", StoreRef::G, gg);
        }
        if train[1] {
            self.step_net("S", StoreRef::S, gs);
        }
        if train[2] {
            self.step_net("R", StoreRef::R, gr);
        }
        Ok(breakdown.into_iter().map(|(_, v)| v).collect())
    }

    fn conditional_gan_step(&mut self, x_p: &Tensor) -> Result<Vec<f64>> {
        let bundle = &self.bundle;
        let mut g = Graph::new();
        let pg = g.bind(bundle.g.params());
        let pdx = g.freeze(bundle.d_x.params());
        let xv = g.constant(x_p.clone());
        let fake = bundle.g.forward(&mut g, &pg, xv)?;
        let c = Components {
            gan1: Some(wasserstein_generator_loss(&mut g, &bundle.d_x, &pdx, fake)?),
            ..Components::default()
        };
        let (total, breakdown) = total_loss(&mut g, &self.cfg.weights, &c)?;
        for (name, v) in &breakdown {
            self.check(name, *v)?;
        }
        let grads = g.backward(total)?.for_params(&pg, bundle.g.params());
        self.step_net("G", StoreRef::G, grads);
        Ok(breakdown.into_iter().map(|(_, v)| v).collect())
    }

    fn cyclegan_step(&mut self, x_p: &Tensor, x_h: &Tensor) -> Result<Vec<f64>> {
        let bundle = &self.bundle;
        let f = bundle.f.as_ref().expect("F exists for CycleGAN");
        let d_p = bundle.d_p.as_ref().expect("D_p exists for CycleGAN");
        let mut g = Graph::new();
        let pg = g.bind(bundle.g.params());
        let pf = g.bind(f.params());
        let pdx = g.freeze(bundle.d_x.params());
        let pdp = g.freeze(d_p.params());
        let xp = g.constant(x_p.clone());
        let xh = g.constant(x_h.clone());
        let to_h = bundle.g.forward(&mut g, &pg, xp)?;
        let back_p = f.forward(&mut g, &pf, to_h)?;
        let to_p = f.forward(&mut g, &pf, xh)?;
        let back_h = bundle.g.forward(&mut g, &pg, to_p)?;
        let c = Components {
            gan1: Some(wasserstein_generator_loss(&mut g, &bundle.d_x, &pdx, to_h)?),
            gan2: Some(wasserstein_generator_loss(&mut g, d_p, &pdp, to_p)?),
            cc1: Some(l1(&mut g, back_p, xp)?),
            cc2: Some(l1(&mut g, back_h, xh)?),
            ..Components::default()
        };
        let (total, breakdown) = total_loss(&mut g, &self.cfg.weights, &c)?;
        for (name, v) in &breakdown {
            self.check(name, *v)?;
        }
        let grads = g.backward(total)?;
        let gg = grads.for_params(&pg, bundle.g.params());
        let gf = grads.for_params(&pf, f.params());
        self.step_net("G", StoreRef::G, gg);
        self.step_net("F", StoreRef::F, gf);
        Ok(breakdown.into_iter().map(|(_, v)| v).collect())
    }
}

#[derive(Clone, Copy)]
enum StoreRef {
    G,
    S,
    R,
    F,
    Dx,
    Dm,
    Dp,
}

struct Batch<'b> {
    x_p: &'b Tensor,
    x_h: &'b Tensor,
    m_p: Option<&'b Tensor>,
    hp_masks: Option<&'b Tensor>,
    labeled: &'b [usize],
    unlabeled: &'b [usize],
}

/// Intensity above which a pixel counts as brain tissue.
pub const BRAIN_THRESHOLD: f64 = 0.02;

/// Translates `mask` so that it lies inside the tissue of `image` (values
/// above [`BRAIN_THRESHOLD`]). Tries random placements first, then the
/// tissue centroid, and finally clips to the tissue.
pub fn fit_mask_in_region(mask: &PathologyMask, image: &[f64], (h, w): (usize, usize), rng: &mut impl Rng) -> PathologyMask {
    let brain = PathologyMask::from_fn(h, w, |r, c| image[r * w + c] > BRAIN_THRESHOLD);
    let Some((mr, mc)) = mask.centroid() else {
        return mask.clone();
    };
    let inside = |m: &PathologyMask| m.count() == mask.count() && m.intersection(&brain) == m.count();
    let brain_px: Vec<(usize, usize)> = (0..h * w).filter(|&k| brain.data()[k] == 1).map(|k| (k / w, k % w)).collect();
    if brain_px.is_empty() {
        return mask.clone();
    }
    for _ in 0..50 {
        let (r, c) = brain_px[rng.gen_range(0..brain_px.len())];
        let moved = mask.shifted((r as f64 - mr).round() as isize, (c as f64 - mc).round() as isize);
        if inside(&moved) {
            return moved;
        }
    }
    let (br, bc) = brain.centroid().expect("nonempty brain");
    let moved = mask.shifted((br - mr).round() as isize, (bc - mc).round() as isize);
    if inside(&moved) {
        return moved;
    }
    PathologyMask::from_fn(h, w, |r, c| moved.get(r, c) && brain.get(r, c))
}

/// Loads the per-epoch checkpoint in `dir` if one exists.
pub fn resume_state(dir: &Path) -> Result<Option<(ModelBundle, Optimizers)>> {
    let path = dir.join(EPOCH_CHECKPOINT);
    if path.exists() {
        Ok(Some(super::bundle::load_checkpoint(&path)?))
    } else {
        Ok(None)
    }
}
