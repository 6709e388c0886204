//! Training objectives.
//!
//! The adversarial games are written as separate minimisation targets:
//! a critic minimises `mean D(fake) - mean D(real) + penalty`, which is the
//! negated Wasserstein estimate it would otherwise maximise, and the player
//! being judged minimises `-mean D(fake)`.

use pseudoheal_autograd::{Bound, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{masks_to_tensor, PathologyMask};
use crate::nets::{Critic, GeneratorNet, ReconstructorNet, SegmentorNet};
use crate::{Error, Result};

pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Weight of the supervised Dice term.
    pub lambda5_paired: f64,
    /// Weight of the adversarial mask term.
    pub lambda5_unpaired: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 1.0,
            lambda3: 20.0,
            lambda4: 10.0,
            lambda5_paired: 10.0,
            lambda5_unpaired: 1.0,
            lambda_gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5_paired", self.lambda5_paired),
            ("lambda5_unpaired", self.lambda5_unpaired),
            ("lambda_gp", self.lambda_gp),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.weights.{name}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// A single-input network with its parameters already in the graph.
pub trait Translator {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

/// A network conditioned on a mask, with its parameters already in the graph.
pub trait Conditioned {
    fn apply(&self, g: &mut Graph, x: Var, m: Var) -> Result<Var>;
}

impl<F: Fn(&mut Graph, Var) -> Result<Var>> Translator for F {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self(g, x)
    }
}

impl<F: Fn(&mut Graph, Var, Var) -> Result<Var>> Conditioned for F {
    fn apply(&self, g: &mut Graph, x: Var, m: Var) -> Result<Var> {
        self(g, x, m)
    }
}

/// A network paired with its bound parameters.
pub struct Bonded<'a, N> {
    pub net: &'a N,
    pub params: &'a Bound,
}

impl<'a, N> Bonded<'a, N> {
    pub fn new(net: &'a N, params: &'a Bound) -> Self {
        Self { net, params }
    }
}

impl Translator for Bonded<'_, GeneratorNet> {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.net.forward(g, self.params, x)
    }
}

impl Translator for Bonded<'_, SegmentorNet> {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.net.forward(g, self.params, x)
    }
}

impl Conditioned for Bonded<'_, ReconstructorNet> {
    fn apply(&self, g: &mut Graph, x: Var, m: Var) -> Result<Var> {
        self.net.forward(g, self.params, x, m)
    }
}

/// Mean absolute difference.
pub fn l1(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// `a * real + (1 - a) * fake` with one coefficient per sample.
pub fn interpolate(real: &Tensor, fake: &Tensor, eps: &[f64]) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(pseudoheal_autograd::ShapeError::Mismatch {
            expected: real.shape().to_vec(),
            actual: fake.shape().to_vec(),
        }));
    }
    if eps.len() != real.batch() {
        return Err(Error::Validation(format!(
            "{} interpolation coefficients for a batch of {}",
            eps.len(),
            real.batch()
        )));
    }
    let n = real.sample_len();
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(k, (&r, &f))| {
            let e = eps[k / n];
            e * r + (1.0 - e) * f
        })
        .collect();
    Ok(Tensor::new(real.shape(), data)?)
}

/// Per-sample coefficients drawn from `U[0, 1]`.
pub fn draw_eps<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<f64> {
    (0..batch).map(|_| rng.gen::<f64>()).collect()
}

/// `lambda * mean_b (||grad_x D(x_b)|| - 1)^2` at the given interpolates.
pub fn penalty_at(g: &mut Graph, critic: &dyn Critic, p: &Bound, x: &Tensor, lambda: f64) -> Result<Var> {
    let xv = g.constant(x.clone());
    let grad = critic.input_gradient(g, p, xv)?;
    let norm = g.sample_norm(grad);
    let dev = g.add_scalar(norm, -1.0);
    let sq = g.square(dev);
    let m = g.mean(sq);
    Ok(g.scale(m, lambda))
}

/// Gradient penalty on `eps * real + (1 - eps) * fake` with fixed `eps`.
pub fn gradient_penalty_with(
    g: &mut Graph,
    critic: &dyn Critic,
    p: &Bound,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    lambda: f64,
) -> Result<Var> {
    let x = interpolate(real, fake, eps)?;
    penalty_at(g, critic, p, &x, lambda)
}

/// Gradient penalty with a fresh per-sample `eps ~ U[0, 1]`.
pub fn gradient_penalty<R: Rng + ?Sized>(
    g: &mut Graph,
    critic: &dyn Critic,
    p: &Bound,
    real: &Tensor,
    fake: &Tensor,
    lambda: f64,
    rng: &mut R,
) -> Result<Var> {
    let eps = draw_eps(real.batch(), rng);
    gradient_penalty_with(g, critic, p, real, fake, &eps, lambda)
}

/// A critic objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    pub total: Var,
    /// `mean D(real) - mean D(fake)`.
    pub wasserstein: f64,
    pub penalty: f64,
}

/// WGAN-GP critic objective for constant real and fake batches.
pub fn wasserstein_critic_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    critic: &dyn Critic,
    p: &Bound,
    real: &Tensor,
    fake: &Tensor,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<CriticLoss> {
    let rv = g.constant(real.clone());
    let fv = g.constant(fake.clone());
    let d_real = critic.score(g, p, rv)?;
    let d_fake = critic.score(g, p, fv)?;
    let mr = g.mean(d_real);
    let mf = g.mean(d_fake);
    let w = g.sub(mf, mr)?;
    let gp = gradient_penalty(g, critic, p, real, fake, lambda_gp, rng)?;
    let total = g.add(w, gp)?;
    Ok(CriticLoss {
        total,
        wasserstein: -g.value(w).item(),
        penalty: g.value(gp).item(),
    })
}

/// `-mean D(fake)`, differentiable through `fake`.
pub fn wasserstein_generator_loss(g: &mut Graph, critic: &dyn Critic, p: &Bound, fake: Var) -> Result<Var> {
    let d = critic.score(g, p, fake)?;
    let m = g.mean(d);
    Ok(g.scale(m, -1.0))
}

/// Least-squares critic objective: `(mean (D(real) - 1)^2 + mean D(fake)^2) / 2`.
pub fn ls_critic_loss(g: &mut Graph, critic: &dyn Critic, p: &Bound, real: &Tensor, fake: &Tensor) -> Result<Var> {
    let rv = g.constant(real.clone());
    let fv = g.constant(fake.clone());
    let d_real = critic.score(g, p, rv)?;
    let d_fake = critic.score(g, p, fv)?;
    ls_critic_from_scores(g, d_real, d_fake)
}

pub fn ls_critic_from_scores(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let r = g.add_scalar(d_real, -1.0);
    let r = g.square(r);
    let r = g.mean(r);
    let f = g.square(d_fake);
    let f = g.mean(f);
    let s = g.add(r, f)?;
    Ok(g.scale(s, 0.5))
}

/// Least-squares objective of the judged player: `mean (D(fake) - 1)^2 / 2`.
pub fn ls_generator_loss(g: &mut Graph, critic: &dyn Critic, p: &Bound, fake: Var) -> Result<Var> {
    let d = critic.score(g, p, fake)?;
    let d = g.add_scalar(d, -1.0);
    let d = g.square(d);
    let m = g.mean(d);
    Ok(g.scale(m, 0.5))
}

/// Both sides of one adversarial game evaluated in a single graph.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialLosses {
    /// Critic objective; the fake batch is detached.
    pub critic: CriticLoss,
    /// Objective of the judged network, differentiable through it.
    pub generator: Var,
    pub mean_real: f64,
    pub mean_fake: f64,
}

fn adversarial_pair<R: Rng + ?Sized>(
    g: &mut Graph,
    critic: &dyn Critic,
    p: &Bound,
    real: &Tensor,
    fake: Var,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<AdversarialLosses> {
    let fake_value = g.value(fake).clone();
    let critic_loss = wasserstein_critic_loss(g, critic, p, real, &fake_value, lambda_gp, rng)?;
    let d_fake = critic.score(g, p, fake)?;
    let mean_fake = g.value(d_fake).mean();
    let m = g.mean(d_fake);
    let generator = g.scale(m, -1.0);
    Ok(AdversarialLosses {
        critic: critic_loss,
        generator,
        mean_real: mean_fake + critic_loss.wasserstein,
        mean_fake,
    })
}

/// Image game of the Generator: fake `G(x_p)` against real healthy `x_h`.
#[allow(clippy::too_many_arguments)]
pub fn wgan_image_losses<R: Rng + ?Sized>(
    g: &mut Graph,
    d_x: &dyn Critic,
    d_params: &Bound,
    gen: &dyn Translator,
    x_p: Var,
    x_h: &Tensor,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<AdversarialLosses> {
    non_empty(g, x_p, x_h)?;
    let fake = gen.apply(g, x_p)?;
    adversarial_pair(g, d_x, d_params, x_h, fake, lambda_gp, rng)
}

/// Image game of the Reconstructor: fake `R(x_h2, m_h2)` against real `x_h1`;
/// the masks must be all zero.
#[allow(clippy::too_many_arguments)]
pub fn wgan_reconstructor_losses<R: Rng + ?Sized>(
    g: &mut Graph,
    d_x: &dyn Critic,
    d_params: &Bound,
    rec: &dyn Conditioned,
    x_h1: &Tensor,
    x_h2: Var,
    m_h2: Var,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<AdversarialLosses> {
    non_empty(g, x_h2, x_h1)?;
    if g.value(m_h2).data().iter().any(|&v| v != 0.0) {
        return Err(Error::Validation("healthy-image masks must be all zero".into()));
    }
    let fake = rec.apply(g, x_h2, m_h2)?;
    adversarial_pair(g, d_x, d_params, x_h1, fake, lambda_gp, rng)
}

/// Mask game of the Segmentor: fake `S(x_p1)` against pool masks of other subjects.
#[allow(clippy::too_many_arguments)]
pub fn mask_adversarial_losses<R: Rng + ?Sized>(
    g: &mut Graph,
    d_m: &dyn Critic,
    d_params: &Bound,
    seg: &dyn Translator,
    x_p1: Var,
    m_p2: &[PathologyMask],
    lambda_gp: f64,
    rng: &mut R,
) -> Result<AdversarialLosses> {
    if m_p2.is_empty() {
        return Err(Error::config("mask_pool", "the mask pool is empty"));
    }
    let real = masks_to_tensor(m_p2)?;
    non_empty(g, x_p1, &real)?;
    let fake = seg.apply(g, x_p1)?;
    adversarial_pair(g, d_m, d_params, &real, fake, lambda_gp, rng)
}

fn non_empty(g: &Graph, a: Var, b: &Tensor) -> Result<()> {
    if g.value(a).numel() == 0 || b.numel() == 0 {
        return Err(Error::Validation("adversarial losses need nonempty batches".into()));
    }
    Ok(())
}

/// Mean l1 between `R(G(x_p), S(x_p))` and `x_p`.
pub fn cycle_ph_loss(
    g: &mut Graph,
    rec: &dyn Conditioned,
    gen: &dyn Translator,
    seg: &dyn Translator,
    x_p: Var,
) -> Result<Var> {
    let h = gen.apply(g, x_p)?;
    let m = seg.apply(g, x_p)?;
    let back = rec.apply(g, h, m)?;
    l1(g, back, x_p)
}

/// Cycle P-H loss from already computed `R(G(x_p), S(x_p))`.
pub fn cycle_ph(g: &mut Graph, reconstructed: Var, x_p: Var) -> Result<Var> {
    l1(g, reconstructed, x_p)
}

/// Mean l1 of `G(R(x_h, m_h))` to `x_h` plus mean l1 of `S(R(x_h, m_h))` to `m_h`.
pub fn cycle_hh_loss(
    g: &mut Graph,
    gen: &dyn Translator,
    seg: &dyn Translator,
    rec: &dyn Conditioned,
    x_h: Var,
    m_h: Var,
) -> Result<Var> {
    let fake = rec.apply(g, x_h, m_h)?;
    let back = gen.apply(g, fake)?;
    let mask = seg.apply(g, fake)?;
    cycle_hh(g, back, mask, x_h, m_h)
}

/// Cycle H-H loss from already computed `G(R(x_h, 0))` and `S(R(x_h, 0))`.
pub fn cycle_hh(g: &mut Graph, back: Var, mask: Var, x_h: Var, m_h: Var) -> Result<Var> {
    let a = l1(g, back, x_h)?;
    let b = l1(g, mask, m_h)?;
    Ok(g.add(a, b)?)
}

/// Soft Dice loss `1 - 2 sum(p t) / (sum p + sum t + 1e-6)` per sample,
/// averaged over the batch.
pub fn dice_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let inter = g.mul(pred, target)?;
    let inter = g.sample_sum(inter);
    let sp = g.sample_sum(pred);
    let st = g.sample_sum(target);
    let denom = g.add(sp, st)?;
    let denom = g.add_scalar(denom, DICE_SMOOTH);
    let ratio = g.div(inter, denom)?;
    let ratio = g.scale(ratio, -2.0);
    let loss = g.add_scalar(ratio, 1.0);
    Ok(g.mean(loss))
}

/// Plain-number Dice loss of one flattened pair.
pub fn dice_loss_values(pred: &[f64], target: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let total: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>();
    1.0 - 2.0 * inter / (total + DICE_SMOOTH)
}

/// The weighted terms of the combined objective; absent terms are skipped.
#[derive(Clone, Copy, Debug, Default)]
pub struct Components {
    pub gan1: Option<Var>,
    pub gan2: Option<Var>,
    pub cc1: Option<Var>,
    pub cc2: Option<Var>,
    /// Supervised Dice term, weighted by `lambda5_paired`.
    pub seg_dice: Option<Var>,
    /// Adversarial mask term, weighted by `lambda5_unpaired`.
    pub seg_adv: Option<Var>,
}

/// `(name, raw value)` of every present term followed by `("total", ..)`.
pub type Breakdown = Vec<(&'static str, f64)>;

/// The weighted sum of the present components.
pub fn total_loss(g: &mut Graph, w: &LossWeights, c: &Components) -> Result<(Var, Breakdown)> {
    let terms = [
        ("l_gan1", c.gan1, w.lambda1),
        ("l_gan2", c.gan2, w.lambda2),
        ("l_cc1", c.cc1, w.lambda3),
        ("l_cc2", c.cc2, w.lambda4),
        ("l_seg_dice", c.seg_dice, w.lambda5_paired),
        ("l_seg_adv", c.seg_adv, w.lambda5_unpaired),
    ];
    let mut total: Option<Var> = None;
    let mut breakdown = Vec::new();
    for (name, v, lambda) in terms {
        let Some(v) = v else { continue };
        breakdown.push((name, g.value(v).item()));
        let weighted = g.scale(v, lambda);
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    breakdown.push(("total", g.value(total).item()));
    Ok((total, breakdown))
}
