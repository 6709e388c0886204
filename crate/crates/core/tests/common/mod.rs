//! Oracles and checks shared by the integration tests and the acceptance
//! suite. Each `check_*` returns a short summary on success and the first
//! violation on failure.

#![allow(dead_code)]

use std::collections::BTreeMap;

use pseudoheal::data::js_divergence;
use pseudoheal::eval::{diff_map_segmentation, identity, ssim};
use pseudoheal::losses::{
    cycle_hh_loss, cycle_ph_loss, dice_loss, gradient_penalty, gradient_penalty_with, ls_critic_loss, ls_generator_loss,
    total_loss, wasserstein_critic_loss, wasserstein_generator_loss, Components, LossWeights,
};
use pseudoheal::nets::{forward_critic, Critic, CriticNet, Module, NetConfig};
use pseudoheal::study::{aggregate, bootstrap_paired_t_test, pearson, point_biserial, Criterion, ResolvedScore};
use pseudoheal::{ImageSlice, PathologyMask};
use pseudoheal_autograd::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

pub fn binary(shape: &[usize], p: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol && got.is_finite() {
        Ok(())
    } else {
        Err(format!("{what}: got {got:.12}, oracle {want:.12} (tol {tol:e})"))
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

// ---------------------------------------------------------------------------
// Loss oracles
// ---------------------------------------------------------------------------

pub const ORACLE_TOL: f64 = 1e-5;
pub const ORACLE_TRIALS: usize = 20;

/// Per-sample loops over `[B, ...]` data.
pub fn dice_oracle(pred: &Tensor, target: &Tensor) -> f64 {
    let b = pred.batch();
    let mut total = 0.0;
    for s in 0..b {
        let (p, t) = (pred.sample(s), target.sample(s));
        let mut inter = 0.0;
        let mut sum = 0.0;
        for i in 0..p.len() {
            inter += p[i] * t[i];
            sum += p[i] + t[i];
        }
        total += 1.0 - 2.0 * inter / (sum + 1e-6);
    }
    total / b as f64
}

fn small_shape(rng: &mut impl Rng) -> [usize; 4] {
    [rng.gen_range(1..=4), 1, rng.gen_range(3..=8), rng.gen_range(3..=8)]
}

/// Toy stand-ins for G, S and R with closed forms the oracles can repeat.
fn toy_g(g: &mut Graph, x: Var) -> pseudoheal::Result<Var> {
    let y = g.scale(x, 0.7);
    Ok(g.add_scalar(y, 0.1))
}

fn toy_s(g: &mut Graph, x: Var) -> pseudoheal::Result<Var> {
    Ok(g.sigmoid(x))
}

fn toy_r(g: &mut Graph, x: Var, m: Var) -> pseudoheal::Result<Var> {
    let half = g.scale(m, 0.5);
    Ok(g.add(x, half)?)
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn check_dice_oracle(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for trial in 0..ORACLE_TRIALS {
        let shape = small_shape(&mut r);
        let pred = uniform(&shape, 0.0, 1.0, &mut r);
        let target = binary(&shape, 0.3, &mut r);
        let mut g = Graph::new();
        let (pv, tv) = (g.constant(pred.clone()), g.constant(target.clone()));
        let l = dice_loss(&mut g, pv, tv).map_err(|e| e.to_string())?;
        close(&format!("dice trial {trial}"), g.value(l).item(), dice_oracle(&pred, &target), ORACLE_TOL)?;
    }
    Ok(())
}

pub fn check_cycle_oracles(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for trial in 0..ORACLE_TRIALS {
        let shape = small_shape(&mut r);
        let x = uniform(&shape, 0.0, 1.0, &mut r);
        let m = binary(&shape, 0.2, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mv = g.constant(m.clone());
        let ph = cycle_ph_loss(&mut g, &toy_r, &toy_g, &toy_s, xv).map_err(|e| e.to_string())?;
        let hh = cycle_hh_loss(&mut g, &toy_g, &toy_s, &toy_r, xv, mv).map_err(|e| e.to_string())?;

        let xs = x.data();
        let rec: Vec<f64> = xs.iter().map(|&v| (0.7 * v + 0.1) + 0.5 * sigmoid(v)).collect();
        close(&format!("cycle P-H trial {trial}"), g.value(ph).item(), mean_abs(&rec, xs), ORACLE_TOL)?;
        let fake: Vec<f64> = xs.iter().zip(m.data()).map(|(&v, &k)| v + 0.5 * k).collect();
        let back: Vec<f64> = fake.iter().map(|&f| 0.7 * f + 0.1).collect();
        let mask: Vec<f64> = fake.iter().map(|&f| sigmoid(f)).collect();
        let want = mean_abs(&back, xs) + mean_abs(&mask, m.data());
        close(&format!("cycle H-H trial {trial}"), g.value(hh).item(), want, ORACLE_TOL)?;
    }
    Ok(())
}

pub fn small_critic(seed: u64, hw: (usize, usize)) -> CriticNet {
    let cfg = NetConfig {
        critic_channels: 2,
        critic_layers: 2,
        ..NetConfig::default()
    };
    CriticNet::new("D", &cfg, hw, &mut rng(seed)).unwrap()
}

/// Input gradient of the critic score by central differences, one sample
/// and one pixel at a time.
pub fn critic_input_gradient_fd(critic: &CriticNet, x: &Tensor, step: f64) -> Vec<Vec<f64>> {
    let (b, _, h, w) = x.dims4().unwrap();
    let n = h * w;
    (0..b)
        .map(|s| {
            let base = x.sample(s);
            let mut probes = Vec::with_capacity(2 * n);
            for i in 0..n {
                for sign in [1.0, -1.0] {
                    let mut v = base.to_vec();
                    v[i] += sign * step;
                    probes.extend(v);
                }
            }
            let batch = Tensor::new([2 * n, 1, h, w], probes).unwrap();
            let scores = forward_critic(critic, &batch).unwrap();
            let d = scores.data();
            (0..n).map(|i| (d[2 * i] - d[2 * i + 1]) / (2.0 * step)).collect()
        })
        .collect()
}

pub fn check_gradient_penalty_oracle(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for trial in 0..ORACLE_TRIALS {
        let hw = (16, 16);
        let b = r.gen_range(1..=3);
        let shape = [b, 1, hw.0, hw.1];
        let real = uniform(&shape, 0.0, 1.0, &mut r);
        let fake = uniform(&shape, 0.0, 1.0, &mut r);
        let eps: Vec<f64> = (0..b).map(|_| r.gen::<f64>()).collect();
        let lambda = r.gen_range(1.0..10.0);
        let critic = small_critic(seed * 100 + trial as u64, hw);

        let mut g = Graph::new();
        let p = g.bind(critic.params());
        let gp = gradient_penalty_with(&mut g, &critic, &p, &real, &fake, &eps, lambda).map_err(|e| e.to_string())?;

        let n = hw.0 * hw.1;
        let mut mixed = Vec::with_capacity(b * n);
        for (s, &e) in eps.iter().enumerate() {
            let (rs, fs) = (real.sample(s), fake.sample(s));
            mixed.extend((0..n).map(|i| e * rs[i] + (1.0 - e) * fs[i]));
        }
        let x = Tensor::new(shape.to_vec(), mixed).unwrap();
        let grads = critic_input_gradient_fd(&critic, &x, 1e-6);
        let want = lambda
            * grads
                .iter()
                .map(|gr| (gr.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).powi(2))
                .sum::<f64>()
            / b as f64;
        close(&format!("gradient penalty trial {trial}"), g.value(gp).item(), want, ORACLE_TOL)?;
    }
    Ok(())
}

pub fn check_total_loss_oracle(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for trial in 0..ORACLE_TRIALS {
        let w = LossWeights {
            lambda1: r.gen_range(0.0..5.0),
            lambda2: r.gen_range(0.0..5.0),
            lambda3: r.gen_range(0.0..30.0),
            lambda4: r.gen_range(0.0..30.0),
            lambda5_paired: r.gen_range(0.0..20.0),
            lambda5_unpaired: r.gen_range(0.0..5.0),
            lambda_gp: 10.0,
        };
        let lambdas = [w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5_paired, w.lambda5_unpaired];
        let values: Vec<f64> = (0..6).map(|_| r.gen_range(-3.0..3.0)).collect();
        let present: Vec<bool> = (0..6).map(|_| r.gen_bool(0.7)).collect();
        let mut g = Graph::new();
        let vars: Vec<Option<Var>> = values
            .iter()
            .zip(&present)
            .map(|(&v, &on)| on.then(|| g.constant(Tensor::scalar(v))))
            .collect();
        let c = Components {
            gan1: vars[0],
            gan2: vars[1],
            cc1: vars[2],
            cc2: vars[3],
            seg_dice: vars[4],
            seg_adv: vars[5],
        };
        let (t, breakdown) = total_loss(&mut g, &w, &c).map_err(|e| e.to_string())?;
        let want: f64 = (0..6).filter(|&k| present[k]).map(|k| lambdas[k] * values[k]).sum();
        close(&format!("total loss trial {trial}"), g.value(t).item(), want, ORACLE_TOL)?;
        let reported = breakdown.last().map(|(_, v)| *v).unwrap_or(f64::NAN);
        close(&format!("total loss breakdown trial {trial}"), reported, want, ORACLE_TOL)?;
    }
    Ok(())
}

/// Criterion 1: every loss against its elementwise oracle on 20 random inputs.
pub fn check_loss_oracles() -> Check {
    check_dice_oracle(1)?;
    check_cycle_oracles(2)?;
    check_gradient_penalty_oracle(3)?;
    check_total_loss_oracle(4)?;
    Ok(format!(
        "dice, cycle P-H, cycle H-H, gradient penalty, total: {ORACLE_TRIALS} trials each within {ORACLE_TOL:e}"
    ))
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;
/// Absolute floor for derivatives that are zero up to rounding.
pub const FD_ABS_FLOOR: f64 = 1e-6;
pub const FD_COORDS: usize = 3;

/// A critic with smooth activations: `D(x) = w . sigmoid(conv(x)) + c`.
pub struct SmoothCritic {
    store: ParamStore,
    conv_w: ParamId,
    conv_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    hw: (usize, usize),
    channels: usize,
}

impl SmoothCritic {
    pub fn new(hw: (usize, usize), rng: &mut impl Rng) -> Self {
        let channels = 2;
        let mut store = ParamStore::new();
        let conv_w = store.add("conv.weight", uniform(&[channels, 1, 3, 3], -0.5, 0.5, rng));
        let conv_b = store.add("conv.bias", uniform(&[channels], -0.1, 0.1, rng));
        let feat = channels * hw.0 * hw.1;
        let head_w = store.add("head.weight", uniform(&[1, feat], -0.3, 0.3, rng));
        let head_b = store.add("head.bias", Tensor::zeros([1]));
        Self {
            store,
            conv_w,
            conv_b,
            head_w,
            head_b,
            hw,
            channels,
        }
    }
}

impl Module for SmoothCritic {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Critic for SmoothCritic {
    fn name(&self) -> &str {
        "smooth"
    }

    fn score(&self, g: &mut Graph, p: &Bound, x: Var) -> pseudoheal::Result<Var> {
        let a = g.conv2d(x, p.get(self.conv_w), Some(p.get(self.conv_b)), 1, 1)?;
        let s = g.sigmoid(a);
        Ok(g.linear(s, p.get(self.head_w), Some(p.get(self.head_b)))?)
    }

    fn input_gradient(&self, g: &mut Graph, p: &Bound, x: Var) -> pseudoheal::Result<Var> {
        let batch = g.value(x).batch();
        let a = g.conv2d(x, p.get(self.conv_w), Some(p.get(self.conv_b)), 1, 1)?;
        let s = g.sigmoid(a);
        let neg = g.scale(s, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let ds = g.mul(s, one_minus)?;
        let w = g.broadcast_batch(p.get(self.head_w), batch, &[self.channels, self.hw.0, self.hw.1])?;
        let da = g.mul(w, ds)?;
        Ok(g.conv2d_input_grad(da, p.get(self.conv_w), 1, 1, self.hw)?)
    }
}

/// Smooth one-layer stand-ins for G, S and R with trainable parameters.
pub struct SmoothNets {
    pub store: ParamStore,
    g: (ParamId, ParamId),
    s: (ParamId, ParamId),
    r: (ParamId, ParamId),
}

impl SmoothNets {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut conv = |name: &str, in_c: usize, rng: &mut dyn rand::RngCore| {
            let w = store.add(format!("{name}.weight"), Tensor::from_fn([1, in_c, 3, 3], |_| rng.gen_range(-0.4..0.4)));
            let b = store.add(format!("{name}.bias"), Tensor::from_fn([1], |_| rng.gen_range(-0.1..0.1)));
            (w, b)
        };
        let g = conv("g", 1, rng);
        let s = conv("s", 1, rng);
        let r = conv("r", 2, rng);
        Self { store, g, s, r }
    }

    fn apply(g: &mut Graph, p: &Bound, (w, b): (ParamId, ParamId), x: Var) -> pseudoheal::Result<Var> {
        let a = g.conv2d(x, p.get(w), Some(p.get(b)), 1, 1)?;
        Ok(g.sigmoid(a))
    }

    pub fn cycle_ph(&self, g: &mut Graph, p: &Bound, x: Var) -> pseudoheal::Result<Var> {
        let gen = |g: &mut Graph, x: Var| Self::apply(g, p, self.g, x);
        let seg = |g: &mut Graph, x: Var| Self::apply(g, p, self.s, x);
        let rec = |g: &mut Graph, x: Var, m: Var| {
            let xm = g.concat_channels(&[x, m])?;
            Self::apply(g, p, self.r, xm)
        };
        cycle_ph_loss(g, &rec, &gen, &seg, x)
    }

    pub fn cycle_hh(&self, g: &mut Graph, p: &Bound, x: Var, m: Var) -> pseudoheal::Result<Var> {
        let gen = |g: &mut Graph, x: Var| Self::apply(g, p, self.g, x);
        let seg = |g: &mut Graph, x: Var| Self::apply(g, p, self.s, x);
        let rec = |g: &mut Graph, x: Var, m: Var| {
            let xm = g.concat_channels(&[x, m])?;
            Self::apply(g, p, self.r, xm)
        };
        cycle_hh_loss(g, &gen, &seg, &rec, x, m)
    }
}

/// Compares the analytic gradient of `loss` with central differences at
/// `FD_COORDS` random coordinates of `store`.
pub fn fd_check_params(
    what: &str,
    store: &ParamStore,
    loss: &dyn Fn(&mut Graph, &Bound) -> pseudoheal::Result<Var>,
    rng: &mut impl Rng,
) -> Result<(), String> {
    let mut g = Graph::new();
    let p = g.bind(store);
    let l = loss(&mut g, &p).map_err(|e| format!("{what}: {e}"))?;
    let grads = g.backward(l).map_err(|e| e.to_string())?.for_params(&p, store);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let p = g.bind(s);
        let l = loss(&mut g, &p).expect("loss evaluates");
        g.value(l).item()
    };
    for _ in 0..FD_COORDS {
        let t = rng.gen_range(0..store.len());
        let i = rng.gen_range(0..store.values()[t].numel());
        let mut plus = store.clone();
        plus.values_mut()[t].data_mut()[i] += FD_STEP;
        let mut minus = store.clone();
        minus.values_mut()[t].data_mut()[i] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        let analytic = grads[t].data()[i];
        fd_compare(&format!("{what} at {}[{i}]", store.names()[t]), analytic, numeric)?;
    }
    Ok(())
}

/// Same as [`fd_check_params`] for a plain input tensor.
pub fn fd_check_input(
    what: &str,
    x: &Tensor,
    loss: &dyn Fn(&mut Graph, Var) -> pseudoheal::Result<Var>,
    rng: &mut impl Rng,
) -> Result<(), String> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let l = loss(&mut g, xv).map_err(|e| format!("{what}: {e}"))?;
    let grads = g.backward(l).map_err(|e| e.to_string())?;
    let analytic_all = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let eval = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.input(t.clone());
        let l = loss(&mut g, v).expect("loss evaluates");
        g.value(l).item()
    };
    for _ in 0..FD_COORDS {
        let i = rng.gen_range(0..x.numel());
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        fd_compare(&format!("{what} at input[{i}]"), analytic_all.data()[i], numeric)?;
    }
    Ok(())
}

pub fn fd_compare(what: &str, analytic: f64, numeric: f64) -> Result<(), String> {
    let scale = analytic.abs().max(numeric.abs());
    if (analytic - numeric).abs() <= FD_REL_TOL * scale + FD_ABS_FLOOR {
        Ok(())
    } else {
        Err(format!("{what}: autodiff {analytic:.8e}, finite difference {numeric:.8e}"))
    }
}

/// Criterion 2: autodiff against central differences for every loss.
pub fn check_gradients() -> Check {
    let mut r = rng(11);
    let hw = (8, 8);
    let shape = [2, 1, hw.0, hw.1];

    let target = binary(&shape, 0.3, &mut r);
    let pred = uniform(&shape, 0.05, 0.95, &mut r);
    fd_check_input("dice", &pred, &|g, x| {
        let t = g.constant(target.clone());
        dice_loss(g, x, t)
    }, &mut r)?;

    let nets = SmoothNets::new(&mut r);
    let x_p = uniform(&shape, 0.0, 1.0, &mut r);
    let x_h = uniform(&shape, 0.0, 1.0, &mut r);
    let m_h = Tensor::zeros(shape.to_vec());
    fd_check_params("cycle P-H", &nets.store, &|g, p| {
        let x = g.constant(x_p.clone());
        nets.cycle_ph(g, p, x)
    }, &mut r)?;
    fd_check_params("cycle H-H", &nets.store, &|g, p| {
        let x = g.constant(x_h.clone());
        let m = g.constant(m_h.clone());
        nets.cycle_hh(g, p, x, m)
    }, &mut r)?;

    let critic = SmoothCritic::new(hw, &mut r);
    let real = uniform(&shape, 0.0, 1.0, &mut r);
    let fake = uniform(&shape, 0.0, 1.0, &mut r);
    let gp_seed = r.gen::<u64>();
    fd_check_params("gradient penalty", critic.params(), &|g, p| {
        gradient_penalty(g, &critic, p, &real, &fake, 10.0, &mut rng(gp_seed))
    }, &mut r)?;
    fd_check_params("WGAN-GP critic", critic.params(), &|g, p| {
        Ok(wasserstein_critic_loss(g, &critic, p, &real, &fake, 10.0, &mut rng(gp_seed))?.total)
    }, &mut r)?;
    fd_check_params("LS critic", critic.params(), &|g, p| ls_critic_loss(g, &critic, p, &real, &fake), &mut r)?;
    let frozen = critic.params().clone();
    fd_check_input("WGAN generator", &fake, &|g, x| {
        let p = g.freeze(&frozen);
        wasserstein_generator_loss(g, &critic, &p, x)
    }, &mut r)?;
    fd_check_input("LS generator", &fake, &|g, x| {
        let p = g.freeze(&frozen);
        ls_generator_loss(g, &critic, &p, x)
    }, &mut r)?;

    // The real critic's penalty: second order through strided convolutions.
    let net_critic = small_critic(5, hw);
    fd_check_params("gradient penalty (CriticNet)", net_critic.params(), &|g, p| {
        gradient_penalty(g, &net_critic, p, &real, &fake, 10.0, &mut rng(gp_seed))
    }, &mut r)?;

    let w = LossWeights::default();
    fd_check_params("total", &nets.store, &|g, p| {
        let xp = g.constant(x_p.clone());
        let xh = g.constant(x_h.clone());
        let mh = g.constant(m_h.clone());
        let mt = g.constant(target.clone());
        let cc1 = nets.cycle_ph(g, p, xp)?;
        let cc2 = nets.cycle_hh(g, p, xh, mh)?;
        let seg = SmoothNets::apply(g, p, nets.s, xp)?;
        let seg_dice = dice_loss(g, seg, mt)?;
        let c = Components {
            cc1: Some(cc1),
            cc2: Some(cc2),
            seg_dice: Some(seg_dice),
            ..Components::default()
        };
        Ok(total_loss(g, &w, &c)?.0)
    }, &mut r)?;

    Ok(format!(
        "10 losses x {FD_COORDS} coordinates, step {FD_STEP:e}, rel tol {FD_REL_TOL:e}"
    ))
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

/// SSIM by direct summation over every 11x11 window with 2D Gaussian weights.
pub fn naive_ssim(a: &ImageSlice, b: &ImageSlice) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let c = (k / 2) as f64;
    let mut w2 = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            w2[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = w2.iter().sum();
    w2.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = a.shape();
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - k {
        for q0 in 0..=w - k {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = w2[i * k + j];
                    let x = f64::from(a.get(r0 + i, q0 + j));
                    let y = f64::from(b.get(r0 + i, q0 + j));
                    ma += wt * x;
                    mb += wt * y;
                    aa += wt * x * x;
                    bb += wt * y * y;
                    ab += wt * x * y;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> ImageSlice {
    ImageSlice::from_fn(h, w, |_, _| rng.gen::<f32>())
}

/// Criterion 3: SSIM, identity, JS divergence and difference maps.
pub fn check_metric_oracles() -> Check {
    let mut r = rng(21);
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let a = random_image(32, 32, &mut r);
        // Correlated second image so SSIM is far from zero.
        let noise = random_image(32, 32, &mut r);
        let b = ImageSlice::from_fn(32, 32, |y, x| 0.7 * a.get(y, x) + 0.3 * noise.get(y, x));
        let got = ssim(&a, &b).map_err(|e| e.to_string())?;
        let want = naive_ssim(&a, &b);
        worst = worst.max((got - want).abs());
        close(&format!("SSIM trial {trial}"), got, want, 1e-6)?;
    }
    let img = random_image(32, 32, &mut r);
    let m = PathologyMask::from_fn(32, 32, |y, x| (10..18).contains(&y) && (12..20).contains(&x));
    close("identity(a, a, m)", identity(&img, &img, &m).map_err(|e| e.to_string())?, 1.0, 1e-12)?;

    for trial in 0..10 {
        let bins = r.gen_range(2..20);
        let a: Vec<f64> = (0..bins).map(|_| r.gen_range(0.0..10.0)).collect();
        let b: Vec<f64> = (0..bins).map(|_| r.gen_range(0.0..10.0)).collect();
        let ab = js_divergence(&a, &b).map_err(|e| e.to_string())?;
        let ba = js_divergence(&b, &a).map_err(|e| e.to_string())?;
        close(&format!("JS symmetry trial {trial}"), ab, ba, 1e-12)?;
        close(&format!("JS zero trial {trial}"), js_divergence(&a, &a).map_err(|e| e.to_string())?, 0.0, 1e-12)?;
        if !(0.0..=1.0).contains(&ab) {
            return Err(format!("JS divergence {ab} outside [0, 1]"));
        }
    }
    close("JS disjoint", js_divergence(&[1.0, 0.0], &[0.0, 1.0]).map_err(|e| e.to_string())?, 1.0, 1e-12)?;

    for trial in 0..10 {
        let a = random_image(16, 16, &mut r);
        let b = random_image(16, 16, &mut r);
        let t = r.gen_range(0.0..0.5);
        let got = diff_map_segmentation(&a, &b, t).map_err(|e| e.to_string())?;
        for y in 0..16 {
            for x in 0..16 {
                let want = (f64::from(a.get(y, x)) - f64::from(b.get(y, x))).abs() > t;
                if got.get(y, x) != want {
                    return Err(format!("difference map trial {trial} differs at ({y}, {x})"));
                }
            }
        }
    }
    Ok(format!("SSIM max |diff| {worst:.2e}; identity, JS and difference maps exact"))
}

// ---------------------------------------------------------------------------
// Study statistics
// ---------------------------------------------------------------------------

pub fn score(rater: &str, panel: usize, method: &str, criterion: Criterion, s: bool) -> ResolvedScore {
    ResolvedScore {
        rater_id: rater.into(),
        panel_id: panel,
        method_id: method.into(),
        criterion,
        score: s,
    }
}

/// Random binary scores of three raters for three methods on `panels` images.
pub fn score_fixture(panels: usize, seed: u64) -> Vec<ResolvedScore> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (m, bias) in [("ours", 0.8), ("cyclegan", 0.5), ("cgan", 0.3)] {
        for p in 0..panels {
            for rater in ["r1", "r2", "r3"] {
                for c in Criterion::ALL {
                    out.push(score(rater, p, m, c, r.gen_bool(bias)));
                }
            }
        }
    }
    out
}

/// Criterion 8: point-biserial, bootstrap and aggregation properties.
pub fn check_study_statistics() -> Check {
    let mut r = rng(31);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let n = r.gen_range(5..60);
        let cont: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let mut bin: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        bin[0] = true;
        bin[1] = false;
        let as_f: Vec<f64> = bin.iter().map(|&b| f64::from(u8::from(b))).collect();
        let pb = point_biserial(&bin, &cont).map_err(|e| e.to_string())?;
        let pr = pearson(&as_f, &cont).map_err(|e| e.to_string())?;
        worst = worst.max((pb - pr).abs());
        close(&format!("point-biserial trial {trial}"), pb, pr, 1e-10)?;
    }
    // Scores that match a thresholded metric exactly.
    let metric: Vec<f64> = (0..40).map(|_| r.gen_range(0.0..1.0)).collect();
    let thresholded: Vec<bool> = metric.iter().map(|&v| v > 0.5).collect();
    let as_f: Vec<f64> = thresholded.iter().map(|&b| f64::from(u8::from(b))).collect();
    close(
        "point-biserial of thresholded metric",
        point_biserial(&thresholded, &metric).map_err(|e| e.to_string())?,
        pearson(&as_f, &metric).map_err(|e| e.to_string())?,
        1e-10,
    )?;

    // Identical groups: two methods with the same consensus on every image.
    let base = score_fixture(30, 5);
    let twin: Vec<ResolvedScore> = base
        .iter()
        .filter(|s| s.method_id == "ours")
        .map(|s| ResolvedScore {
            method_id: "twin".into(),
            ..s.clone()
        })
        .collect();
    let mut both: Vec<ResolvedScore> = base.iter().filter(|s| s.method_id == "ours").cloned().collect();
    both.extend(twin);
    let agg = aggregate(&both, 7).map_err(|e| e.to_string())?;
    let p_min = agg.iter().filter_map(|s| s.p_value).fold(f64::INFINITY, f64::min);
    if p_min < 0.9 {
        return Err(format!("bootstrap p {p_min} < 0.9 for identical groups"));
    }
    let p_direct = bootstrap_paired_t_test(&[0.0; 30], 10_000, 1).map_err(|e| e.to_string())?;
    if p_direct < 0.9 {
        return Err(format!("bootstrap p {p_direct} < 0.9 for zero differences"));
    }

    // Order and rater-label invariance.
    let reference = aggregate(&base, 9).map_err(|e| e.to_string())?;
    let mut shuffled = base.clone();
    shuffled.shuffle(&mut r);
    let renamed: BTreeMap<&str, &str> = [("r1", "zed"), ("r2", "alpha"), ("r3", "mid")].into_iter().collect();
    for s in &mut shuffled {
        s.rater_id = renamed[s.rater_id.as_str()].to_string();
    }
    if aggregate(&shuffled, 9).map_err(|e| e.to_string())? != reference {
        return Err("aggregate changed under row shuffling and rater relabelling".into());
    }
    Ok(format!(
        "point-biserial = Pearson (max diff {worst:.1e}); identical-group p = {p_min:.3}; order invariant"
    ))
}

// ---------------------------------------------------------------------------
// Training runs
// ---------------------------------------------------------------------------

pub const REPRO_STEPS: usize = 50;

/// A small corpus for fast training runs.
pub fn tiny_corpus(seed: u64) -> pseudoheal::data::Corpus {
    let mut spec = pseudoheal::data::CorpusSpec {
        count: 60,
        deformed_healthy: 10,
        ..Default::default()
    };
    spec.phantom.seed = seed;
    pseudoheal::data::build_phantom_corpus(&spec).unwrap()
}

/// Narrow networks and a step budget instead of full epochs.
pub fn tiny_train(steps: u64) -> pseudoheal::train::TrainConfig {
    let mut cfg = pseudoheal::train::TrainConfig::desk();
    cfg.epochs = 100;
    cfg.warm_epochs = 1;
    cfg.max_steps = Some(steps);
    cfg.net.base_channels = 4;
    cfg.net.critic_channels = 4;
    cfg.net.levels = 2;
    cfg
}

fn loss_csv_head(path: &std::path::Path, rows: usize) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().take(rows + 1).map(str::to_string).collect())
}

/// Criterion 10: two runs of one configuration agree on the first
/// `REPRO_STEPS` loss rows and on the final checkpoint bytes.
pub fn check_reproducibility() -> Check {
    use pseudoheal::experiment::{run_training, LOSSES_CSV};
    let corpus = tiny_corpus(3);
    let cfg = tiny_train(REPRO_STEPS as u64);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = run_training(&corpus, &cfg, &a, false).map_err(|e| e.to_string())?;
    let rb = run_training(&corpus, &cfg, &b, false).map_err(|e| e.to_string())?;
    let (la, lb) = (loss_csv_head(&a.join(LOSSES_CSV), REPRO_STEPS)?, loss_csv_head(&b.join(LOSSES_CSV), REPRO_STEPS)?);
    if la.len() != REPRO_STEPS + 1 {
        return Err(format!("loss CSV has {} rows, expected {REPRO_STEPS}", la.len().saturating_sub(1)));
    }
    if let Some(i) = (0..la.len()).find(|&i| la.get(i) != lb.get(i)) {
        return Err(format!("loss CSV differs at line {i}: {:?} vs {:?}", la.get(i), lb.get(i)));
    }
    if ra.model_hash != rb.model_hash {
        return Err(format!("checkpoint hashes differ: {} vs {}", ra.model_hash, rb.model_hash));
    }
    Ok(format!("{REPRO_STEPS} loss rows identical; checkpoint sha256 {}", &ra.model_hash[..16]))
}
