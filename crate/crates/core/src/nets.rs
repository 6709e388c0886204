//! Network definitions: Generator, Segmentor, Reconstructor and the critics.
//!
//! Every network owns a [`ParamStore`]. Forward passes record into a caller
//! supplied [`Graph`] with the parameters inserted by [`Graph::bind`] (to
//! train them) or [`Graph::freeze`] (to hold them fixed).

use std::rc::Rc;

use pseudoheal_autograd::{kaiming_uniform, Bound, Graph, ParamId, ParamStore, ShapeError, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
/// Clamp used when mapping an input image to logit space for the residual output.
const LOGIT_EPS: f64 = 1e-3;
/// Scale of the initial G/R head weights, so a fresh network starts close to identity.
const HEAD_INIT_SCALE: f64 = 0.1;
/// Initial foreground probability of the Segmentor head (about the lesion pixel fraction).
const SEGMENTOR_PRIOR: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Channels at full resolution; doubled at each level down.
    pub base_channels: usize,
    /// Number of stride-2 downsampling steps.
    pub levels: usize,
    /// Residual blocks at the bottleneck of G and R.
    pub res_blocks: usize,
    /// Instance normalisation inside G and R (never in critics).
    pub instance_norm: bool,
    /// Instance normalisation inside the Segmentor.
    pub segmentor_norm: bool,
    /// Channels of the first critic layer.
    pub critic_channels: usize,
    /// Stride-2 layers in each critic.
    pub critic_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            levels: 3,
            res_blocks: 1,
            instance_norm: false,
            segmentor_norm: false,
            critic_channels: 32,
            critic_layers: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.critic_channels == 0 {
            return Err(Error::config("net.base_channels", "channel counts must be positive"));
        }
        if self.levels == 0 || self.levels > 6 {
            return Err(Error::config("net.levels", "must lie in 1..=6"));
        }
        if self.critic_layers == 0 || self.critic_layers > 6 {
            return Err(Error::config("net.critic_layers", "must lie in 1..=6"));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(3)
    }
}

/// Access to a network's parameters.
pub trait Module {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_c, in_c, k, k], fan_in, LEAKY_SLOPE, rng),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros([out_c]));
        Self { w, b, stride, pad }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p.get(self.w), Some(p.get(self.b)), self.stride, self.pad)?)
    }
}

fn activate(g: &mut Graph, x: Var, norm: bool) -> Result<Var> {
    let x = if norm { g.instance_norm(x, NORM_EPS)? } else { x };
    Ok(g.leaky_relu(x, LEAKY_SLOPE))
}

/// Checks a `[B, C, H, W]` input against the expected channel count and a
/// spatial divisibility requirement.
fn check_input(g: &Graph, x: Var, channels: usize, divisor: usize, net: &str) -> Result<(usize, usize, usize)> {
    let shape = g.value(x).shape().to_vec();
    let bad = || {
        Error::Shape(ShapeError::Mismatch {
            expected: vec![shape.first().copied().unwrap_or(0), channels, divisor, divisor],
            actual: shape.clone(),
        })
    };
    let [b, c, h, w] = shape[..] else {
        return Err(Error::Validation(format!("{net} expects a [B, {channels}, H, W] batch, got {shape:?}")));
    };
    if c != channels || h % divisor != 0 || w % divisor != 0 || h == 0 || w == 0 || b == 0 {
        return Err(Error::Validation(format!(
            "{net} expects [B, {channels}, H, W] with H, W multiples of {divisor}; got {shape:?} ({})",
            bad()
        )));
    }
    Ok((b, h, w))
}

/// Residual encoder-decoder with additive long skips, shared by G and R.
#[derive(Clone, Debug)]
struct ResEncDec {
    store: ParamStore,
    in_channels: usize,
    norm: bool,
    stem: Conv,
    down: Vec<Conv>,
    res: Vec<(Conv, Conv)>,
    up: Vec<Conv>,
    refine: Vec<Conv>,
    head: Conv,
}

impl ResEncDec {
    fn new(cfg: &NetConfig, in_channels: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let c0 = cfg.channels(0);
        let stem = Conv::new(&mut store, "stem", in_channels, c0, 3, 1, 1, rng);
        let down = (1..=cfg.levels)
            .map(|l| Conv::new(&mut store, &format!("down{l}"), cfg.channels(l - 1), cfg.channels(l), 3, 2, 1, rng))
            .collect();
        let cb = cfg.channels(cfg.levels);
        let res = (0..cfg.res_blocks)
            .map(|r| {
                (
                    Conv::new(&mut store, &format!("res{r}.a"), cb, cb, 3, 1, 1, rng),
                    Conv::new(&mut store, &format!("res{r}.b"), cb, cb, 3, 1, 1, rng),
                )
            })
            .collect();
        let mut up = Vec::new();
        let mut refine = Vec::new();
        for l in (1..=cfg.levels).rev() {
            up.push(Conv::new(&mut store, &format!("up{l}"), cfg.channels(l), cfg.channels(l - 1), 3, 1, 1, rng));
            refine.push(Conv::new(&mut store, &format!("refine{l}"), cfg.channels(l - 1), cfg.channels(l - 1), 3, 1, 1, rng));
        }
        // The head also sees the raw input through a long skip.
        let head = Conv::new(&mut store, "head", c0 + in_channels, 1, 3, 1, 1, rng);
        let hw = store.get_mut(head.w);
        *hw = hw.map(|v| v * HEAD_INIT_SCALE);
        Self {
            store,
            in_channels,
            norm: cfg.instance_norm,
            stem,
            down,
            res,
            up,
            refine,
            head,
        }
    }

    /// `x` holds every input channel; `image` is the image channel alone.
    /// The head predicts a residual in logit space on top of `image`.
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, image: Var, net: &str) -> Result<Var> {
        check_input(g, x, self.in_channels, 1 << self.down.len(), net)?;
        let s = self.stem.apply(g, p, x)?;
        let mut skips = vec![activate(g, s, self.norm)?];
        for d in &self.down {
            let h = d.apply(g, p, *skips.last().expect("stem"))?;
            skips.push(activate(g, h, self.norm)?);
        }
        let mut h = skips.pop().expect("bottleneck");
        for (a, b) in &self.res {
            let t = a.apply(g, p, h)?;
            let t = activate(g, t, self.norm)?;
            let t = b.apply(g, p, t)?;
            let sum = g.add(h, t)?;
            h = g.leaky_relu(sum, LEAKY_SLOPE);
        }
        for (up, refine) in self.up.iter().zip(&self.refine) {
            let t = up.apply(g, p, h)?;
            let t = activate(g, t, self.norm)?;
            let t = g.upsample2x(t)?;
            let t = g.add(t, skips.pop().expect("one skip per level"))?;
            let t = refine.apply(g, p, t)?;
            h = activate(g, t, self.norm)?;
        }
        let cat = g.concat_channels(&[h, x])?;
        let residual = self.head.apply(g, p, cat)?;
        let base = g.logit(image, LOGIT_EPS);
        let logits = g.add(base, residual)?;
        Ok(g.sigmoid(logits))
    }
}

/// Pathological image to pseudo-healthy image; one input channel.
#[derive(Clone, Debug)]
pub struct GeneratorNet(ResEncDec);

impl GeneratorNet {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        Self(ResEncDec::new(cfg, 1, rng))
    }

    /// `x: [B, 1, H, W]` to `[B, 1, H, W]` in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.0.forward(g, p, x, x, "generator")
    }
}

/// Image plus mask back to an image; two input channels.
#[derive(Clone, Debug)]
pub struct ReconstructorNet(ResEncDec);

impl ReconstructorNet {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        Self(ResEncDec::new(cfg, 2, rng))
    }

    /// `x, m: [B, 1, H, W]` to `[B, 1, H, W]` in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, m: Var) -> Result<Var> {
        let xm = g.concat_channels(&[x, m])?;
        self.0.forward(g, p, xm, x, "reconstructor")
    }
}

/// U-net segmentor with concatenated long skips and a sigmoid head.
#[derive(Clone, Debug)]
pub struct SegmentorNet {
    store: ParamStore,
    norm: bool,
    stem: Conv,
    down: Vec<Conv>,
    up: Vec<Conv>,
    merge: Vec<Conv>,
    head: Conv,
}

impl SegmentorNet {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let c0 = cfg.channels(0);
        let stem = Conv::new(&mut store, "stem", 1, c0, 3, 1, 1, rng);
        let down = (1..=cfg.levels)
            .map(|l| Conv::new(&mut store, &format!("down{l}"), cfg.channels(l - 1), cfg.channels(l), 3, 2, 1, rng))
            .collect();
        let mut up = Vec::new();
        let mut merge = Vec::new();
        for l in (1..=cfg.levels).rev() {
            let (hi, lo) = (cfg.channels(l), cfg.channels(l - 1));
            up.push(Conv::new(&mut store, &format!("up{l}"), hi, lo, 3, 1, 1, rng));
            merge.push(Conv::new(&mut store, &format!("merge{l}"), 2 * lo, lo, 3, 1, 1, rng));
        }
        let head = Conv::new(&mut store, "head", c0, 1, 1, 1, 0, rng);
        // Starting near the lesion prior keeps early Dice gradients informative.
        store.get_mut(head.b).data_mut()[0] = (SEGMENTOR_PRIOR / (1.0 - SEGMENTOR_PRIOR)).ln();
        Self {
            store,
            norm: cfg.segmentor_norm,
            stem,
            down,
            up,
            merge,
            head,
        }
    }

    /// `x: [B, 1, H, W]` to a soft mask `[B, 1, H, W]` in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        check_input(g, x, 1, 1 << self.down.len(), "segmentor")?;
        let s = self.stem.apply(g, p, x)?;
        let mut skips = vec![activate(g, s, self.norm)?];
        for d in &self.down {
            let h = d.apply(g, p, *skips.last().expect("stem"))?;
            skips.push(activate(g, h, self.norm)?);
        }
        let mut h = skips.pop().expect("bottleneck");
        for (up, merge) in self.up.iter().zip(&self.merge) {
            let t = up.apply(g, p, h)?;
            let t = activate(g, t, self.norm)?;
            let t = g.upsample2x(t)?;
            let cat = g.concat_channels(&[t, skips.pop().expect("one skip per level")])?;
            let t = merge.apply(g, p, cat)?;
            h = activate(g, t, self.norm)?;
        }
        let logits = self.head.apply(g, p, h)?;
        Ok(g.sigmoid(logits))
    }
}

/// A scalar-valued critic over `[B, 1, H, W]` batches.
pub trait Critic: Module {
    fn name(&self) -> &str;

    /// Scores `[B, 1]`.
    fn score(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var>;

    /// `d(sum of scores)/dx` as a graph node that is itself differentiable
    /// with respect to the critic parameters.
    fn input_gradient(&self, _g: &mut Graph, _p: &Bound, _x: Var) -> Result<Var> {
        Err(Error::NotDifferentiable(self.name().to_string()))
    }
}

/// Strided-convolution critic with leaky ReLUs and a linear head, no
/// normalisation and no output squashing.
#[derive(Clone, Debug)]
pub struct CriticNet {
    name: String,
    store: ParamStore,
    input_hw: (usize, usize),
    convs: Vec<Conv>,
    head_w: ParamId,
    head_b: ParamId,
    feature_shape: [usize; 3],
}

impl CriticNet {
    pub fn new(name: &str, cfg: &NetConfig, input_hw: (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        let div = 1 << cfg.critic_layers;
        if input_hw.0 % div != 0 || input_hw.1 % div != 0 || input_hw.0 < div || input_hw.1 < div {
            return Err(Error::config(
                "net.critic_layers",
                format!("input {input_hw:?} is not divisible by {div}"),
            ));
        }
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut in_c = 1;
        let mut c = cfg.critic_channels;
        for l in 0..cfg.critic_layers {
            convs.push(Conv::new(&mut store, &format!("conv{l}"), in_c, c, 4, 2, 1, rng));
            in_c = c;
            c = (c * 2).min(cfg.critic_channels * 8);
        }
        let feature_shape = [in_c, input_hw.0 / div, input_hw.1 / div];
        let feat: usize = feature_shape.iter().product();
        let head_w = store.add("head.weight", kaiming_uniform(&[1, feat], feat, 1.0, rng));
        let head_b = store.add("head.bias", Tensor::zeros([1]));
        Ok(Self {
            name: name.to_string(),
            store,
            input_hw,
            convs,
            head_w,
            head_b,
            feature_shape,
        })
    }

    fn check(&self, g: &Graph, x: Var) -> Result<usize> {
        let (b, h, w) = check_input(g, x, 1, 1, &self.name)?;
        if (h, w) != self.input_hw {
            return Err(Error::Shape(ShapeError::Mismatch {
                expected: vec![b, 1, self.input_hw.0, self.input_hw.1],
                actual: vec![b, 1, h, w],
            }));
        }
        Ok(b)
    }
}

impl Module for CriticNet {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Critic for CriticNet {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check(g, x)?;
        let mut h = x;
        for c in &self.convs {
            let a = c.apply(g, p, h)?;
            h = g.leaky_relu(a, LEAKY_SLOPE);
        }
        Ok(g.linear(h, p.get(self.head_w), Some(p.get(self.head_b)))?)
    }

    /// Exact almost everywhere: the leaky ReLU derivative is piecewise
    /// constant, so backpropagating through fixed slope masks with
    /// transposed convolutions yields the input gradient as a function of
    /// the weights.
    fn input_gradient(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let batch = self.check(g, x)?;
        let mut h = x;
        let mut pre = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let hw = {
                let s = g.value(h).shape();
                (s[2], s[3])
            };
            let a = c.apply(g, p, h)?;
            let slopes = Rc::new(g.value(a).map(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE }));
            pre.push((slopes, hw));
            h = g.leaky_relu(a, LEAKY_SLOPE);
        }
        let mut d = g.broadcast_batch(p.get(self.head_w), batch, &self.feature_shape)?;
        for (c, (slopes, hw)) in self.convs.iter().zip(pre).rev() {
            let da = g.mul_const(d, slopes)?;
            d = g.conv2d_input_grad(da, p.get(c.w), c.stride, c.pad, hw)?;
        }
        Ok(d)
    }
}

macro_rules! module_impl {
    ($($t:ty => $($field:tt).+),* $(,)?) => {$(
        impl Module for $t {
            fn params(&self) -> &ParamStore {
                &self.$($field).+
            }
            fn params_mut(&mut self) -> &mut ParamStore {
                &mut self.$($field).+
            }
        }
    )*};
}

module_impl!(GeneratorNet => 0.store, ReconstructorNet => 0.store, SegmentorNet => store);

/// `G(x)` evaluated without recording gradients.
pub fn forward_g(net: &GeneratorNet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let p = g.freeze(net.params());
    let xv = g.constant(x.clone());
    let y = net.forward(&mut g, &p, xv)?;
    Ok(g.value(y).clone())
}

/// `S(x)` evaluated without recording gradients.
pub fn forward_s(net: &SegmentorNet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let p = g.freeze(net.params());
    let xv = g.constant(x.clone());
    let y = net.forward(&mut g, &p, xv)?;
    Ok(g.value(y).clone())
}

/// `R(x, m)` evaluated without recording gradients.
pub fn forward_r(net: &ReconstructorNet, x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let p = g.freeze(net.params());
    let xv = g.constant(x.clone());
    let mv = g.constant(m.clone());
    let y = net.forward(&mut g, &p, xv, mv)?;
    Ok(g.value(y).clone())
}

/// Critic scores `[B, 1]` evaluated without recording gradients.
pub fn forward_critic(net: &dyn Critic, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let p = g.freeze(net.params());
    let xv = g.constant(x.clone());
    let y = net.score(&mut g, &p, xv)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetConfig {
        NetConfig {
            base_channels: 4,
            levels: 2,
            critic_channels: 4,
            critic_layers: 2,
            ..NetConfig::default()
        }
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = GeneratorNet::new(&small(), &mut rng);
        let err = forward_g(&net, &Tensor::zeros([1, 2, 8, 8])).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 8, 8]"), "{err}");
        let critic = CriticNet::new("D_x", &small(), (8, 8), &mut rng).unwrap();
        let err = forward_critic(&critic, &Tensor::zeros([2, 1, 12, 12])).unwrap_err().to_string();
        assert!(err.contains("12"), "{err}");
    }

    #[test]
    fn critic_input_gradient_matches_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let critic = CriticNet::new("D", &small(), (8, 8), &mut rng).unwrap();
        let x = Tensor::from_fn([2, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let mut g = Graph::new();
        let p = g.freeze(critic.params());
        let xv = g.input(x.clone());
        let s = critic.score(&mut g, &p, xv).unwrap();
        let total = g.sum(s);
        let reference = g.backward(total).unwrap().get(xv).unwrap().clone();
        let mut g2 = Graph::new();
        let p2 = g2.bind(critic.params());
        let xc = g2.constant(x);
        let d = critic.input_gradient(&mut g2, &p2, xc).unwrap();
        for (a, b) in g2.value(d).data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
