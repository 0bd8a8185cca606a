//! Patch-wise fully convolutional noise predictor.
//!
//! A shallow U-Net: an input convolution, an encoder of `stages` levels of
//! time-embedded residual blocks separated by stride-2 convolutions, a
//! decoder that mirrors it with nearest-neighbour upsampling, a convolution
//! and a concatenated encoder skip, and a normalized output projection. There
//! is no attention and no layer that pools over the image, so the output at a
//! pixel only depends on a bounded window of the input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    silu, silu_backward, silu_grad, silu_tensor, timestep_embedding, upsample_nearest2, upsample_nearest2_backward, Conv2d,
    ConvCache, GroupNorm, Linear, NormCache,
};
use crate::nn::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Image channels consumed and predicted.
    pub image_channels: usize,
    pub stages: usize,
    /// Channel width per stage, finest first.
    pub channels: Vec<usize>,
    pub enc_resblocks: usize,
    pub dec_resblocks: usize,
    pub kernel_size: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub zero_init_output: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_channels: 3,
            stages: 3,
            channels: vec![64, 128, 256],
            enc_resblocks: 1,
            dec_resblocks: 2,
            kernel_size: 3,
            time_embed_dim: 256,
            norm_groups: 8,
            zero_init_output: true,
        }
    }
}

impl DenoiserConfig {
    /// Wider, deeper variant for high resolution images.
    pub fn enhanced() -> Self {
        DenoiserConfig {
            stages: 4,
            channels: vec![64, 128, 256, 512],
            enc_resblocks: 2,
            dec_resblocks: 3,
            ..Default::default()
        }
    }

    /// CPU-sized two-stage network used for desk-scale experiments.
    pub fn small() -> Self {
        DenoiserConfig {
            stages: 2,
            channels: vec![16, 32],
            enc_resblocks: 1,
            dec_resblocks: 1,
            time_embed_dim: 32,
            norm_groups: 2,
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "enhanced" => Some(Self::enhanced()),
            "small" => Some(Self::small()),
            _ => None,
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stages.max(1) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_channels == 0 {
            return bad("image_channels must be positive".into());
        }
        if self.stages == 0 {
            return bad("stages must be at least 1".into());
        }
        if self.channels.len() != self.stages {
            return bad(format!("channels has {} entries for {} stages", self.channels.len(), self.stages));
        }
        if self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.kernel_size < 3 || self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd and >= 3, got {}", self.kernel_size));
        }
        if self.time_embed_dim == 0 {
            return bad("time_embed_dim must be positive".into());
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.norm_groups != 0) {
            return bad(format!("norm_groups {} does not divide channel width {c}", self.norm_groups));
        }
        for op in plan(self) {
            let c = match op {
                PlanOp::Res { c_in, .. } | PlanOp::Out { c_in, .. } => c_in,
                _ => continue,
            };
            if c % self.norm_groups != 0 {
                return bad(format!("norm_groups {} does not divide normalized width {c}", self.norm_groups));
            }
            // Two centred, rescaled values can only be (+1, -1) or (-1, +1).
            if c / self.norm_groups < 3 {
                return bad(format!(
                    "norm_groups {} leaves fewer than 3 channels per group at width {c}",
                    self.norm_groups
                ));
            }
        }
        Ok(())
    }
}

/// One node of the layer graph, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanOp {
    In { c_in: usize, c_out: usize },
    Res { c_in: usize, c_out: usize },
    /// Stores the current activation for a later [`PlanOp::Concat`].
    PushSkip,
    Down { c: usize },
    /// Nearest-neighbour 2x upsampling followed by a convolution.
    Up { c_in: usize, c_out: usize },
    /// Concatenates the most recent stored activation along channels.
    Concat,
    Out { c_in: usize, c_out: usize },
}

pub fn plan(config: &DenoiserConfig) -> Vec<PlanOp> {
    let mut ops = Vec::new();
    let mut ch = config.channels[0];
    ops.push(PlanOp::In {
        c_in: config.image_channels,
        c_out: ch,
    });
    let mut skips = Vec::new();
    for level in 0..config.stages {
        for _ in 0..config.enc_resblocks {
            ops.push(PlanOp::Res {
                c_in: ch,
                c_out: config.channels[level],
            });
            ch = config.channels[level];
        }
        if level + 1 < config.stages {
            ops.push(PlanOp::PushSkip);
            skips.push(ch);
            ops.push(PlanOp::Down { c: ch });
        }
    }
    for level in (0..config.stages).rev() {
        if level + 1 < config.stages {
            ops.push(PlanOp::Up {
                c_in: ch,
                c_out: config.channels[level],
            });
            ops.push(PlanOp::Concat);
            ch = config.channels[level] + skips.pop().expect("skip per level");
        }
        for _ in 0..config.dec_resblocks {
            ops.push(PlanOp::Res {
                c_in: ch,
                c_out: config.channels[level],
            });
            ch = config.channels[level];
        }
    }
    ops.push(PlanOp::Out {
        c_in: ch,
        c_out: config.image_channels,
    });
    ops
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
enum Layer {
    In(Conv2d),
    Res(Box<ResBlock>),
    PushSkip,
    Down(Conv2d),
    Up(Conv2d),
    Concat,
    Out { norm: GroupNorm, conv: Conv2d },
}

#[derive(Debug, Clone)]
struct TimeMlp {
    lin1: Linear,
    lin2: Linear,
}

/// The noise predictor `eps_theta(x_t, t)`.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    timesteps: usize,
    params: ParamSet<T>,
    time: TimeMlp,
    layers: Vec<Layer>,
}

/// Anything that predicts the noise in `x_t`; the samplers only need this.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise(&self, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;

    /// Channels of the images it denoises.
    fn image_channels(&self) -> usize;

    /// Spatial sizes accepted by the predictor are multiples of this.
    fn size_multiple(&self) -> usize {
        1
    }
}

struct ResCache<T> {
    n1: NormCache<T>,
    a1: Tensor<T>,
    c1: ConvCache<T>,
    n2: NormCache<T>,
    a2: Tensor<T>,
    c2: ConvCache<T>,
    skip: Option<ConvCache<T>>,
}

enum LayerCache<T> {
    Conv(ConvCache<T>),
    Res(Box<ResCache<T>>),
    Up(ConvCache<T>),
    Concat(usize),
    Out { norm: NormCache<T>, pre: Tensor<T>, conv: ConvCache<T> },
    None,
}

/// Activations recorded by [`Denoiser::forward_trace`].
pub struct Trace<T> {
    emb: Vec<T>,
    hidden: Vec<T>,
    temb: Vec<T>,
    temb_act: Vec<T>,
    caches: Vec<LayerCache<T>>,
}

impl ResBlock {
    fn build<T: Scalar>(params: &mut ParamSet<T>, name: &str, c_in: usize, c_out: usize, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.kernel_size;
        ResBlock {
            norm1: GroupNorm::new(params, &format!("{name}.norm1"), c_in, cfg.norm_groups),
            conv1: Conv2d::new(params, &format!("{name}.conv1"), c_in, c_out, k, 1, false, rng),
            proj: Linear::new(params, &format!("{name}.temb"), cfg.time_embed_dim, c_out, rng),
            norm2: GroupNorm::new(params, &format!("{name}.norm2"), c_out, cfg.norm_groups),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), c_out, c_out, k, 1, false, rng),
            skip: (c_in != c_out).then(|| Conv2d::new(params, &format!("{name}.skip"), c_in, c_out, 1, 1, false, rng)),
        }
    }

    fn add_time<T: Scalar>(&self, params: &ParamSet<T>, h: &mut Tensor<T>, temb_act: &[T]) {
        let bias = self.proj.forward(params, temb_act);
        for (c, &b) in bias.iter().enumerate() {
            h.channel_mut(c).iter_mut().for_each(|v| *v += b);
        }
    }

    fn infer<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>, temb_act: &[T]) -> Tensor<T> {
        let a1 = self.norm1.infer(params, x);
        let mut h = self.conv1.infer(params, &silu_tensor(&a1));
        self.add_time(params, &mut h, temb_act);
        let a2 = self.norm2.infer(params, &h);
        let mut out = self.conv2.infer(params, &silu_tensor(&a2));
        match &self.skip {
            Some(s) => out.add_assign(&s.infer(params, x)),
            None => out.add_assign(x),
        }
        out
    }

    fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>, temb_act: &[T]) -> (Tensor<T>, ResCache<T>) {
        let (a1, n1) = self.norm1.forward(params, x);
        let (mut h, c1) = self.conv1.forward(params, &silu_tensor(&a1));
        self.add_time(params, &mut h, temb_act);
        let (a2, n2) = self.norm2.forward(params, &h);
        let (mut out, c2) = self.conv2.forward(params, &silu_tensor(&a2));
        let skip = match &self.skip {
            Some(s) => {
                let (sx, sc) = s.forward(params, x);
                out.add_assign(&sx);
                Some(sc)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        (
            out,
            ResCache {
                n1,
                a1,
                c1,
                n2,
                a2,
                c2,
                skip,
            },
        )
    }

    fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &ResCache<T>,
        dy: &Tensor<T>,
        temb_act: &[T],
        dtemb_act: &mut [T],
        grads: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let mut dx = match (&self.skip, &cache.skip) {
            (Some(s), Some(sc)) => s.backward(params, sc, dy, grads, true).expect("dx"),
            _ => dy.clone(),
        };
        let d = self.conv2.backward(params, &cache.c2, dy, grads, true).expect("dx");
        let d = silu_backward(&cache.a2, &d);
        let dh = self.norm2.backward(params, &cache.n2, &d, grads);
        let dbias: Vec<T> = (0..dh.channels()).map(|c| dh.channel(c).iter().copied().sum()).collect();
        let dt = self.proj.backward(params, temb_act, &dbias, grads);
        for (a, b) in dtemb_act.iter_mut().zip(dt) {
            *a += b;
        }
        let d = self.conv1.backward(params, &cache.c1, &dh, grads, true).expect("dx");
        let d = silu_backward(&cache.a1, &d);
        dx.add_assign(&self.norm1.backward(params, &cache.n1, &d, grads));
        dx
    }
}

impl<T: Scalar> Denoiser<T> {
    /// Builds and initializes the network; identical `(config, seed)` pairs
    /// give bitwise identical parameters.
    pub fn new(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.time_embed_dim;
        let time = TimeMlp {
            lin1: Linear::new(&mut params, "time.lin1", d, d, &mut rng),
            lin2: Linear::new(&mut params, "time.lin2", d, d, &mut rng),
        };
        let k = config.kernel_size;
        let mut layers = Vec::new();
        let (mut n_res, mut n_down, mut n_up) = (0, 0, 0);
        for op in plan(config) {
            let layer = match op {
                PlanOp::In { c_in, c_out } => Layer::In(Conv2d::new(&mut params, "input", c_in, c_out, k, 1, false, &mut rng)),
                PlanOp::Res { c_in, c_out } => {
                    n_res += 1;
                    Layer::Res(Box::new(ResBlock::build(
                        &mut params,
                        &format!("res{}", n_res - 1),
                        c_in,
                        c_out,
                        config,
                        &mut rng,
                    )))
                }
                PlanOp::PushSkip => Layer::PushSkip,
                PlanOp::Down { c } => {
                    n_down += 1;
                    Layer::Down(Conv2d::new(&mut params, &format!("down{}", n_down - 1), c, c, k, 2, false, &mut rng))
                }
                PlanOp::Up { c_in, c_out } => {
                    n_up += 1;
                    Layer::Up(Conv2d::new(&mut params, &format!("up{}", n_up - 1), c_in, c_out, k, 1, false, &mut rng))
                }
                PlanOp::Concat => Layer::Concat,
                PlanOp::Out { c_in, c_out } => Layer::Out {
                    norm: GroupNorm::new(&mut params, "out.norm", c_in, config.norm_groups),
                    conv: Conv2d::new(&mut params, "out.conv", c_in, c_out, k, 1, config.zero_init_output, &mut rng),
                },
            };
            layers.push(layer);
        }
        Ok(Denoiser {
            config: config.clone(),
            timesteps: crate::schedule::ScheduleParams::default().steps,
            params,
            time,
            layers,
        })
    }

    /// Rebuilds the network around existing parameters, checking every array
    /// name and shape against the config.
    pub fn with_params(config: &DenoiserConfig, params: ParamSet<T>) -> Result<Self> {
        let mut d = Denoiser::new(config, 0)?;
        d.params.ensure_compatible(&params, "denoiser parameters")?;
        d.params = params;
        Ok(d)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Sets `T`, the largest timestep [`NoisePredictor::predict_noise`] accepts.
    pub fn with_timesteps(mut self, steps: usize) -> Self {
        self.timesteps = steps;
        self
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.timesteps,
            });
        }
        Ok(())
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = x.shape();
        if c != self.config.image_channels {
            return Err(Error::shape(
                "denoiser input channels",
                self.config.image_channels.to_string(),
                shape_str(x.shape()),
            ));
        }
        self.check_size(h, w)
    }

    /// Checks that an `h x w` image fits the down/upsampling grid.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.config.size_multiple();
        for (what, size) in [("height", h), ("width", w)] {
            if size == 0 || size % m != 0 {
                return Err(Error::Divisibility {
                    what: format!("input {what}"),
                    size,
                    multiple: m,
                });
            }
        }
        Ok(())
    }

    fn time_embedding(&self, t: usize) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let emb = timestep_embedding::<T>(t as f64, self.config.time_embed_dim);
        let hidden = self.time.lin1.forward(&self.params, &emb);
        let act: Vec<T> = hidden.iter().map(|&v| silu(v)).collect();
        let temb = self.time.lin2.forward(&self.params, &act);
        let temb_act = temb.iter().map(|&v| silu(v)).collect();
        (emb, hidden, temb, temb_act)
    }

    fn run(&self, x: &Tensor<T>, mut caches: Option<&mut Vec<LayerCache<T>>>, temb_act: &[T]) -> Tensor<T> {
        let p = &self.params;
        let mut skips: Vec<Tensor<T>> = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::In(conv) | Layer::Down(conv) => match caches {
                    Some(_) => {
                        let (y, c) = conv.forward(p, &h);
                        (y, LayerCache::Conv(c))
                    }
                    None => (conv.infer(p, &h), LayerCache::None),
                },
                Layer::Res(block) => match caches {
                    Some(_) => {
                        let (y, c) = block.forward(p, &h, temb_act);
                        (y, LayerCache::Res(Box::new(c)))
                    }
                    None => (block.infer(p, &h, temb_act), LayerCache::None),
                },
                Layer::PushSkip => {
                    skips.push(h.clone());
                    (h, LayerCache::None)
                }
                Layer::Up(conv) => {
                    let u = upsample_nearest2(&h);
                    match caches {
                        Some(_) => {
                            let (y, c) = conv.forward(p, &u);
                            (y, LayerCache::Up(c))
                        }
                        None => (conv.infer(p, &u), LayerCache::None),
                    }
                }
                Layer::Concat => {
                    let s = skips.pop().expect("skip stack");
                    let c = h.channels();
                    (h.concat_channels(&s), LayerCache::Concat(c))
                }
                Layer::Out { norm, conv } => match caches {
                    Some(_) => {
                        let (a, nc) = norm.forward(p, &h);
                        let (y, cc) = conv.forward(p, &silu_tensor(&a));
                        (
                            y,
                            LayerCache::Out {
                                norm: nc,
                                pre: a,
                                conv: cc,
                            },
                        )
                    }
                    None => {
                        let a = norm.infer(p, &h);
                        (conv.infer(p, &silu_tensor(&a)), LayerCache::None)
                    }
                },
            };
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            h = next;
        }
        h
    }

    /// Forward pass that records what [`Denoiser::backward`] needs.
    pub fn forward_trace(&self, x: &Tensor<T>, t: usize) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(x)?;
        self.check_timestep(t)?;
        let (emb, hidden, temb, temb_act) = self.time_embedding(t);
        let mut caches = Vec::with_capacity(self.layers.len());
        let y = self.run(x, Some(&mut caches), &temb_act);
        Ok((
            y,
            Trace {
                emb,
                hidden,
                temb,
                temb_act,
                caches,
            },
        ))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, trace: &Trace<T>, dy: &Tensor<T>, grads: &mut ParamSet<T>) {
        let p = &self.params;
        let mut dtemb_act = vec![T::zero(); self.config.time_embed_dim];
        let mut skip_grads: Vec<Tensor<T>> = Vec::new();
        let mut d = dy.clone();
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            d = match (layer, cache) {
                (Layer::Out { norm, conv }, LayerCache::Out { norm: nc, pre, conv: cc }) => {
                    let g = conv.backward(p, cc, &d, grads, true).expect("dx");
                    let g = silu_backward(pre, &g);
                    norm.backward(p, nc, &g, grads)
                }
                (Layer::Res(block), LayerCache::Res(c)) => block.backward(p, c, &d, &trace.temb_act, &mut dtemb_act, grads),
                (Layer::Concat, LayerCache::Concat(split)) => {
                    let (head, tail) = d.split_channels(*split);
                    skip_grads.push(tail);
                    head
                }
                (Layer::Up(conv), LayerCache::Up(cc)) => {
                    let g = conv.backward(p, cc, &d, grads, true).expect("dx");
                    upsample_nearest2_backward(&g)
                }
                (Layer::PushSkip, _) => {
                    let mut g = d;
                    g.add_assign(&skip_grads.pop().expect("skip gradient"));
                    g
                }
                (Layer::Down(conv), LayerCache::Conv(cc)) => conv.backward(p, cc, &d, grads, true).expect("dx"),
                (Layer::In(conv), LayerCache::Conv(cc)) => {
                    conv.backward(p, cc, &d, grads, false);
                    d
                }
                _ => unreachable!("trace does not match layer graph"),
            };
        }
        // Time embedding MLP.
        let dtemb: Vec<T> = dtemb_act.iter().zip(&trace.temb).map(|(&g, &v)| g * silu_grad(v)).collect();
        let act: Vec<T> = trace.hidden.iter().map(|&v| silu(v)).collect();
        let dact = self.time.lin2.backward(p, &act, &dtemb, grads);
        let dhidden: Vec<T> = dact.iter().zip(&trace.hidden).map(|(&g, &v)| g * silu_grad(v)).collect();
        self.time.lin1.backward(p, &trace.emb, &dhidden, grads);
    }
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    /// `eps_hat` with the same shape as `x_t`; any spatial size that is a
    /// multiple of `2^(stages - 1)` is accepted.
    fn predict_noise(&self, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check_input(x_t)?;
        self.check_timestep(t)?;
        let (_, _, _, temb_act) = self.time_embedding(t);
        Ok(self.run(x_t, None, &temb_act))
    }

    fn image_channels(&self) -> usize {
        self.config.image_channels
    }

    fn size_multiple(&self) -> usize {
        self.config.size_multiple()
    }
}

impl<T: Scalar> Denoiser<T> {
    /// Per-sample timesteps.
    pub fn predict_noise_batch(&self, xs: &[Tensor<T>], ts: &[usize]) -> Result<Vec<Tensor<T>>> {
        if xs.len() != ts.len() {
            return Err(Error::shape("predict_noise_batch", format!("{} timesteps", xs.len()), format!("{}", ts.len())));
        }
        xs.iter().zip(ts).map(|(x, &t)| self.predict_noise(x, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_plan_shape() {
        let ops = plan(&DenoiserConfig::default());
        let res = ops.iter().filter(|o| matches!(o, PlanOp::Res { .. })).count();
        // 3 encoder blocks + 6 decoder blocks.
        assert_eq!(res, 9);
        assert_eq!(ops.iter().filter(|o| matches!(o, PlanOp::Down { .. })).count(), 2);
        assert_eq!(ops.iter().filter(|o| matches!(o, PlanOp::Up { .. })).count(), 2);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = DenoiserConfig {
            norm_groups: 7,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        c.norm_groups = 8;
        c.kernel_size = 4;
        assert!(c.validate().is_err());
        c.kernel_size = 3;
        c.channels = vec![64, 128];
        assert!(c.validate().is_err());
        c.channels = vec![64, 0, 256];
        assert!(c.validate().is_err());
        assert!(DenoiserConfig::default().validate().is_ok());
        assert!(DenoiserConfig::enhanced().validate().is_ok());
    }

    #[test]
    fn zero_output_projection_predicts_zero() {
        let d = Denoiser::<f32>::new(&DenoiserConfig::small(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(3, 16, 16, &mut rng);
        let y = d.predict_noise(&x, 500).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn size_errors() {
        let d = Denoiser::<f32>::new(&DenoiserConfig::small(), 1).unwrap();
        let x = Tensor::zeros(3, 15, 16);
        assert!(matches!(d.predict_noise(&x, 1), Err(Error::Divisibility { multiple: 2, .. })));
        let x = Tensor::zeros(1, 16, 16);
        assert!(matches!(d.predict_noise(&x, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn trace_and_infer_agree() {
        let cfg = DenoiserConfig {
            zero_init_output: false,
            ..DenoiserConfig::small()
        };
        let d = Denoiser::<f64>::new(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(3, 8, 12, &mut rng);
        let (a, _) = d.forward_trace(&x, 17).unwrap();
        let b = d.predict_noise(&x, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_params() {
        let a = Denoiser::<f32>::new(&DenoiserConfig::small(), 9).unwrap();
        let b = Denoiser::<f32>::new(&DenoiserConfig::small(), 9).unwrap();
        let c = Denoiser::<f32>::new(&DenoiserConfig::small(), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }
}
