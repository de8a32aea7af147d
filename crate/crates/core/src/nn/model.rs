//! The two-stream fusion network at toy scale.
//!
//! Spatial stream: conv stem, three non-pooling residual blocks, five
//! downsampling layers with strided 1x1 shortcuts, a wide conv and global
//! average pooling. Noise stream: a frozen RGB filter front end, a small
//! residual backbone, global average pooling and dropout. Fusion: one fully
//! connected layer over the concatenated features.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::layers::{AvgPool2d, BatchNorm2d, Conv2d, Dropout, GlobalAvgPool, Linear, Module, Relu};
use super::{join, Mode, Role, Scalar, Tensor};
use crate::error::{dim_err, param_err, Result};
use crate::filters::{prediction_residual, FilterBank};
use crate::image::Plane;
use crate::ops::gaussian::correlate5;
use crate::rng::{derive_seed, stream};

/// Spatial size halvings in the spatial stream.
pub const SPATIAL_DOWNSAMPLES: usize = 5;
const STEM_WIDTH: usize = 16;
const PART3_WIDTHS: [usize; SPATIAL_DOWNSAMPLES] = [32, 64, 128, 256, 512];
const PART4_WIDTH: usize = 1024;
const PART2_BLOCKS: usize = 3;
const NOISE_BASE_WIDTH: usize = 32;

/// What the noise stream sees when the RGB filters are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseInput {
    /// Channel mean minus each filter's prediction.
    #[default]
    Residual,
    /// The three filtered maps themselves.
    Filtered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TMFNetConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub width_scale: f64,
    pub spatial_stream_on: bool,
    pub noise_stream_on: bool,
    pub rgb_filter_on: bool,
    pub noise_input: NoiseInput,
    pub lambda1: f64,
    pub lambda2: f64,
    pub dropout_p: f64,
    pub noise_backbone_depth: usize,
    /// 1x1 projection on the skip path of the non-pooling residual blocks;
    /// identity when off.
    pub part2_projection: bool,
    pub filter_sigma: f64,
    pub filter_c: u32,
    pub seed: u64,
}

impl Default for TMFNetConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            num_classes: 5,
            width_scale: 0.25,
            spatial_stream_on: true,
            noise_stream_on: true,
            rgb_filter_on: true,
            noise_input: NoiseInput::Residual,
            lambda1: 0.5,
            lambda2: 0.5,
            dropout_p: 0.5,
            noise_backbone_depth: 4,
            part2_projection: true,
            filter_sigma: 1.0,
            filter_c: 1,
            seed: 0,
        }
    }
}

impl TMFNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(param_err!("lambda1 and lambda2 must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(param_err!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if !self.spatial_stream_on && !self.noise_stream_on {
            return Err(param_err!("at least one stream must be on"));
        }
        if self.num_classes < 2 {
            return Err(param_err!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 4.0) {
            return Err(param_err!("width_scale must be in (0, 4], got {}", self.width_scale));
        }
        if self.noise_backbone_depth == 0 || self.noise_backbone_depth > 8 {
            return Err(param_err!("noise_backbone_depth must be in 1..=8, got {}", self.noise_backbone_depth));
        }
        if self.filter_c == 0 || !(self.filter_sigma > 0.0) {
            return Err(param_err!("filter sigma must be positive and c at least 1"));
        }
        self.check_input(self.input_size)
    }

    /// Smallest side the enabled streams accept.
    pub fn min_input(&self) -> usize {
        let mut m = 1;
        if self.spatial_stream_on {
            m = m.max(1 << SPATIAL_DOWNSAMPLES);
        }
        if self.noise_stream_on {
            m = m.max(1 << self.noise_backbone_depth);
        }
        m.max(5)
    }

    fn check_input(&self, side: usize) -> Result<()> {
        if side < self.min_input() {
            return Err(dim_err!("input side {side} is below the downsampling budget of {}", self.min_input()));
        }
        Ok(())
    }

    fn width(&self, base: usize) -> usize {
        (libm::round(base as f64 * self.width_scale) as usize).max(1)
    }

    pub fn spatial_feature_dim(&self) -> usize {
        self.width(PART4_WIDTH)
    }

    pub fn noise_feature_dim(&self) -> usize {
        self.width(NOISE_BASE_WIDTH << (self.noise_backbone_depth - 1))
    }
}

#[derive(Debug, Clone)]
struct ConvBn<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { conv: Conv2d::new(cin, cout, k, stride, k / 2, false, rng), bn: BatchNorm2d::new(cout) }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(x)?;
        self.bn.forward(&y, mode)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.bn.backward(g)?;
        self.conv.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(dim_err!("cannot add shapes {:?} and {:?}", a.shape, b.shape));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    Tensor::new(&a.shape, data)
}

/// Non-pooling residual block: conv-BN-ReLU-conv-BN plus a skip that is a
/// 1x1 projection or the identity. No activation after the sum.
#[derive(Debug, Clone)]
struct PlainBlock<T> {
    a: ConvBn<T>,
    relu: Relu,
    b: ConvBn<T>,
    proj: Option<Conv2d<T>>,
}

impl<T: Scalar> PlainBlock<T> {
    fn new(ch: usize, projection: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: ConvBn::new(ch, ch, 3, 1, rng),
            relu: Relu::new(),
            b: ConvBn::new(ch, ch, 3, 1, rng),
            proj: projection.then(|| Conv2d::new(ch, ch, 1, 1, 0, false, rng)),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.a.forward(x, mode)?;
        let h = self.relu.forward(&h);
        let h = self.b.forward(&h, mode)?;
        match self.proj.as_mut() {
            Some(p) => add(&h, &p.forward(x)?),
            None => add(&h, x),
        }
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let gh = self.b.backward(g)?;
        let gh = self.relu.backward(&gh)?;
        let gx = self.a.backward(&gh)?;
        let gs = match self.proj.as_mut() {
            Some(p) => p.backward(g)?,
            None => g.clone(),
        };
        add(&gx, &gs)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        self.a.visit(&join(prefix, "a"), f);
        self.b.visit(&join(prefix, "b"), f);
        if let Some(p) = self.proj.as_mut() {
            p.visit(&join(prefix, "proj"), f);
        }
    }
}

/// Downsampling layer: conv-BN-ReLU then 3x3/s2 average pooling, summed with
/// a 1x1/s2 conv-BN shortcut.
#[derive(Debug, Clone)]
struct PoolLayer<T> {
    main: ConvBn<T>,
    relu: Relu,
    pool: AvgPool2d,
    short: ConvBn<T>,
}

impl<T: Scalar> PoolLayer<T> {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            main: ConvBn::new(cin, cout, 3, 1, rng),
            relu: Relu::new(),
            pool: AvgPool2d::new(3, 2, 1),
            short: ConvBn::new(cin, cout, 1, 2, rng),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.main.forward(x, mode)?;
        let h = self.relu.forward(&h);
        let h = self.pool.forward(&h)?;
        add(&h, &self.short.forward(x, mode)?)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let gh = self.pool.backward(g)?;
        let gh = self.relu.backward(&gh)?;
        let gx = self.main.backward(&gh)?;
        add(&gx, &self.short.backward(g)?)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        self.main.visit(&join(prefix, "main"), f);
        self.short.visit(&join(prefix, "short"), f);
    }
}

/// Residual block with a stride-2 first conv and a 1x1/s2 conv-BN shortcut,
/// ReLU after the sum.
#[derive(Debug, Clone)]
struct DownBlock<T> {
    a: ConvBn<T>,
    relu_a: Relu,
    b: ConvBn<T>,
    short: ConvBn<T>,
    relu_out: Relu,
}

impl<T: Scalar> DownBlock<T> {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: ConvBn::new(cin, cout, 3, 2, rng),
            relu_a: Relu::new(),
            b: ConvBn::new(cout, cout, 3, 1, rng),
            short: ConvBn::new(cin, cout, 1, 2, rng),
            relu_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.a.forward(x, mode)?;
        let h = self.relu_a.forward(&h);
        let h = self.b.forward(&h, mode)?;
        let s = add(&h, &self.short.forward(x, mode)?)?;
        Ok(self.relu_out.forward(&s))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu_out.backward(g)?;
        let gh = self.b.backward(&g)?;
        let gh = self.relu_a.backward(&gh)?;
        let gx = self.a.backward(&gh)?;
        add(&gx, &self.short.backward(&g)?)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        self.a.visit(&join(prefix, "a"), f);
        self.b.visit(&join(prefix, "b"), f);
        self.short.visit(&join(prefix, "short"), f);
    }
}

#[derive(Debug, Clone)]
struct SpatialStream<T> {
    stem: ConvBn<T>,
    stem_relu: Relu,
    part2: Vec<PlainBlock<T>>,
    part3: Vec<PoolLayer<T>>,
    part4: ConvBn<T>,
    part4_relu: Relu,
    gap: GlobalAvgPool,
    aux: Linear<T>,
}

/// Intermediate spatial sizes, recorded on each forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpatialTrace {
    pub part1: (usize, usize),
    pub part2: (usize, usize),
    pub part3: Vec<(usize, usize)>,
    pub part4: (usize, usize),
}

fn hw<T>(t: &Tensor<T>) -> (usize, usize) {
    (t.shape[2], t.shape[3])
}

impl<T: Scalar> SpatialStream<T> {
    fn new(cfg: &TMFNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let c1 = cfg.width(STEM_WIDTH);
        let mut part3 = Vec::new();
        let mut cin = c1;
        for &w in &PART3_WIDTHS {
            let cout = cfg.width(w);
            part3.push(PoolLayer::new(cin, cout, rng));
            cin = cout;
        }
        let feat = cfg.spatial_feature_dim();
        Self {
            stem: ConvBn::new(3, c1, 3, 1, rng),
            stem_relu: Relu::new(),
            part2: (0..PART2_BLOCKS).map(|_| PlainBlock::new(c1, cfg.part2_projection, rng)).collect(),
            part3,
            part4: ConvBn::new(cin, feat, 3, 1, rng),
            part4_relu: Relu::new(),
            gap: GlobalAvgPool::new(),
            aux: Linear::new(feat, cfg.num_classes, rng),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode, trace: &mut SpatialTrace) -> Result<Tensor<T>> {
        let h = self.stem.forward(x, mode)?;
        let mut h = self.stem_relu.forward(&h);
        trace.part1 = hw(&h);
        for b in &mut self.part2 {
            h = b.forward(&h, mode)?;
        }
        trace.part2 = hw(&h);
        trace.part3.clear();
        for l in &mut self.part3 {
            h = l.forward(&h, mode)?;
            trace.part3.push(hw(&h));
        }
        let h = self.part4.forward(&h, mode)?;
        let h = self.part4_relu.forward(&h);
        trace.part4 = hw(&h);
        self.gap.forward(&h)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<()> {
        let g = self.gap.backward(g)?;
        let g = self.part4_relu.backward(&g)?;
        let mut g = self.part4.backward(&g)?;
        for l in self.part3.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        for b in self.part2.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let g = self.stem_relu.backward(&g)?;
        self.stem.backward(&g)?;
        Ok(())
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.part2.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.part2.{i}"), f);
        }
        for (i, l) in self.part3.iter_mut().enumerate() {
            l.visit(&format!("{prefix}.part3.{i}"), f);
        }
        self.part4.visit(&join(prefix, "part4"), f);
        self.aux.visit(&join(prefix, "aux"), f);
    }
}

#[derive(Debug, Clone)]
struct NoiseStream<T> {
    stem: ConvBn<T>,
    stem_relu: Relu,
    blocks: Vec<DownBlock<T>>,
    gap: GlobalAvgPool,
    dropout: Dropout,
    aux: Linear<T>,
}

impl<T: Scalar> NoiseStream<T> {
    fn new(cfg: &TMFNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c0 = cfg.width(STEM_WIDTH);
        let mut blocks = Vec::new();
        let mut cin = c0;
        for i in 0..cfg.noise_backbone_depth {
            let cout = cfg.width(NOISE_BASE_WIDTH << i);
            blocks.push(DownBlock::new(cin, cout, rng));
            cin = cout;
        }
        Ok(Self {
            stem: ConvBn::new(3, c0, 3, 1, rng),
            stem_relu: Relu::new(),
            blocks,
            gap: GlobalAvgPool::new(),
            dropout: Dropout::new(cfg.dropout_p, derive_seed(cfg.seed, 0xd809))?,
            aux: Linear::new(cin, cfg.num_classes, rng),
        })
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.stem.forward(x, mode)?;
        let mut h = self.stem_relu.forward(&h);
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?;
        }
        let f = self.gap.forward(&h)?;
        Ok(self.dropout.forward(&f, mode == Mode::Train))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<()> {
        let g = self.dropout.backward(g);
        let mut g = self.gap.backward(&g)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let g = self.stem_relu.backward(&g)?;
        self.stem.backward(&g)?;
        Ok(())
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.block.{i}"), f);
        }
        self.aux.visit(&join(prefix, "aux"), f);
    }
}

/// Frozen front end: three maps per sample from the channel mean of an
/// [N,3,H,W] pixel tensor.
pub fn noise_front_end<T: Scalar>(x: &Tensor<T>, bank: &FilterBank, input: NoiseInput) -> Result<Tensor<T>> {
    x.expect_rank(4, "noise front end input")?;
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if c != 3 {
        return Err(dim_err!("noise front end expects 3 channels, got {c}"));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * 3 * hw);
    for b in 0..n {
        let s = &x.data[b * 3 * hw..][..3 * hw];
        let mean: Vec<f64> = (0..hw).map(|i| (s[i].to_f64() + s[hw + i].to_f64() + s[2 * hw + i].to_f64()) / 3.0).collect();
        let plane = Plane::new(h, w, mean)?;
        for k in &bank.rgb {
            let map = match input {
                NoiseInput::Residual => prediction_residual(&plane, &k.taps),
                NoiseInput::Filtered => correlate5(&plane, &k.taps),
            };
            out.extend(map.data.iter().map(|&v| T::from_f64(v)));
        }
    }
    Tensor::new(&[n, 3, h, w], out)
}

/// Output of one forward pass: logits of the fused head and of each enabled
/// stream's auxiliary head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub fused: Tensor<T>,
    pub aux_spatial: Option<Tensor<T>>,
    pub aux_noise: Option<Tensor<T>>,
}

/// Loss gradients with respect to each head's logits.
#[derive(Debug, Clone)]
pub struct HeadGrads<T> {
    pub fused: Tensor<T>,
    pub aux_spatial: Option<Tensor<T>>,
    pub aux_noise: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct TMFNet<T> {
    config: TMFNetConfig,
    bank: FilterBank,
    spatial: Option<SpatialStream<T>>,
    noise: Option<NoiseStream<T>>,
    fusion: Linear<T>,
    trace: SpatialTrace,
}

impl<T: Scalar> TMFNet<T> {
    pub fn new(config: TMFNetConfig) -> Result<Self> {
        config.validate()?;
        let bank = FilterBank::new(config.filter_sigma, config.filter_c, 0)?;
        let mut rng = stream(derive_seed(config.seed, 0x1417));
        let spatial = config.spatial_stream_on.then(|| SpatialStream::new(&config, &mut rng));
        let noise = if config.noise_stream_on { Some(NoiseStream::new(&config, &mut rng)?) } else { None };
        let fused_in = spatial.as_ref().map_or(0, |_| config.spatial_feature_dim())
            + noise.as_ref().map_or(0, |_| config.noise_feature_dim());
        let fusion = Linear::new(fused_in, config.num_classes, &mut rng);
        Ok(Self { config, bank, spatial, noise, fusion, trace: SpatialTrace::default() })
    }

    pub fn config(&self) -> &TMFNetConfig {
        &self.config
    }

    pub fn filter_bank(&self) -> &FilterBank {
        &self.bank
    }

    /// Spatial sizes seen by the last forward pass through the spatial stream.
    pub fn spatial_trace(&self) -> &SpatialTrace {
        &self.trace
    }

    /// Dropout call counter; together with the seed it fixes every future mask.
    pub fn rng_state(&self) -> u64 {
        self.noise.as_ref().map_or(0, |n| n.dropout.counter)
    }

    pub fn set_rng_state(&mut self, state: u64) {
        if let Some(n) = self.noise.as_mut() {
            n.dropout.counter = state;
        }
    }

    /// Disables dropout (for gradient checks).
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if let Some(n) = self.noise.as_mut() {
            n.dropout = Dropout::new(p, n.dropout.seed)?;
        }
        Ok(())
    }

    /// Replaces the fused and auxiliary heads with fresh ones for a new
    /// class count.
    pub fn reset_heads(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.num_classes = num_classes;
        cfg.validate()?;
        let mut rng = stream(derive_seed(seed, 0x4ead));
        if let Some(s) = self.spatial.as_mut() {
            s.aux = Linear::new(cfg.spatial_feature_dim(), num_classes, &mut rng);
        }
        if let Some(n) = self.noise.as_mut() {
            n.aux = Linear::new(cfg.noise_feature_dim(), num_classes, &mut rng);
        }
        self.fusion = Linear::new(self.fusion.in_features(), num_classes, &mut rng);
        self.config = cfg;
        Ok(())
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        x.expect_rank(4, "model input")?;
        if x.shape[1] != 3 {
            return Err(dim_err!("model input needs 3 channels, got {}", x.shape[1]));
        }
        self.config.check_input(x.shape[2].min(x.shape[3]))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ModelOutput<T>> {
        self.check_batch(x)?;
        let n = x.shape[0];
        let mut feats: Vec<Tensor<T>> = Vec::new();
        let mut aux_spatial = None;
        let mut aux_noise = None;
        if let Some(s) = self.spatial.as_mut() {
            let f = s.forward(x, mode, &mut self.trace)?;
            aux_spatial = Some(s.aux.forward(&f)?);
            feats.push(f);
        }
        if let Some(ns) = self.noise.as_mut() {
            let input = if self.config.rgb_filter_on {
                noise_front_end(x, &self.bank, self.config.noise_input)?
            } else {
                x.clone()
            };
            let f = ns.forward(&input, mode)?;
            aux_noise = Some(ns.aux.forward(&f)?);
            feats.push(f);
        }
        let fused_in = if feats.len() == 1 { feats.pop().unwrap_or_else(|| Tensor::zeros(&[n, 0])) } else { concat(&feats)? };
        let fused = self.fusion.forward(&fused_in)?;
        Ok(ModelOutput { fused, aux_spatial, aux_noise })
    }

    /// Class probabilities of the fused head.
    pub fn predict_proba(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(x, Mode::Eval)?;
        super::layers::softmax(&out.fused)
    }

    /// Accumulates parameter gradients for the last forward pass.
    pub fn backward(&mut self, grads: &HeadGrads<T>) -> Result<()> {
        let g_feat = self.fusion.backward(&grads.fused)?;
        let n = g_feat.shape[0];
        let ds = self.spatial.as_ref().map_or(0, |_| self.config.spatial_feature_dim());
        let dn = self.noise.as_ref().map_or(0, |_| self.config.noise_feature_dim());
        let (mut gs, mut gn) = split(&g_feat, n, ds, dn)?;
        if let Some(s) = self.spatial.as_mut() {
            if let Some(ga) = grads.aux_spatial.as_ref() {
                gs = add(&gs, &s.aux.backward(ga)?)?;
            }
            s.backward(&gs)?;
        }
        if let Some(ns) = self.noise.as_mut() {
            if let Some(ga) = grads.aux_noise.as_ref() {
                gn = add(&gn, &ns.aux.backward(ga)?)?;
            }
            ns.backward(&gn)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, t, role| {
            if role == Role::Param {
                t.zero_grad();
            }
        });
    }

    /// Every named tensor in a fixed order: parameters and BN running
    /// statistics.
    pub fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        if let Some(s) = self.spatial.as_mut() {
            s.visit("spatial", f);
        }
        if let Some(n) = self.noise.as_mut() {
            n.visit("noise", f);
        }
        self.fusion.visit("fusion", f);
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, role| {
            if role == Role::Param {
                n += t.len();
            }
        });
        n
    }

    /// Sets every BN layer's running statistics from the batch `x`, so that
    /// inference mode on `x` matches training-mode normalization.
    pub fn calibrate(&mut self, x: &Tensor<T>) -> Result<()> {
        self.forward(x, Mode::Calibrate).map(|_| ())
    }
}

fn concat<T: Scalar>(feats: &[Tensor<T>]) -> Result<Tensor<T>> {
    let n = feats[0].shape[0];
    let total: usize = feats.iter().map(|f| f.shape[1]).sum();
    let mut data = Vec::with_capacity(n * total);
    for b in 0..n {
        for f in feats {
            let d = f.shape[1];
            data.extend_from_slice(&f.data[b * d..][..d]);
        }
    }
    Tensor::new(&[n, total], data)
}

fn split<T: Scalar>(g: &Tensor<T>, n: usize, ds: usize, dn: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if g.shape != [n, ds + dn] {
        return Err(dim_err!("feature gradient shape {:?} does not match {}+{}", g.shape, ds, dn));
    }
    let mut a = Vec::with_capacity(n * ds);
    let mut b = Vec::with_capacity(n * dn);
    for r in 0..n {
        let row = &g.data[r * (ds + dn)..][..ds + dn];
        a.extend_from_slice(&row[..ds]);
        b.extend_from_slice(&row[ds..]);
    }
    Ok((Tensor::new(&[n, ds], a)?, Tensor::new(&[n, dn], b)?))
}
