//! Layers with explicit forward/backward passes over NCHW tensors.
//!
//! Every layer caches what its backward pass needs during `forward`;
//! `backward` consumes the output gradient, accumulates parameter
//! gradients, and returns the input gradient.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::{Mode, Role, Scalar, Tensor};
use crate::error::{dim_err, param_err, Result};
use crate::rng::{derive_seed, stream, uniform};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

pub(crate) fn uniform_init<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::from_f64((2.0 * uniform(rng) - 1.0) * bound)).collect()
}

fn missing_cache() -> crate::Error {
    param_err!("backward called before forward")
}

/// Output length of a strided window: floor((n + 2p - k) / s) + 1.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if n + 2 * pad < k {
        return Err(dim_err!("input length {n} with pad {pad} is smaller than kernel {k}"));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Range of output columns whose input column `o*s + k - p` is in bounds.
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let off = k as isize - pad as isize;
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let last = in_len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last as usize / stride + 1).min(out_len) };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone)]
struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &Tensor<impl Scalar>, w: &Tensor<impl Scalar>, stride: usize, pad: usize) -> Result<Self> {
        x.expect_rank(4, "conv2d input")?;
        w.expect_rank(4, "conv2d weights")?;
        let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (co, wci, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
        if wci != ci {
            return Err(dim_err!("conv2d: input has {ci} channels, weights expect {wci}"));
        }
        if kh != kw {
            return Err(dim_err!("conv2d: only square kernels, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(param_err!("conv2d: stride must be positive"));
        }
        let oh = conv_out_len(h, kh, stride, pad)?;
        let ow = conv_out_len(wd, kw, stride, pad)?;
        Ok(Self { n, ci, co, h, w: wd, oh, ow, k: kh, stride, pad })
    }
}

/// Cross-correlation of `x` [N,Ci,H,W] with `w` [Co,Ci,K,K].
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.co {
            return Err(dim_err!("conv2d: bias has {} values for {} channels", b.len(), g.co));
        }
    }
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut y = vec![T::ZERO; g.n * g.co * plane_out];
    for n in 0..g.n {
        for co in 0..g.co {
            let out = &mut y[(n * g.co + co) * plane_out..][..plane_out];
            if let Some(b) = bias {
                out.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.ci {
                let inp = &x.data[(n * g.ci + ci) * plane_in..][..plane_in];
                let wk = &w.data[(co * g.ci + ci) * g.k * g.k..][..g.k * g.k];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut out[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let ix0 = ox_lo * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                let irow = &inp[iy * g.w + ix0..][..orow.len()];
                                for (o, &i) in orow.iter_mut().zip(irow) {
                                    *o += wv * i;
                                }
                            } else {
                                let irow = &inp[iy * g.w..][..g.w];
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * irow[ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.co, g.oh, g.ow], y)
}

/// Gradients of [`conv2d`]: returns `(grad_in, grad_w, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if gy.shape != [g.n, g.co, g.oh, g.ow] {
        return Err(dim_err!("conv2d backward: gradient shape {:?} does not match output", gy.shape));
    }
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gx = vec![T::ZERO; x.len()];
    let mut gw = vec![T::ZERO; w.len()];
    let mut gb = vec![T::ZERO; g.co];
    for n in 0..g.n {
        for co in 0..g.co {
            let gout = &gy.data[(n * g.co + co) * plane_out..][..plane_out];
            gb[co] += gout.iter().copied().sum::<T>();
            for ci in 0..g.ci {
                let inp = &x.data[(n * g.ci + ci) * plane_in..][..plane_in];
                let gin = &mut gx[(n * g.ci + ci) * plane_in..][..plane_in];
                let base = (co * g.ci + ci) * g.k * g.k;
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.k {
                        let wv = w.data[base + ky * g.k + kx];
                        let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = T::ZERO;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gout[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let ix0 = ox_lo * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                let irow = &inp[iy * g.w + ix0..][..grow.len()];
                                let girow = &mut gin[iy * g.w + ix0..][..grow.len()];
                                for ((gi, &i), &go) in girow.iter_mut().zip(irow).zip(grow) {
                                    acc += go * i;
                                    *gi += wv * go;
                                }
                            } else {
                                for (j, &go) in grow.iter().enumerate() {
                                    let ix = iy * g.w + ix0 + j * g.stride;
                                    acc += go * inp[ix];
                                    gin[ix] += wv * go;
                                }
                            }
                        }
                        gw[base + ky * g.k + kx] += acc;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&x.shape, gx)?, gw, gb))
}

/// Visitor over named tensors; `Role` separates trainable parameters from
/// running statistics.
pub trait Module<T: Scalar> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role));
}

pub(crate) fn join(prefix: &str, name: &str) -> alloc::string::String {
    if prefix.is_empty() {
        name.into()
    } else {
        alloc::format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let weight = Tensor::param(
            &[out_ch, in_ch, kernel, kernel],
            uniform_init(rng, out_ch * fan_in, bound),
        );
        let bias = bias.then(|| Tensor::param(&[out_ch], uniform_init(rng, out_ch, bound)));
        Self { weight, bias, stride, pad, cache: None }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.weight, self.bias.as_ref().map(|b| b.data.as_slice()), self.stride, self.pad)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(missing_cache)?;
        let (gx, gw, gb) = conv2d_backward(&x, &self.weight, gy, self.stride, self.pad)?;
        add_into(self.weight.grad_mut(), &gw);
        if let Some(b) = self.bias.as_mut() {
            add_into(b.grad_mut(), &gb);
        }
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        f(&join(prefix, "weight"), &mut self.weight, Role::Param);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b, Role::Param);
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    scale: Vec<T>,
    training: bool,
    shape: Vec<usize>,
}

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::param(&[channels], vec![T::ONE; channels]),
            beta: Tensor::param(&[channels], vec![T::ZERO; channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::ONE),
            cache: None,
        }
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        x.expect_rank(4, "batch_norm input")?;
        let c = self.gamma.len();
        if x.shape[1] != c {
            return Err(dim_err!("batch_norm: {} channels, layer has {c}", x.shape[1]));
        }
        Ok((x.shape[0], c, x.shape[2] * x.shape[3]))
    }

    fn batch_stats(&self, x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, c, hw) = self.geometry(x)?;
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += x.data[(b * c + ch) * hw..][..hw].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0.0;
            for b in 0..n {
                ss += x.data[(b * c + ch) * hw..][..hw].iter().map(|v| (v.to_f64() - mu) * (v.to_f64() - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / m;
        }
        Ok((mean, var))
    }

    /// Sets the running statistics to the statistics of `x`, so inference
    /// mode reproduces training-mode outputs on that batch.
    pub fn calibrate(&mut self, x: &Tensor<T>) -> Result<()> {
        let (mean, var) = self.batch_stats(x)?;
        for ch in 0..mean.len() {
            self.running_mean.data[ch] = T::from_f64(mean[ch]);
            self.running_var.data[ch] = T::from_f64(var[ch]);
        }
        Ok(())
    }

    /// `Train` normalizes with batch statistics and updates the running
    /// ones; `Calibrate` copies the batch statistics into the running ones
    /// and then behaves like `Eval`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, hw) = self.geometry(x)?;
        if mode == Mode::Calibrate {
            self.calibrate(x)?;
        }
        let training = mode == Mode::Train;
        let (mean, var) = if training {
            if n < 2 {
                return Err(param_err!("batch_norm in training mode needs a batch of at least 2, got {n}"));
            }
            let (mean, var) = self.batch_stats(x)?;
            let m = (n * hw) as f64;
            for ch in 0..c {
                let rm = self.running_mean.data[ch].to_f64();
                let rv = self.running_var.data[ch].to_f64();
                let unbiased = var[ch] * m / (m - 1.0);
                self.running_mean.data[ch] = T::from_f64(BN_MOMENTUM * rm + (1.0 - BN_MOMENTUM) * mean[ch]);
                self.running_var.data[ch] = T::from_f64(BN_MOMENTUM * rv + (1.0 - BN_MOMENTUM) * unbiased);
            }
            (mean, var)
        } else {
            (
                self.running_mean.data.iter().map(|v| v.to_f64()).collect(),
                self.running_var.data.iter().map(|v| v.to_f64()).collect(),
            )
        };
        let mut xhat = vec![T::ZERO; x.len()];
        let mut y = vec![T::ZERO; x.len()];
        let mut scale = vec![T::ZERO; c];
        for ch in 0..c {
            let inv = T::from_f64(1.0 / libm::sqrt(var[ch] + BN_EPS));
            let mu = T::from_f64(mean[ch]);
            let (gm, bt) = (self.gamma.data[ch], self.beta.data[ch]);
            scale[ch] = inv;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x.data[i] - mu) * inv;
                    xhat[i] = xh;
                    y[i] = gm * xh + bt;
                }
            }
        }
        self.cache = Some(BnCache { xhat, scale, training, shape: x.shape.clone() });
        Tensor::new(&x.shape, y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(missing_cache)?;
        if gy.shape != cache.shape {
            return Err(dim_err!("batch_norm backward: gradient shape {:?} does not match", gy.shape));
        }
        let (n, c, hw) = (cache.shape[0], cache.shape[1], cache.shape[2] * cache.shape[3]);
        let m = T::from_f64((n * hw) as f64);
        let mut gx = vec![T::ZERO; gy.len()];
        for ch in 0..c {
            let mut sum_g = T::ZERO;
            let mut sum_gx = T::ZERO;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    sum_g += gy.data[i];
                    sum_gx += gy.data[i] * cache.xhat[i];
                }
            }
            self.gamma.grad_mut()[ch] += sum_gx;
            self.beta.grad_mut()[ch] += sum_g;
            let gm = self.gamma.data[ch];
            let inv = cache.scale[ch];
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    gx[i] = if cache.training {
                        gm * inv / m * (m * gy.data[i] - sum_g - cache.xhat[i] * sum_gx)
                    } else {
                        gm * inv * gy.data[i]
                    };
                }
            }
        }
        Tensor::new(&cache.shape, gx)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        f(&join(prefix, "gamma"), &mut self.gamma, Role::Param);
        f(&join(prefix, "beta"), &mut self.beta, Role::Param);
        f(&join(prefix, "running_mean"), &mut self.running_mean, Role::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, Role::Buffer);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mask: Vec<bool> = x.data.iter().map(|&v| v > T::ZERO).collect();
        let data = x.data.iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::ZERO }).collect();
        self.mask = Some(mask);
        Tensor { shape: x.shape.clone(), data, grad: None }
    }

    pub fn backward<T: Scalar>(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or_else(missing_cache)?;
        if mask.len() != gy.len() {
            return Err(dim_err!("relu backward: gradient length {} does not match", gy.len()));
        }
        let data = gy.data.iter().zip(&mask).map(|(&g, &m)| if m { g } else { T::ZERO }).collect();
        Ok(Tensor { shape: gy.shape.clone(), data, grad: None })
    }
}

/// Average pooling that divides by the number of in-bounds taps.
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    in_shape: Option<Vec<usize>>,
}

impl AvgPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad, in_shape: None }
    }

    fn windows(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((conv_out_len(h, self.kernel, self.stride, self.pad)?, conv_out_len(w, self.kernel, self.stride, self.pad)?))
    }

    fn span(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.kernel as isize) as usize).min(len);
        (lo, hi)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(4, "avg_pool input")?;
        let (nc, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
        let (oh, ow) = self.windows(h, w)?;
        let mut y = vec![T::ZERO; nc * oh * ow];
        for p in 0..nc {
            let inp = &x.data[p * h * w..][..h * w];
            for oy in 0..oh {
                let (y0, y1) = self.span(oy, h);
                for ox in 0..ow {
                    let (x0, x1) = self.span(ox, w);
                    let mut s = T::ZERO;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            s += inp[iy * w + ix];
                        }
                    }
                    y[(p * oh + oy) * ow + ox] = s / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        self.in_shape = Some(x.shape.clone());
        Tensor::new(&[x.shape[0], x.shape[1], oh, ow], y)
    }

    pub fn backward<T: Scalar>(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.in_shape.take().ok_or_else(missing_cache)?;
        let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (oh, ow) = self.windows(h, w)?;
        if gy.len() != nc * oh * ow {
            return Err(dim_err!("avg_pool backward: gradient shape {:?} does not match", gy.shape));
        }
        let mut gx = vec![T::ZERO; nc * h * w];
        for p in 0..nc {
            for oy in 0..oh {
                let (y0, y1) = self.span(oy, h);
                for ox in 0..ow {
                    let (x0, x1) = self.span(ox, w);
                    let g = gy.data[(p * oh + oy) * ow + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            gx[p * h * w + iy * w + ix] += g;
                        }
                    }
                }
            }
        }
        Tensor::new(&shape, gx)
    }
}

/// [N,C,H,W] -> [N,C] by spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(4, "global_avg_pool input")?;
        let hw = x.shape[2] * x.shape[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let data = x.data.chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        self.in_shape = Some(x.shape.clone());
        Tensor::new(&[x.shape[0], x.shape[1]], data)
    }

    pub fn backward<T: Scalar>(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.in_shape.take().ok_or_else(missing_cache)?;
        let hw = shape[2] * shape[3];
        if gy.len() * hw != shape.iter().product::<usize>() {
            return Err(dim_err!("global_avg_pool backward: gradient shape {:?} does not match", gy.shape));
        }
        let inv = T::from_f64(1.0 / hw as f64);
        let mut gx = Vec::with_capacity(gy.len() * hw);
        for &g in &gy.data {
            gx.extend(core::iter::repeat_n(g * inv, hw));
        }
        Tensor::new(&shape, gx)
    }
}

/// y = x W^T + b with W [out, in].
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / libm::sqrt(in_features as f64);
        Self {
            weight: Tensor::param(&[out_features, in_features], uniform_init(rng, out_features * in_features, bound)),
            bias: Tensor::param(&[out_features], uniform_init(rng, out_features, bound)),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(2, "fully_connected input")?;
        let (n, fin, fout) = (x.shape[0], self.in_features(), self.out_features());
        if x.shape[1] != fin {
            return Err(dim_err!("fully_connected: {} input features, layer expects {fin}", x.shape[1]));
        }
        let mut y = vec![T::ZERO; n * fout];
        for b in 0..n {
            let xr = &x.data[b * fin..][..fin];
            for o in 0..fout {
                let wr = &self.weight.data[o * fin..][..fin];
                y[b * fout + o] = self.bias.data[o] + wr.iter().zip(xr).map(|(&w, &v)| w * v).sum::<T>();
            }
        }
        self.cache = Some(x.clone());
        Tensor::new(&[n, fout], y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(missing_cache)?;
        let (n, fin, fout) = (x.shape[0], self.in_features(), self.out_features());
        if gy.shape != [n, fout] {
            return Err(dim_err!("fully_connected backward: gradient shape {:?} does not match", gy.shape));
        }
        let mut gx = vec![T::ZERO; n * fin];
        let gw = self.weight.grad.get_or_insert_with(|| vec![T::ZERO; fout * fin]);
        for b in 0..n {
            let xr = &x.data[b * fin..][..fin];
            let gxr = &mut gx[b * fin..][..fin];
            for o in 0..fout {
                let g = gy.data[b * fout + o];
                let wr = &self.weight.data[o * fin..][..fin];
                let gwr = &mut gw[o * fin..][..fin];
                for i in 0..fin {
                    gwr[i] += g * xr[i];
                    gxr[i] += g * wr[i];
                }
            }
        }
        let gb = self.bias.grad_mut();
        for b in 0..n {
            for o in 0..fout {
                gb[o] += gy.data[b * fout + o];
            }
        }
        Tensor::new(&[n, fin], gx)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        f(&join(prefix, "weight"), &mut self.weight, Role::Param);
        f(&join(prefix, "bias"), &mut self.bias, Role::Param);
    }
}

/// Inverted dropout. Each training-mode call draws its mask from a stream
/// keyed by (seed, call counter), so a run is reproducible from the seed and
/// the counter alone.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    pub seed: u64,
    pub counter: u64,
    mask: Option<Vec<bool>>,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(param_err!("dropout probability must be in [0, 1), got {p}"));
        }
        Ok(Self { p, seed, counter: 0, mask: None })
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, training: bool) -> Tensor<T> {
        if !training || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let mut rng = stream(derive_seed(self.seed, self.counter));
        self.counter += 1;
        let mask: Vec<bool> = (0..x.len()).map(|_| uniform(&mut rng) >= self.p).collect();
        let scale = T::from_f64(1.0 / (1.0 - self.p));
        let data = x.data.iter().zip(&mask).map(|(&v, &m)| if m { v * scale } else { T::ZERO }).collect();
        self.mask = Some(mask);
        Tensor { shape: x.shape.clone(), data, grad: None }
    }

    pub fn backward<T: Scalar>(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        match self.mask.take() {
            None => gy.clone(),
            Some(mask) => {
                let scale = T::from_f64(1.0 / (1.0 - self.p));
                let data = gy.data.iter().zip(&mask).map(|(&g, &m)| if m { g * scale } else { T::ZERO }).collect();
                Tensor { shape: gy.shape.clone(), data, grad: None }
            }
        }
    }
}

/// Row-wise softmax of [N,K] logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank(2, "softmax input")?;
    let k = logits.shape[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data.chunks(k) {
        let m = row.iter().copied().fold(row[0], Scalar::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(&logits.shape, out)
}

/// Mean cross-entropy of [N,K] logits against labels, and its gradient
/// with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let p = softmax(logits)?;
    let (n, k) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n {
        return Err(dim_err!("cross_entropy: {} labels for a batch of {n}", labels.len()));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = T::ZERO;
    let mut grad = p.data.clone();
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(param_err!("label {y} out of range for {k} classes"));
        }
        let row = &logits.data[b * k..][..k];
        let m = row.iter().copied().fold(row[0], Scalar::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[y];
        grad[b * k + y] -= T::ONE;
    }
    grad.iter_mut().for_each(|g| *g *= inv_n);
    Ok((loss * inv_n, Tensor::new(&logits.shape, grad)?))
}

/// Row-wise argmax of [N,K] scores.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let k = scores.shape[1];
    scores
        .data
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
