//! Central finite-difference gradient checks in 64-bit precision.

use alloc::string::String;
use alloc::vec::Vec;

use rand_core::RngCore;

use super::loss::total_loss;
use super::model::TMFNet;
use super::{Mode, Role, Tensor};
use crate::error::Result;
use crate::rng::stream;

/// Denominator floor so that coordinates with vanishing gradients compare
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;
pub const MIN_COORDS: usize = 200;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// A scalar function of some tensors, differentiable by hand.
pub trait Objective {
    fn loss(&mut self) -> Result<f64>;
    /// Zeroes and then fills the gradients of every visited tensor.
    fn loss_and_grad(&mut self) -> Result<f64>;
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>));
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: usize,
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients against `(f(w+e) - f(w-e)) / 2e` on up to
/// `max_coords` coordinates drawn without replacement.
pub fn check_gradients<O: Objective>(obj: &mut O, epsilon: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport> {
    obj.loss_and_grad()?;
    let mut names: Vec<String> = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    obj.visit(&mut |name, t| {
        names.push(name.into());
        grads.push(t.grad.clone().unwrap_or_else(|| alloc::vec![0.0; t.len()]));
    });
    let mut coords: Vec<(usize, usize)> =
        grads.iter().enumerate().flat_map(|(t, g)| (0..g.len()).map(move |i| (t, i))).collect();
    if coords.len() > max_coords {
        let mut rng = stream(seed);
        for i in 0..max_coords {
            let j = i + (rng.next_u64() % (coords.len() - i) as u64) as usize;
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, coords: coords.len(), worst: None };
    for &(t, i) in &coords {
        let nudge = |obj: &mut O, delta: f64| {
            let mut k = 0;
            obj.visit(&mut |_, x| {
                if k == t {
                    x.data[i] += delta;
                }
                k += 1;
            });
        };
        nudge(obj, epsilon);
        let plus = obj.loss()?;
        nudge(obj, -2.0 * epsilon);
        let minus = obj.loss()?;
        nudge(obj, epsilon);
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(grads[t][i], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((names[t].clone(), i));
        }
    }
    Ok(report)
}

/// The composite training loss of a network on a fixed batch, in inference
/// mode (BN uses running statistics, dropout is off).
pub struct NetworkObjective<'a> {
    pub model: &'a mut TMFNet<f64>,
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl NetworkObjective<'_> {
    fn run(&mut self, grad: bool) -> Result<f64> {
        let out = self.model.forward(&self.x, Mode::Eval)?;
        let cfg = self.model.config();
        let (loss, grads) = total_loss(&out, &self.labels, cfg.lambda1, cfg.lambda2)?;
        if grad {
            self.model.zero_grad();
            self.model.backward(&grads)?;
        }
        Ok(loss.total)
    }
}

impl Objective for NetworkObjective<'_> {
    fn loss(&mut self) -> Result<f64> {
        self.run(false)
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        self.run(true)
    }

    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
        self.model.visit(&mut |name, t, role| {
            if role == Role::Param {
                f(name, t)
            }
        });
    }
}

/// Gradient check of a whole network on one batch: BN statistics are first
/// calibrated on the batch, then frozen.
pub fn gradient_check(
    model: &mut TMFNet<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    model.calibrate(x)?;
    let mut obj = NetworkObjective { model, x: x.clone(), labels: labels.to_vec() };
    check_gradients(&mut obj, epsilon, coords.max(MIN_COORDS), seed)
}

/// A loss over free tensors; the closure fills their gradients when its flag is set.
struct FreeObjective<F> {
    tensors: Vec<Tensor<f64>>,
    f: F,
}

impl<F: FnMut(&mut [Tensor<f64>], bool) -> Result<f64>> Objective for FreeObjective<F> {
    fn loss(&mut self) -> Result<f64> {
        (self.f)(&mut self.tensors, false)
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        for t in &mut self.tensors {
            t.grad = Some(alloc::vec![0.0; t.len()]);
        }
        (self.f)(&mut self.tensors, true)
    }

    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            f(&alloc::format!("t{i}"), t);
        }
    }
}

fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = stream(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| (2.0 * crate::rng::uniform(&mut rng) - 1.0) * scale).collect();
    Tensor { shape: shape.to_vec(), data, grad: None }
}

fn dot(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
}

fn run_free<F: FnMut(&mut [Tensor<f64>], bool) -> Result<f64>>(tensors: Vec<Tensor<f64>>, epsilon: f64, seed: u64, f: F) -> Result<GradCheckReport> {
    check_gradients(&mut FreeObjective { tensors, f }, epsilon, usize::MAX, seed)
}

/// Checks every layer type on small random inputs with a random linear
/// read-out (cross-entropy for the linear head). Returns one report per case.
pub fn layer_suite(epsilon: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    use super::layers::{conv2d, conv2d_backward, cross_entropy, AvgPool2d, BatchNorm2d, Dropout, GlobalAvgPool, Linear, Relu};
    use crate::rng::derive_seed;
    let s = |k: u64| derive_seed(seed, k);
    let mut out = Vec::new();

    for (case, &(stride, pad, k)) in [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 2), (1, 2, 5)].iter().enumerate() {
        let c = case as u64 * 8;
        let x = random_tensor(&[2, 2, 7, 6], s(c), 1.0);
        let w = random_tensor(&[3, 2, k, k], s(c + 1), 1.0);
        let b = random_tensor(&[3], s(c + 2), 1.0);
        let y0 = conv2d(&x, &w, None, stride, pad)?;
        let r = random_tensor(&y0.shape, s(c + 3), 1.0);
        let rep = run_free(alloc::vec![x, w, b], epsilon, s(c + 4), |t, grad| {
            let y = conv2d(&t[0], &t[1], Some(&t[2].data), stride, pad)?;
            if grad {
                let (gx, gw, gb) = conv2d_backward(&t[0], &t[1], &r, stride, pad)?;
                t[0].grad = Some(gx.data);
                t[1].grad = Some(gw);
                t[2].grad = Some(gb);
            }
            Ok(dot(&y, &r))
        })?;
        out.push((alloc::format!("conv2d k{k} s{stride} p{pad}"), rep));
    }

    for (name, mode) in [("batchnorm train", Mode::Train), ("batchnorm eval", Mode::Eval)] {
        let x = random_tensor(&[3, 2, 4, 3], s(100), 2.0);
        let gamma = random_tensor(&[2], s(101), 1.5);
        let beta = random_tensor(&[2], s(102), 1.0);
        let r = random_tensor(&x.shape, s(103), 1.0);
        let mut stats = BatchNorm2d::<f64>::new(2);
        stats.running_mean.data = alloc::vec![0.3, -0.2];
        stats.running_var.data = alloc::vec![1.7, 0.6];
        let rep = run_free(alloc::vec![x, gamma, beta], epsilon, s(104), |t, grad| {
            let mut bn = stats.clone();
            bn.gamma.data = t[1].data.clone();
            bn.beta.data = t[2].data.clone();
            let y = bn.forward(&t[0], mode)?;
            if grad {
                t[0].grad = Some(bn.backward(&r)?.data);
                t[1].grad = bn.gamma.grad.clone();
                t[2].grad = bn.beta.grad.clone();
            }
            Ok(dot(&y, &r))
        })?;
        out.push((name.into(), rep));
    }

    let x = random_tensor(&[2, 3, 7, 6], s(200), 1.0);
    let r = random_tensor(&x.shape, s(201), 1.0);
    let rep = run_free(alloc::vec![x.clone()], epsilon, s(202), |t, grad| {
        let mut l = Relu::new();
        let y = l.forward(&t[0]);
        if grad {
            t[0].grad = Some(l.backward(&r)?.data);
        }
        Ok(dot(&y, &r))
    })?;
    out.push(("relu".into(), rep));

    let r = random_tensor(&[2, 3, 4, 3], s(203), 1.0);
    let rep = run_free(alloc::vec![x.clone()], epsilon, s(204), |t, grad| {
        let mut l = AvgPool2d::new(3, 2, 1);
        let y = l.forward(&t[0])?;
        if grad {
            t[0].grad = Some(l.backward(&r)?.data);
        }
        Ok(dot(&y, &r))
    })?;
    out.push(("avgpool".into(), rep));

    let r = random_tensor(&[2, 3], s(205), 1.0);
    let rep = run_free(alloc::vec![x], epsilon, s(206), |t, grad| {
        let mut l = GlobalAvgPool::new();
        let y = l.forward(&t[0])?;
        if grad {
            t[0].grad = Some(l.backward(&r)?.data);
        }
        Ok(dot(&y, &r))
    })?;
    out.push(("global avgpool".into(), rep));

    let x = random_tensor(&[3, 5], s(300), 1.0);
    let lin = Linear::<f64>::new(5, 4, &mut stream(s(301)));
    let (w, b) = (lin.weight.clone(), lin.bias.clone());
    let labels = [0usize, 3, 2];
    let rep = run_free(alloc::vec![x, w, b], epsilon, s(302), |t, grad| {
        let mut l = lin.clone();
        l.weight.data = t[1].data.clone();
        l.bias.data = t[2].data.clone();
        let y = l.forward(&t[0])?;
        let (loss, gy) = cross_entropy(&y, &labels)?;
        if grad {
            l.weight.zero_grad();
            l.bias.zero_grad();
            t[0].grad = Some(l.backward(&gy)?.data);
            t[1].grad = l.weight.grad.clone();
            t[2].grad = l.bias.grad.clone();
        }
        Ok(loss)
    })?;
    out.push(("linear + cross-entropy".into(), rep));

    let x = random_tensor(&[4, 16], s(400), 1.0);
    let r = random_tensor(&x.shape, s(401), 1.0);
    let rep = run_free(alloc::vec![x], epsilon, s(402), |t, grad| {
        // A fresh layer per call keeps the mask fixed.
        let mut d = Dropout::new(0.5, s(403))?;
        let y = d.forward(&t[0], true);
        if grad {
            t[0].grad = Some(d.backward(&r).data);
        }
        Ok(dot(&y, &r))
    })?;
    out.push(("dropout".into(), rep));
    Ok(out)
}
