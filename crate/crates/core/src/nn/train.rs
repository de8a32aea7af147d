//! SGD with momentum, the step learning-rate schedule, and the training loop.

use alloc::vec;
use alloc::vec::Vec;

use super::loss::{total_loss, LossBreakdown};
use super::model::TMFNet;
use super::{argmax_rows, Mode, Role, Scalar, Tensor};
use crate::error::{dim_err, param_err, Error, Result};
use crate::image::ImageBuffer;
use crate::rng::{derive_seed, stream};
use rand_core::RngCore;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate drops.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr0: 0.01, momentum: 0.9, weight_decay: 0.0005, lr_step: 30, lr_gamma: 0.2, epochs: 150, batch_size: 16, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr0 > 0.0 && self.lr_gamma > 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0;
        if !positive || self.lr_step == 0 || self.epochs == 0 {
            return Err(param_err!("learning rate, schedule step and epochs must be positive"));
        }
        if self.batch_size < 2 {
            return Err(param_err!("batch_size must be at least 2, got {}", self.batch_size));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch: `lr0 * lr_gamma^k` after `k`
    /// completed steps. Evaluated as `lr0 / (1/lr_gamma)^k`, which is exact
    /// in decimal for gammas like 0.2 whose reciprocal is an integer.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.lr_step) as f64;
        self.lr0 / libm::pow(1.0 / self.lr_gamma, k)
    }

    /// Fine-tuning schedule: initial rate divided by 10, epochs and step halved.
    pub fn fine_tuned(&self) -> Self {
        Self { lr0: self.lr0 / 10.0, epochs: (self.epochs / 2).max(1), lr_step: (self.lr_step / 2).max(1), ..self.clone() }
    }
}

/// Momentum SGD with coupled weight decay: `v = mu*v + g + wd*w; w -= lr*v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, model: &mut TMFNet<T>, lr: f64) {
        let (mu, wd, lr) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay), T::from_f64(lr));
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.visit(&mut |_, t, role| {
            if role != Role::Param {
                return;
            }
            if velocity.len() <= i {
                velocity.push(vec![T::ZERO; t.len()]);
            }
            let v = &mut velocity[i];
            let Tensor { data, grad, .. } = t;
            if let Some(g) = grad.as_ref() {
                for ((w, &g), v) in data.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = mu * *v + g + wd * *w;
                    *w -= lr * *v;
                }
            }
            i += 1;
        });
    }
}

/// Indexed access to labelled samples, assembled into [N,3,H,W] batches.
pub trait BatchSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> usize;

    fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)>;
}

/// Pixel values as floats in [0, 255], planar, with grayscale replicated to
/// three channels.
pub fn images_to_tensor<T: Scalar>(images: &[&ImageBuffer]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| dim_err!("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(dim_err!("batch mixes {}x{} and {h}x{w} images", img.height(), img.width()));
        }
        let c = img.channels();
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            data.extend(img.data().iter().skip(src).step_by(c).map(|&v| T::from_f64(v as f64)));
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    pub images: Vec<ImageBuffer>,
    pub labels: Vec<usize>,
}

impl InMemoryDataset {
    pub fn new(images: Vec<ImageBuffer>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(dim_err!("{} images but {} labels", images.len(), labels.len()));
        }
        Ok(Self { images, labels })
    }
}

impl BatchSource for InMemoryDataset {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let imgs: Vec<&ImageBuffer> = indices.iter().map(|&i| &self.images[i]).collect();
        Ok((images_to_tensor(&imgs)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

/// Model plus optimizer state, advanced one step or one epoch at a time.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: TMFNet<T>,
    pub config: TrainConfig,
    pub sgd: Sgd<T>,
    pub epoch: usize,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: TMFNet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sgd = Sgd::new(config.momentum, config.weight_decay);
        Ok(Self { model, config, sgd, epoch: 0, step: 0 })
    }

    /// One forward/backward/update on a batch.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize], lr: f64) -> Result<StepStats> {
        let out = self.model.forward(x, Mode::Train)?;
        let cfg = self.model.config();
        let (loss, grads): (LossBreakdown<T>, _) = total_loss(&out, labels, cfg.lambda1, cfg.lambda2)?;
        let l = loss.total.to_f64();
        if !l.is_finite() {
            return Err(Error::Diverged { epoch: self.epoch, step: self.step, loss: l });
        }
        self.model.zero_grad();
        self.model.backward(&grads)?;
        self.sgd.step(&mut self.model, lr);
        self.step += 1;
        let correct = argmax_rows(&out.fused).iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(StepStats { loss: l, correct, n: labels.len() })
    }

    /// Sample order for an epoch, fixed by the seed and epoch index.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream(derive_seed(self.config.seed, epoch as u64));
        for i in (1..n).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        order
    }

    /// Batches for an epoch; a trailing batch of one sample is dropped since
    /// batch normalization cannot train on it.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        self.epoch_order(n, epoch)
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn train_epoch<S: BatchSource>(&mut self, data: &S) -> Result<(f64, f64)> {
        if data.len() < 2 {
            return Err(param_err!("training set needs at least 2 samples, got {}", data.len()));
        }
        let lr = self.config.lr_at(self.epoch);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for ids in self.epoch_batches(data.len(), self.epoch) {
            let (x, y) = data.batch::<T>(&ids)?;
            let s = self.train_step(&x, &y, lr)?;
            loss_sum += s.loss * s.n as f64;
            correct += s.correct;
            seen += s.n;
        }
        self.epoch += 1;
        Ok((loss_sum / seen as f64, correct as f64 / seen as f64))
    }

    /// Runs the remaining epochs, reporting each one to `on_epoch`.
    pub fn fit<S: BatchSource, V: BatchSource>(
        &mut self,
        train: &S,
        val: Option<&V>,
        on_epoch: &mut dyn FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let epoch = self.epoch;
            let lr = self.config.lr_at(epoch);
            let (train_loss, train_acc) = self.train_epoch(train)?;
            let val_acc = match val {
                Some(v) if !v.is_empty() => {
                    let preds = predict(&mut self.model, v, self.config.batch_size)?;
                    let ok = preds.iter().enumerate().filter(|(i, &p)| v.label(*i) == p).count();
                    Some(ok as f64 / v.len() as f64)
                }
                _ => None,
            };
            let log = EpochLog { epoch, lr, train_loss, train_acc, val_acc };
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Fused-head predictions in inference mode.
pub fn predict<T: Scalar, S: BatchSource>(model: &mut TMFNet<T>, data: &S, batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(batch_size.max(1)) {
        let (x, _) = data.batch::<T>(chunk)?;
        let out = model.forward(&x, Mode::Eval)?;
        preds.extend(argmax_rows(&out.fused));
    }
    Ok(preds)
}

/// Prepares a trained model for a dataset with `num_classes` classes. A
/// different class count needs `reset_heads`, which reinitializes the fused
/// and auxiliary heads.
pub fn prepare_fine_tune<T: Scalar>(model: &mut TMFNet<T>, num_classes: usize, reset_heads: bool, seed: u64) -> Result<()> {
    let have = model.config().num_classes;
    if have == num_classes {
        return Ok(());
    }
    if !reset_heads {
        return Err(param_err!(
            "checkpoint has {have} classes but the dataset has {num_classes}; pass the head-reset flag to reinitialize the heads"
        ));
    }
    model.reset_heads(num_classes, seed)
}
