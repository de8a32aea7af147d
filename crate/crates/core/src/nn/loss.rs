use super::layers::cross_entropy;
use super::model::{HeadGrads, ModelOutput};
use super::{Scalar, Tensor};
use crate::error::{param_err, Result};

/// Per-head cross-entropy terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub fused: T,
    pub spatial: Option<T>,
    pub noise: Option<T>,
}

/// `CE(fused) + lambda1 * CE(aux_spatial) + lambda2 * CE(aux_noise)` over
/// logits, averaged over the batch, with gradients for each head. Heads that
/// are absent (ablated streams) contribute nothing.
pub fn total_loss<T: Scalar>(
    out: &ModelOutput<T>,
    labels: &[usize],
    lambda1: f64,
    lambda2: f64,
) -> Result<(LossBreakdown<T>, HeadGrads<T>)> {
    let (fused, g_fused) = cross_entropy(&out.fused, labels)?;
    let mut total = fused;
    let mut aux = |logits: Option<&Tensor<T>>, lambda: f64| -> Result<(Option<T>, Option<Tensor<T>>)> {
        let Some(l) = logits else { return Ok((None, None)) };
        let (v, mut g) = cross_entropy(l, labels)?;
        let w = T::from_f64(lambda);
        total += w * v;
        g.data.iter_mut().for_each(|x| *x *= w);
        Ok((Some(v), Some(g)))
    };
    let (spatial, g_s) = aux(out.aux_spatial.as_ref(), lambda1)?;
    let (noise, g_n) = aux(out.aux_noise.as_ref(), lambda2)?;
    Ok((
        LossBreakdown { total, fused, spatial, noise },
        HeadGrads { fused: g_fused, aux_spatial: g_s, aux_noise: g_n },
    ))
}

/// Same composite loss over probability vectors for a single sample.
pub fn total_loss_from_probs(
    fused: &[f64],
    aux_spatial: Option<&[f64]>,
    aux_noise: Option<&[f64]>,
    label: usize,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    let ce = |p: &[f64]| -> Result<f64> {
        let q = *p.get(label).ok_or_else(|| param_err!("label {label} out of range for {} classes", p.len()))?;
        Ok(-libm::log(q))
    };
    let mut l = ce(fused)?;
    if let Some(p) = aux_spatial {
        l += lambda1 * ce(p)?;
    }
    if let Some(p) = aux_noise {
        l += lambda2 * ce(p)?;
    }
    Ok(l)
}
